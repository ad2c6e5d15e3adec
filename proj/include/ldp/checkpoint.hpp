#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ldp/graph.hpp"

namespace ldp {

// Checkpoint container: magic "LDPR", format version, a JSON graph
// description, then the raw little-endian float32 parameter payload in node
// topological order. Round trips are bit-exact.
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    uint32_t version = kCheckpointVersion;
    std::string config_hash;
    std::string parent_hash; // lineage: teacher -> pruned -> fine-tuned
};

std::vector<unsigned char> serialize_graph(const OperatorGraph& g, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    OperatorGraph graph;
    CheckpointMeta meta;
};

LoadedCheckpoint deserialize_graph(const std::vector<unsigned char>& bytes);

void save_checkpoint(const std::string& path, const OperatorGraph& g,
                     const CheckpointMeta& meta);
LoadedCheckpoint load_checkpoint(const std::string& path);

// Content hash of the full serialized graph (structure + parameters).
uint64_t graph_hash(const OperatorGraph& g);
std::string graph_hash_hex(const OperatorGraph& g);

std::string file_hash_hex(const std::string& path);

} // namespace ldp
