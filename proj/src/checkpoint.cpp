#include "ldp/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ldp/error.hpp"
#include "ldp/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace ldp {

using json = nlohmann::ordered_json;

namespace {

json payload_to_json(const OperatorNode& n) {
    json j;
    if (auto* p = std::get_if<ConvPayload>(&n.payload)) {
        j["type"] = "conv";
        j["w_shape"] = p->w.shape();
        j["stride"] = p->stride;
        j["pad"] = p->pad;
    } else if (auto* p = std::get_if<GroupNormPayload>(&n.payload)) {
        j["type"] = "group_norm";
        j["channels"] = p->gamma.dim(0);
        j["groups"] = p->groups;
        j["eps"] = p->eps;
    } else if (std::get_if<ActivationPayload>(&n.payload)) {
        j["type"] = "silu";
    } else if (auto* p = std::get_if<LinearPayload>(&n.payload)) {
        j["type"] = "linear";
        j["w_shape"] = p->w.shape();
    } else if (auto* p = std::get_if<AttentionPayload>(&n.payload)) {
        j["type"] = "attention";
        j["channels"] = p->wq.dim(0);
        j["kv_in"] = p->wk.dim(1);
        j["cross"] = p->cross;
    } else if (auto* p = std::get_if<DownsamplePayload>(&n.payload)) {
        j["type"] = "downsample";
        j["channels"] = p->w.dim(0);
    } else if (auto* p = std::get_if<UpsamplePayload>(&n.payload)) {
        j["type"] = "upsample";
        j["channels"] = p->w.dim(0);
    } else if (std::get_if<AddPayload>(&n.payload)) {
        j["type"] = "add";
    } else if (std::get_if<AddBiasPayload>(&n.payload)) {
        j["type"] = "add_bias";
    } else if (std::get_if<ConcatPayload>(&n.payload)) {
        j["type"] = "concat";
    } else if (auto* p = std::get_if<TimeEmbedPayload>(&n.payload)) {
        j["type"] = "time_embed";
        j["dim"] = p->dim;
    } else if (auto* p = std::get_if<CondEmbedPayload>(&n.payload)) {
        j["type"] = "cond_embed";
        j["table_shape"] = p->table.shape();
    } else if (std::get_if<TapPayload>(&n.payload)) {
        j["type"] = "tap";
    } else if (std::get_if<IdentityPayload>(&n.payload)) {
        j["type"] = "identity";
    } else if (std::get_if<ZeroPayload>(&n.payload)) {
        j["type"] = "zero";
    } else if (auto* p = std::get_if<AdapterPayload>(&n.payload)) {
        j["type"] = "adapter";
        j["pool"] = p->pool;
        j["up"] = p->up;
        if (p->w.defined()) j["map_shape"] = p->w.shape();
    } else {
        j["type"] = "composite";
    }
    return j;
}

Payload payload_from_json(const json& j) {
    const std::string type = j.at("type").get<std::string>();
    auto zeros = [](const Shape& s) { return Tensor::zeros(s, true); };
    if (type == "conv") {
        ConvPayload p;
        const Shape ws = j.at("w_shape").get<Shape>();
        p.w = zeros(ws);
        p.b = zeros({ws[0]});
        p.stride = j.at("stride").get<int>();
        p.pad = j.at("pad").get<int>();
        return p;
    }
    if (type == "group_norm") {
        GroupNormPayload p;
        const int c = j.at("channels").get<int>();
        p.gamma = zeros({c});
        p.beta = zeros({c});
        p.groups = j.at("groups").get<int>();
        p.eps = j.at("eps").get<float>();
        return p;
    }
    if (type == "silu") return ActivationPayload{};
    if (type == "linear") {
        LinearPayload p;
        const Shape ws = j.at("w_shape").get<Shape>();
        p.w = zeros(ws);
        p.b = zeros({ws[0]});
        return p;
    }
    if (type == "attention") {
        AttentionPayload p;
        const int c = j.at("channels").get<int>();
        const int kv = j.at("kv_in").get<int>();
        p.wq = zeros({c, c});
        p.bq = zeros({c});
        p.wk = zeros({c, kv});
        p.bk = zeros({c});
        p.wv = zeros({c, kv});
        p.bv = zeros({c});
        p.wo = zeros({c, c});
        p.bo = zeros({c});
        p.cross = j.at("cross").get<bool>();
        return p;
    }
    if (type == "downsample") {
        DownsamplePayload p;
        const int c = j.at("channels").get<int>();
        p.w = zeros({c, c, 3, 3});
        p.b = zeros({c});
        return p;
    }
    if (type == "upsample") {
        UpsamplePayload p;
        const int c = j.at("channels").get<int>();
        p.w = zeros({c, c, 3, 3});
        p.b = zeros({c});
        return p;
    }
    if (type == "add") return AddPayload{};
    if (type == "add_bias") return AddBiasPayload{};
    if (type == "concat") return ConcatPayload{};
    if (type == "time_embed") {
        TimeEmbedPayload p;
        p.dim = j.at("dim").get<int>();
        return p;
    }
    if (type == "cond_embed") {
        CondEmbedPayload p;
        p.table = zeros(j.at("table_shape").get<Shape>());
        return p;
    }
    if (type == "tap") return TapPayload{};
    if (type == "identity") return IdentityPayload{};
    if (type == "zero") return ZeroPayload{};
    if (type == "adapter") {
        AdapterPayload p;
        p.pool = j.at("pool").get<int>();
        p.up = j.at("up").get<int>();
        if (j.contains("map_shape")) {
            const Shape ws = j.at("map_shape").get<Shape>();
            p.w = zeros(ws);
            p.b = zeros({ws[0]});
        }
        return p;
    }
    if (type == "composite") return CompositePayload{};
    fail("checkpoint: unknown payload type '", type, "'");
}

template <typename T>
void append_pod(std::vector<unsigned char>& out, const T& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T read_pod(const std::vector<unsigned char>& in, size_t& off) {
    require(off + sizeof(T) <= in.size(), "checkpoint: truncated container");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

} // namespace

std::vector<unsigned char> serialize_graph(const OperatorGraph& g,
                                           const CheckpointMeta& meta) {
    json desc;
    desc["format_version"] = meta.version;
    desc["config_hash"] = meta.config_hash;
    desc["parent_hash"] = meta.parent_hash;
    desc["latent_channels"] = g.latent_channels;
    desc["latent_size"] = g.latent_size;
    desc["num_conditions"] = g.num_conditions;
    desc["output_id"] = g.output_id;
    desc["skip_links"] = g.skip_links;
    desc["tap_ids"] = g.tap_ids;
    json nodes = json::array();
    int64_t n_params = 0;
    for (const auto& node : g.nodes) {
        json jn;
        jn["id"] = node.id;
        jn["kind"] = kind_name(node.kind);
        jn["structural"] = node.structural;
        jn["composite"] = node.composite;
        jn["enabled"] = node.enabled;
        jn["inputs"] = node.inputs;
        if (node.composite) {
            jn["children"] = node.children;
            jn["entry"] = node.entry_input;
            jn["exit"] = node.exit_node;
        }
        jn["payload"] = payload_to_json(node);
        nodes.push_back(std::move(jn));
        for (const Tensor* t : node.param_tensors()) n_params += t->numel();
    }
    desc["nodes"] = std::move(nodes);

    const std::string text = desc.dump();
    std::vector<unsigned char> out;
    out.reserve(text.size() + n_params * 4 + 64);
    out.push_back('L');
    out.push_back('D');
    out.push_back('P');
    out.push_back('R');
    append_pod(out, meta.version);
    append_pod(out, static_cast<uint64_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    append_pod(out, static_cast<uint64_t>(n_params * 4));
    for (const auto& node : g.nodes)
        for (const Tensor* t : node.param_tensors()) {
            const auto* p = reinterpret_cast<const unsigned char*>(t->data());
            out.insert(out.end(), p, p + t->numel() * 4);
        }
    return out;
}

LoadedCheckpoint deserialize_graph(const std::vector<unsigned char>& bytes) {
    size_t off = 0;
    require(bytes.size() >= 4 && bytes[0] == 'L' && bytes[1] == 'D' && bytes[2] == 'P' &&
                bytes[3] == 'R',
            "checkpoint: bad magic (expected LDPR)");
    off = 4;
    LoadedCheckpoint lc;
    lc.meta.version = read_pod<uint32_t>(bytes, off);
    require(lc.meta.version == kCheckpointVersion, "checkpoint: unsupported version ",
            lc.meta.version);
    const auto json_len = read_pod<uint64_t>(bytes, off);
    require(off + json_len <= bytes.size(), "checkpoint: truncated description");
    json desc = json::parse(bytes.begin() + static_cast<long>(off),
                            bytes.begin() + static_cast<long>(off + json_len));
    off += json_len;

    lc.meta.config_hash = desc.at("config_hash").get<std::string>();
    lc.meta.parent_hash = desc.at("parent_hash").get<std::string>();
    OperatorGraph& g = lc.graph;
    g.latent_channels = desc.at("latent_channels").get<int>();
    g.latent_size = desc.at("latent_size").get<int>();
    g.num_conditions = desc.at("num_conditions").get<int>();
    g.output_id = desc.at("output_id").get<std::string>();
    g.skip_links =
        desc.at("skip_links").get<std::vector<std::pair<std::string, std::string>>>();
    g.tap_ids = desc.at("tap_ids").get<std::vector<std::string>>();
    for (const auto& jn : desc.at("nodes")) {
        OperatorNode node;
        node.id = jn.at("id").get<std::string>();
        node.kind = kind_from_name(jn.at("kind").get<std::string>());
        node.structural = jn.at("structural").get<bool>();
        node.composite = jn.at("composite").get<bool>();
        node.enabled = jn.at("enabled").get<bool>();
        node.inputs = jn.at("inputs").get<std::vector<std::string>>();
        if (node.composite) {
            node.children = jn.at("children").get<std::vector<std::string>>();
            node.entry_input = jn.at("entry").get<std::string>();
            node.exit_node = jn.at("exit").get<std::string>();
        }
        node.payload = payload_from_json(jn.at("payload"));
        g.nodes.push_back(std::move(node));
    }

    const auto payload_len = read_pod<uint64_t>(bytes, off);
    require(off + payload_len <= bytes.size(), "checkpoint: truncated parameter payload");
    int64_t consumed = 0;
    for (auto& node : g.nodes)
        for (Tensor* t : node.param_tensors()) {
            const int64_t n = t->numel();
            require(consumed + n * 4 <= static_cast<int64_t>(payload_len),
                    "checkpoint: payload shorter than declared parameters");
            std::memcpy(t->mutable_data(), bytes.data() + off + consumed, n * 4);
            consumed += n * 4;
        }
    require(consumed == static_cast<int64_t>(payload_len),
            "checkpoint: payload length ", payload_len, " != parameter bytes ", consumed);

    g.rebuild_index();
    infer_shapes(g);
    return lc;
}

void save_checkpoint(const std::string& path, const OperatorGraph& g,
                     const CheckpointMeta& meta) {
    require(g.active_modification.empty(),
            "refusing to save a graph with an active temporary modification (",
            g.active_modification, ")");
    const auto bytes = serialize_graph(g, meta);
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open '", path, "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    require(f.good(), "short write to '", path, "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    require(f.good(), "cannot open checkpoint '", path, "'");
    const auto size = static_cast<size_t>(f.tellg());
    f.seekg(0);
    std::vector<unsigned char> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    require(f.good(), "short read from '", path, "'");
    return deserialize_graph(bytes);
}

uint64_t graph_hash(const OperatorGraph& g) {
    CheckpointMeta meta; // hashes cover structure + parameters, not lineage
    const auto bytes = serialize_graph(g, meta);
    return fnv1a(bytes.data(), bytes.size());
}

std::string graph_hash_hex(const OperatorGraph& g) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(graph_hash(g)));
    return std::string(buf);
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    require(f.good(), "cannot open '", path, "' for hashing");
    const auto size = static_cast<size_t>(f.tellg());
    f.seekg(0);
    std::vector<unsigned char> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
    return std::string(buf);
}

} // namespace ldp
