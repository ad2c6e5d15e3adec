#pragma once

#include <string>
#include <vector>

#include "ldp/graph.hpp"

namespace ldp {

enum class ModAction { Remove, Replace };

// The cheap replacement for an operator whose shapes block outright removal:
// an optional 1x1-conv channel map and an optional pooling / nearest-upsample
// spatial map. Channel-map weights start as uniform channel mixing (1/Cin),
// bias zero.
struct AdapterSpec {
    int in_channels = 0;
    int out_channels = 0;
    int pool = 1;
    int up = 1;

    bool has_channel_map() const { return in_channels != out_channels; }
    int64_t param_count() const {
        return has_channel_map()
                   ? static_cast<int64_t>(in_channels) * out_channels + out_channels
                   : 0;
    }
    std::string describe() const;
};

// A reversible single-operator edit. apply() records everything needed for a
// bit-exact restore(); at most one plan is active per graph.
struct ModificationPlan {
    std::string target;
    ModAction action = ModAction::Remove;
    AdapterSpec adapter;

    // restoration record, filled by apply()
    bool applied = false;
    bool payload_swapped = false;
    Payload saved_payload;
    std::vector<std::string> disabled_nodes;
    enum class RefKind { InputSlot, CompositeEntry, CompositeExit, GraphOutput };
    struct Rewire {
        RefKind kind;
        std::string node; // owner of the reference ("" for GraphOutput)
        int slot = 0;     // for InputSlot
        std::string old_src;
    };
    std::vector<Rewire> rewires;
    std::string inserted_node;
    int inserted_index = -1;

    std::string describe() const;
};

// Remove iff in_shape == out_shape, else the minimal shape adapter.
// Errors: unknown/ineligible id, non-integer spatial ratio.
ModificationPlan plan_modification(const OperatorGraph& g, const std::string& op_id);

void apply(OperatorGraph& g, ModificationPlan& plan);
void restore(OperatorGraph& g, ModificationPlan& plan);

// Makes the active plan permanent (no restore possible afterwards).
void commit(OperatorGraph& g, ModificationPlan& plan);

// Permanently erases disabled nodes, splices identity stand-ins and zeroed
// residual branches, and drops dead subgraphs. Run after committing plans.
void compact(OperatorGraph& g);

} // namespace ldp
