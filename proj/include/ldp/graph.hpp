#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "ldp/tensor.hpp"

namespace ldp {

// Operator kinds. The first group are prunable operator categories; the
// second group is structural plumbing (wiring, embeddings, taps) that is
// never a pruning candidate.
enum class OpKind {
    Conv,
    GroupNorm,
    Activation,
    Attention,
    BasicTransformerBlock,
    ResBlock,
    Downsample,
    Upsample,
    Linear,
    // structural
    Add,
    AddBias,
    Concat,
    TimeEmbed,
    CondEmbed,
    Tap,
    Adapter,
};

const char* kind_name(OpKind k);
OpKind kind_from_name(const std::string& name);

// ---------------------------------------------------------------------------
// Node payloads

struct ConvPayload {
    Tensor w, b; // [Cout,Cin,Kh,Kw], [Cout]
    int stride = 1;
    int pad = 1;
};
struct GroupNormPayload {
    Tensor gamma, beta;
    int groups = 8;
    float eps = 1e-5f;
};
struct ActivationPayload {}; // silu
struct LinearPayload {
    Tensor w, b; // [out,in], [out]
};
struct AttentionPayload {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    bool cross = false; // kv from the condition stream
};
struct DownsamplePayload {
    Tensor w, b; // 3x3 stride-2 conv, C -> C
};
struct UpsamplePayload {
    Tensor w, b; // nearest x2 then 3x3 conv, C -> C
};
struct AddPayload {};
struct AddBiasPayload {}; // x [N,C,H,W] + per-channel vector [N,C]
struct ConcatPayload {};
struct TimeEmbedPayload {
    int dim = 32; // sinusoidal feature width
};
struct CondEmbedPayload {
    Tensor table; // [num_conditions, tokens, dim]
};
struct TapPayload {}; // named pass-through; feature-KD tap point
// Stand-in for a removed operator: Identity passes the primary input,
// Zero emits zeros (residual branch contributes nothing).
struct IdentityPayload {};
struct ZeroPayload {};
// Cheap shape adapter: optional avg-pool, optional channel map (1x1-conv
// semantics), optional nearest upsample, applied in that order.
struct AdapterPayload {
    Tensor w, b; // channel map [Cout,Cin]; undefined when channels match
    int pool = 1;
    int up = 1;
};
struct CompositePayload {}; // ResBlock / BasicTransformerBlock / sub-units

using Payload =
    std::variant<ConvPayload, GroupNormPayload, ActivationPayload, LinearPayload,
                 AttentionPayload, DownsamplePayload, UpsamplePayload, AddPayload,
                 AddBiasPayload, ConcatPayload, TimeEmbedPayload, CondEmbedPayload,
                 TapPayload, IdentityPayload, ZeroPayload, AdapterPayload,
                 CompositePayload>;

// ---------------------------------------------------------------------------

// One named operator. Ids are hierarchical paths ("down.1.res.0.conv2");
// a child's id is prefixed by its parent's id.
struct OperatorNode {
    std::string id;
    OpKind kind = OpKind::Conv;
    bool structural = false;
    bool composite = false;
    bool enabled = true;
    std::vector<std::string> inputs; // producer ids; "latent" is the graph input
    Payload payload;
    Shape in_shape, out_shape; // per-sample signature (batch dim excluded)
    double est_cost = 0.0;     // measured seconds per calibration forward

    // composite metadata
    std::vector<std::string> children; // direct children
    std::string entry_input;           // producer feeding the subgraph
    std::string exit_node;             // child producing the composite output

    int64_t param_count() const;
    std::vector<Tensor*> param_tensors(); // fixed declaration order
    std::vector<const Tensor*> param_tensors() const;
};

struct OperatorGraph {
    std::vector<OperatorNode> nodes; // topological order; leaves are executable
    std::vector<std::pair<std::string, std::string>> skip_links; // (source tap, concat)
    std::vector<std::string> tap_ids; // KD feature tap points, in graph order
    std::string output_id;
    std::string active_modification; // at most one temporary edit at a time

    // toy-architecture metadata needed to run the graph
    int latent_channels = 4;
    int latent_size = 16;
    int num_conditions = 1;

    OperatorGraph() = default;
    OperatorGraph(const OperatorGraph&) = delete;
    OperatorGraph& operator=(const OperatorGraph&) = delete;
    OperatorGraph(OperatorGraph&&) = default;
    OperatorGraph& operator=(OperatorGraph&&) = default;

    OperatorGraph clone() const; // deep copy (parameters duplicated)

    bool has(const std::string& id) const;
    OperatorNode& at(const std::string& id);
    const OperatorNode& at(const std::string& id) const;
    int index_of(const std::string& id) const; // -1 when absent
    void rebuild_index();

    // a is a strict hierarchical ancestor of d
    static bool is_ancestor(const std::string& a, const std::string& d);

    // Enabled operator-kind nodes (composites and leaves), topological order.
    std::vector<std::string> operator_ids() const;
    // All enabled descendants of a composite (leaves and sub-composites).
    std::vector<std::string> descendants(const std::string& id) const;

    int64_t param_count() const; // enabled leaves only; no double counting
    std::vector<Tensor*> trainable_params();
    std::vector<std::string> trainable_param_names(); // parallel to the above
    void set_requires_grad(bool b);

private:
    std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Execution

struct ForwardResult {
    Tensor out;
    std::vector<std::pair<std::string, Tensor>> taps;
};

// latent [N,C,H,W]; one timestep and condition id per batch row. Output has
// the latent's shape (predicted noise).
Tensor unet_forward(OperatorGraph& g, const Tensor& latent, const std::vector<int>& timesteps,
                    const std::vector<int>& condition_ids);
Tensor unet_forward(OperatorGraph& g, const Tensor& latent, int timestep, int condition_id);
ForwardResult unet_forward_with_taps(OperatorGraph& g, const Tensor& latent,
                                     const std::vector<int>& timesteps,
                                     const std::vector<int>& condition_ids);

// Walks the graph symbolically, filling and validating in/out shapes.
void infer_shapes(OperatorGraph& g);

// Measures per-leaf wall time over `reps` forward passes and assigns
// est_cost (composites get the sum of their enabled leaf descendants).
void calibrate_costs(OperatorGraph& g, int reps = 2);
double total_cost(const OperatorGraph& g);

// Candidates: operator-kind nodes whose est_cost fraction passes the
// threshold and whose removal/replacement can actually save work.
std::vector<std::string> enumerate_candidates(const OperatorGraph& g,
                                              double min_cost_fraction);
bool is_candidate(const OperatorGraph& g, const OperatorNode& n);

// Estimated multiply-accumulates for one sample through a node (leaf) or its
// enabled leaves (composite). Used for candidate eligibility, not latency.
int64_t node_macs(const OperatorGraph& g, const OperatorNode& n);
int64_t adapter_macs(const OperatorNode& n);

// Forward-call instrumentation (complexity accounting).
uint64_t forward_call_count();
void reset_forward_call_count();

} // namespace ldp
