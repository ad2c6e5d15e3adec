#include "ldp/graph.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>

#include "ldp/error.hpp"
#include "ldp/ops.hpp"

namespace ldp {

namespace {
std::atomic<uint64_t> g_forward_calls{0};
}

uint64_t forward_call_count() { return g_forward_calls.load(); }
void reset_forward_call_count() { g_forward_calls.store(0); }

const char* kind_name(OpKind k) {
    switch (k) {
        case OpKind::Conv: return "Conv";
        case OpKind::GroupNorm: return "GroupNorm";
        case OpKind::Activation: return "Activation";
        case OpKind::Attention: return "Attention";
        case OpKind::BasicTransformerBlock: return "BasicTransformerBlock";
        case OpKind::ResBlock: return "ResBlock";
        case OpKind::Downsample: return "Downsample";
        case OpKind::Upsample: return "Upsample";
        case OpKind::Linear: return "Linear";
        case OpKind::Add: return "Add";
        case OpKind::AddBias: return "AddBias";
        case OpKind::Concat: return "Concat";
        case OpKind::TimeEmbed: return "TimeEmbed";
        case OpKind::CondEmbed: return "CondEmbed";
        case OpKind::Tap: return "Tap";
        case OpKind::Adapter: return "Adapter";
    }
    return "?";
}

OpKind kind_from_name(const std::string& name) {
    static const std::pair<const char*, OpKind> table[] = {
        {"Conv", OpKind::Conv},
        {"GroupNorm", OpKind::GroupNorm},
        {"Activation", OpKind::Activation},
        {"Attention", OpKind::Attention},
        {"BasicTransformerBlock", OpKind::BasicTransformerBlock},
        {"ResBlock", OpKind::ResBlock},
        {"Downsample", OpKind::Downsample},
        {"Upsample", OpKind::Upsample},
        {"Linear", OpKind::Linear},
        {"Add", OpKind::Add},
        {"AddBias", OpKind::AddBias},
        {"Concat", OpKind::Concat},
        {"TimeEmbed", OpKind::TimeEmbed},
        {"CondEmbed", OpKind::CondEmbed},
        {"Tap", OpKind::Tap},
        {"Adapter", OpKind::Adapter},
    };
    for (const auto& [n, k] : table)
        if (name == n) return k;
    fail("unknown operator kind '", name, "'");
}

// ---------------------------------------------------------------------------
// OperatorNode

std::vector<Tensor*> OperatorNode::param_tensors() {
    std::vector<Tensor*> out;
    if (auto* p = std::get_if<ConvPayload>(&payload)) {
        out = {&p->w, &p->b};
    } else if (auto* p = std::get_if<GroupNormPayload>(&payload)) {
        out = {&p->gamma, &p->beta};
    } else if (auto* p = std::get_if<LinearPayload>(&payload)) {
        out = {&p->w, &p->b};
    } else if (auto* p = std::get_if<AttentionPayload>(&payload)) {
        out = {&p->wq, &p->bq, &p->wk, &p->bk, &p->wv, &p->bv, &p->wo, &p->bo};
    } else if (auto* p = std::get_if<DownsamplePayload>(&payload)) {
        out = {&p->w, &p->b};
    } else if (auto* p = std::get_if<UpsamplePayload>(&payload)) {
        out = {&p->w, &p->b};
    } else if (auto* p = std::get_if<CondEmbedPayload>(&payload)) {
        out = {&p->table};
    } else if (auto* p = std::get_if<AdapterPayload>(&payload)) {
        if (p->w.defined()) out = {&p->w, &p->b};
    }
    return out;
}

std::vector<const Tensor*> OperatorNode::param_tensors() const {
    auto* self = const_cast<OperatorNode*>(this);
    std::vector<const Tensor*> out;
    for (Tensor* t : self->param_tensors()) out.push_back(t);
    return out;
}

int64_t OperatorNode::param_count() const {
    int64_t n = 0;
    for (const Tensor* t : param_tensors()) n += t->numel();
    return n;
}

// ---------------------------------------------------------------------------
// OperatorGraph

OperatorGraph OperatorGraph::clone() const {
    OperatorGraph g;
    g.nodes = nodes;
    g.skip_links = skip_links;
    g.tap_ids = tap_ids;
    g.output_id = output_id;
    g.active_modification = active_modification;
    g.latent_channels = latent_channels;
    g.latent_size = latent_size;
    g.num_conditions = num_conditions;
    for (auto& n : g.nodes)
        for (Tensor* t : n.param_tensors())
            if (t->defined()) *t = t->clone();
    g.rebuild_index();
    return g;
}

void OperatorGraph::rebuild_index() {
    index_.clear();
    index_.reserve(nodes.size());
    for (size_t i = 0; i < nodes.size(); ++i) {
        require(!index_.count(nodes[i].id), "duplicate node id '", nodes[i].id, "'");
        index_[nodes[i].id] = static_cast<int>(i);
    }
}

bool OperatorGraph::has(const std::string& id) const { return index_.count(id) > 0; }

int OperatorGraph::index_of(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? -1 : it->second;
}

OperatorNode& OperatorGraph::at(const std::string& id) {
    const int i = index_of(id);
    require(i >= 0, "unknown operator '", id, "'");
    return nodes[i];
}

const OperatorNode& OperatorGraph::at(const std::string& id) const {
    const int i = index_of(id);
    require(i >= 0, "unknown operator '", id, "'");
    return nodes[i];
}

bool OperatorGraph::is_ancestor(const std::string& a, const std::string& d) {
    return d.size() > a.size() + 1 && d.compare(0, a.size(), a) == 0 && d[a.size()] == '.';
}

std::vector<std::string> OperatorGraph::operator_ids() const {
    std::vector<std::string> out;
    for (const auto& n : nodes)
        if (n.enabled && !n.structural) out.push_back(n.id);
    return out;
}

std::vector<std::string> OperatorGraph::descendants(const std::string& id) const {
    std::vector<std::string> out;
    for (const auto& n : nodes)
        if (n.enabled && is_ancestor(id, n.id)) out.push_back(n.id);
    return out;
}

int64_t OperatorGraph::param_count() const {
    int64_t n = 0;
    for (const auto& node : nodes)
        if (node.enabled && !node.composite) n += node.param_count();
    return n;
}

std::vector<Tensor*> OperatorGraph::trainable_params() {
    std::vector<Tensor*> out;
    for (auto& node : nodes) {
        if (!node.enabled || node.composite) continue;
        for (Tensor* t : node.param_tensors()) out.push_back(t);
    }
    return out;
}

std::vector<std::string> OperatorGraph::trainable_param_names() {
    std::vector<std::string> out;
    for (auto& node : nodes) {
        if (!node.enabled || node.composite) continue;
        const size_t k = node.param_tensors().size();
        for (size_t i = 0; i < k; ++i) out.push_back(node.id + "#" + std::to_string(i));
    }
    return out;
}

void OperatorGraph::set_requires_grad(bool b) {
    for (Tensor* t : trainable_params()) t->set_requires_grad(b);
}

// ---------------------------------------------------------------------------
// Execution

namespace {

Tensor sinusoidal_embedding(const std::vector<int>& timesteps, int dim) {
    require(dim >= 2 && dim % 2 == 0, "time embedding dim must be even and >= 2, got ", dim);
    const int n = static_cast<int>(timesteps.size());
    const int half = dim / 2;
    Tensor out = Tensor::zeros({n, dim});
    float* p = out.mutable_data();
    const double denom = half > 1 ? static_cast<double>(half - 1) : 1.0;
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(timesteps[i]);
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / denom);
            p[i * dim + j] = static_cast<float>(std::sin(t * freq));
            p[i * dim + half + j] = static_cast<float>(std::cos(t * freq));
        }
    }
    return out;
}

struct ExecCtx {
    const Tensor* latent = nullptr;
    const std::vector<int>* timesteps = nullptr;
    const std::vector<int>* conditions = nullptr;
    std::vector<double>* cost_accum = nullptr; // indexed by node position
    std::vector<std::pair<std::string, Tensor>>* taps = nullptr;
};

Tensor exec_node(const OperatorNode& node, const std::vector<Tensor>& ins,
                 const ExecCtx& ctx) {
    if (auto* p = std::get_if<ConvPayload>(&node.payload))
        return ops::conv2d(ins[0], p->w, p->b, p->stride, p->pad);
    if (auto* p = std::get_if<GroupNormPayload>(&node.payload))
        return ops::group_norm(ins[0], p->gamma, p->beta, p->groups, p->eps);
    if (std::get_if<ActivationPayload>(&node.payload)) return ops::silu(ins[0]);
    if (auto* p = std::get_if<LinearPayload>(&node.payload))
        return ops::linear(ins[0], p->w, p->b);
    if (auto* p = std::get_if<AttentionPayload>(&node.payload)) {
        const Tensor& x = ins[0];
        require(x.rank() == 4, node.id, ": attention input must be NCHW, got ",
                shape_str(x.shape()));
        const int h = x.dim(2), w = x.dim(3);
        Tensor tok = ops::to_tokens(x);
        const Tensor& kv = p->cross ? ins[1] : tok;
        Tensor q = ops::linear(tok, p->wq, p->bq);
        Tensor k = ops::linear(kv, p->wk, p->bk);
        Tensor v = ops::linear(kv, p->wv, p->bv);
        Tensor o = ops::scaled_dot_product_attention(q, k, v);
        return ops::from_tokens(ops::linear(o, p->wo, p->bo), h, w);
    }
    if (auto* p = std::get_if<DownsamplePayload>(&node.payload))
        return ops::conv2d(ins[0], p->w, p->b, 2, 1);
    if (auto* p = std::get_if<UpsamplePayload>(&node.payload))
        return ops::conv2d(ops::upsample_nearest(ins[0], 2), p->w, p->b, 1, 1);
    if (std::get_if<AddPayload>(&node.payload)) return ops::add(ins[0], ins[1]);
    if (std::get_if<AddBiasPayload>(&node.payload))
        return ops::add_channel_bias(ins[0], ins[1]);
    if (std::get_if<ConcatPayload>(&node.payload))
        return ops::concat_channels(ins[0], ins[1]);
    if (auto* p = std::get_if<TimeEmbedPayload>(&node.payload))
        return sinusoidal_embedding(*ctx.timesteps, p->dim);
    if (auto* p = std::get_if<CondEmbedPayload>(&node.payload))
        return ops::embed_rows(p->table, *ctx.conditions);
    if (std::get_if<TapPayload>(&node.payload)) return ins[0];
    if (std::get_if<IdentityPayload>(&node.payload)) return ins[0];
    if (std::get_if<ZeroPayload>(&node.payload)) return Tensor::zeros(ins[0].shape());
    if (auto* p = std::get_if<AdapterPayload>(&node.payload)) {
        Tensor x = ins[0];
        if (p->pool > 1) x = ops::avg_pool2d(x, p->pool);
        if (p->w.defined()) x = ops::linear(x, p->w, p->b);
        if (p->up > 1) x = ops::upsample_nearest(x, p->up);
        return x;
    }
    fail(node.id, ": composite nodes are not executable");
}

Tensor run_graph(OperatorGraph& g, ExecCtx& ctx) {
    g_forward_calls.fetch_add(1, std::memory_order_relaxed);
    const Tensor& latent = *ctx.latent;
    require(latent.rank() == 4, "forward: latent must be NCHW, got ",
            shape_str(latent.shape()));
    require(latent.dim(1) == g.latent_channels && latent.dim(2) == g.latent_size &&
                latent.dim(3) == g.latent_size,
            "forward: latent shape ", shape_str(latent.shape()), " does not match spec [",
            g.latent_channels, ",", g.latent_size, ",", g.latent_size, "]");
    const int n = latent.dim(0);
    require(static_cast<int>(ctx.timesteps->size()) == n, "forward: ", ctx.timesteps->size(),
            " timesteps for batch of ", n);
    require(static_cast<int>(ctx.conditions->size()) == n, "forward: ",
            ctx.conditions->size(), " condition ids for batch of ", n);
    for (int c : *ctx.conditions)
        require(c >= 0 && c < g.num_conditions, "forward: condition id ", c,
                " out of range [0,", g.num_conditions, ")");

    std::unordered_map<std::string, Tensor> values;
    values.reserve(g.nodes.size());
    std::vector<Tensor> ins;
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        OperatorNode& node = g.nodes[i];
        if (!node.enabled || node.composite) continue;
        ins.clear();
        for (const auto& src : node.inputs) {
            if (src == "latent") {
                ins.push_back(latent);
            } else {
                auto it = values.find(src);
                require(it != values.end(), node.id, ": input '", src,
                        "' not computed (graph order broken)");
                ins.push_back(it->second);
            }
        }
        if (ctx.cost_accum) {
            const auto t0 = std::chrono::steady_clock::now();
            Tensor out = exec_node(node, ins, ctx);
            const auto t1 = std::chrono::steady_clock::now();
            (*ctx.cost_accum)[i] += std::chrono::duration<double>(t1 - t0).count();
            values[node.id] = std::move(out);
        } else {
            values[node.id] = exec_node(node, ins, ctx);
        }
        if (ctx.taps && node.kind == OpKind::Tap)
            ctx.taps->emplace_back(node.id, values[node.id]);
    }
    auto it = values.find(g.output_id);
    require(it != values.end(), "forward: output node '", g.output_id, "' was not executed");
    return it->second;
}

} // namespace

Tensor unet_forward(OperatorGraph& g, const Tensor& latent, const std::vector<int>& timesteps,
                    const std::vector<int>& condition_ids) {
    ExecCtx ctx;
    ctx.latent = &latent;
    ctx.timesteps = &timesteps;
    ctx.conditions = &condition_ids;
    return run_graph(g, ctx);
}

Tensor unet_forward(OperatorGraph& g, const Tensor& latent, int timestep, int condition_id) {
    std::vector<int> ts(latent.dim(0), timestep);
    std::vector<int> cs(latent.dim(0), condition_id);
    return unet_forward(g, latent, ts, cs);
}

ForwardResult unet_forward_with_taps(OperatorGraph& g, const Tensor& latent,
                                     const std::vector<int>& timesteps,
                                     const std::vector<int>& condition_ids) {
    ForwardResult r;
    ExecCtx ctx;
    ctx.latent = &latent;
    ctx.timesteps = &timesteps;
    ctx.conditions = &condition_ids;
    ctx.taps = &r.taps;
    r.out = run_graph(g, ctx);
    return r;
}

// ---------------------------------------------------------------------------
// Shape inference

namespace {

Shape conv_out_shape(const std::string& id, const Shape& in, const Tensor& w, int stride,
                     int pad) {
    require(in.size() == 3, id, ": conv input must be [C,H,W], got ", shape_str(in));
    require(w.dim(1) == in[0], id, ": input channels ", in[0], " != weight Cin ", w.dim(1));
    const int kh = w.dim(2), kw = w.dim(3);
    require(in[1] + 2 * pad >= kh && in[2] + 2 * pad >= kw, id, ": kernel ", kh, "x", kw,
            " too large for input ", shape_str(in));
    return {w.dim(0), (in[1] + 2 * pad - kh) / stride + 1, (in[2] + 2 * pad - kw) / stride + 1};
}

Shape infer_node_shape(const OperatorNode& node, const std::vector<Shape>& ins) {
    const std::string& id = node.id;
    if (auto* p = std::get_if<ConvPayload>(&node.payload))
        return conv_out_shape(id, ins[0], p->w, p->stride, p->pad);
    if (auto* p = std::get_if<GroupNormPayload>(&node.payload)) {
        require(ins[0].size() == 3 && ins[0][0] == p->gamma.dim(0), id,
                ": group_norm channels ", shape_str(ins[0]), " vs affine ",
                p->gamma.dim(0));
        return ins[0];
    }
    if (std::get_if<ActivationPayload>(&node.payload)) return ins[0];
    if (auto* p = std::get_if<LinearPayload>(&node.payload)) {
        const int in_f = p->w.dim(1), out_f = p->w.dim(0);
        Shape s = ins[0];
        if (s.size() == 3) {
            require(s[0] == in_f, id, ": pointwise linear channels ", s[0], " != ", in_f);
            s[0] = out_f;
        } else {
            require(!s.empty() && s.back() == in_f, id, ": linear features ",
                    shape_str(s), " != in ", in_f);
            s.back() = out_f;
        }
        return s;
    }
    if (auto* p = std::get_if<AttentionPayload>(&node.payload)) {
        require(ins[0].size() == 3, id, ": attention input must be [C,H,W], got ",
                shape_str(ins[0]));
        require(p->wq.dim(1) == ins[0][0], id, ": attention channels ", ins[0][0],
                " != wq in ", p->wq.dim(1));
        if (p->cross) {
            require(ins.size() >= 2 && ins[1].size() == 2, id,
                    ": cross attention needs condition tokens [S,D]");
            require(p->wk.dim(1) == ins[1][1], id, ": cond dim ", ins[1][1], " != wk in ",
                    p->wk.dim(1));
        }
        return ins[0];
    }
    if (auto* p = std::get_if<DownsamplePayload>(&node.payload))
        return conv_out_shape(id, ins[0], p->w, 2, 1);
    if (auto* p = std::get_if<UpsamplePayload>(&node.payload)) {
        Shape s = ins[0];
        require(s.size() == 3, id, ": upsample input must be [C,H,W]");
        s[1] *= 2;
        s[2] *= 2;
        return conv_out_shape(id, s, p->w, 1, 1);
    }
    if (std::get_if<AddPayload>(&node.payload)) {
        require(ins[0] == ins[1], id, ": add shape mismatch ", shape_str(ins[0]), " vs ",
                shape_str(ins[1]));
        return ins[0];
    }
    if (std::get_if<AddBiasPayload>(&node.payload)) {
        require(ins[0].size() == 3 && ins[1].size() == 1 && ins[1][0] == ins[0][0], id,
                ": bias ", shape_str(ins[1]), " incompatible with ", shape_str(ins[0]));
        return ins[0];
    }
    if (std::get_if<ConcatPayload>(&node.payload)) {
        require(ins[0].size() == 3 && ins[1].size() == 3 && ins[0][1] == ins[1][1] &&
                    ins[0][2] == ins[1][2],
                id, ": concat spatial mismatch ", shape_str(ins[0]), " vs ",
                shape_str(ins[1]));
        return {ins[0][0] + ins[1][0], ins[0][1], ins[0][2]};
    }
    if (auto* p = std::get_if<TimeEmbedPayload>(&node.payload)) return {p->dim};
    if (auto* p = std::get_if<CondEmbedPayload>(&node.payload))
        return {p->table.dim(1), p->table.dim(2)};
    if (std::get_if<TapPayload>(&node.payload)) return ins[0];
    if (std::get_if<IdentityPayload>(&node.payload)) return ins[0];
    if (std::get_if<ZeroPayload>(&node.payload)) return ins[0];
    if (auto* p = std::get_if<AdapterPayload>(&node.payload)) {
        Shape s = ins[0];
        if (p->pool > 1) {
            require(s.size() == 3 && s[1] % p->pool == 0 && s[2] % p->pool == 0, id,
                    ": adapter pool ", p->pool, " does not divide ", shape_str(s));
            s[1] /= p->pool;
            s[2] /= p->pool;
        }
        if (p->w.defined()) {
            if (s.size() == 3) {
                require(s[0] == p->w.dim(1), id, ": adapter channels ", s[0], " != ",
                        p->w.dim(1));
                s[0] = p->w.dim(0);
            } else {
                require(!s.empty() && s.back() == p->w.dim(1), id, ": adapter features ",
                        shape_str(s), " != ", p->w.dim(1));
                s.back() = p->w.dim(0);
            }
        }
        if (p->up > 1) {
            require(s.size() == 3, id, ": adapter upsample needs [C,H,W]");
            s[1] *= p->up;
            s[2] *= p->up;
        }
        return s;
    }
    fail(id, ": composite nodes have no direct shape rule");
}

} // namespace

void infer_shapes(OperatorGraph& g) {
    std::unordered_map<std::string, Shape> shapes;
    shapes["latent"] = {g.latent_channels, g.latent_size, g.latent_size};
    std::vector<Shape> ins;
    for (auto& node : g.nodes) {
        if (!node.enabled || node.composite) continue;
        ins.clear();
        for (const auto& src : node.inputs) {
            auto it = shapes.find(src);
            require(it != shapes.end(), node.id, ": input '", src,
                    "' has no inferred shape (graph order broken)");
            ins.push_back(it->second);
        }
        node.in_shape = ins.empty() ? Shape{} : ins[0];
        node.out_shape = infer_node_shape(node, ins);
        shapes[node.id] = node.out_shape;
    }
    for (auto& node : g.nodes) {
        if (!node.enabled || !node.composite) continue;
        auto in_it = shapes.find(node.entry_input);
        auto out_it = shapes.find(node.exit_node);
        require(in_it != shapes.end() && out_it != shapes.end(), node.id,
                ": composite entry '", node.entry_input, "' or exit '", node.exit_node,
                "' not resolved");
        node.in_shape = in_it->second;
        node.out_shape = out_it->second;
    }
    require(shapes.count(g.output_id), "output node '", g.output_id, "' not executed");
    const Shape expect = {g.latent_channels, g.latent_size, g.latent_size};
    require(shapes[g.output_id] == expect, "output shape ", shape_str(shapes[g.output_id]),
            " != latent shape ", shape_str(expect));
}

// ---------------------------------------------------------------------------
// Cost calibration and candidate enumeration

void calibrate_costs(OperatorGraph& g, int reps) {
    require(reps >= 1, "calibrate_costs: reps must be >= 1");
    // min across repetitions: the usual noise-robust microbenchmark estimate
    std::vector<double> best(g.nodes.size(), 0.0);
    Rng rng(12345);
    Tensor latent = Tensor::randn({1, g.latent_channels, g.latent_size, g.latent_size}, rng);
    std::vector<int> ts = {500};
    std::vector<int> cs = {0};
    for (int r = 0; r < reps; ++r) {
        std::vector<double> accum(g.nodes.size(), 0.0);
        ExecCtx ctx;
        ctx.latent = &latent;
        ctx.timesteps = &ts;
        ctx.conditions = &cs;
        ctx.cost_accum = &accum;
        run_graph(g, ctx);
        for (size_t i = 0; i < accum.size(); ++i)
            best[i] = (r == 0) ? accum[i] : std::min(best[i], accum[i]);
    }
    for (size_t i = 0; i < g.nodes.size(); ++i)
        if (!g.nodes[i].composite) g.nodes[i].est_cost = best[i];
    // composite cost = sum of enabled executable descendants
    for (auto& node : g.nodes) {
        if (!node.composite) continue;
        double s = 0.0;
        for (const auto& d : g.descendants(node.id)) {
            const OperatorNode& dn = g.at(d);
            if (!dn.composite) s += dn.est_cost;
        }
        node.est_cost = s;
    }
}

double total_cost(const OperatorGraph& g) {
    double s = 0.0;
    for (const auto& n : g.nodes)
        if (n.enabled && !n.composite) s += n.est_cost;
    return s;
}

int64_t node_macs(const OperatorGraph& g, const OperatorNode& n) {
    auto spatial = [](const Shape& s) {
        return s.size() == 3 ? static_cast<int64_t>(s[1]) * s[2] : 1;
    };
    if (n.composite) {
        int64_t total = 0;
        for (const auto& d : g.descendants(n.id)) {
            const OperatorNode& dn = g.at(d);
            if (!dn.composite) total += node_macs(g, dn);
        }
        return total;
    }
    if (auto* p = std::get_if<ConvPayload>(&n.payload))
        return static_cast<int64_t>(p->w.numel()) * spatial(n.out_shape);
    if (auto* p = std::get_if<DownsamplePayload>(&n.payload))
        return static_cast<int64_t>(p->w.numel()) * spatial(n.out_shape);
    if (auto* p = std::get_if<UpsamplePayload>(&n.payload))
        return static_cast<int64_t>(p->w.numel()) * spatial(n.out_shape);
    if (auto* p = std::get_if<LinearPayload>(&n.payload)) {
        int64_t positions = 1;
        if (n.in_shape.size() == 3) positions = spatial(n.in_shape);
        else if (n.in_shape.size() == 2) positions = n.in_shape[0];
        return static_cast<int64_t>(p->w.numel()) * positions;
    }
    if (auto* p = std::get_if<AttentionPayload>(&n.payload)) {
        const int64_t t = spatial(n.in_shape);
        const int c = p->wq.dim(0);
        int64_t s = t;
        if (p->cross) {
            s = 1;
            for (const auto& other : g.nodes)
                if (auto* ce = std::get_if<CondEmbedPayload>(&other.payload)) {
                    s = ce->table.dim(1);
                    break;
                }
        }
        int64_t macs = static_cast<int64_t>(p->wq.numel()) * t; // q proj
        macs += (static_cast<int64_t>(p->wk.numel()) + p->wv.numel()) * s;
        macs += 2 * t * s * c;                                  // scores + weighted sum
        macs += static_cast<int64_t>(p->wo.numel()) * t;        // out proj
        return macs;
    }
    if (auto* p = std::get_if<AdapterPayload>(&n.payload)) {
        int64_t macs = 0;
        if (p->w.defined()) {
            const int64_t pos = std::min(spatial(n.in_shape), spatial(n.out_shape));
            macs += static_cast<int64_t>(p->w.numel()) * pos;
        }
        return macs;
    }
    if (std::get_if<IdentityPayload>(&n.payload) || std::get_if<ZeroPayload>(&n.payload) ||
        std::get_if<TapPayload>(&n.payload))
        return 0;
    // norms, activations, adds: roughly one pass over the output
    return shape_numel(n.out_shape.empty() ? Shape{1} : n.out_shape);
}

int64_t adapter_macs(const OperatorNode& n) {
    const Shape& in = n.in_shape;
    const Shape& out = n.out_shape;
    if (in == out) return 0;
    auto spatial = [](const Shape& s) {
        return s.size() == 3 ? static_cast<int64_t>(s[1]) * s[2] : 1;
    };
    int64_t macs = 0;
    const int cin = in.empty() ? 1 : in[0];
    const int cout = out.empty() ? 1 : out[0];
    if (in.size() == 1 && out.size() == 1) {
        if (in[0] != out[0]) macs += static_cast<int64_t>(in[0]) * out[0];
        return macs;
    }
    if (cin != cout)
        macs += static_cast<int64_t>(cin) * cout * std::min(spatial(in), spatial(out));
    return macs; // pooling / nearest upsample contribute no multiplies
}

bool is_candidate(const OperatorGraph& g, const OperatorNode& n) {
    if (!n.enabled || n.structural) return false;
    switch (n.kind) {
        case OpKind::Conv:
        case OpKind::GroupNorm:
        case OpKind::Activation:
        case OpKind::Attention:
        case OpKind::BasicTransformerBlock:
        case OpKind::ResBlock:
        case OpKind::Downsample:
        case OpKind::Upsample:
        case OpKind::Linear:
            break;
        default:
            return false;
    }
    if (n.in_shape == n.out_shape) return true; // removable outright
    // Replacement must actually be cheaper than what it displaces, in both
    // parameters and work; otherwise pruning it buys nothing.
    const int64_t a_macs = adapter_macs(n);
    const int64_t n_macs = node_macs(g, n);
    int64_t a_params = 0;
    if (!n.in_shape.empty() && !n.out_shape.empty() && n.in_shape[0] != n.out_shape[0])
        a_params = static_cast<int64_t>(n.in_shape[0]) * n.out_shape[0] + n.out_shape[0];
    return a_macs < n_macs && a_params < n.param_count();
}

std::vector<std::string> enumerate_candidates(const OperatorGraph& g,
                                              double min_cost_fraction) {
    require(min_cost_fraction >= 0.0 && min_cost_fraction < 1.0,
            "min_cost_fraction must be in [0,1), got ", min_cost_fraction);
    const double total = total_cost(g);
    std::vector<std::string> out;
    for (const auto& n : g.nodes) {
        if (!is_candidate(g, n)) continue;
        if (min_cost_fraction > 0.0) {
            const double frac = total > 0.0 ? n.est_cost / total : 0.0;
            if (frac < min_cost_fraction) continue;
        }
        out.push_back(n.id);
    }
    return out;
}

} // namespace ldp
