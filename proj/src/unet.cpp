#include "ldp/unet.hpp"

#include <algorithm>
#include <cmath>

#include "ldp/error.hpp"

namespace ldp {

bool UNetSpec::has_attention(int level) const {
    return std::find(attention_levels.begin(), attention_levels.end(), level) !=
           attention_levels.end();
}

void UNetSpec::validate() const {
    require(!channel_mult.empty(), "unet spec: at least one resolution level required");
    require(latent_channels > 0 && latent_size > 0 && base_width > 0,
            "unet spec: latent/base dims must be positive");
    for (int m : channel_mult) require(m > 0, "unet spec: channel multipliers must be positive");
    for (int a : attention_levels)
        require(a >= 0 && a < levels(), "unet spec: attention level ", a, " outside [0,",
                levels(), ")");
    require(res_blocks_per_level >= 1, "unet spec: need at least one res block per level");
    require(cond_dim > 0 && cond_tokens > 0 && num_conditions >= 1,
            "unet spec: condition embedding dims must be positive");
    const int down_factor = 1 << (levels() - 1);
    require(latent_size % down_factor == 0 && latent_size / down_factor >= 1,
            "unet spec: latent size ", latent_size, " not divisible by ", down_factor);
    require(base_width % 2 == 0, "unet spec: base width must be even (time embedding)");
}

namespace {

int norm_groups(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0) return g;
    return 1;
}

struct Builder {
    OperatorGraph g;
    Rng rng;
    const UNetSpec& spec;

    Builder(const UNetSpec& s, uint64_t seed) : rng(seed), spec(s) {}

    Tensor he_weight(Shape shape, int fan_in) {
        return Tensor::randn(shape, rng, std::sqrt(2.f / static_cast<float>(fan_in)), true);
    }

    OperatorNode& add_node(OperatorNode n) {
        g.nodes.push_back(std::move(n));
        return g.nodes.back();
    }

    std::string conv(const std::string& id, const std::string& in, int cin, int cout, int k,
                     int stride, int pad, bool zero_init = false) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::Conv;
        n.inputs = {in};
        ConvPayload p;
        p.w = zero_init ? Tensor::zeros({cout, cin, k, k}, true)
                        : he_weight({cout, cin, k, k}, cin * k * k);
        p.b = Tensor::zeros({cout}, true);
        p.stride = stride;
        p.pad = pad;
        n.payload = std::move(p);
        add_node(std::move(n));
        return id;
    }

    std::string group_norm(const std::string& id, const std::string& in, int channels) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::GroupNorm;
        n.inputs = {in};
        GroupNormPayload p;
        p.gamma = Tensor::full({channels}, 1.f, true);
        p.beta = Tensor::zeros({channels}, true);
        p.groups = norm_groups(channels);
        n.payload = std::move(p);
        add_node(std::move(n));
        return id;
    }

    std::string activation(const std::string& id, const std::string& in) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::Activation;
        n.inputs = {in};
        n.payload = ActivationPayload{};
        add_node(std::move(n));
        return id;
    }

    std::string linear(const std::string& id, const std::string& in, int fin, int fout) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::Linear;
        n.inputs = {in};
        LinearPayload p;
        p.w = he_weight({fout, fin}, fin);
        p.b = Tensor::zeros({fout}, true);
        n.payload = std::move(p);
        add_node(std::move(n));
        return id;
    }

    std::string structural_add(const std::string& id, const std::string& a,
                               const std::string& b) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::Add;
        n.structural = true;
        n.inputs = {a, b};
        n.payload = AddPayload{};
        add_node(std::move(n));
        return id;
    }

    std::string tap(const std::string& id, const std::string& in) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::Tap;
        n.structural = true;
        n.inputs = {in};
        n.payload = TapPayload{};
        add_node(std::move(n));
        g.tap_ids.push_back(id);
        return id;
    }

    std::string attention(const std::string& id, const std::string& in, int channels,
                          bool cross) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::Attention;
        n.inputs = cross ? std::vector<std::string>{in, "cond.embed"}
                         : std::vector<std::string>{in};
        AttentionPayload p;
        const int kv_in = cross ? spec.cond_dim : channels;
        p.wq = he_weight({channels, channels}, channels);
        p.bq = Tensor::zeros({channels}, true);
        p.wk = he_weight({channels, kv_in}, kv_in);
        p.bk = Tensor::zeros({channels}, true);
        p.wv = he_weight({channels, kv_in}, kv_in);
        p.bv = Tensor::zeros({channels}, true);
        p.wo = he_weight({channels, channels}, channels);
        p.bo = Tensor::zeros({channels}, true);
        p.cross = cross;
        n.payload = std::move(p);
        add_node(std::move(n));
        return id;
    }

    OperatorNode& composite(const std::string& id, OpKind kind, const std::string& entry,
                            const std::string& exit, std::vector<std::string> children) {
        OperatorNode n;
        n.id = id;
        n.kind = kind;
        n.composite = true;
        n.inputs = {entry};
        n.payload = CompositePayload{};
        n.entry_input = entry;
        n.exit_node = exit;
        n.children = std::move(children);
        return add_node(std::move(n));
    }

    // norm -> silu -> conv -> +temb -> norm -> silu -> conv, with identity or
    // 1x1-conv skip, closed by a residual add.
    std::string res_block(const std::string& id, const std::string& in, int cin, int cout) {
        group_norm(id + ".norm1", in, cin);
        activation(id + ".act1", id + ".norm1");
        conv(id + ".conv1", id + ".act1", cin, cout, 3, 1, 1);
        linear(id + ".temb", "time.mlp.1", spec.time_dim(), cout);
        OperatorNode bias;
        bias.id = id + ".addt";
        bias.kind = OpKind::AddBias;
        bias.structural = true;
        bias.inputs = {id + ".conv1", id + ".temb"};
        bias.payload = AddBiasPayload{};
        add_node(std::move(bias));
        group_norm(id + ".norm2", id + ".addt", cout);
        activation(id + ".act2", id + ".norm2");
        conv(id + ".conv2", id + ".act2", cout, cout, 3, 1, 1);
        std::string skip = in;
        std::vector<std::string> children = {id + ".norm1", id + ".act1", id + ".conv1",
                                             id + ".temb",  id + ".addt", id + ".norm2",
                                             id + ".act2",  id + ".conv2"};
        if (cin != cout) {
            skip = conv(id + ".skip", in, cin, cout, 1, 1, 0);
            children.push_back(skip);
        }
        structural_add(id + ".add", skip, id + ".conv2");
        children.push_back(id + ".add");
        composite(id, OpKind::ResBlock, in, id + ".add", std::move(children));
        return id + ".add";
    }

    // Residual unit: norm -> attn -> add. Removing the unit skips the whole
    // residual update.
    std::string attn_unit(const std::string& id, const std::string& in, int channels,
                          bool cross) {
        group_norm(id + ".norm", in, channels);
        attention(id + ".attn", id + ".norm", channels, cross);
        structural_add(id + ".add", in, id + ".attn");
        composite(id, OpKind::BasicTransformerBlock, in, id + ".add",
                  {id + ".norm", id + ".attn", id + ".add"});
        return id + ".add";
    }

    std::string ff_unit(const std::string& id, const std::string& in, int channels) {
        group_norm(id + ".norm", in, channels);
        linear(id + ".lin1", id + ".norm", channels, channels * 4);
        activation(id + ".act", id + ".lin1");
        linear(id + ".lin2", id + ".act", channels * 4, channels);
        structural_add(id + ".add", in, id + ".lin2");
        composite(id, OpKind::BasicTransformerBlock, in, id + ".add",
                  {id + ".norm", id + ".lin1", id + ".act", id + ".lin2", id + ".add"});
        return id + ".add";
    }

    // Self-attention + cross-attention + feed-forward, each a residual unit.
    std::string transformer(const std::string& id, const std::string& in, int channels) {
        std::string cur = attn_unit(id + ".self", in, channels, false);
        cur = attn_unit(id + ".cross", cur, channels, true);
        cur = ff_unit(id + ".ff", cur, channels);
        composite(id, OpKind::BasicTransformerBlock, in, cur,
                  {id + ".self", id + ".cross", id + ".ff"});
        return cur;
    }

    std::string downsample(const std::string& id, const std::string& in, int channels) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::Downsample;
        n.inputs = {in};
        DownsamplePayload p;
        p.w = he_weight({channels, channels, 3, 3}, channels * 9);
        p.b = Tensor::zeros({channels}, true);
        n.payload = std::move(p);
        add_node(std::move(n));
        return id;
    }

    std::string upsample(const std::string& id, const std::string& in, int channels) {
        OperatorNode n;
        n.id = id;
        n.kind = OpKind::Upsample;
        n.inputs = {in};
        UpsamplePayload p;
        p.w = he_weight({channels, channels, 3, 3}, channels * 9);
        p.b = Tensor::zeros({channels}, true);
        n.payload = std::move(p);
        add_node(std::move(n));
        return id;
    }

    OperatorGraph build() {
        const int levels = spec.levels();
        g.latent_channels = spec.latent_channels;
        g.latent_size = spec.latent_size;
        g.num_conditions = spec.num_conditions;

        // timestep embedding trunk
        {
            OperatorNode n;
            n.id = "time.embed";
            n.kind = OpKind::TimeEmbed;
            n.structural = true;
            n.payload = TimeEmbedPayload{spec.base_width};
            add_node(std::move(n));
        }
        linear("time.mlp.0", "time.embed", spec.base_width, spec.time_dim());
        activation("time.mlp.act", "time.mlp.0");
        linear("time.mlp.1", "time.mlp.act", spec.time_dim(), spec.time_dim());

        // condition embedding table (stand-in for a text encoder)
        {
            OperatorNode n;
            n.id = "cond.embed";
            n.kind = OpKind::CondEmbed;
            n.structural = true;
            CondEmbedPayload p;
            p.table = Tensor::randn({spec.num_conditions, spec.cond_tokens, spec.cond_dim},
                                    rng, 0.5f, true);
            n.payload = std::move(p);
            add_node(std::move(n));
        }

        std::string cur = conv("in.conv", "latent", spec.latent_channels, spec.width(0), 3,
                               1, 1);
        std::vector<std::string> skip_taps;

        // encoder
        int ch = spec.width(0);
        for (int level = 0; level < levels; ++level) {
            const int w = spec.width(level);
            for (int r = 0; r < spec.res_blocks_per_level; ++r) {
                cur = res_block("down." + std::to_string(level) + ".res." + std::to_string(r),
                                cur, ch, w);
                ch = w;
            }
            if (spec.has_attention(level))
                cur = transformer("down." + std::to_string(level) + ".tf", cur, w);
            cur = tap("enc." + std::to_string(level) + ".out", cur);
            skip_taps.push_back(cur);
            if (level < levels - 1)
                cur = downsample("down." + std::to_string(level) + ".down", cur, w);
        }

        // bottleneck
        const int wb = spec.width(levels - 1);
        cur = res_block("mid.res.0", cur, wb, wb);
        if (spec.has_attention(levels - 1)) cur = transformer("mid.tf", cur, wb);
        cur = res_block("mid.res.1", cur, wb, wb);
        cur = tap("mid.out", cur);

        // decoder
        for (int level = levels - 1; level >= 0; --level) {
            const std::string lid = "up." + std::to_string(level);
            OperatorNode cat;
            cat.id = lid + ".cat";
            cat.kind = OpKind::Concat;
            cat.structural = true;
            cat.inputs = {cur, skip_taps[level]};
            cat.payload = ConcatPayload{};
            add_node(std::move(cat));
            g.skip_links.emplace_back(skip_taps[level], lid + ".cat");
            cur = lid + ".cat";
            ch += spec.width(level);
            const int w = spec.width(level);
            for (int r = 0; r < spec.res_blocks_per_level; ++r) {
                cur = res_block(lid + ".res." + std::to_string(r), cur, ch, w);
                ch = w;
            }
            if (spec.has_attention(level)) cur = transformer(lid + ".tf", cur, w);
            cur = tap("dec." + std::to_string(level) + ".out", cur);
            if (level > 0) cur = upsample(lid + ".up", cur, w);
        }

        // output head; final conv zero-initialized
        cur = group_norm("out.norm", cur, spec.width(0));
        cur = activation("out.act", cur);
        cur = conv("out.conv", cur, spec.width(0), spec.latent_channels, 3, 1, 1, true);
        g.output_id = cur;

        g.rebuild_index();
        infer_shapes(g);
        return std::move(g);
    }
};

} // namespace

OperatorGraph build_unet(const UNetSpec& spec, uint64_t seed) {
    spec.validate();
    Builder b(spec, seed);
    return b.build();
}

void reinit_params(OperatorGraph& g, uint64_t seed) {
    Rng rng(seed);
    for (auto& node : g.nodes) {
        if (node.composite) continue;
        if (auto* p = std::get_if<ConvPayload>(&node.payload)) {
            const int fan = p->w.dim(1) * p->w.dim(2) * p->w.dim(3);
            const bool zero = node.id == g.output_id;
            p->w = zero ? Tensor::zeros(p->w.shape(), true)
                        : Tensor::randn(p->w.shape(), rng,
                                        std::sqrt(2.f / static_cast<float>(fan)), true);
            p->b = Tensor::zeros(p->b.shape(), true);
        } else if (auto* p = std::get_if<GroupNormPayload>(&node.payload)) {
            p->gamma = Tensor::full(p->gamma.shape(), 1.f, true);
            p->beta = Tensor::zeros(p->beta.shape(), true);
        } else if (auto* p = std::get_if<LinearPayload>(&node.payload)) {
            p->w = Tensor::randn(p->w.shape(), rng,
                                 std::sqrt(2.f / static_cast<float>(p->w.dim(1))), true);
            p->b = Tensor::zeros(p->b.shape(), true);
        } else if (auto* p = std::get_if<AttentionPayload>(&node.payload)) {
            for (Tensor* w : {&p->wq, &p->wk, &p->wv, &p->wo})
                *w = Tensor::randn(w->shape(), rng,
                                   std::sqrt(2.f / static_cast<float>(w->dim(1))), true);
            for (Tensor* b : {&p->bq, &p->bk, &p->bv, &p->bo})
                *b = Tensor::zeros(b->shape(), true);
        } else if (auto* p = std::get_if<DownsamplePayload>(&node.payload)) {
            const int fan = p->w.dim(1) * 9;
            p->w = Tensor::randn(p->w.shape(), rng, std::sqrt(2.f / static_cast<float>(fan)),
                                 true);
            p->b = Tensor::zeros(p->b.shape(), true);
        } else if (auto* p = std::get_if<UpsamplePayload>(&node.payload)) {
            const int fan = p->w.dim(1) * 9;
            p->w = Tensor::randn(p->w.shape(), rng, std::sqrt(2.f / static_cast<float>(fan)),
                                 true);
            p->b = Tensor::zeros(p->b.shape(), true);
        } else if (auto* p = std::get_if<CondEmbedPayload>(&node.payload)) {
            p->table = Tensor::randn(p->table.shape(), rng, 0.5f, true);
        } else if (auto* p = std::get_if<AdapterPayload>(&node.payload)) {
            if (p->w.defined()) {
                // uniform channel mixing, same as a freshly planned adapter
                p->w = Tensor::full(p->w.shape(), 1.f / static_cast<float>(p->w.dim(1)),
                                    true);
                p->b = Tensor::zeros(p->b.shape(), true);
            }
        }
    }
}

} // namespace ldp
