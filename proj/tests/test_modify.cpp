#include <doctest.h>

#include <cmath>

#include "ldp/checkpoint.hpp"
#include "ldp/diffusion.hpp"
#include "ldp/error.hpp"
#include "ldp/modify.hpp"
#include "ldp/ops.hpp"
#include "ldp/unet.hpp"

using namespace ldp;

namespace {

UNetSpec tiny_spec() {
    UNetSpec s;
    s.base_width = 8;
    s.channel_mult = {1, 2};
    s.attention_levels = {1};
    s.latent_size = 8;
    s.cond_dim = 16;
    s.cond_tokens = 2;
    s.num_conditions = 4;
    s.res_blocks_per_level = 1;
    return s;
}

Tensor fixed_latent(const UNetSpec& s, int n = 1) {
    Rng rng(404);
    return Tensor::randn({n, s.latent_channels, s.latent_size, s.latent_size}, rng);
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

} // namespace

TEST_CASE("plan: remove iff shapes match, minimal adapter otherwise") {
    OperatorGraph g = build_unet(tiny_spec(), 9);

    // equal in/out shape: removed outright
    auto p1 = plan_modification(g, "mid.res.0");
    CHECK(p1.action == ModAction::Remove);

    // channel change, same spatial: 1x1 channel map
    auto p2 = plan_modification(g, "down.1.res.0.conv1"); // 8 -> 16 channels
    REQUIRE(p2.action == ModAction::Replace);
    CHECK(p2.adapter.has_channel_map());
    CHECK(p2.adapter.in_channels == 8);
    CHECK(p2.adapter.out_channels == 16);
    CHECK(p2.adapter.pool == 1);
    CHECK(p2.adapter.up == 1);

    // spatial shrink, same channels: average pooling
    auto p3 = plan_modification(g, "down.0.down");
    REQUIRE(p3.action == ModAction::Replace);
    CHECK_FALSE(p3.adapter.has_channel_map());
    CHECK(p3.adapter.pool == 2);

    // spatial grow, same channels: nearest upsample
    auto p4 = plan_modification(g, "up.1.up");
    REQUIRE(p4.action == ModAction::Replace);
    CHECK(p4.adapter.up == 2);

    CHECK_THROWS_AS(plan_modification(g, "no.such.op"), Error);
    // structural nodes are not candidates
    CHECK_THROWS_AS(plan_modification(g, "cond.embed"), Error);
}

TEST_CASE("non-integer spatial ratios are rejected") {
    OperatorGraph g = build_unet(tiny_spec(), 9);
    // forge a node whose shapes imply a non-integer factor
    OperatorNode& n = g.at("down.0.down");
    n.in_shape = {8, 6, 6};
    n.out_shape = {8, 4, 4};
    CHECK_THROWS_WITH_AS(plan_modification(g, "down.0.down"),
                         doctest::Contains("not an integer factor"), Error);
}

TEST_CASE("apply + restore is bit-exact (hash and forward)") {
    const UNetSpec spec = tiny_spec();
    OperatorGraph g = build_unet(spec, 9);
    Tensor latent = fixed_latent(spec);
    const Tensor before = unet_forward(g, latent, 321, 1);
    const uint64_t hash_before = graph_hash(g);

    for (const char* id : {"mid.res.0", "down.1.tf", "down.1.tf.self.attn", "down.0.down",
                           "up.1.up", "down.1.res.0.conv1", "mid.res.0.norm1",
                           "up.0.res.0.act1"}) {
        CAPTURE(id);
        auto plan = plan_modification(g, id);
        apply(g, plan);
        Tensor mid = unet_forward(g, latent, 321, 1);
        CHECK(mid.shape() == before.shape());
        restore(g, plan);
        CHECK(graph_hash(g) == hash_before);
        Tensor after = unet_forward(g, latent, 321, 1);
        CHECK(same_bits(before, after));
    }
}

TEST_CASE("removing a residual block leaves only the skip path") {
    const UNetSpec spec = tiny_spec();
    OperatorGraph g = build_unet(spec, 9);
    // mid.res.1 has equal in/out and an identity skip, so removal must make
    // the downstream input equal the block's input (the skip contribution).
    auto plan = plan_modification(g, "mid.res.1");
    REQUIRE(plan.action == ModAction::Remove);

    Tensor latent = fixed_latent(spec);
    // oracle: capture the block input via the upstream producer's value by
    // running the modified graph; with the block gone, mid.out == entry value
    apply(g, plan);
    const std::string entry = g.at("mid.out").inputs[0];
    CHECK(entry == g.at("mid.res.1").entry_input);
    restore(g, plan);
}

TEST_CASE("zero-branch semantics: removing attention keeps the hidden stream") {
    const UNetSpec spec = tiny_spec();
    OperatorGraph g = build_unet(spec, 9);
    Tensor latent = fixed_latent(spec);

    // removing the cross-attention leaf zeroes its residual branch, which is
    // identical to removing the whole cross unit
    auto leaf_plan = plan_modification(g, "down.1.tf.cross.attn");
    REQUIRE(leaf_plan.action == ModAction::Remove);
    apply(g, leaf_plan);
    Tensor with_leaf_removed = unet_forward(g, latent, 77, 2);
    restore(g, leaf_plan);

    auto unit_plan = plan_modification(g, "down.1.tf.cross");
    apply(g, unit_plan);
    Tensor with_unit_removed = unet_forward(g, latent, 77, 2);
    restore(g, unit_plan);

    CHECK(same_bits(with_leaf_removed, with_unit_removed));
}

TEST_CASE("double apply and restore-without-apply are errors") {
    OperatorGraph g = build_unet(tiny_spec(), 9);
    auto plan = plan_modification(g, "mid.res.0");
    auto plan2 = plan_modification(g, "mid.res.1");
    apply(g, plan);
    CHECK_THROWS_AS(apply(g, plan), Error);
    CHECK_THROWS_AS(apply(g, plan2), Error); // another plan is active
    CHECK_THROWS_AS(restore(g, plan2), Error);
    restore(g, plan);
    CHECK_THROWS_AS(restore(g, plan), Error);
}

TEST_CASE("exhaustive sweep: every candidate applies, runs, and restores") {
    const UNetSpec spec = tiny_spec();
    OperatorGraph g = build_unet(spec, 9);
    Tensor latent = fixed_latent(spec);
    const Tensor before = unet_forward(g, latent, 500, 0);
    const uint64_t hash_before = graph_hash(g);

    const auto candidates = enumerate_candidates(g, 0.0);
    REQUIRE(!candidates.empty());
    for (const auto& id : candidates) {
        CAPTURE(id);
        auto plan = plan_modification(g, id);
        apply(g, plan);
        Tensor out = unet_forward(g, latent, 500, 0);
        REQUIRE(out.shape() == before.shape());
        restore(g, plan);
    }
    CHECK(graph_hash(g) == hash_before);
    Tensor after = unet_forward(g, latent, 500, 0);
    CHECK(same_bits(before, after));
}

TEST_CASE("adapters are strictly cheaper than what they replace") {
    const UNetSpec spec = tiny_spec();
    OperatorGraph g = build_unet(spec, 9);
    calibrate_costs(g, 5);

    for (const auto& id : enumerate_candidates(g, 0.0)) {
        auto plan = plan_modification(g, id);
        if (plan.action != ModAction::Replace) continue;
        CAPTURE(id);
        const OperatorNode& victim = g.at(id);
        const int64_t victim_params = victim.composite
                                          ? [&] {
                                                int64_t s = 0;
                                                for (const auto& d : g.descendants(id))
                                                    s += g.at(d).param_count();
                                                return s;
                                            }()
                                          : victim.param_count();
        CHECK(plan.adapter.param_count() < victim_params);
        const double victim_cost = victim.est_cost;
        apply(g, plan);
        calibrate_costs(g, 5);
        const std::string adapter_id =
            victim.composite ? id + ":adapter" : id; // leaf swaps in place
        const double adapter_cost = g.at(adapter_id).est_cost;
        restore(g, plan);
        calibrate_costs(g, 5); // repair est_cost for the next iteration
        CHECK_MESSAGE(adapter_cost < victim_cost,
                      id << ": adapter " << adapter_cost << "s vs " << victim_cost << "s");
    }
}

TEST_CASE("composite replace inserts an adapter with composed maps") {
    // synthetic: force a composite with both channel and spatial change by
    // replacing a downsample-and-widen path; build via direct shape edit
    OperatorGraph g = build_unet(tiny_spec(), 9);
    OperatorNode& n = g.at("down.0.down");
    n.in_shape = {8, 8, 8};
    n.out_shape = {16, 4, 4};
    auto plan = plan_modification(g, "down.0.down");
    REQUIRE(plan.action == ModAction::Replace);
    CHECK(plan.adapter.pool == 2);
    CHECK(plan.adapter.in_channels == 8);
    CHECK(plan.adapter.out_channels == 16);
    CHECK(plan.adapter.describe() == "avg_pool(2)+conv1x1(8->16)");
}

TEST_CASE("adapter payload applies uniform channel mixing") {
    // a 1x1 adapter from 4 to 2 channels averages the inputs per pixel
    AdapterSpec spec;
    spec.in_channels = 4;
    spec.out_channels = 2;
    ModificationPlan plan;
    plan.adapter = spec;

    Rng rng(3);
    Tensor x = Tensor::randn({1, 4, 2, 2}, rng);
    Tensor w = Tensor::full({2, 4}, 0.25f);
    Tensor b = Tensor::zeros({2});
    Tensor y = ops::linear(x, w, b);
    for (int p = 0; p < 4; ++p) {
        float mean = 0.f;
        for (int c = 0; c < 4; ++c) mean += x.data()[c * 4 + p] * 0.25f;
        CHECK(y.data()[p] == doctest::Approx(mean));
        CHECK(y.data()[4 + p] == doctest::Approx(mean));
    }
}

TEST_CASE("compact removes pruned weight and keeps function") {
    const UNetSpec spec = tiny_spec();
    OperatorGraph g = build_unet(spec, 9);
    Tensor latent = fixed_latent(spec);
    const int64_t params_before = g.param_count();

    auto plan = plan_modification(g, "down.1.tf");
    apply(g, plan);
    Tensor pruned_out = unet_forward(g, latent, 500, 0);
    commit(g, plan);
    compact(g);
    CHECK(g.param_count() < params_before);
    CHECK(g.index_of("down.1.tf") < 0);
    Tensor compact_out = unet_forward(g, latent, 500, 0);
    CHECK(same_bits(pruned_out, compact_out));

    // the compacted graph round-trips through the container
    CheckpointMeta meta;
    const auto bytes = serialize_graph(g, meta);
    auto lc = deserialize_graph(bytes);
    Tensor reloaded_out = unet_forward(lc.graph, latent, 500, 0);
    CHECK(same_bits(pruned_out, reloaded_out));
}

TEST_CASE("compact splices zeroed attention branches") {
    const UNetSpec spec = tiny_spec();
    OperatorGraph g = build_unet(spec, 9);
    Tensor latent = fixed_latent(spec);
    auto plan = plan_modification(g, "down.1.tf.self.attn");
    apply(g, plan);
    Tensor pruned_out = unet_forward(g, latent, 123, 3);
    commit(g, plan);
    compact(g);
    // the zeroed attention, its norm, and the residual add all disappear
    CHECK(g.index_of("down.1.tf.self.attn") < 0);
    CHECK(g.index_of("down.1.tf.self.norm") < 0);
    CHECK(g.index_of("down.1.tf.self.add") < 0);
    Tensor compact_out = unet_forward(g, latent, 123, 3);
    CHECK(same_bits(pruned_out, compact_out));
}
