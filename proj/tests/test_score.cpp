#include <doctest.h>

#include <cmath>

#include "ldp/checkpoint.hpp"
#include "ldp/error.hpp"
#include "ldp/score.hpp"
#include "ldp/unet.hpp"

using namespace ldp;

namespace {

LatentSet make_set(std::vector<std::vector<float>> latents, int cond = 0) {
    LatentSet s;
    s.latents = std::move(latents);
    s.condition_id = cond;
    return s;
}

LatentSet random_set(Rng& rng, int n, int d) {
    LatentSet s;
    for (int i = 0; i < n; ++i) {
        std::vector<float> v(d);
        for (auto& x : v) x = rng.normal() * 2.f;
        s.latents.push_back(std::move(v));
    }
    return s;
}

double norm2(const std::vector<float>& v) {
    double s = 0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

} // namespace

TEST_CASE("latent_mean hand oracles") {
    CHECK(latent_mean(make_set({{1, 3}, {3, 1}})) == std::vector<float>{2, 2});
    CHECK(latent_mean(make_set({{4, 7, -1}})) == std::vector<float>{4, 7, -1});
    CHECK(latent_mean(make_set({{0, 0}, {0, 0}})) == std::vector<float>{0, 0});
    CHECK_THROWS_AS(latent_mean(make_set({})), Error);
}

TEST_CASE("latent_std uses divisor N (population), hand oracle") {
    // {(1,1),(3,3)}: mean (2,2); squared deviations (1,1) each; /2 -> (1,1)
    CHECK(latent_std(make_set({{1, 1}, {3, 3}})) == std::vector<float>{1, 1});
    CHECK(latent_std(make_set({{5, -2}})) == std::vector<float>{0, 0});
    // translation invariance
    Rng rng(31);
    LatentSet a = random_set(rng, 6, 10);
    LatentSet b = a;
    for (auto& l : b.latents)
        for (auto& x : l) x += 11.5f;
    const auto sa = latent_std(a);
    const auto sb = latent_std(b);
    for (size_t i = 0; i < sa.size(); ++i)
        CHECK(sa[i] == doctest::Approx(sb[i]).epsilon(1e-4));
}

TEST_CASE("population std matches a brute-force divisor-N oracle to 1e-6") {
    Rng rng(77);
    LatentSet s = random_set(rng, 9, 17);
    const auto fast = latent_std(s);
    for (size_t i = 0; i < fast.size(); ++i) {
        double mean = 0;
        for (const auto& l : s.latents) mean += l[i];
        mean /= static_cast<double>(s.size());
        double acc = 0;
        for (const auto& l : s.latents) acc += (l[i] - mean) * (l[i] - mean);
        const double oracle = std::sqrt(acc / static_cast<double>(s.size()));
        CHECK(std::abs(fast[i] - oracle) < 1e-6);
    }
}

TEST_CASE("avg_distance oracles") {
    LatentSet a = make_set({{1, 1}, {3, 3}});
    CHECK(avg_distance(a, a) == 0.0);
    // every vector shifted by (3,4): distance |(3,4)| = 5
    LatentSet shifted = make_set({{4, 5}, {6, 7}});
    CHECK(avg_distance(a, shifted) == doctest::Approx(5.0).epsilon(1e-6));
    // equal means, different spreads
    LatentSet b = make_set({{2, 2}, {2, 2}});
    CHECK(avg_distance(a, b) == doctest::Approx(0.0));
    CHECK_THROWS_AS(avg_distance(a, make_set({{1, 2, 3}})), Error);
}

TEST_CASE("std_distance oracles") {
    LatentSet a = make_set({{1, 1}, {3, 3}});
    LatentSet b = make_set({{2, 2}, {2, 2}});
    CHECK(std_distance(a, a) == 0.0);
    // std(a) = (1,1), std(b) = (0,0): distance sqrt(2)
    CHECK(std_distance(a, b) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
    // constant shift leaves the spread untouched
    LatentSet shifted = make_set({{4, 5}, {6, 7}});
    CHECK(std_distance(a, shifted) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("combine: all four combinators") {
    const double s2 = std::sqrt(2.0);
    CHECK(combine(0.0, s2, Combinator::Sum) == doctest::Approx(s2));
    CHECK(combine(0.0, 123.0, Combinator::Product) == 0.0);
    CHECK(combine(5.0, 7.0, Combinator::AvgOnly) == 5.0);
    CHECK(combine(5.0, 7.0, Combinator::StdOnly) == 7.0);
    CHECK(combine(2.0, 3.0, Combinator::Sum) == 5.0);
    CHECK(combine(2.0, 3.0, Combinator::Product) == 6.0);
    CHECK_THROWS_AS(combine(-1.0, 1.0, Combinator::Sum), Error);
}

TEST_CASE("acceptance pair: avg 0, std sqrt(2), sum sqrt(2)") {
    LatentSet orig = make_set({{1, 1}, {3, 3}});
    LatentSet mod = make_set({{2, 2}, {2, 2}});
    const double a = avg_distance(orig, mod);
    const double s = std_distance(orig, mod);
    CHECK(std::abs(a - 0.0) < 1e-6);
    CHECK(std::abs(s - std::sqrt(2.0)) < 1e-6);
    CHECK(std::abs(combine(a, s, Combinator::Sum) - std::sqrt(2.0)) < 1e-6);
}

TEST_CASE("shift law and scale law over random sets") {
    Rng rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        LatentSet orig = random_set(rng, 4 + trial % 5, 8 + trial % 9);
        // shift: avg_dist = |v|, std_dist = 0
        std::vector<float> v(orig.dim());
        for (auto& x : v) x = rng.normal();
        LatentSet shifted = orig;
        for (auto& l : shifted.latents)
            for (size_t i = 0; i < l.size(); ++i) l[i] += v[i];
        CHECK(avg_distance(orig, shifted) == doctest::Approx(norm2(v)).epsilon(1e-5));
        CHECK(std_distance(orig, shifted) < 1e-5);

        // scale by alpha: both distances are |1-alpha| times the base norms
        const float alpha = 0.25f + 2.f * static_cast<float>(rng.uniform());
        LatentSet scaled = orig;
        for (auto& l : scaled.latents)
            for (auto& x : l) x *= alpha;
        const double base_avg = norm2(latent_mean(orig));
        const double base_std = norm2(latent_std(orig));
        CHECK(avg_distance(orig, scaled) ==
              doctest::Approx(std::abs(1.0 - alpha) * base_avg).epsilon(1e-4));
        CHECK(std_distance(orig, scaled) ==
              doctest::Approx(std::abs(1.0 - alpha) * base_std).epsilon(1e-4));
    }
}

TEST_CASE("symmetry and combinator consistency") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        LatentSet a = random_set(rng, 5, 12);
        LatentSet b = random_set(rng, 5, 12);
        CHECK(avg_distance(a, b) == doctest::Approx(avg_distance(b, a)));
        CHECK(std_distance(a, b) == doctest::Approx(std_distance(b, a)));
        const double ad = avg_distance(a, b);
        const double sd = std_distance(a, b);
        CHECK(combine(ad, sd, Combinator::Sum) >=
              std::max(combine(ad, sd, Combinator::AvgOnly),
                       combine(ad, sd, Combinator::StdOnly)));
    }
}

TEST_CASE("per-condition accumulation follows the scores[op] += s rule") {
    OperatorScore score;
    score.op_id = "stub";
    score.per_condition.push_back({0, 1.5, 0.0, 0.0});
    score.per_condition.push_back({1, 2.5, 0.0, 0.0});
    score.recombine(Combinator::Sum);
    CHECK(score.total == doctest::Approx(4.0));
    score.recombine(Combinator::StdOnly);
    CHECK(score.total == doctest::Approx(0.0));
}

TEST_CASE("score_operator: functional clone scores 0, graph restored") {
    UNetSpec spec;
    spec.base_width = 8;
    spec.channel_mult = {1, 2};
    spec.attention_levels = {1};
    spec.latent_size = 8;
    spec.cond_dim = 16;
    spec.cond_tokens = 2;
    spec.num_conditions = 2;
    spec.res_blocks_per_level = 1;
    OperatorGraph g = build_unet(spec, 21);

    // zero the output projection of one attention: its residual branch then
    // contributes nothing, so zero-removal is an exact functional clone
    {
        auto& attn = g.at("down.1.tf.self.attn");
        auto* p = std::get_if<AttentionPayload>(&attn.payload);
        REQUIRE(p != nullptr);
        p->wo = Tensor::zeros(p->wo.shape(), true);
        p->bo = Tensor::zeros(p->bo.shape(), true);
    }

    ScoreConfig cfg;
    cfg.n_gen = 2;
    cfg.scheduler.num_inference_steps = 4;
    cfg.base_seed = 99;

    std::map<int, LatentSet> orig;
    for (int c : {0, 1}) {
        orig[c] = generate_latents(g, c, cfg.n_gen, cfg.scheduler, cfg.base_seed);
        orig[c].condition_id = c;
    }
    const uint64_t hash_before = graph_hash(g);
    OperatorScore s = score_operator(orig, g, "down.1.tf.self.attn", cfg);
    CHECK(s.total < 1e-5);
    REQUIRE(s.per_condition.size() == 2);
    CHECK(graph_hash(g) == hash_before);

    // a real candidate scores nonnegative and finite
    OperatorScore real = score_operator(orig, g, "mid.res.0", cfg);
    CHECK(real.total >= 0.0);
    CHECK(std::isfinite(real.total));
    CHECK(graph_hash(g) == hash_before);
}
