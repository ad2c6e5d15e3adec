#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <set>

#include "ldp/checkpoint.hpp"
#include "ldp/diffusion.hpp"
#include "ldp/error.hpp"
#include "ldp/modify.hpp"
#include "ldp/prune.hpp"
#include "ldp/unet.hpp"

using namespace ldp;

namespace {

UNetSpec tiny_spec(int conditions = 2) {
    UNetSpec s;
    s.base_width = 8;
    s.channel_mult = {1, 2};
    s.attention_levels = {1};
    s.latent_size = 8;
    s.cond_dim = 16;
    s.cond_tokens = 2;
    s.num_conditions = conditions;
    s.res_blocks_per_level = 1;
    return s;
}

PruneConfig fast_cfg(int k) {
    PruneConfig cfg;
    cfg.k = k;
    cfg.conditions = {0, 1};
    cfg.n_gen = 2;
    cfg.scheduler.num_inference_steps = 2;
    cfg.base_seed = 11;
    return cfg;
}

// assigns fixed totals by id; everything not listed gets a large score
ScoreFn stub_scorer(std::map<std::string, double> totals) {
    return [totals](OperatorGraph&, const std::string& id) {
        OperatorScore s;
        s.op_id = id;
        auto it = totals.find(id);
        const double t = it == totals.end() ? 1e6 : it->second;
        s.per_condition.push_back({0, t, 0.0, t});
        s.total = t;
        return s;
    };
}

} // namespace

TEST_CASE("rank_operators: sort oracle and lexicographic ties") {
    std::vector<OperatorScore> scores(3);
    scores[0].op_id = "a";
    scores[0].total = 3;
    scores[1].op_id = "b";
    scores[1].total = 1;
    scores[2].op_id = "c";
    scores[2].total = 2;
    CHECK(rank_operators(scores) == std::vector<std::string>{"b", "c", "a"});

    for (auto& s : scores) s.total = 7;
    CHECK(rank_operators(scores) == std::vector<std::string>{"a", "b", "c"});

    scores.resize(1);
    CHECK(rank_operators(scores) == std::vector<std::string>{"a"});
}

TEST_CASE("run_pruning_pass with injected scores prunes exactly the k lowest") {
    OperatorGraph g = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(2);
    // three named operators get low scores; b and c must be pruned
    auto report = run_pruning_pass(
        g, cfg,
        stub_scorer({{"mid.res.0", 3.0}, {"mid.res.1", 1.0}, {"down.0.res.0.conv2", 2.0}}));
    CHECK(report.chosen == std::vector<std::string>{"mid.res.1", "down.0.res.0.conv2"});
    CHECK(report.k == 2);
    CHECK(g.index_of("mid.res.1") < 0); // physically gone after compact
    // report covers every candidate exactly once
    std::set<std::string> seen;
    for (const auto& e : report.entries) CHECK(seen.insert(e.op_id).second);
    CHECK(static_cast<int>(seen.size()) == report.m_candidates);
    // ranks are a permutation of 1..m
    std::set<int> ranks;
    for (const auto& e : report.entries) ranks.insert(e.rank);
    CHECK(static_cast<int>(ranks.size()) == report.m_candidates);
    CHECK(*ranks.begin() == 1);
    CHECK(*ranks.rbegin() == report.m_candidates);
}

TEST_CASE("two-condition totals accumulate exactly (Alg. 1)") {
    OperatorGraph g = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(1);
    auto scorer = [](OperatorGraph&, const std::string& id) {
        OperatorScore s;
        s.op_id = id;
        s.per_condition.push_back({0, 1.5, 0.0, 1.5});
        s.per_condition.push_back({1, 2.5, 0.0, 2.5});
        s.total = 4.0;
        return s;
    };
    const auto candidates = enumerate_candidates(g, 0.0);
    auto scores = score_candidates(g, candidates, cfg, scorer);
    for (const auto& s : scores) {
        double acc = 0;
        for (const auto& cs : s.per_condition) acc += cs.combined;
        CHECK(s.total == doctest::Approx(acc));
        CHECK(s.total == doctest::Approx(4.0));
    }
}

TEST_CASE("equal scores select the first k in id order") {
    OperatorGraph g = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(3);
    auto report = run_pruning_pass(g, cfg, stub_scorer({})); // all equal (1e6)
    auto sorted = report.chosen;
    std::sort(sorted.begin(), sorted.end());
    CHECK(report.chosen == sorted);
    // first three candidate ids in lexicographic order, skipping overlaps
    OperatorGraph fresh = build_unet(tiny_spec(), 31);
    auto ids = enumerate_candidates(fresh, 0.0);
    std::sort(ids.begin(), ids.end());
    CHECK(report.chosen == select_nonoverlapping(fresh, ids, 3));
}

TEST_CASE("selection never picks overlapping operators") {
    OperatorGraph g = build_unet(tiny_spec(), 31);
    // force the composite and its child to the bottom of the ranking
    auto report_fn = stub_scorer({{"down.1.tf", 0.1},
                                  {"down.1.tf.self", 0.2},
                                  {"down.1.tf.self.attn", 0.3},
                                  {"mid.res.0", 0.4}});
    PruneConfig cfg = fast_cfg(2);
    auto report = run_pruning_pass(g, cfg, report_fn);
    CHECK(report.chosen == std::vector<std::string>{"down.1.tf", "mid.res.0"});
    for (size_t i = 0; i < report.chosen.size(); ++i)
        for (size_t j = i + 1; j < report.chosen.size(); ++j) {
            CHECK_FALSE(OperatorGraph::is_ancestor(report.chosen[i], report.chosen[j]));
            CHECK_FALSE(OperatorGraph::is_ancestor(report.chosen[j], report.chosen[i]));
        }
}

TEST_CASE("k exceeding the candidate count is an error") {
    OperatorGraph g = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(100000);
    CHECK_THROWS_AS(run_pruning_pass(g, cfg, stub_scorer({})), Error);
}

TEST_CASE("parallel scoring equals sequential scoring") {
    OperatorGraph g = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(1);
    std::vector<std::string> cands = {"mid.res.0", "mid.res.1", "down.0.res.0.conv2",
                                      "down.1.tf.self.attn", "up.1.tf.cross.attn",
                                      "out.norm"};
    auto seq = score_candidates(g, cands, cfg);
    PruneConfig par_cfg = cfg;
    par_cfg.jobs = 4;
    auto par = score_candidates(g, cands, par_cfg);
    REQUIRE(seq.size() == par.size());
    for (size_t i = 0; i < seq.size(); ++i) {
        CHECK(seq[i].op_id == par[i].op_id);
        CHECK(seq[i].total == par[i].total); // bit-identical, not approximate
    }
}

TEST_CASE("monotone compression: params and exec ops non-increasing in k") {
    OperatorGraph base = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(1);
    int64_t prev_params = base.param_count() + 1;
    for (int k : {2, 4, 6}) {
        OperatorGraph g = build_unet(tiny_spec(), 31);
        cfg.k = k;
        run_pruning_pass(g, cfg, stub_scorer({}));
        CHECK(g.param_count() < prev_params);
        prev_params = g.param_count();
    }
}

TEST_CASE("sweep: one scoring pass, nested chosen sets, reloadable checkpoints") {
    const std::string dir = "/tmp/ldp_sweep_test";
    std::filesystem::remove_all(dir);
    OperatorGraph teacher = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(1);

    std::atomic<int> score_calls{0};
    auto counting = [&score_calls](OperatorGraph&, const std::string& id) {
        score_calls.fetch_add(1);
        OperatorScore s;
        s.op_id = id;
        const double t = static_cast<double>(fnv1a_str(id) % 1000);
        s.per_condition.push_back({0, t, 0.0, t});
        s.total = t;
        return s;
    };

    auto rows = sweep(teacher, cfg, {2, 5, 8}, dir, counting);
    REQUIRE(rows.size() == 3);
    const int m = rows[0].report.m_candidates;
    CHECK(score_calls.load() == m); // scored exactly once despite three k values

    // nested prefixes of one ranking
    for (size_t i = 1; i < rows.size(); ++i) {
        std::set<std::string> prev(rows[i - 1].report.chosen.begin(),
                                   rows[i - 1].report.chosen.end());
        std::set<std::string> cur(rows[i].report.chosen.begin(),
                                  rows[i].report.chosen.end());
        for (const auto& id : prev) CHECK(cur.count(id) == 1);
    }

    // per-k checkpoints reload and run
    for (const auto& row : rows) {
        auto lc = load_checkpoint(row.checkpoint_path);
        Rng rng(1);
        Tensor latent = Tensor::randn({1, 4, 8, 8}, rng);
        Tensor out = unet_forward(lc.graph, latent, 100, 0);
        CHECK(out.shape() == latent.shape());
    }

    // sweep with a single k matches run_pruning_pass with that k
    OperatorGraph g = build_unet(tiny_spec(), 31);
    cfg.k = 2;
    auto single = run_pruning_pass(g, cfg, counting);
    CHECK(single.chosen == rows[0].report.chosen);
    std::filesystem::remove_all(dir);
}

TEST_CASE("report json/csv round trip") {
    OperatorGraph g = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(2);
    auto report = run_pruning_pass(g, cfg, stub_scorer({{"mid.res.0", 0.5}}));
    const std::string jpath = "/tmp/ldp_report_test.json";
    const std::string cpath = "/tmp/ldp_report_test.csv";
    write_report_json(report, jpath);
    write_report_csv(report, cpath);
    auto loaded = read_report_json(jpath);
    CHECK(loaded.entries.size() == report.entries.size());
    CHECK(loaded.chosen == report.chosen);
    CHECK(loaded.m_candidates == report.m_candidates);
    CHECK(loaded.entries[0].op_id == report.entries[0].op_id);
    CHECK(loaded.entries[0].total == doctest::Approx(report.entries[0].total));
    std::filesystem::remove(jpath);
    std::filesystem::remove(cpath);
}

TEST_CASE("pruned graph checkpoint reproduces forward outputs bit-exactly") {
    OperatorGraph g = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(4);
    run_pruning_pass(g, cfg, stub_scorer({}));
    const std::string path = "/tmp/ldp_pruned_test.ldpr";
    CheckpointMeta meta;
    save_checkpoint(path, g, meta);
    auto lc = load_checkpoint(path);
    Rng rng(3);
    Tensor latent = Tensor::randn({2, 4, 8, 8}, rng);
    Tensor a = unet_forward(g, latent, 250, 1);
    Tensor b = unet_forward(lc.graph, latent, 250, 1);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    std::filesystem::remove(path);
}

TEST_CASE("score cache: second pass reuses stored distances") {
    const std::string dir = "/tmp/ldp_cache_test";
    std::filesystem::remove_all(dir);
    OperatorGraph g = build_unet(tiny_spec(), 31);
    PruneConfig cfg = fast_cfg(1);
    cfg.cache_dir = dir;
    std::vector<std::string> cands = {"mid.res.0", "mid.res.1", "out.norm"};

    reset_forward_call_count();
    auto first = score_candidates(g, cands, cfg);
    const uint64_t calls_first = forward_call_count();
    CHECK(calls_first > 0);

    reset_forward_call_count();
    auto second = score_candidates(g, cands, cfg);
    CHECK(forward_call_count() == 0); // cache hit: no regeneration
    REQUIRE(second.size() == first.size());
    for (size_t i = 0; i < first.size(); ++i)
        CHECK(first[i].total == doctest::Approx(second[i].total));

    // different combinator reuses the same cached distance pairs
    PruneConfig alt = cfg;
    alt.combinator = Combinator::StdOnly;
    reset_forward_call_count();
    auto third = score_candidates(g, cands, alt);
    CHECK(forward_call_count() == 0);
    for (size_t i = 0; i < third.size(); ++i) {
        REQUIRE(third[i].per_condition.size() == first[i].per_condition.size());
        for (size_t c = 0; c < third[i].per_condition.size(); ++c)
            CHECK(third[i].per_condition[c].combined ==
                  doctest::Approx(first[i].per_condition[c].std_dist));
    }
    std::filesystem::remove_all(dir);
}
