#include "ldp/prune.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "ldp/checkpoint.hpp"
#include "ldp/error.hpp"
#include "ldp/modify.hpp"

namespace ldp {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

void PruneConfig::validate() const {
    require(k >= 1, "prune: k must be >= 1, got ", k);
    require(!conditions.empty(),
            "prune: conditions must be non-empty (unconditional tasks use the single "
            "implicit condition id 0)");
    require(n_gen >= 1, "prune: n_gen must be >= 1, got ", n_gen);
    require(min_cost_fraction >= 0.0 && min_cost_fraction < 1.0,
            "prune: min_cost_fraction must be in [0,1)");
    require(jobs >= 1, "prune: jobs must be >= 1");
    scheduler.validate();
}

ScoreConfig PruneConfig::score_config() const {
    ScoreConfig sc;
    sc.n_gen = n_gen;
    sc.base_seed = base_seed;
    sc.scheduler = scheduler;
    sc.combinator = combinator;
    return sc;
}

// ---------------------------------------------------------------------------
// Score cache: per-operator distance pairs keyed by (graph hash, scoring key).
// Distances are combinator-independent, so one cache entry serves all four
// combinators and any k.

namespace {

std::string scoring_key(const PruneConfig& cfg, const std::vector<std::string>& candidates) {
    std::ostringstream os;
    os << "conds=";
    for (int c : cfg.conditions) os << c << ",";
    os << ";n_gen=" << cfg.n_gen << ";seed=" << cfg.base_seed
       << ";steps=" << cfg.scheduler.num_inference_steps
       << ";train=" << cfg.scheduler.num_train_steps << ";b=" << cfg.scheduler.beta_start
       << ".." << cfg.scheduler.beta_end
       << ";sampler=" << (cfg.scheduler.sampler == Sampler::Ddim ? "ddim" : "ddpm")
       << ";cands=";
    for (const auto& c : candidates) os << c << ",";
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a_str(os.str())));
    return buf;
}

std::string cache_path(const std::string& dir, const std::string& ghash,
                       const std::string& key) {
    return dir + "/scores_" + ghash + "_" + key + ".json";
}

std::optional<std::vector<OperatorScore>> load_cached_scores(
    const std::string& path, const std::vector<std::string>& candidates, Combinator comb) {
    std::ifstream f(path);
    if (!f.good()) return std::nullopt;
    json j;
    try {
        f >> j;
    } catch (...) {
        return std::nullopt;
    }
    std::vector<OperatorScore> out;
    for (const auto& je : j.at("scores")) {
        OperatorScore s;
        s.op_id = je.at("op").get<std::string>();
        for (const auto& jc : je.at("per_condition")) {
            OperatorScore::CondScore cs;
            cs.condition_id = jc.at(0).get<int>();
            cs.avg_dist = jc.at(1).get<double>();
            cs.std_dist = jc.at(2).get<double>();
            s.per_condition.push_back(cs);
        }
        s.recombine(comb);
        out.push_back(std::move(s));
    }
    if (out.size() != candidates.size()) return std::nullopt;
    for (size_t i = 0; i < out.size(); ++i)
        if (out[i].op_id != candidates[i]) return std::nullopt;
    return out;
}

void store_cached_scores(const std::string& path, const std::vector<OperatorScore>& scores) {
    json j;
    json arr = json::array();
    for (const auto& s : scores) {
        json je;
        je["op"] = s.op_id;
        json pc = json::array();
        for (const auto& cs : s.per_condition)
            pc.push_back({cs.condition_id, cs.avg_dist, cs.std_dist});
        je["per_condition"] = std::move(pc);
        arr.push_back(std::move(je));
    }
    j["scores"] = std::move(arr);
    std::error_code ec;
    fs::create_directories(fs::path(path).parent_path(), ec);
    std::ofstream f(path);
    if (f.good()) f << j.dump(1) << "\n";
}

} // namespace

std::vector<OperatorScore> score_candidates(OperatorGraph& graph,
                                            const std::vector<std::string>& candidates,
                                            const PruneConfig& cfg,
                                            const ScoreFn& score_fn) {
    cfg.validate();
    require(!candidates.empty(), "score_candidates: no candidates");

    if (score_fn) {
        std::vector<OperatorScore> out;
        out.reserve(candidates.size());
        for (const auto& id : candidates) out.push_back(score_fn(graph, id));
        return out;
    }

    std::string cpath;
    if (!cfg.cache_dir.empty()) {
        cpath = cache_path(cfg.cache_dir, graph_hash_hex(graph),
                           scoring_key(cfg, candidates));
        if (auto cached = load_cached_scores(cpath, candidates, cfg.combinator))
            return std::move(*cached);
    }

    // original latent sets, once per condition (Alg. 1 outer loop)
    const ScoreConfig sc = cfg.score_config();
    std::map<int, LatentSet> orig_sets;
    for (int c : cfg.conditions) {
        LatentSet set = generate_latents(graph, c, cfg.n_gen, cfg.scheduler, cfg.base_seed);
        set.condition_id = c;
        orig_sets.emplace(c, std::move(set));
    }

    std::vector<OperatorScore> scores(candidates.size());
    const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(candidates.size())));
    if (jobs == 1) {
        for (size_t i = 0; i < candidates.size(); ++i)
            scores[i] = score_operator(orig_sets, graph, candidates[i], sc);
    } else {
        // Each worker owns a private deep copy; the merge is a pure write
        // into disjoint slots, so results match sequential execution exactly.
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(jobs);
        for (int w = 0; w < jobs; ++w)
            pool.emplace_back([&, w] {
                try {
                    OperatorGraph local = graph.clone();
                    size_t i;
                    while ((i = next.fetch_add(1)) < candidates.size())
                        scores[i] = score_operator(orig_sets, local, candidates[i], sc);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    if (!cpath.empty()) store_cached_scores(cpath, scores);
    return scores;
}

std::vector<std::string> rank_operators(const std::vector<OperatorScore>& scores) {
    std::vector<const OperatorScore*> ptrs;
    ptrs.reserve(scores.size());
    for (const auto& s : scores) ptrs.push_back(&s);
    std::sort(ptrs.begin(), ptrs.end(), [](const OperatorScore* a, const OperatorScore* b) {
        if (a->total != b->total) return a->total < b->total;
        return a->op_id < b->op_id;
    });
    std::vector<std::string> out;
    out.reserve(ptrs.size());
    for (const auto* p : ptrs) out.push_back(p->op_id);
    return out;
}

std::vector<std::string> rank_operators(const ScoreReport& report) {
    std::vector<std::string> out;
    out.reserve(report.entries.size());
    for (const auto& e : report.entries) out.push_back(e.op_id);
    return out;
}

std::vector<std::string> select_nonoverlapping(const OperatorGraph& graph,
                                               const std::vector<std::string>& ranked,
                                               int k) {
    require(k >= 1, "selection: k must be >= 1");
    require(k <= static_cast<int>(ranked.size()), "selection: k = ", k, " exceeds the ",
            ranked.size(), " ranked candidates");
    std::vector<std::string> chosen;
    for (const auto& id : ranked) {
        if (static_cast<int>(chosen.size()) == k) break;
        bool overlaps = false;
        for (const auto& c : chosen)
            if (OperatorGraph::is_ancestor(c, id) || OperatorGraph::is_ancestor(id, c)) {
                overlaps = true;
                break;
            }
        if (!overlaps) chosen.push_back(id);
    }
    require(static_cast<int>(chosen.size()) == k, "selection: only ", chosen.size(),
            " non-overlapping operators available for k = ", k);
    (void)graph;
    return chosen;
}

// ---------------------------------------------------------------------------

namespace {

std::string block_of(const std::string& id) {
    const auto pos = id.rfind('.');
    return pos == std::string::npos ? std::string() : id.substr(0, pos);
}

int64_t subtree_param_count(const OperatorGraph& g, const std::string& id) {
    const OperatorNode& n = g.at(id);
    if (!n.composite) return n.param_count();
    int64_t total = 0;
    for (const auto& d : g.descendants(id))
        if (!g.at(d).composite) total += g.at(d).param_count();
    return total;
}

int64_t exec_ops_per_latent(const OperatorGraph& g, int inference_steps) {
    int64_t leaves = 0;
    for (const auto& n : g.nodes)
        if (n.enabled && !n.composite) ++leaves;
    return leaves * inference_steps;
}

} // namespace

ScoreReport build_report(const OperatorGraph& graph, std::vector<OperatorScore> scores,
                         const PruneConfig& cfg, const std::vector<std::string>& chosen) {
    ScoreReport report;
    report.m_candidates = static_cast<int>(scores.size());
    report.k = static_cast<int>(chosen.size());
    report.combinator = cfg.combinator;
    report.n_ops_per_latent = exec_ops_per_latent(graph, cfg.scheduler.num_inference_steps);
    report.chosen = chosen;
    report.source_graph_hash = graph_hash_hex(graph);

    const auto ranked = rank_operators(scores);
    std::map<std::string, const OperatorScore*> by_id;
    for (const auto& s : scores) by_id[s.op_id] = &s;
    int rank = 1;
    for (const auto& id : ranked) {
        const OperatorScore& s = *by_id.at(id);
        ScoreReportEntry e;
        e.op_id = id;
        e.rank = rank++;
        e.total = s.total;
        e.per_condition = s.per_condition;
        e.block = block_of(id);
        e.chosen = std::count(chosen.begin(), chosen.end(), id) > 0;
        if (graph.has(id)) {
            const OperatorNode& n = graph.at(id);
            e.kind = kind_name(n.kind);
            e.est_cost = n.est_cost;
            ModificationPlan plan = plan_modification(graph, id);
            e.action = plan.describe();
            e.params_saved = subtree_param_count(graph, id) - plan.adapter.param_count();
        } else {
            e.kind = "?"; // already pruned away (report built post-application)
        }
        report.entries.push_back(std::move(e));
    }
    return report;
}

ScoreReport run_pruning_pass(OperatorGraph& graph, const PruneConfig& cfg,
                             const ScoreFn& score_fn) {
    cfg.validate();
    infer_shapes(graph);
    if (cfg.min_cost_fraction > 0.0 && total_cost(graph) <= 0.0) calibrate_costs(graph);
    const auto candidates = enumerate_candidates(graph, cfg.min_cost_fraction);
    require(!candidates.empty(), "pruning: no candidates after filtering");
    require(cfg.k <= static_cast<int>(candidates.size()), "pruning: k = ", cfg.k,
            " exceeds the ", candidates.size(), " candidates");

    auto scores = score_candidates(graph, candidates, cfg, score_fn);
    const auto ranked = rank_operators(scores);
    const auto chosen = select_nonoverlapping(graph, ranked, cfg.k);

    // report is built against the unpruned graph so kinds/costs are available
    ScoreReport report = build_report(graph, std::move(scores), cfg, chosen);

    for (const auto& id : chosen) {
        try {
            ModificationPlan plan = plan_modification(graph, id);
            apply(graph, plan);
            commit(graph, plan);
        } catch (const Error& e) {
            fail("pruning '", id, "': ", e.what());
        }
    }
    compact(graph);
    infer_shapes(graph);
    // smoke forward
    Rng rng(cfg.base_seed);
    Tensor probe = Tensor::randn({1, graph.latent_channels, graph.latent_size,
                                  graph.latent_size},
                                 rng);
    unet_forward(graph, probe, cfg.scheduler.num_train_steps / 2, cfg.conditions.front());
    return report;
}

std::vector<SweepRow> sweep(const OperatorGraph& teacher, const PruneConfig& cfg,
                            const std::vector<int>& k_values, const std::string& out_dir,
                            const ScoreFn& score_fn) {
    cfg.validate();
    require(!k_values.empty(), "sweep: no k values");
    for (size_t i = 1; i < k_values.size(); ++i)
        require(k_values[i] > k_values[i - 1], "sweep: k values must be ascending");

    OperatorGraph base = teacher.clone();
    infer_shapes(base);
    if (cfg.min_cost_fraction > 0.0 && total_cost(base) <= 0.0) calibrate_costs(base);
    const auto candidates = enumerate_candidates(base, cfg.min_cost_fraction);
    require(k_values.back() <= static_cast<int>(candidates.size()), "sweep: max k ",
            k_values.back(), " exceeds the ", candidates.size(), " candidates");

    // one scoring pass; scores are k-independent
    auto scores = score_candidates(base, candidates, cfg, score_fn);
    const auto ranked = rank_operators(scores);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::vector<SweepRow> rows;
    for (int k : k_values) {
        SweepRow row;
        row.k = k;
        OperatorGraph pruned = base.clone();
        const auto chosen = select_nonoverlapping(pruned, ranked, k);
        row.report = build_report(pruned, scores, cfg, chosen);
        row.report.k = k;
        for (const auto& id : chosen) {
            ModificationPlan plan = plan_modification(pruned, id);
            apply(pruned, plan);
            commit(pruned, plan);
        }
        compact(pruned);
        row.checkpoint_path = out_dir + "/pruned_k" + std::to_string(k) + ".ldpr";
        CheckpointMeta meta;
        meta.parent_hash = graph_hash_hex(base);
        save_checkpoint(row.checkpoint_path, pruned, meta);
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Report IO

void write_report_json(const ScoreReport& report, const std::string& path) {
    json j;
    j["graph_hash"] = report.source_graph_hash;
    j["combinator"] = combinator_name(report.combinator);
    j["n_ops_per_latent"] = report.n_ops_per_latent;
    j["m_candidates"] = report.m_candidates;
    j["k"] = report.k;
    j["chosen"] = report.chosen;
    json entries = json::array();
    for (const auto& e : report.entries) {
        json je;
        je["op_id"] = e.op_id;
        je["kind"] = e.kind;
        je["block"] = e.block;
        je["action"] = e.action;
        je["total"] = e.total;
        je["rank"] = e.rank;
        je["chosen"] = e.chosen;
        je["params_saved"] = e.params_saved;
        je["est_cost"] = e.est_cost;
        json pc = json::array();
        for (const auto& cs : e.per_condition) {
            json jc;
            jc["condition"] = cs.condition_id;
            jc["avg_dist"] = cs.avg_dist;
            jc["std_dist"] = cs.std_dist;
            jc["combined"] = cs.combined;
            pc.push_back(std::move(jc));
        }
        je["per_condition"] = std::move(pc);
        entries.push_back(std::move(je));
    }
    j["operators"] = std::move(entries);
    std::error_code ec;
    fs::create_directories(fs::path(path).parent_path(), ec);
    std::ofstream f(path);
    require(f.good(), "cannot write report to '", path, "'");
    f << j.dump(1) << "\n";
}

ScoreReport read_report_json(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "cannot read report '", path, "'");
    json j;
    f >> j;
    ScoreReport report;
    report.source_graph_hash = j.at("graph_hash").get<std::string>();
    report.combinator = combinator_from_name(j.at("combinator").get<std::string>());
    report.n_ops_per_latent = j.at("n_ops_per_latent").get<int64_t>();
    report.m_candidates = j.at("m_candidates").get<int>();
    report.k = j.at("k").get<int>();
    report.chosen = j.at("chosen").get<std::vector<std::string>>();
    for (const auto& je : j.at("operators")) {
        ScoreReportEntry e;
        e.op_id = je.at("op_id").get<std::string>();
        e.kind = je.at("kind").get<std::string>();
        e.block = je.at("block").get<std::string>();
        e.action = je.at("action").get<std::string>();
        e.total = je.at("total").get<double>();
        e.rank = je.at("rank").get<int>();
        e.chosen = je.at("chosen").get<bool>();
        e.params_saved = je.at("params_saved").get<int64_t>();
        e.est_cost = je.at("est_cost").get<double>();
        for (const auto& jc : je.at("per_condition")) {
            OperatorScore::CondScore cs;
            cs.condition_id = jc.at("condition").get<int>();
            cs.avg_dist = jc.at("avg_dist").get<double>();
            cs.std_dist = jc.at("std_dist").get<double>();
            cs.combined = jc.at("combined").get<double>();
            e.per_condition.push_back(cs);
        }
        report.entries.push_back(std::move(e));
    }
    return report;
}

void write_report_csv(const ScoreReport& report, const std::string& path) {
    std::error_code ec;
    fs::create_directories(fs::path(path).parent_path(), ec);
    std::ofstream f(path);
    require(f.good(), "cannot write CSV to '", path, "'");
    f << "op_id,total,rank,block,kind\n";
    for (const auto& e : report.entries)
        f << e.op_id << "," << e.total << "," << e.rank << "," << e.block << "," << e.kind
          << "\n";
}

} // namespace ldp
