#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ldp/graph.hpp"
#include "ldp/score.hpp"

namespace ldp {

struct PruneConfig {
    int k = 10;
    std::vector<int> conditions;
    int n_gen = 16;
    Combinator combinator = Combinator::Sum;
    double min_cost_fraction = 0.0;
    uint64_t base_seed = 1234;
    SchedulerConfig scheduler;
    int jobs = 1;
    std::string cache_dir; // empty disables the score cache

    void validate() const;
    ScoreConfig score_config() const;
};

struct ScoreReportEntry {
    std::string op_id;
    std::string kind;
    std::string block; // parent path ("" for top-level operators)
    std::string action;
    std::vector<OperatorScore::CondScore> per_condition;
    double total = 0;
    int rank = 0; // 1..m, ascending by total
    bool chosen = false;
    int64_t params_saved = 0;
    double est_cost = 0;
};

struct ScoreReport {
    std::vector<ScoreReportEntry> entries; // rank order
    std::vector<std::string> chosen;
    int64_t n_ops_per_latent = 0; // executable ops per generated latent
    int m_candidates = 0;
    int k = 0;
    std::string source_graph_hash;
    Combinator combinator = Combinator::Sum;
};

// Injectable scorer, used by tests to drive Algorithm 1 with known scores.
using ScoreFn = std::function<OperatorScore(OperatorGraph&, const std::string&)>;

// Scores every candidate (workers own private graph clones; results are
// identical to sequential execution). Consults/fills the cache when enabled.
std::vector<OperatorScore> score_candidates(OperatorGraph& graph,
                                            const std::vector<std::string>& candidates,
                                            const PruneConfig& cfg,
                                            const ScoreFn& score_fn = nullptr);

// Ascending by total score, ties broken by operator id.
std::vector<std::string> rank_operators(const std::vector<OperatorScore>& scores);
std::vector<std::string> rank_operators(const ScoreReport& report);

// First k of the ranking that are pairwise non-overlapping in the hierarchy.
std::vector<std::string> select_nonoverlapping(const OperatorGraph& graph,
                                               const std::vector<std::string>& ranked,
                                               int k);

// Alg. 1 end to end: enumerate, score, pick the k lowest, apply permanently,
// compact, report. The graph is pruned in place.
ScoreReport run_pruning_pass(OperatorGraph& graph, const PruneConfig& cfg,
                             const ScoreFn& score_fn = nullptr);

struct SweepRow {
    int k = 0;
    std::string checkpoint_path;
    ScoreReport report;
};

// One scoring pass reused for every k; emits a pruned checkpoint per k.
std::vector<SweepRow> sweep(const OperatorGraph& teacher, const PruneConfig& cfg,
                            const std::vector<int>& k_values, const std::string& out_dir,
                            const ScoreFn& score_fn = nullptr);

ScoreReport build_report(const OperatorGraph& graph, std::vector<OperatorScore> scores,
                         const PruneConfig& cfg, const std::vector<std::string>& chosen);

void write_report_json(const ScoreReport& report, const std::string& path);
void write_report_csv(const ScoreReport& report, const std::string& path);
ScoreReport read_report_json(const std::string& path);

} // namespace ldp
