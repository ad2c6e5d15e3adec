#pragma once

#include <map>
#include <string>
#include <vector>

#include "ldp/diffusion.hpp"
#include "ldp/graph.hpp"

namespace ldp {

// How avg_dist and std_dist merge into one score. Sum is the default.
enum class Combinator { Sum, Product, AvgOnly, StdOnly };

const char* combinator_name(Combinator c);
Combinator combinator_from_name(const std::string& s);

struct OperatorScore {
    struct CondScore {
        int condition_id = 0;
        double avg_dist = 0;
        double std_dist = 0;
        double combined = 0;
    };
    std::string op_id;
    std::vector<CondScore> per_condition;
    double total = 0; // sum of combined over conditions

    // Re-derives combined/total for another combinator from the stored
    // distance pairs (they are combinator-independent).
    void recombine(Combinator c);
};

// Element-wise mean of the flattened set members.
std::vector<float> latent_mean(const LatentSet& set);
// Element-wise population standard deviation (divisor N, not N-1).
std::vector<float> latent_std(const LatentSet& set);

double avg_distance(const LatentSet& orig, const LatentSet& mod);
double std_distance(const LatentSet& orig, const LatentSet& mod);
double combine(double avg_dist, double std_dist, Combinator c);

struct ScoreConfig {
    int n_gen = 16;
    uint64_t base_seed = 1234;
    SchedulerConfig scheduler;
    Combinator combinator = Combinator::Sum;
};

// Scores one operator: per condition, apply the modification, generate the
// paired latent set, measure the divergence, restore. The graph is
// bit-identical afterwards.
OperatorScore score_operator(const std::map<int, LatentSet>& orig_sets, OperatorGraph& graph,
                             const std::string& op_id, const ScoreConfig& cfg);

} // namespace ldp
