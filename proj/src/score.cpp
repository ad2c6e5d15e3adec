#include "ldp/score.hpp"

#include <cmath>
#include <iostream>

#include "ldp/error.hpp"
#include "ldp/modify.hpp"

namespace ldp {

const char* combinator_name(Combinator c) {
    switch (c) {
        case Combinator::Sum: return "sum";
        case Combinator::Product: return "product";
        case Combinator::AvgOnly: return "avg_only";
        case Combinator::StdOnly: return "std_only";
    }
    return "?";
}

Combinator combinator_from_name(const std::string& s) {
    if (s == "sum") return Combinator::Sum;
    if (s == "product") return Combinator::Product;
    if (s == "avg_only") return Combinator::AvgOnly;
    if (s == "std_only") return Combinator::StdOnly;
    fail("unknown combinator '", s, "' (expected sum|product|avg_only|std_only)");
}

void OperatorScore::recombine(Combinator c) {
    total = 0;
    for (auto& cs : per_condition) {
        cs.combined = combine(cs.avg_dist, cs.std_dist, c);
        total += cs.combined;
    }
}

namespace {

void check_set(const LatentSet& set, const char* what) {
    require(!set.latents.empty(), what, ": empty latent set");
    const size_t d = set.latents[0].size();
    for (const auto& l : set.latents)
        require(l.size() == d, what, ": ragged latent set (", l.size(), " vs ", d, ")");
}

} // namespace

std::vector<float> latent_mean(const LatentSet& set) {
    check_set(set, "latent_mean");
    const size_t d = set.dim();
    const double inv = 1.0 / static_cast<double>(set.size());
    std::vector<double> acc(d, 0.0);
    for (const auto& l : set.latents)
        for (size_t i = 0; i < d; ++i) acc[i] += l[i];
    std::vector<float> out(d);
    for (size_t i = 0; i < d; ++i) out[i] = static_cast<float>(acc[i] * inv);
    return out;
}

std::vector<float> latent_std(const LatentSet& set) {
    check_set(set, "latent_std");
    const size_t d = set.dim();
    const double inv = 1.0 / static_cast<double>(set.size());
    std::vector<double> mean(d, 0.0), sq(d, 0.0);
    for (const auto& l : set.latents)
        for (size_t i = 0; i < d; ++i) {
            mean[i] += l[i];
            sq[i] += static_cast<double>(l[i]) * l[i];
        }
    std::vector<float> out(d);
    for (size_t i = 0; i < d; ++i) {
        const double m = mean[i] * inv;
        const double var = std::max(sq[i] * inv - m * m, 0.0);
        out[i] = static_cast<float>(std::sqrt(var));
    }
    return out;
}

namespace {

double l2_distance(const std::vector<float>& a, const std::vector<float>& b,
                   const char* what) {
    require(a.size() == b.size(), what, ": vector length mismatch ", a.size(), " vs ",
            b.size());
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

} // namespace

double avg_distance(const LatentSet& orig, const LatentSet& mod) {
    return l2_distance(latent_mean(orig), latent_mean(mod), "avg_distance");
}

double std_distance(const LatentSet& orig, const LatentSet& mod) {
    return l2_distance(latent_std(orig), latent_std(mod), "std_distance");
}

double combine(double avg_dist, double std_dist, Combinator c) {
    require(avg_dist >= 0.0 && std_dist >= 0.0, "combine: negative distance (",
            avg_dist, ", ", std_dist, ")");
    switch (c) {
        case Combinator::Sum: return avg_dist + std_dist;
        case Combinator::Product: return avg_dist * std_dist;
        case Combinator::AvgOnly: return avg_dist;
        case Combinator::StdOnly: return std_dist;
    }
    fail("combine: bad combinator");
}

OperatorScore score_operator(const std::map<int, LatentSet>& orig_sets, OperatorGraph& graph,
                             const std::string& op_id, const ScoreConfig& cfg) {
    require(!orig_sets.empty(), "score_operator: no original latent sets");
    if (cfg.n_gen == 1) {
        static bool warned = false;
        if (!warned) {
            std::cerr << "[ldprune] warning: N_gen = 1 degrades the score to pure mean "
                         "distance (std vectors are zero)\n";
            warned = true;
        }
    }
    OperatorScore score;
    score.op_id = op_id;
    ModificationPlan plan = plan_modification(graph, op_id);
    for (const auto& [condition_id, orig] : orig_sets) {
        require(orig.condition_id == condition_id,
                "score_operator: original set condition mismatch");
        try {
            apply(graph, plan);
            LatentSet mod =
                generate_latents(graph, condition_id, cfg.n_gen, cfg.scheduler,
                                 cfg.base_seed);
            mod.provenance = op_id;
            restore(graph, plan);
            OperatorScore::CondScore cs;
            cs.condition_id = condition_id;
            cs.avg_dist = avg_distance(orig, mod);
            cs.std_dist = std_distance(orig, mod);
            cs.combined = combine(cs.avg_dist, cs.std_dist, cfg.combinator);
            score.per_condition.push_back(cs);
            score.total += cs.combined;
        } catch (const Error& e) {
            if (plan.applied) restore(graph, plan);
            fail("scoring '", op_id, "' under condition ", condition_id, ": ", e.what());
        }
    }
    return score;
}

} // namespace ldp
