#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ldp/graph.hpp"
#include "ldp/rng.hpp"
#include "ldp/tensor.hpp"

namespace ldp {

enum class Sampler { Ddim, Ddpm };

// Linear-beta DDPM schedule; DDIM (eta = 0) is the default sampler so every
// scoring run is deterministic.
struct SchedulerConfig {
    int num_train_steps = 1000;
    float beta_start = 1e-4f;
    float beta_end = 2e-2f;
    int num_inference_steps = 20;
    Sampler sampler = Sampler::Ddim;

    void validate() const;
    bool operator==(const SchedulerConfig&) const = default;
};

struct Schedule {
    std::vector<float> betas;          // strictly increasing, in (0,1)
    std::vector<float> alphas_cumprod; // strictly decreasing

    static Schedule make(const SchedulerConfig& cfg);
    // Inference timesteps, descending (leading-spaced DDIM schedule).
    std::vector<int> inference_timesteps(int steps) const;
};

// Ordered latents generated under one condition by one model variant.
struct LatentSet {
    std::vector<std::vector<float>> latents; // each flattened, equal length
    int condition_id = 0;
    std::string provenance = "original"; // or the modified operator id

    size_t size() const { return latents.size(); }
    size_t dim() const { return latents.empty() ? 0 : latents[0].size(); }
};

// output = sqrt(abar_t) * clean + sqrt(1 - abar_t) * noise
Tensor add_noise(const Tensor& clean_latent, const Tensor& noise, int t,
                 const SchedulerConfig& cfg);

// Initial noise for sample i under a condition: a pure function of
// (base_seed, condition_id, sample_index) so original/modified runs pair up.
Tensor initial_noise(int channels, int size, uint64_t base_seed, int condition_id,
                     int sample_index);

// Runs n full reverse processes (batch 1 each) and returns the final latents.
// Decoding never happens anywhere in this toolkit; scoring reads latents only.
LatentSet generate_latents(OperatorGraph& graph, int condition_id, int n,
                           const SchedulerConfig& cfg, uint64_t base_seed);

// Single-sample trajectory, exposed for latency measurement.
Tensor generate_one_latent(OperatorGraph& graph, int condition_id, int sample_index,
                           const SchedulerConfig& cfg, uint64_t base_seed);

// One training draw: uniform timestep, unit-Gaussian noise, noised latent.
struct NoisedSample {
    Tensor noisy;
    Tensor noise;
    int t = 0;
};
NoisedSample sample_noised(const Tensor& clean_latent, Rng& rng, const SchedulerConfig& cfg);

// Epsilon-prediction MSE at a uniformly sampled timestep.
Tensor training_loss(OperatorGraph& graph, const Tensor& clean_latent,
                     const std::vector<int>& condition_ids, Rng& rng,
                     const SchedulerConfig& cfg);

} // namespace ldp
