#include "ldp/diffusion.hpp"

#include <cmath>

#include "ldp/error.hpp"
#include "ldp/ops.hpp"

namespace ldp {

void SchedulerConfig::validate() const {
    require(num_train_steps >= 2, "scheduler: num_train_steps must be >= 2");
    require(beta_start > 0.f && beta_end < 1.f && beta_start < beta_end,
            "scheduler: betas must satisfy 0 < start < end < 1, got ", beta_start, "..",
            beta_end);
    require(num_inference_steps >= 1 && num_inference_steps <= num_train_steps,
            "scheduler: num_inference_steps ", num_inference_steps, " outside [1,",
            num_train_steps, "]");
}

Schedule Schedule::make(const SchedulerConfig& cfg) {
    cfg.validate();
    Schedule s;
    s.betas.resize(cfg.num_train_steps);
    s.alphas_cumprod.resize(cfg.num_train_steps);
    double acc = 1.0;
    for (int t = 0; t < cfg.num_train_steps; ++t) {
        const double frac = static_cast<double>(t) / (cfg.num_train_steps - 1);
        const double beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
        s.betas[t] = static_cast<float>(beta);
        acc *= 1.0 - beta;
        s.alphas_cumprod[t] = static_cast<float>(acc);
    }
    return s;
}

std::vector<int> Schedule::inference_timesteps(int steps) const {
    const int T = static_cast<int>(betas.size());
    require(steps >= 1 && steps <= T, "inference steps ", steps, " outside [1,", T, "]");
    std::vector<int> ts(steps);
    const int ratio = T / steps;
    for (int i = 0; i < steps; ++i) ts[i] = (steps - 1 - i) * ratio;
    return ts; // descending, last is 0
}

Tensor add_noise(const Tensor& clean_latent, const Tensor& noise, int t,
                 const SchedulerConfig& cfg) {
    require(clean_latent.shape() == noise.shape(), "add_noise: clean ",
            shape_str(clean_latent.shape()), " vs noise ", shape_str(noise.shape()));
    require(t >= 0 && t < cfg.num_train_steps, "add_noise: t ", t, " outside [0,",
            cfg.num_train_steps, ")");
    const Schedule s = Schedule::make(cfg);
    const float a = std::sqrt(s.alphas_cumprod[t]);
    const float b = std::sqrt(1.f - s.alphas_cumprod[t]);
    return ops::add(ops::scale(clean_latent, a), ops::scale(noise, b));
}

Tensor initial_noise(int channels, int size, uint64_t base_seed, int condition_id,
                     int sample_index) {
    Rng rng(derive_seed(base_seed, 0x6e6f697365ull /*"noise"*/,
                        static_cast<uint64_t>(condition_id),
                        static_cast<uint64_t>(sample_index)));
    return Tensor::randn({1, channels, size, size}, rng);
}

namespace {

// One reverse step. eta = 0 DDIM: x_prev = sqrt(abar_prev) x0 + sqrt(1-abar_prev) eps.
Tensor ddim_step(const Tensor& x, const Tensor& eps, float abar_t, float abar_prev) {
    const float sa = std::sqrt(abar_t);
    const float sb = std::sqrt(1.f - abar_t);
    // x0 = (x - sb * eps) / sa
    Tensor x0 = ops::scale(ops::sub(x, ops::scale(eps, sb)), 1.f / sa);
    return ops::add(ops::scale(x0, std::sqrt(abar_prev)),
                    ops::scale(eps, std::sqrt(1.f - abar_prev)));
}

// DDPM ancestral step with fresh noise (qualitative generation only).
Tensor ddpm_step(const Tensor& x, const Tensor& eps, const Schedule& s, int t, Rng& rng) {
    const float beta = s.betas[t];
    const float alpha = 1.f - beta;
    const float abar = s.alphas_cumprod[t];
    Tensor mean = ops::scale(
        ops::sub(x, ops::scale(eps, beta / std::sqrt(1.f - abar))), 1.f / std::sqrt(alpha));
    if (t == 0) return mean;
    Tensor z = Tensor::randn(x.shape(), rng);
    return ops::add(mean, ops::scale(z, std::sqrt(beta)));
}

} // namespace

Tensor generate_one_latent(OperatorGraph& graph, int condition_id, int sample_index,
                           const SchedulerConfig& cfg, uint64_t base_seed) {
    const Schedule s = Schedule::make(cfg);
    const auto ts = s.inference_timesteps(cfg.num_inference_steps);
    Tensor x = initial_noise(graph.latent_channels, graph.latent_size, base_seed,
                             condition_id, sample_index);
    Rng step_rng(derive_seed(base_seed, 0x6464706dull /*"ddpm"*/,
                             static_cast<uint64_t>(condition_id),
                             static_cast<uint64_t>(sample_index)));
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        Tensor eps = unet_forward(graph, x, t, condition_id);
        if (cfg.sampler == Sampler::Ddim) {
            const float abar_prev =
                (i + 1 < ts.size()) ? s.alphas_cumprod[ts[i + 1]] : 1.f;
            x = ddim_step(x, eps, s.alphas_cumprod[t], abar_prev);
        } else {
            x = ddpm_step(x, eps, s, t, step_rng);
        }
    }
    return x;
}

LatentSet generate_latents(OperatorGraph& graph, int condition_id, int n,
                           const SchedulerConfig& cfg, uint64_t base_seed) {
    require(n >= 1, "generate_latents: n must be >= 1, got ", n);
    LatentSet set;
    set.condition_id = condition_id;
    set.latents.reserve(n);
    for (int i = 0; i < n; ++i) {
        Tensor x = generate_one_latent(graph, condition_id, i, cfg, base_seed);
        set.latents.push_back(x.values());
    }
    return set;
}

NoisedSample sample_noised(const Tensor& clean_latent, Rng& rng,
                           const SchedulerConfig& cfg) {
    require(clean_latent.rank() == 4, "sample_noised: clean latent must be NCHW");
    NoisedSample s;
    s.t = static_cast<int>(rng.uniform_int(cfg.num_train_steps));
    s.noise = Tensor::randn(clean_latent.shape(), rng);
    s.noisy = add_noise(clean_latent, s.noise, s.t, cfg);
    return s;
}

Tensor training_loss(OperatorGraph& graph, const Tensor& clean_latent,
                     const std::vector<int>& condition_ids, Rng& rng,
                     const SchedulerConfig& cfg) {
    NoisedSample s = sample_noised(clean_latent, rng, cfg);
    std::vector<int> ts(clean_latent.dim(0), s.t);
    Tensor pred = unet_forward(graph, s.noisy, ts, condition_ids);
    return ops::mse(pred, s.noise);
}

} // namespace ldp
