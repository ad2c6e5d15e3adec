#pragma once

#include <cstdint>
#include <vector>

#include "ldp/graph.hpp"

namespace ldp {

// Toy conditional U-Net configuration. The default is three resolution
// levels over 4x16x16 latents with transformer blocks at the two coarsest
// levels, so every prunable operator category appears in the graph.
struct UNetSpec {
    int latent_channels = 4;
    int latent_size = 16;
    int base_width = 32;
    std::vector<int> channel_mult = {1, 2, 4};
    std::vector<int> attention_levels = {1, 2};
    int res_blocks_per_level = 2;
    int cond_dim = 64;
    int cond_tokens = 4;
    int num_conditions = 8;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int width(int level) const { return base_width * channel_mult[level]; }
    int time_dim() const { return 4 * base_width; }
    bool has_attention(int level) const;
    void validate() const;
    bool operator==(const UNetSpec&) const = default;
};

// Deterministic given the seed: same seed, bit-identical parameters.
OperatorGraph build_unet(const UNetSpec& spec, uint64_t seed);

// Re-randomizes every parameter in place with the builder's init scheme
// (the "reset Unet" baseline for from-scratch training).
void reinit_params(OperatorGraph& g, uint64_t seed);

} // namespace ldp
