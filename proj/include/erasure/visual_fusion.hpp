#pragma once

// Multi-scale tokenization of a noised reference latent, transformer fusion and
// the residual merge z_fused = z + lambda * t'.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "erasure/backend.hpp"
#include "erasure/nn.hpp"
#include "erasure/rng.hpp"
#include "erasure/tensor.hpp"

namespace erasure {

struct ScaleSet {
    std::vector<double> scales{1.0, 0.75, 0.5};

    /// Throws ConfigError unless scales start at 1.0, lie in (0, 1] and strictly decrease.
    void validate() const;
};

/// (H_s, W_s) = (max(1, round(H s)), max(1, round(W s))).
std::pair<std::size_t, std::size_t> scaled_size(std::size_t height, std::size_t width, double scale);

/// Total token count sum_s H_s W_s.
std::size_t token_count(std::size_t height, std::size_t width, const ScaleSet& scales);

struct LatentGrid {
    Tensor values;  // [B, C, H, W]
    std::size_t timestep = 0;
    std::string source_id;
};

struct TokenSequence {
    Tensor tokens;  // [B, N, C]
    std::vector<std::size_t> per_scale_lengths;
    bool positional_added = false;
};

struct FusedLatent {
    Tensor values;  // [B, C, H, W]
    double lambda_used = 0.0;
};

/// Bilinear resize with half-pixel centers and edge clamping, no antialiasing.
/// Same-size requests return an exact copy.
Tensor bilinear_resize(const Tensor& grid, std::size_t out_height, std::size_t out_width);

TokenSequence make_multiscale_tokens(const LatentGrid& z, const ScaleSet& scales);

/// Interleaved sinusoidal table: row n, column 2i -> sin(n / 10000^(2i/C)), 2i+1 -> cos.
std::vector<double> sinusoidal_table(std::size_t length, std::size_t channels);
TokenSequence add_positional(const TokenSequence& tokens);

struct FusionSettings {
    std::size_t depth = 2;
    std::size_t heads = 4;
    double ffn_ratio = 4.0;
};

/// Pre-norm transformer encoder over [B, N, C] token sequences followed by a
/// final layer norm and a zero-initialized output projection.
class FusionTransformer {
public:
    FusionTransformer() = default;
    FusionTransformer(std::size_t channels, const FusionSettings& settings, Rng& rng);

    Tensor forward(const Tensor& tokens) const;

    std::size_t channels() const { return channels_; }
    const FusionSettings& settings() const { return settings_; }
    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }

private:
    struct Block {
        LayerNorm norm_attn, norm_ffn;
        Linear query, key, value, attn_out;
        Linear ffn_in, ffn_out;
    };

    Tensor attention(const Block& block, const Tensor& x) const;

    std::size_t channels_ = 0;
    FusionSettings settings_;
    ParameterSet params_;
    std::vector<Block> blocks_;
    LayerNorm final_norm_;
    Linear projection_;
};

FusedLatent fuse(const LatentGrid& z, const TokenSequence& tokens, const FusionTransformer& transformer,
                 double lambda);

/// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps with eps ~ N(0, I) drawn from rng.
LatentGrid noise_latent(const Tensor& clean_latent, std::size_t timestep, const NoiseSchedule& schedule, Rng& rng);

}  // namespace erasure
