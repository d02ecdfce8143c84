#pragma once

// Negative-guidance target from the frozen snapshot and the erasure loss of the
// trainable denoiser against it.

#include <span>
#include <string>

#include "erasure/backend.hpp"
#include "erasure/tensor.hpp"

namespace erasure {

struct GuidanceSpec {
    double gamma = 1.0;
    Tensor uncond_embedding;  // [L, d], normalized encoding of the empty prompt
};

/// Guidance spec whose unconditional embedding is the backend's normalized "" encoding.
GuidanceSpec make_guidance(const DiffusionBackend& backend, double gamma);

enum class LossReduction { mean, sum };
LossReduction parse_loss_reduction(const std::string& text);
std::string to_string(LossReduction reduction);

/// eps(z, t, uncond) - gamma * (eps(z, t, cond) - eps(z, t, uncond)) from exactly two
/// frozen passes. z_fused is detached first; the result carries no gradient.
/// cond_batch: [B, L, d].
Tensor build_target(const DenoiserHandle& frozen, const Tensor& z_fused, std::span<const std::size_t> timesteps,
                    const Tensor& cond_batch, const GuidanceSpec& spec);

/// ||eps*(z_fused, t, cond) - target||^2 with mean or sum reduction; differentiable
/// with respect to the trainable denoiser and, through z_fused, the fusion branch.
Tensor erasure_loss(const DenoiserHandle& trainable, const Tensor& z_fused, std::span<const std::size_t> timesteps,
                    const Tensor& cond_batch, const Tensor& target, LossReduction reduction = LossReduction::mean);

}  // namespace erasure
