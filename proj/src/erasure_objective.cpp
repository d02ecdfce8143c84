#include "erasure/erasure_objective.hpp"

#include "erasure/errors.hpp"

namespace erasure {

GuidanceSpec make_guidance(const DiffusionBackend& backend, double gamma) {
    return {gamma, condition_embedding(backend, "")};
}

LossReduction parse_loss_reduction(const std::string& text) {
    if (text == "mean") return LossReduction::mean;
    if (text == "sum") return LossReduction::sum;
    throw ConfigError("loss_reduction must be 'mean' or 'sum', got '" + text + "'");
}

std::string to_string(LossReduction reduction) { return reduction == LossReduction::mean ? "mean" : "sum"; }

Tensor build_target(const DenoiserHandle& frozen, const Tensor& z_fused, std::span<const std::size_t> timesteps,
                    const Tensor& cond_batch, const GuidanceSpec& spec) {
    if (cond_batch.rank() != 3) throw ContractError("conditional embeddings must be [B,L,d]");
    const std::size_t batch = cond_batch.dim(0);
    if (!spec.uncond_embedding.defined() ||
        spec.uncond_embedding.shape() != Shape{cond_batch.dim(1), cond_batch.dim(2)})
        throw ContractError("unconditional embedding shape does not match the conditional embedding");

    NoGradGuard guard;
    const Tensor z = z_fused.detach();
    const Tensor cond = frozen.predict(z, timesteps, cond_batch);
    const Tensor uncond = frozen.predict(z, timesteps, stack_embeddings(std::vector<Tensor>(batch, spec.uncond_embedding)));
    if (cond.shape() != uncond.shape() || cond.shape() != z.shape())
        throw BackendError("frozen predictions disagree in shape: " + shape_string(cond.shape()) + " vs " +
                           shape_string(uncond.shape()));
    const auto c = cond.data(), u = uncond.data();
    std::vector<double> target(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) target[i] = u[i] - spec.gamma * (c[i] - u[i]);
    return Tensor::from(z.shape(), std::move(target));
}

Tensor erasure_loss(const DenoiserHandle& trainable, const Tensor& z_fused, std::span<const std::size_t> timesteps,
                    const Tensor& cond_batch, const Tensor& target, LossReduction reduction) {
    if (target.requires_grad()) throw ContractError("erasure target must be detached");
    const Tensor pred = trainable.predict(z_fused, timesteps, cond_batch);
    if (pred.shape() != target.shape())
        throw ContractError("prediction " + shape_string(pred.shape()) + " vs target " + shape_string(target.shape()));
    const Tensor total = ops::sum_squares(ops::sub(pred, target));
    return reduction == LossReduction::sum ? total : ops::scale(total, 1.0 / static_cast<double>(pred.numel()));
}

}  // namespace erasure
