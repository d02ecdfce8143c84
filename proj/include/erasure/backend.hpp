#pragma once

// Abstraction of a latent diffusion stack: text encoder, image-latent codec,
// cumulative noise schedule and a denoiser available both as a frozen snapshot and
// as a trainable handle.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "erasure/nn.hpp"
#include "erasure/tensor.hpp"

namespace erasure {

/// Pixels in [-1, 1], row-major height x width x channels.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<double> pixels;

    bool operator==(const Image&) const = default;
};

/// Binary PGM (1 channel) or PPM (3 channels), 8 bits per sample.
void write_image(const std::filesystem::path& path, const Image& image);
Image read_image(const std::filesystem::path& path);

class NoiseSchedule {
public:
    NoiseSchedule() = default;
    /// Table of cumulative products alpha_bar_t, t = 0..T-1; entries in (0, 1], non-increasing.
    static NoiseSchedule from_alpha_bars(std::vector<double> alpha_bars);
    static NoiseSchedule linear_betas(double beta_start, double beta_end, std::size_t steps);

    std::size_t size() const { return alpha_bars_.size(); }
    double alpha_bar(std::size_t t) const;
    const std::vector<double>& table() const { return alpha_bars_; }

private:
    std::vector<double> alpha_bars_;
};

/// A noise predictor epsilon(latent, t, embedding).
class DenoiserHandle {
public:
    virtual ~DenoiserHandle() = default;
    /// latent [B,C,H,W], one timestep per batch item, embedding [B,L,d] -> [B,C,H,W].
    virtual Tensor predict(const Tensor& latent, std::span<const std::size_t> timesteps,
                           const Tensor& embedding) const = 0;
    virtual StateDict weights() const = 0;
    virtual std::string content_hash() const { return state_dict_hash(weights()); }
};

enum class TrainScope { all, attention };

TrainScope parse_train_scope(const std::string& text);
std::string to_string(TrainScope scope);

/// Denoiser whose parameters the trainer updates. Gradients reach it through the
/// tensor graph of `predict`; the optimizer lives with the parameters.
class TrainableDenoiser : public DenoiserHandle {
public:
    virtual void load_weights(const StateDict& weights) = 0;
    /// Selects the parameter subset updated by `optimizer_step`; resets optimizer state.
    virtual void set_train_scope(TrainScope scope) = 0;
    virtual void zero_grad() = 0;
    virtual void optimizer_step(const AdamSettings& settings) = 0;
    virtual StateDict optimizer_state() const = 0;
    virtual void load_optimizer_state(const StateDict& state) = 0;
    virtual void reset_optimizer() = 0;
};

struct SamplerSettings {
    double guidance_scale = 3.0;
    /// Clamp of the predicted clean latent at every step; <= 0 disables.
    double clip_value = 1.0;
};

class DiffusionBackend {
public:
    virtual ~DiffusionBackend() = default;

    virtual std::string locator() const = 0;
    virtual Tensor encode_text(const std::string& prompt) const = 0;  // [L, d], not normalized
    virtual Tensor encode_image(const Image& image) const = 0;        // [C, H, W]
    virtual Image decode_latent(const Tensor& latent) const = 0;      // [C, H, W]
    virtual const NoiseSchedule& schedule() const = 0;
    virtual Shape latent_shape() const = 0;     // [C, H, W]
    virtual Shape embedding_shape() const = 0;  // [L, d]
    virtual std::size_t image_size() const = 0;

    /// Value copy of the trainable weights at call time.
    virtual std::shared_ptr<const DenoiserHandle> snapshot() const = 0;
    virtual std::shared_ptr<TrainableDenoiser> trainable() const = 0;
    /// Content hash of the pretrained weights the backend was loaded with.
    virtual std::string base_weights_hash() const = 0;

    virtual SamplerSettings sampler_settings() const { return {}; }
    /// Text-to-image sampling with the current trainable weights.
    virtual std::vector<Image> sample_batch(const std::vector<std::string>& prompts,
                                            const std::vector<std::uint64_t>& seeds) const;
    Image sample(const std::string& prompt, std::uint64_t seed) const;
};

/// Normalized condition for a prompt, identical to how bank entries are normalized.
Tensor condition_embedding(const DiffusionBackend& backend, const std::string& prompt);

/// Deterministic DDIM (eta = 0) over every schedule step with classifier-free guidance.
/// embeddings: normalized [L, d] per image; the unconditional branch uses the empty prompt.
std::vector<Tensor> ddim_sample_latents(const DiffusionBackend& backend, const DenoiserHandle& denoiser,
                                        const std::vector<Tensor>& embeddings,
                                        const std::vector<std::uint64_t>& seeds, const SamplerSettings& settings);

/// Stacks [L, d] embeddings into [B, L, d].
Tensor stack_embeddings(const std::vector<Tensor>& embeddings);

}  // namespace erasure
