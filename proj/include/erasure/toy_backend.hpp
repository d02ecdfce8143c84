#pragma once

// Self-contained miniature diffusion stack for desk-scale verification.
//
// Images are 16x16 grayscale drawings of simple shapes. The "VAE" is a fixed
// 2x2 Haar codec: channel 0 of the 4x8x8 latent is the 2x2 average pool and the
// other three carry the (scaled) detail coefficients, so decoding is exact.
// Prompts go through a closed-vocabulary encoder whose synonyms cluster around a
// per-concept direction; a small convolutional denoiser conditioned on the
// timestep and on attention-pooled text tokens is pretrained on the shapes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "erasure/backend.hpp"
#include "erasure/nn.hpp"

namespace erasure::toy {

inline constexpr std::size_t kImageSize = 16;
inline constexpr std::size_t kLatentChannels = 4;
inline constexpr std::size_t kLatentSize = 8;
inline constexpr std::size_t kTokenLength = 8;
inline constexpr std::size_t kTextWidth = 32;
inline constexpr std::size_t kTimesteps = 50;

/// Concepts the toy world can draw.
const std::vector<std::string>& shape_concepts();
/// Synonyms that the text encoder places near a concept's direction.
const std::vector<std::string>& concept_words(const std::string& shape_name);
/// Prompt templates with a "{}" placeholder, used for pretraining and prompt banks.
const std::vector<std::string>& prompt_templates();
std::string fill_template(const std::string& tmpl, const std::string& word);

/// Scaled-linear betas (sqrt beta linear from sqrt(0.00085) to sqrt(0.012)) on a
/// 1000-step grid, cumulative products taken every 1000/T steps; alpha_bar_T ~ 0.005.
NoiseSchedule toy_schedule(std::size_t steps = kTimesteps);
/// The kTimesteps schedule, built once.
const NoiseSchedule& toy_schedule_table();

class TextEncoder {
public:
    /// Raw [kTokenLength, kTextWidth] embedding: BOS, words, EOS, padding.
    Tensor encode(const std::string& prompt) const;
    static std::vector<std::string> tokenize(const std::string& prompt);
};

class HaarCodec {
public:
    Tensor encode(const Image& image) const;  // [4, 8, 8]
    Image decode(const Tensor& latent) const;
};

/// Renders one random instance of a shape concept.
Image render_shape(const std::string& shape_name, Rng& rng);

struct ShapeMatch {
    std::size_t area = 0;  // foreground pixels
    /// Best intersection-over-union against each concept's templates (all sizes, shifts of up to 2 pixels).
    std::vector<std::pair<std::string, double>> iou;
};
ShapeMatch match_shape(const Image& image);

/// Similarity logits (template IoU / 0.05) for labels; the label vocabulary follows the text encoder's
/// synonym clusters plus "blank" (aliases: nothing, empty, background).
class ShapeScorer {
public:
    std::vector<double> score(const Image& image, const std::vector<std::string>& labels) const;
    /// Argmax over the three shapes and blank.
    std::string predict(const Image& image) const;
};

struct Architecture {
    std::size_t hidden = 32;
    std::size_t time_dim = 32;
    std::size_t cond_dim = 64;
    std::size_t key_dim = 16;
};

/// Convolutional noise predictor with a fixed skip path: the output is
/// sqrt(1 - abar_t) x_t plus the network branch. Parameters of the text cross-attention pooling
/// are named "text_attn.*" (the "attention" train scope).
class DenoiserNet {
public:
    DenoiserNet(const Architecture& arch, Rng& rng);
    Tensor forward(const Tensor& latent, std::span<const std::size_t> timesteps, const Tensor& embedding) const;
    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }

private:
    Architecture arch_;
    ParameterSet params_;
    Linear time_in_, time_out_;
    Linear text_key_, text_value_;
    Tensor text_query_;
    Linear cond_proj_;
    Linear global_;
    Conv2d conv_in_, conv_mid_a_, conv_mid_b_, conv_out_;
    Tensor pos_embed_;
};

class FrozenDenoiser final : public DenoiserHandle {
public:
    FrozenDenoiser(const Architecture& arch, const StateDict& weights);
    Tensor predict(const Tensor& latent, std::span<const std::size_t> timesteps,
                   const Tensor& embedding) const override;
    StateDict weights() const override { return net_.parameters().state(); }

private:
    DenoiserNet net_;
};

class TrainableToyDenoiser final : public TrainableDenoiser {
public:
    TrainableToyDenoiser(const Architecture& arch, const StateDict& weights);
    Tensor predict(const Tensor& latent, std::span<const std::size_t> timesteps,
                   const Tensor& embedding) const override;
    StateDict weights() const override { return net_.parameters().state(); }
    void load_weights(const StateDict& weights) override;
    void set_train_scope(TrainScope scope) override;
    void zero_grad() override;
    void optimizer_step(const AdamSettings& settings) override;
    StateDict optimizer_state() const override { return adam_.state(); }
    void load_optimizer_state(const StateDict& state) override { adam_.load_state(state); }
    void reset_optimizer() override;

    /// Direct parameter access for gradient checks.
    ParameterSet& parameters() { return net_.parameters(); }

private:
    Architecture arch_;
    DenoiserNet net_;
    TrainScope scope_ = TrainScope::all;
    Adam adam_;
};

class ToyBackend final : public DiffusionBackend {
public:
    ToyBackend(std::uint64_t seed, const Architecture& arch, const StateDict& weights);

    std::string locator() const override { return "toy:" + std::to_string(seed_); }
    Tensor encode_text(const std::string& prompt) const override { return text_.encode(prompt); }
    Tensor encode_image(const Image& image) const override { return codec_.encode(image); }
    Image decode_latent(const Tensor& latent) const override { return codec_.decode(latent); }
    const NoiseSchedule& schedule() const override { return schedule_; }
    Shape latent_shape() const override { return {kLatentChannels, kLatentSize, kLatentSize}; }
    Shape embedding_shape() const override { return {kTokenLength, kTextWidth}; }
    std::size_t image_size() const override { return kImageSize; }
    std::shared_ptr<const DenoiserHandle> snapshot() const override;
    std::shared_ptr<TrainableDenoiser> trainable() const override { return trainable_; }
    std::string base_weights_hash() const override { return base_hash_; }
    SamplerSettings sampler_settings() const override { return sampler_; }

    const Architecture& architecture() const { return arch_; }
    std::shared_ptr<TrainableToyDenoiser> toy_trainable() const { return trainable_; }

private:
    std::uint64_t seed_;
    Architecture arch_;
    TextEncoder text_;
    HaarCodec codec_;
    NoiseSchedule schedule_;
    std::shared_ptr<TrainableToyDenoiser> trainable_;
    std::string base_hash_;
    SamplerSettings sampler_;
};

struct PretrainOptions {
    std::size_t steps = 2000;
    std::size_t batch = 16;
    double learning_rate = 2e-3;
    double uncond_probability = 0.15;
    /// Exponential moving average of the weights kept as the result; 0 disables.
    double ema_decay = 0.995;
    bool run_gate = true;
    std::size_t gate_samples = 100;  // per concept
    double gate_accuracy = 0.9;
    std::optional<std::filesystem::path> cache_dir;
    std::function<void(std::size_t step, double loss)> on_step;
};

struct GateReport {
    std::vector<std::pair<std::string, double>> accuracy;  // per concept
    bool passed = false;
};

/// Conditional sampling accuracy per concept under the shape classifier.
GateReport evaluate_gate(const ToyBackend& backend, std::size_t samples_per_concept, double threshold,
                         std::uint64_t seed);

/// Trains the toy denoiser from scratch (deterministic given seed and options) and
/// checks the sampling gate. With a cache directory, weights are stored under a
/// content-hash file name and reused.
std::unique_ptr<ToyBackend> pretrain_toy(std::uint64_t seed, const PretrainOptions& options = {});

/// Cache file used for (seed, options).
std::filesystem::path cache_path(std::uint64_t seed, const PretrainOptions& options);

}  // namespace erasure::toy
