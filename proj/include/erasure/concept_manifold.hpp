#pragma once

// Prompt banks and the convex concept manifold spanned by their embeddings.
//
// A concept is represented by N encoded prompts. Training conditions are drawn as
// convex combinations of the bank entries with symmetric Dirichlet weights of
// concentration 1/tau. Note the direction: a *large* tau gives a *small*
// concentration and therefore sparse weights that pick out few prompts.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "erasure/rng.hpp"
#include "erasure/tensor.hpp"

namespace erasure {

inline constexpr double kTokenNormEpsilon = 1e-5;
inline constexpr double kDefaultNoiseStd = 0.01;

/// Maps a prompt to an [L, d] token embedding.
using TextEncoderFn = std::function<Tensor(const std::string&)>;

/// Per-token layer normalization over the embedding axis (no affine, eps 1e-5).
/// Accepts [L, d] or [N, L, d]; returns a graph-free tensor of the same shape.
Tensor normalize_tokens(const Tensor& embedding);

/// Reads a prompt file: one prompt per line, '#' comment lines and blank lines skipped.
std::vector<std::string> read_prompt_file(const std::filesystem::path& path);

struct PromptBank {
    std::string concept_name;
    std::vector<std::string> prompts;
    Tensor embeddings;  // [N, L, d]
    bool normalized = false;

    std::size_t size() const { return prompts.size(); }
    std::size_t token_length() const { return embeddings.dim(1); }
    std::size_t width() const { return embeddings.dim(2); }
    /// Bank entry i as an [L, d] tensor.
    Tensor entry(std::size_t i) const;
};

PromptBank build_prompt_bank(const std::vector<std::string>& prompts, const TextEncoderFn& encoder,
                             std::string concept_name = {});

class DirichletSpec {
public:
    explicit DirichletSpec(double tau);
    double tau() const { return tau_; }
    /// Common entry of the symmetric concentration vector, 1 / tau.
    double concentration() const { return 1.0 / tau_; }
    std::vector<double> concentration_vector(std::size_t n) const;

private:
    double tau_;
};

/// Draws w ~ Dirichlet((1/tau) 1_N) through normalized Gamma variates, computed in
/// log space so that very small concentrations do not underflow.
std::vector<double> sample_weights(const DirichletSpec& spec, std::size_t n_prompts, Rng& rng);

struct ConceptEmbedding {
    Tensor values;        // [L, d], final normalized condition
    Tensor interpolated;  // [L, d], convex combination before noise and normalization
    std::vector<double> weights_used;
    double noise_std = 0.0;
    std::uint64_t seed = 0;  // fingerprint of the RNG state the draw started from
};

/// Convex combination sum_i w_i e_i, clamped into the coordinate-wise hull of the
/// bank so that rounding never leaves it.
Tensor convex_combination(const PromptBank& bank, const std::vector<double>& weights);

ConceptEmbedding sample_concept_embedding(const PromptBank& bank, const DirichletSpec& spec, double noise_std,
                                          Rng& rng);

struct SimilarityStats {
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t n_samples = 0;
};

/// Mean-pools tokens of an [L, d] embedding to a d-vector.
std::vector<double> mean_pool_tokens(const Tensor& embedding);
double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

/// Cosine similarity between noise-free manifold samples and a target embedding,
/// both mean-pooled over tokens.
SimilarityStats diagnose_manifold(const PromptBank& bank, const DirichletSpec& spec, const Tensor& target_embedding,
                                  std::size_t n_samples, Rng& rng);

}  // namespace erasure
