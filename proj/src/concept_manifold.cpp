#include "erasure/concept_manifold.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "erasure/errors.hpp"

namespace erasure {

Tensor normalize_tokens(const Tensor& embedding) {
    if (embedding.rank() < 2) throw ContractError("normalize_tokens: expected [.., L, d]");
    const std::size_t width = embedding.shape().back();
    return Tensor::from(embedding.shape(), layer_norm_values(embedding.data(), width, kTokenNormEpsilon));
}

std::vector<std::string> read_prompt_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open prompt file " + path.string());
    std::vector<std::string> prompts;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto last = line.find_last_not_of(" \t");
        prompts.push_back(line.substr(first, last - first + 1));
    }
    return prompts;
}

Tensor PromptBank::entry(std::size_t i) const {
    NoGradGuard guard;
    return ops::reshape(ops::slice0(embeddings, i, i + 1), {token_length(), width()});
}

PromptBank build_prompt_bank(const std::vector<std::string>& prompts, const TextEncoderFn& encoder,
                             std::string concept_name) {
    if (prompts.empty()) throw ConfigError("prompt bank needs at least one prompt");
    std::vector<double> values;
    Shape token_shape;
    for (const auto& prompt : prompts) {
        const Tensor e = encoder(prompt);
        if (e.rank() != 2) throw BackendError("text encoder must return [L, d], got " + shape_string(e.shape()));
        if (token_shape.empty()) {
            token_shape = e.shape();
        } else if (e.shape() != token_shape) {
            throw BackendError("text encoder returned " + shape_string(e.shape()) + " for \"" + prompt +
                               "\" but " + shape_string(token_shape) + " for earlier prompts");
        }
        const auto normalized = layer_norm_values(e.data(), token_shape[1], kTokenNormEpsilon);
        values.insert(values.end(), normalized.begin(), normalized.end());
    }
    PromptBank bank;
    bank.concept_name = std::move(concept_name);
    bank.prompts = prompts;
    bank.embeddings = Tensor::from({prompts.size(), token_shape[0], token_shape[1]}, std::move(values));
    bank.normalized = true;
    return bank;
}

DirichletSpec::DirichletSpec(double tau) : tau_(tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be a positive finite number");
}

std::vector<double> DirichletSpec::concentration_vector(std::size_t n) const {
    return std::vector<double>(n, concentration());
}

std::vector<double> sample_weights(const DirichletSpec& spec, std::size_t n_prompts, Rng& rng) {
    if (n_prompts == 0) throw ConfigError("sample_weights: n_prompts must be >= 1");
    if (n_prompts == 1) return {1.0};
    const double alpha = spec.concentration();
    // For alpha < 1 use G(alpha) = G(alpha + 1) * U^(1/alpha).
    const bool boosted = alpha < 1.0;
    std::gamma_distribution<double> gamma(boosted ? alpha + 1.0 : alpha, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<double> log_g(n_prompts);
    for (auto& lg : log_g) {
        double g = gamma(rng);
        while (g <= 0.0) g = gamma(rng);
        lg = std::log(g);
        if (boosted) {
            double u = uniform(rng);
            while (u <= 0.0) u = uniform(rng);
            lg += std::log(u) / alpha;
        }
    }
    const double hi = *std::max_element(log_g.begin(), log_g.end());
    double total = 0.0;
    std::vector<double> w(n_prompts);
    for (std::size_t i = 0; i < n_prompts; ++i) total += w[i] = std::exp(log_g[i] - hi);
    for (auto& v : w) v /= total;
    return w;
}

Tensor convex_combination(const PromptBank& bank, const std::vector<double>& weights) {
    if (weights.size() != bank.size()) throw ContractError("convex_combination: weight count != bank size");
    const std::size_t stride = bank.token_length() * bank.width();
    const auto all = bank.embeddings.data();
    std::vector<double> out(stride, 0.0);
    std::vector<double> lo(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(stride));
    std::vector<double> hi = lo;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        const double* e = all.data() + i * stride;
        for (std::size_t j = 0; j < stride; ++j) {
            out[j] += weights[i] * e[j];
            lo[j] = std::min(lo[j], e[j]);
            hi[j] = std::max(hi[j], e[j]);
        }
    }
    // Rounding in the weighted sum can land one ulp outside the hull.
    for (std::size_t j = 0; j < stride; ++j) out[j] = std::clamp(out[j], lo[j], hi[j]);
    return Tensor::from({bank.token_length(), bank.width()}, std::move(out));
}

ConceptEmbedding sample_concept_embedding(const PromptBank& bank, const DirichletSpec& spec, double noise_std,
                                          Rng& rng) {
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std must be >= 0");
    if (bank.size() == 0) throw ContractError("empty prompt bank");
    if (!bank.normalized) throw ContractError("prompt bank must be normalized before sampling");

    ConceptEmbedding out;
    out.seed = rng_fingerprint(rng);
    out.noise_std = noise_std;
    out.weights_used = sample_weights(spec, bank.size(), rng);
    out.interpolated = convex_combination(bank, out.weights_used);

    std::vector<double> perturbed(out.interpolated.data().begin(), out.interpolated.data().end());
    if (noise_std > 0.0) {
        std::normal_distribution<double> normal(0.0, noise_std);
        for (auto& v : perturbed) v += normal(rng);
    }
    out.values = Tensor::from(out.interpolated.shape(), layer_norm_values(perturbed, bank.width(), kTokenNormEpsilon));
    return out;
}

std::vector<double> mean_pool_tokens(const Tensor& embedding) {
    if (embedding.rank() != 2) throw ContractError("mean_pool_tokens: expected [L, d]");
    const std::size_t l = embedding.dim(0), d = embedding.dim(1);
    std::vector<double> pooled(d, 0.0);
    for (std::size_t t = 0; t < l; ++t)
        for (std::size_t j = 0; j < d; ++j) pooled[j] += embedding.data()[t * d + j];
    for (auto& v : pooled) v /= static_cast<double>(l);
    return pooled;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ContractError("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

SimilarityStats diagnose_manifold(const PromptBank& bank, const DirichletSpec& spec, const Tensor& target_embedding,
                                  std::size_t n_samples, Rng& rng) {
    if (n_samples < 1) throw ConfigError("diagnose_manifold: n_samples must be >= 1");
    if (target_embedding.rank() != 2 || target_embedding.dim(1) != bank.width())
        throw ContractError("target embedding shape " + shape_string(target_embedding.shape()) +
                            " does not match the bank token width");
    const auto target = mean_pool_tokens(target_embedding);
    std::vector<double> sims;
    sims.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        const auto sample = sample_concept_embedding(bank, spec, 0.0, rng);
        sims.push_back(cosine_similarity(mean_pool_tokens(sample.values), target));
    }
    SimilarityStats stats;
    stats.n_samples = n_samples;
    for (double s : sims) stats.mean += s;
    stats.mean /= static_cast<double>(n_samples);
    if (n_samples > 1) {
        double ss = 0.0;
        for (double s : sims) ss += (s - stats.mean) * (s - stats.mean);
        stats.stddev = std::sqrt(ss / static_cast<double>(n_samples - 1));
    }
    return stats;
}

}  // namespace erasure
