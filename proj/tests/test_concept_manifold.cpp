#include <cmath>
#include <fstream>

#include "doctest.h"
#include "erasure/concept_manifold.hpp"
#include "erasure/errors.hpp"
#include "helpers.hpp"

using namespace erasure;

namespace {

// Encoder whose embedding of prompt "p<i>" is a fixed random [L, d] matrix.
Tensor lookup_encoder(const std::string& prompt) {
    Rng rng(fnv1a64(prompt));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(4 * 6);
    for (auto& x : v) x = normal(rng);
    return Tensor::from({4, 6}, std::move(v));
}

PromptBank small_bank(std::size_t n) {
    std::vector<std::string> prompts;
    for (std::size_t i = 0; i < n; ++i) prompts.push_back("p" + std::to_string(i));
    return build_prompt_bank(prompts, lookup_encoder, "c");
}

struct Moments {
    std::vector<double> mean;
    std::vector<double> var;
};

Moments weight_moments(double tau, std::size_t n, std::size_t draws, std::uint64_t seed) {
    Rng rng(seed);
    const DirichletSpec spec(tau);
    Moments m{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
    std::vector<std::vector<double>> all;
    for (std::size_t k = 0; k < draws; ++k) all.push_back(sample_weights(spec, n, rng));
    for (const auto& w : all)
        for (std::size_t i = 0; i < n; ++i) m.mean[i] += w[i] / static_cast<double>(draws);
    for (const auto& w : all)
        for (std::size_t i = 0; i < n; ++i)
            m.var[i] += (w[i] - m.mean[i]) * (w[i] - m.mean[i]) / static_cast<double>(draws - 1);
    return m;
}

}  // namespace

TEST_SUITE("concept_manifold") {

TEST_CASE("weights lie on the simplex for every temperature") {
    Rng rng(11);
    for (double tau : {0.05, 0.25, 0.7, 2.0, 20.0, 200.0}) {
        const DirichletSpec spec(tau);
        for (std::size_t n : {2u, 4u, 9u}) {
            for (int k = 0; k < 500; ++k) {
                const auto w = sample_weights(spec, n, rng);
                REQUIRE(w.size() == n);
                double sum = 0.0;
                for (double x : w) {
                    CHECK(x >= 0.0);
                    CHECK(std::isfinite(x));
                    sum += x;
                }
                CHECK(std::abs(sum - 1.0) <= 1e-12);
            }
        }
    }
}

TEST_CASE("a single prompt gets weight one") {
    Rng rng(1);
    CHECK(sample_weights(DirichletSpec(0.7), 1, rng) == std::vector<double>{1.0});
}

TEST_CASE("concentration is the reciprocal temperature") {
    const DirichletSpec spec(0.7);
    CHECK(spec.concentration() == doctest::Approx(1.0 / 0.7));
    CHECK(spec.concentration_vector(3) == std::vector<double>(3, 1.0 / 0.7));
    CHECK_THROWS_AS(DirichletSpec(0.0), ConfigError);
    CHECK_THROWS_AS(DirichletSpec(-1.0), ConfigError);
}

TEST_CASE("weight moments match the symmetric Dirichlet") {
    // Var(w_i) = (N - 1) / (N^2 (N alpha + 1)) for Dirichlet(alpha 1_N).
    const std::size_t n = 4, draws = 40000;
    for (double tau : {0.25, 0.7, 2.0}) {
        const double alpha = 1.0 / tau;
        const double expected_var = (n - 1.0) / (n * n * (n * alpha + 1.0));
        const auto m = weight_moments(tau, n, draws, 99);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(std::abs(m.mean[i] - 0.25) < 4.0 * std::sqrt(expected_var / draws));
            CHECK(m.var[i] == doctest::Approx(expected_var).epsilon(0.05));
        }
    }
}

TEST_CASE("larger temperature gives sparser weights") {
    const auto low = weight_moments(0.25, 4, 10000, 3);
    const auto mid = weight_moments(0.7, 4, 10000, 3);
    const auto high = weight_moments(2.0, 4, 10000, 3);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(low.var[i] < mid.var[i]);
        CHECK(mid.var[i] < high.var[i]);
    }
}

TEST_CASE("tiny concentrations stay finite") {
    Rng rng(4);
    const DirichletSpec spec(1000.0);
    for (int k = 0; k < 200; ++k) {
        const auto w = sample_weights(spec, 5, rng);
        double sum = 0.0;
        for (double x : w) sum += x;
        CHECK(std::abs(sum - 1.0) < 1e-12);
        CHECK(*std::max_element(w.begin(), w.end()) > 0.5);
    }
}

TEST_CASE("sampling is deterministic given the seed") {
    const auto bank = small_bank(5);
    Rng a(42), b(42);
    const auto x = sample_concept_embedding(bank, DirichletSpec(0.7), 0.01, a);
    const auto y = sample_concept_embedding(bank, DirichletSpec(0.7), 0.01, b);
    CHECK(x.weights_used == y.weights_used);
    CHECK(std::equal(x.values.data().begin(), x.values.data().end(), y.values.data().begin()));
    CHECK(x.seed == y.seed);
}

TEST_CASE("interpolated embeddings stay inside the coordinate-wise hull") {
    const auto bank = small_bank(5);
    const std::size_t stride = bank.token_length() * bank.width();
    const auto all = bank.embeddings.data();
    Rng rng(8);
    for (int k = 0; k < 300; ++k) {
        const auto s = sample_concept_embedding(bank, DirichletSpec(0.7), 0.0, rng);
        for (std::size_t j = 0; j < stride; ++j) {
            double lo = all[j], hi = all[j];
            for (std::size_t i = 1; i < bank.size(); ++i) {
                lo = std::min(lo, all[i * stride + j]);
                hi = std::max(hi, all[i * stride + j]);
            }
            CHECK(s.interpolated.data()[j] >= lo);
            CHECK(s.interpolated.data()[j] <= hi);
        }
    }
}

TEST_CASE("convex combination matches a hand-computed mix") {
    const auto bank = small_bank(3);
    const std::vector<double> w{0.5, 0.25, 0.25};
    const auto mix = convex_combination(bank, w);
    const std::size_t stride = bank.token_length() * bank.width();
    for (std::size_t j = 0; j < stride; ++j) {
        const auto e = bank.embeddings.data();
        CHECK(mix.data()[j] == doctest::Approx(0.5 * e[j] + 0.25 * e[stride + j] + 0.25 * e[2 * stride + j]));
    }
    CHECK_THROWS_AS(convex_combination(bank, {1.0}), ContractError);
}

TEST_CASE("one-hot weights reproduce the bank entry") {
    const auto bank = small_bank(4);
    const auto mix = convex_combination(bank, {0.0, 0.0, 1.0, 0.0});
    const auto e = bank.entry(2);
    CHECK(std::equal(mix.data().begin(), mix.data().end(), e.data().begin()));
}

TEST_CASE("tokens are layer-normalized without affine") {
    const Tensor raw = lookup_encoder("anything");
    const Tensor n = normalize_tokens(raw);
    for (std::size_t t = 0; t < 4; ++t) {
        double mean = 0.0, var = 0.0, raw_mean = 0.0, raw_var = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            mean += n.data()[t * 6 + j] / 6.0;
            raw_mean += raw.data()[t * 6 + j] / 6.0;
        }
        for (std::size_t j = 0; j < 6; ++j) {
            var += std::pow(n.data()[t * 6 + j] - mean, 2) / 6.0;
            raw_var += std::pow(raw.data()[t * 6 + j] - raw_mean, 2) / 6.0;
        }
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(var == doctest::Approx(raw_var / (raw_var + 1e-5)).epsilon(1e-12));
    }
}

TEST_CASE("noise-free samples are the normalized interpolation") {
    const auto bank = small_bank(5);
    Rng rng(2);
    const auto s = sample_concept_embedding(bank, DirichletSpec(0.7), 0.0, rng);
    const Tensor expected = normalize_tokens(s.interpolated);
    CHECK(std::equal(s.values.data().begin(), s.values.data().end(), expected.data().begin()));
    CHECK_THROWS_AS(sample_concept_embedding(bank, DirichletSpec(0.7), -1.0, rng), ConfigError);
}

TEST_CASE("encoder shape changes are rejected") {
    auto encoder = [](const std::string& p) {
        return p == "long" ? Tensor::zeros({5, 6}) : Tensor::zeros({4, 6});
    };
    CHECK_THROWS_AS(build_prompt_bank({"a", "long"}, encoder), BackendError);
    CHECK_THROWS_AS(build_prompt_bank({}, encoder), ConfigError);
}

TEST_CASE("prompt files skip comments and blank lines") {
    testing::TempDir dir;
    std::ofstream(dir / "bank.txt") << "# concept: x\n  a photo of x \n\n# note\nx\r\n";
    CHECK(read_prompt_file(dir / "bank.txt") == std::vector<std::string>{"a photo of x", "x"});
    CHECK_THROWS_AS(read_prompt_file(dir / "missing.txt"), ConfigError);
}

TEST_CASE("a one-prompt bank is identical to its own target") {
    const auto bank = small_bank(1);
    Rng rng(1);
    const auto stats = diagnose_manifold(bank, DirichletSpec(0.7), bank.entry(0), 20, rng);
    CHECK(stats.mean == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(stats.stddev == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("cosine similarity oracle") {
    CHECK(cosine_similarity({1, 0}, {0, 1}) == 0.0);
    CHECK(cosine_similarity({1, 2}, {2, 4}) == doctest::Approx(1.0));
    CHECK(cosine_similarity({1, 0}, {-1, 0}) == doctest::Approx(-1.0));
    CHECK(mean_pool_tokens(Tensor::from({2, 2}, {1, 2, 3, 6})) == std::vector<double>{2, 4});
}

}
