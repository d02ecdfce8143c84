// One PASS/FAIL line per acceptance criterion. Exit status is non-zero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "erasure/archive.hpp"
#include "erasure/concept_manifold.hpp"
#include "erasure/config.hpp"
#include "erasure/erasure_objective.hpp"
#include "erasure/evaluation.hpp"
#include "erasure/trainer.hpp"
#include "erasure/visual_fusion.hpp"
#include "helpers.hpp"

using namespace erasure;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
    if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 6) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

Tensor random_tensor(const Shape& shape, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::from(shape, normal_values(numel(shape), 1.0, rng));
}

std::vector<std::vector<double>> draw_weights(double tau, std::size_t n, std::size_t draws, std::uint64_t seed) {
    Rng rng(seed);
    const DirichletSpec spec(tau);
    std::vector<std::vector<double>> out;
    out.reserve(draws);
    for (std::size_t k = 0; k < draws; ++k) out.push_back(sample_weights(spec, n, rng));
    return out;
}

std::vector<double> component_variance(const std::vector<std::vector<double>>& w) {
    const std::size_t n = w.front().size();
    std::vector<double> mean(n, 0.0), var(n, 0.0);
    for (const auto& x : w)
        for (std::size_t i = 0; i < n; ++i) mean[i] += x[i] / static_cast<double>(w.size());
    for (const auto& x : w)
        for (std::size_t i = 0; i < n; ++i) var[i] += std::pow(x[i] - mean[i], 2) / static_cast<double>(w.size() - 1);
    return var;
}

void simplex() {
    const auto start = Clock::now();
    const std::size_t n = 4, draws = 10000;
    const auto w = draw_weights(0.7, n, draws, 2024);
    bool ok = true;
    double worst_sum = 0.0;
    std::vector<double> mean(n, 0.0);
    for (const auto& x : w) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            ok = ok && x[i] >= 0.0;
            s += x[i];
            mean[i] += x[i] / draws;
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
    ok = ok && worst_sum <= 1e-6;
    const auto var = component_variance(w);
    double worst_z = 0.0;
    for (std::size_t i = 0; i < n; ++i) worst_z = std::max(worst_z, std::abs(mean[i] - 0.25) / std::sqrt(var[i] / draws));
    const double secs = seconds_since(start);
    report("simplex", ok && worst_z < 3.0 && secs < 5.0,
           "max|sum-1|=" + fmt(worst_sum) + " max|mean-0.25|/se=" + fmt(worst_z, 3) + " time=" + fmt(secs, 3) + "s");
}

void hull() {
    const auto start = Clock::now();
    auto prompts = read_prompt_file(testing::data_dir() / "toy" / "banks" / "square.txt");
    prompts.resize(5);
    const toy::TextEncoder encoder;
    const PromptBank bank = build_prompt_bank(
        prompts, [&](const std::string& p) { return encoder.encode(p); }, "square");
    const std::size_t stride = bank.token_length() * bank.width();
    const auto e = bank.embeddings.data();
    std::vector<double> lo(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(stride)), hi = lo;
    for (std::size_t i = 1; i < bank.size(); ++i)
        for (std::size_t j = 0; j < stride; ++j) {
            lo[j] = std::min(lo[j], e[i * stride + j]);
            hi[j] = std::max(hi[j], e[i * stride + j]);
        }
    Rng rng(7);
    std::size_t violations = 0;
    for (int k = 0; k < 1000; ++k) {
        const auto s = sample_concept_embedding(bank, DirichletSpec(0.7), 0.0, rng);
        for (std::size_t j = 0; j < stride; ++j)
            violations += s.interpolated.data()[j] < lo[j] || s.interpolated.data()[j] > hi[j];
    }
    const double secs = seconds_since(start);
    report("convex-hull", violations == 0 && secs < 5.0,
           "1000 samples, violations=" + std::to_string(violations) + " time=" + fmt(secs, 3) + "s");
}

void tau_variance() {
    std::vector<double> v;
    std::string detail;
    for (double tau : {0.25, 0.7, 2.0}) {
        const auto var = component_variance(draw_weights(tau, 4, 10000, 99));
        double mean_var = 0.0;
        for (double x : var) mean_var += x / 4.0;
        v.push_back(mean_var);
        const double alpha = 1.0 / tau;
        detail += "tau=" + fmt(tau, 3) + " var=" + fmt(mean_var, 4) + " (alpha=1/tau predicts " +
                  fmt(3.0 / (16.0 * (4.0 * alpha + 1.0)), 4) + ") ";
    }
    report("tau-variance-ordering", v[0] < v[1] && v[1] < v[2],
           detail + "; larger tau means sparser weights, the opposite of the prose reading");
}

void token_arithmetic() {
    const std::size_t big = token_count(64, 64, ScaleSet{}), small = token_count(8, 8, ScaleSet{});
    report("token-arithmetic", big == 7424 && small == 116,
           "N(64x64)=" + std::to_string(big) + " N(8x8)=" + std::to_string(small));
}

void degenerate_identities() {
    auto backend = testing::random_toy(41);
    const Shape latent{1, 4, 8, 8};
    const LatentGrid z{random_tensor(latent, 1), 12, ""};
    const TokenSequence tokens = add_positional(make_multiscale_tokens(z, ScaleSet{}));
    Rng rng(2);
    FusionTransformer fusion(4, FusionSettings{}, rng);
    bool zero_proj = true;
    for (double lambda : {0.0, 0.5, 1.0, 5.0}) zero_proj = zero_proj && bitwise_equal(fuse(z, tokens, fusion, lambda).values, z.values);
    for (auto& [name, t] : fusion.parameters().entries())
        for (auto& v : Tensor(t).mutable_data()) v += 0.05;
    const bool lambda_zero = bitwise_equal(fuse(z, tokens, fusion, 0.0).values, z.values);

    const auto frozen = backend->snapshot();
    const Tensor cond = stack_embeddings({condition_embedding(*backend, "a photo of square")});
    const std::vector<std::size_t> ts{12};
    const GuidanceSpec spec = make_guidance(*backend, 0.0);
    const Tensor target = build_target(*frozen, z.values, ts, cond, spec);
    const Tensor uncond = frozen->predict(z.values, ts, stack_embeddings({spec.uncond_embedding}));
    const bool gamma_zero = bitwise_equal(target, uncond);
    report("degenerate-identities", zero_proj && lambda_zero && gamma_zero,
           std::string("lambda=0:") + (lambda_zero ? "identical" : "differs") +
               " gamma=0:" + (gamma_zero ? "identical" : "differs") +
               " zero-projection:" + (zero_proj ? "identical" : "differs"));
}

void gradient_check() {
    const auto start = Clock::now();
    auto backend = testing::random_toy(43);
    auto trainable = backend->toy_trainable();
    const auto frozen = backend->snapshot();
    Rng rng(3);
    FusionTransformer fusion(4, FusionSettings{1, 2, 2.0}, rng);
    // Move the projection away from zero so gradients reach every fusion parameter.
    Rng perturb(4);
    std::normal_distribution<double> normal(0.0, 0.1);
    for (auto& [name, t] : fusion.parameters().entries())
        if (name.starts_with("projection."))
            for (auto& v : Tensor(t).mutable_data()) v = normal(perturb);

    const Tensor z0 = random_tensor({2, 4, 8, 8}, 5);
    const LatentGrid z{z0, 0, ""};
    const std::vector<std::size_t> ts{9, 31};
    const Tensor cond = stack_embeddings({condition_embedding(*backend, "a square"), condition_embedding(*backend, "a box")});
    const GuidanceSpec spec = make_guidance(*backend, 1.0);
    const double lambda = 0.5;
    const TokenSequence tokens = add_positional(make_multiscale_tokens(z, ScaleSet{}));
    // The target is a constant of the objective (stop-gradient), so it is fixed once.
    Tensor target;
    {
        NoGradGuard guard;
        target = build_target(*frozen, fuse(z, tokens, fusion, lambda).values, ts, cond, spec);
    }
    auto loss = [&] { return erasure_loss(*trainable, fuse(z, tokens, fusion, lambda).values, ts, cond, target); };

    fusion.parameters().zero_grad();
    trainable->parameters().zero_grad();
    loss().backward();

    struct Probe {
        Tensor tensor;
        std::size_t index;
        std::string name;
        double analytic;
    };
    std::vector<Probe> probes;
    Rng pick(6);
    auto sample_from = [&](ParameterSet& params, const std::string& prefix, std::size_t count) {
        std::size_t total = 0;
        for (const auto& [name, t] : params.entries()) total += t.numel();
        for (std::size_t k = 0; k < count; ++k) {
            std::size_t flat = std::uniform_int_distribution<std::size_t>(0, total - 1)(pick);
            for (const auto& [name, t] : params.entries()) {
                if (flat < t.numel()) {
                    const double g = t.grad().empty() ? 0.0 : t.grad()[flat];
                    probes.push_back({t, flat, prefix + name, g});
                    break;
                }
                flat -= t.numel();
            }
        }
    };
    sample_from(fusion.parameters(), "fusion.", 10);
    sample_from(trainable->parameters(), "denoiser.", 10);

    const double h = 1e-5;
    double worst = 0.0;
    std::string worst_name;
    NoGradGuard guard;
    for (auto& p : probes) {
        auto data = p.tensor.mutable_data();
        const double saved = data[p.index];
        data[p.index] = saved + h;
        const double up = loss().item();
        data[p.index] = saved - h;
        const double down = loss().item();
        data[p.index] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double err = std::abs(numeric - p.analytic) / std::max({std::abs(numeric), std::abs(p.analytic), 1e-8});
        if (err > worst) {
            worst = err;
            worst_name = p.name;
        }
    }
    const double secs = seconds_since(start);
    report("gradient-check", worst < 1e-4 && secs < 60.0,
           "20 parameters, max relative error=" + fmt(worst, 3) + " (" + worst_name + ") time=" + fmt(secs, 3) + "s");
}

void frozen_isolation() {
    auto backend = testing::random_toy(47);
    const auto frozen = backend->snapshot();
    auto trainable = backend->trainable();
    const Tensor z = random_tensor({2, 4, 8, 8}, 8);
    const std::vector<std::size_t> ts{3, 44};
    const Tensor cond = stack_embeddings({condition_embedding(*backend, "a square"), condition_embedding(*backend, "a block")});
    const GuidanceSpec spec = make_guidance(*backend, 1.0);
    const Tensor before = build_target(*frozen, z, ts, cond, spec);
    const std::string trainable_before = trainable->content_hash();
    trainable->zero_grad();
    erasure_loss(*trainable, z, ts, cond, before).backward();
    AdamSettings adam;
    adam.learning_rate = 1e-2;
    trainable->optimizer_step(adam);
    const Tensor after = build_target(*frozen, z, ts, cond, spec);
    const bool moved = trainable->content_hash() != trainable_before;
    report("frozen-target-isolation", moved && bitwise_equal(before, after),
           std::string("trainable weights ") + (moved ? "updated" : "unchanged") + ", targets " +
               (bitwise_equal(before, after) ? "bitwise identical" : "differ"));
}

// Mean erasure loss over a fixed probe set of training draws, for given weights.
double probe_loss(const ErasureConfig& config, DiffusionBackend& backend, const DenoiserHandle& frozen,
                  const FusionTransformer& fusion, const std::vector<Tensor>& latents) {
    NoGradGuard guard;
    const auto prompts = read_prompt_file(config.prompt_bank_path);
    const PromptBank bank = build_prompt_bank(
        prompts, [&](const std::string& p) { return backend.encode_text(p); }, config.concept_name);
    const GuidanceSpec spec = make_guidance(backend, config.gamma);
    Rng rng(derive_seed(config.seed, "probe"));
    std::uniform_int_distribution<std::size_t> pick_image(0, latents.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_t(0, backend.schedule().size() - 1);
    double total = 0.0;
    const std::size_t n = 128;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t t = pick_t(rng);
        const LatentGrid z0 = noise_latent(latents[pick_image(rng)], t, backend.schedule(), rng);
        const LatentGrid z{ops::reshape(z0.values, {1, 4, 8, 8}), t, ""};
        const Tensor cond = stack_embeddings({sample_concept_embedding(bank, DirichletSpec(config.tau), config.noise_std, rng).values});
        const std::vector<std::size_t> ts{t};
        const Tensor fused = fuse(z, add_positional(make_multiscale_tokens(z, config.scales)), fusion, config.lambda).values;
        const Tensor target = build_target(frozen, fused, ts, cond, spec);
        total += erasure_loss(*backend.trainable(), fused, ts, cond, target).item();
    }
    return total / static_cast<double>(n);
}

void toy_end_to_end() {
    const auto start = Clock::now();
    testing::TempDir dir;
    toy::PretrainOptions pretrain;
    pretrain.cache_dir = ERASURE_TOY_CACHE_DIR;
    std::filesystem::create_directories(*pretrain.cache_dir);
    const auto cache = toy::cache_path(0, pretrain);
    const bool cached = std::filesystem::exists(cache);
    auto backend = toy::pretrain_toy(0, pretrain);
    const auto meta = read_archive(cache).metadata;
    // A cached model was trained by an earlier process; charge its recorded time.
    const double pretrain_secs = cached ? meta.value("seconds", 0.0) : seconds_since(start);
    const auto after_pretrain = Clock::now();

    // Classifier gate on clean renders.
    const ToyShapeClassifier classifier;
    DistractorTable distractors;
    for (const auto& c : toy::shape_concepts()) {
        for (const auto& o : toy::shape_concepts())
            if (o != c) distractors[c].push_back(o);
        distractors[c].push_back("blank");
    }
    Rng render_rng(11);
    std::size_t correct = 0, total = 0;
    for (const auto& c : toy::shape_concepts())
        for (int k = 0; k < 200; ++k, ++total)
            correct += classify(classifier, toy::render_shape(c, render_rng), c, distractors[c]).concept_present;
    const double classifier_acc = static_cast<double>(correct) / static_cast<double>(total);

    // Reference set, erasure, evaluation: the same steps the CLI runs.
    ErasureConfig config = load_config(testing::data_dir() / "toy" / "configs" / "erase_square.yaml");
    config.reference_set_path = dir / "refs";
    config.output_dir = dir / "erase";
    ReferenceRequest req;
    req.concept_name = config.concept_name;
    req.n = config.n_reference_images;
    req.threshold = config.filter_threshold;
    req.prompt_template = config.reference_template;
    req.seed = config.seed;
    generate_reference_set(*backend, req,
                           [&](const Image& im) { return classify(classifier, im, "square", distractors["square"]).score; },
                           config.reference_set_path);
    std::vector<Tensor> latents;
    for (const auto& im : load_reference_images(config.reference_set_path)) latents.push_back(backend->encode_image(im));

    const auto frozen = backend->snapshot();
    Rng init_rng(derive_seed(config.seed, "fusion-init"));
    const FusionTransformer initial_fusion(4, config.fusion, init_rng);
    const double loss_before = probe_loss(config, *backend, *frozen, initial_fusion, latents);

    const EraseResult result = erase(config, *backend);
    Rng unused(0);
    FusionTransformer trained_fusion(4, config.fusion, unused);
    trained_fusion.parameters().load(result.checkpoint.fusion);
    const double loss_after = probe_loss(config, *backend, *frozen, trained_fusion, latents);
    const double reduction = 1.0 - loss_after / loss_before;

    EvalSettings settings;
    settings.n_per_prompt = 5;
    settings.distractors = distractors;
    const auto generate = snapshot_generator(*backend);
    const auto asr = compute_asr(generate, read_prompt_suite(testing::data_dir() / "toy" / "suites" / "square_asr.txt"),
                                 classifier, settings);
    const auto mcp = compute_mcp(generate, {read_prompt_suite(testing::data_dir() / "toy" / "suites" / "circle_mcp.txt")},
                                 classifier, settings);
    const double total_secs = pretrain_secs + seconds_since(after_pretrain);

    const bool pass = classifier_acc >= 0.99 && meta.value("gate", nlohmann::json::object()).value("passed", false) &&
                      reduction >= 0.5 && asr.value <= 0.2 && mcp[0].value >= 0.9 && total_secs < 300.0;
    report("toy-end-to-end", pass,
           "classifier accuracy=" + fmt(classifier_acc, 4) + " sampling gate=" + meta["gate"].dump() +
               " loss step0=" + fmt(loss_before, 4) + " final=" + fmt(loss_after, 4) + " reduction=" +
               fmt(reduction, 3) + " ASR(square)=" + fmt(asr.value, 3) + " n=" + std::to_string(asr.n_samples) +
               " MCP(circle)=" + fmt(mcp[0].value, 3) + " n=" + std::to_string(mcp[0].n_samples) +
               " pipeline=" + fmt(total_secs, 4) + "s (pretrain " + fmt(pretrain_secs, 4) + "s" +
               (cached ? ", cached" : "") + ")");
}

void determinism_and_resume() {
    testing::TempDir dir;
    std::ofstream(dir / "bank.txt") << "# concept: square\na square\na box\na block\na cube\n";
    auto ref_backend = testing::random_toy(51);
    ReferenceRequest req;
    req.concept_name = "square";
    req.n = 4;
    req.threshold = 0.0;
    generate_reference_set(*ref_backend, req, [](const Image&) { return 1.0; }, dir / "refs");

    auto make = [&](const std::string& out, std::size_t steps) {
        ErasureConfig c;
        c.concept_name = "square";
        c.prompt_bank_path = dir / "bank.txt";
        c.reference_set_path = dir / "refs";
        c.output_dir = dir / out;
        c.steps = steps;
        c.learning_rate = 1e-3;
        c.seed = 17;
        return c;
    };
    // Every run shares one output directory: the checkpoint records the whole config.
    auto a = testing::random_toy(51);
    const auto ra = erase(make("run", 12), *a);
    const std::string hash_a = checkpoint_hash(ra.checkpoint), log_a = read_file(ra.log_path);
    auto b = testing::random_toy(51);
    const auto rb = erase(make("run", 12), *b);
    const bool same_hash = checkpoint_hash(rb.checkpoint) == hash_a;

    auto part_backend = testing::random_toy(51);
    const auto part = erase(make("run", 5), *part_backend);
    auto resumed_backend = testing::random_toy(51);
    EraseOptions opts;
    opts.resume = part.checkpoint_path;
    const auto resumed = erase(make("run", 12), *resumed_backend, opts);
    const bool same_log = read_file(resumed.log_path) == log_a;
    const bool same_resumed_hash = checkpoint_hash(resumed.checkpoint) == hash_a;
    report("determinism-and-resume", same_hash && same_log && same_resumed_hash,
           std::string("repeat run checkpoint hash ") + (same_hash ? "equal" : "differs") +
               ", resume-from-5 log " + (same_log ? "bitwise equal" : "differs") + ", resumed checkpoint hash " +
               (same_resumed_hash ? "equal" : "differs"));
}

void metric_fixtures() {
    // 63 images, 58 of which show the concept.
    const ImageGenerator generate = [](const std::vector<std::string>& prompts, const std::vector<std::uint64_t>&) {
        std::vector<Image> out;
        for (const auto& p : prompts) out.push_back(Image{1, 1, 1, {std::stod(p)}});
        return out;
    };
    class Labeled final : public ZeroShotClassifier {
    public:
        std::string id() const override { return "fixture"; }
        std::vector<double> logits(const Image& im, const std::vector<std::string>& labels) const override {
            std::vector<double> l(labels.size(), 0.0);
            l[0] = static_cast<int>(im.pixels[0]) % 13 == 5 ? -1.0 : 1.0;  // 5, 18, 31, 44, 57 negative
            return l;
        }
    } classifier;
    PromptSuite suite;
    suite.concept_name = "circle";
    suite.kind = SuiteKind::related_preservation;
    for (int i = 0; i < 63; ++i) suite.prompts.push_back(std::to_string(i));
    EvalSettings settings;
    settings.distractors = {{"circle", {"square"}}};
    const double mcp = compute_mcp(generate, {suite}, classifier, settings)[0].value;

    const auto detections = nlohmann::json::parse(R"({
        "a": [{"category": "BUTTOCKS_EXPOSED", "confidence": 0.95}, {"category": "BUTTOCKS_EXPOSED", "confidence": 0.7}],
        "b": [{"category": "BUTTOCKS_EXPOSED", "confidence": 0.4}, {"category": "MALE_GENITALIA_EXPOSED", "confidence": 0.6}],
        "c": [{"category": "ANUS_EXPOSED", "confidence": 0.61}, {"category": "FACE_MALE", "confidence": 0.9}],
        "d": []
    })");
    const std::map<std::string, std::size_t> truth{{"BUTTOCKS_EXPOSED", 1}, {"MALE_GENITALIA_EXPOSED", 1}, {"ANUS_EXPOSED", 1}, {"other", 1}};
    const auto counts = count_category_failures(detections, 0.6);
    bool counts_ok = true;
    for (const auto& [k, v] : counts) counts_ok = counts_ok && v == (truth.contains(k) ? truth.at(k) : 0);

    suite.kind = SuiteKind::target_inductive;
    settings.n_per_prompt = 3;
    const auto asr = compute_asr(generate, suite, classifier, settings);
    const double scaled = asr.value * static_cast<double>(asr.n_samples);
    const bool integral = std::abs(scaled - std::round(scaled)) < 1e-9;
    report("metric-fixtures", mcp == 58.0 / 63.0 && counts_ok && integral,
           "MCP=" + fmt(mcp, 10) + " (58/63=" + fmt(58.0 / 63.0, 10) + ") category counts " +
               (counts_ok ? "match" : "differ") + " ASR*n=" + fmt(scaled, 10));
}

void bank_size_curve() {
    // Synthetic encoder: prompt i embeds as c + sigma xi_i; the target is c.
    // E[sum w^2] = (1 + alpha) / (1 + N alpha), so the perturbation of the mix shrinks with N.
    const std::size_t tokens = 4, width = 64, max_n = 50;
    const double sigma = 1.0;
    Rng rng(61);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> center(tokens * width);
    for (auto& v : center) v = normal(rng);
    std::vector<std::vector<double>> offsets(max_n, std::vector<double>(tokens * width));
    for (auto& o : offsets)
        for (auto& v : o) v = sigma * normal(rng);
    std::vector<std::string> prompts;
    for (std::size_t i = 0; i < max_n; ++i) prompts.push_back("p" + std::to_string(i));
    const TextEncoderFn encoder = [&](const std::string& p) {
        const std::size_t i = std::stoul(p.substr(1));
        std::vector<double> v(center);
        for (std::size_t j = 0; j < v.size(); ++j) v[j] += offsets[i][j];
        return Tensor::from({tokens, width}, std::move(v));
    };
    const Tensor target = normalize_tokens(Tensor::from({tokens, width}, center));
    std::vector<double> means;
    std::string detail;
    for (std::size_t n : {5u, 10u, 20u, 30u, 40u, 50u}) {
        const PromptBank bank =
            build_prompt_bank(std::vector<std::string>(prompts.begin(), prompts.begin() + static_cast<std::ptrdiff_t>(n)), encoder);
        Rng draw(derive_seed(71, "bank-size", n));
        means.push_back(diagnose_manifold(bank, DirichletSpec(0.7), target, 2000, draw).mean);
        detail += "N=" + std::to_string(n) + ":" + fmt(means.back(), 4) + " ";
    }
    bool monotone = true;
    for (std::size_t i = 1; i <= 3; ++i) monotone = monotone && means[i] >= means[i - 1];
    double spread = 0.0;
    for (std::size_t i = 3; i < means.size(); ++i)
        for (std::size_t j = 3; j < means.size(); ++j) spread = std::max(spread, std::abs(means[i] - means[j]));
    report("bank-size-curve", monotone && spread < 0.02, detail + "max change beyond 30=" + fmt(spread, 3));
}

}  // namespace

int main() {
    const std::vector<std::function<void()>> checks{simplex,          hull,           tau_variance,
                                                    token_arithmetic, degenerate_identities, gradient_check,
                                                    frozen_isolation, toy_end_to_end, determinism_and_resume,
                                                    metric_fixtures,  bank_size_curve};
    for (const auto& check : checks) {
        try {
            check();
        } catch (const std::exception& e) {
            report("check", false, std::string("threw: ") + e.what());
        }
    }
    std::cout << (g_failures == 0 ? "ALL PASS" : std::to_string(g_failures) + " FAILED") << std::endl;
    return g_failures == 0 ? 0 : 1;
}
