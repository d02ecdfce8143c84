#include "erasure/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>

#include "erasure/concept_manifold.hpp"
#include "erasure/erasure_objective.hpp"
#include "erasure/hashing.hpp"
#include "erasure/visual_fusion.hpp"

namespace erasure {

namespace {

std::string fill_concept(const std::string& tmpl, const std::string& concept_name) {
    const auto pos = tmpl.find("{}");
    if (pos != std::string::npos) return tmpl.substr(0, pos) + concept_name + tmpl.substr(pos + 2);
    if (tmpl.find(concept_name) == std::string::npos)
        throw ConfigError("template '" + tmpl + "' contains neither '{}' nor the concept '" + concept_name + "'");
    return tmpl;
}

std::string reference_file_name(std::size_t candidate) {
    std::ostringstream name;
    name << "ref_" << std::setw(5) << std::setfill('0') << candidate << ".pgm";
    return name.str();
}

}  // namespace

nlohmann::json to_json(const ReferenceManifest& m) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& e : m.images)
        images.push_back({{"file", e.file}, {"prompt", e.prompt}, {"seed", e.seed}, {"candidate", e.candidate},
                          {"score", e.score}});
    return {{"concept", m.concept_name},
            {"prompt", m.prompt},
            {"n_requested", m.requested},
            {"n_accepted", m.images.size()},
            {"candidates_tried", m.candidates_tried},
            {"candidate_budget", m.candidate_budget},
            {"threshold", m.threshold},
            {"seed", m.seed},
            {"complete", m.complete},
            {"images", images}};
}

ReferenceManifest reference_manifest_from_json(const nlohmann::json& j) {
    try {
        ReferenceManifest m;
        m.concept_name = j.at("concept").get<std::string>();
        m.prompt = j.at("prompt").get<std::string>();
        m.requested = j.at("n_requested").get<std::size_t>();
        m.candidates_tried = j.at("candidates_tried").get<std::size_t>();
        m.candidate_budget = j.at("candidate_budget").get<std::size_t>();
        m.threshold = j.at("threshold").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.complete = j.at("complete").get<bool>();
        for (const auto& e : j.at("images"))
            m.images.push_back({e.at("file").get<std::string>(), e.at("prompt").get<std::string>(),
                                e.at("seed").get<std::uint64_t>(), e.at("candidate").get<std::size_t>(),
                                e.at("score").get<double>()});
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed reference manifest: ") + e.what());
    }
}

ReferenceManifest generate_reference_set(const DiffusionBackend& backend, const ReferenceRequest& request,
                                         const ImageScorer& filter, const std::filesystem::path& out_dir) {
    if (request.concept_name.empty()) throw ConfigError("reference set needs a concept");
    if (!(request.threshold >= 0.0 && request.threshold <= 1.0)) throw ConfigError("filter threshold must lie in [0, 1]");
    ReferenceManifest manifest;
    manifest.concept_name = request.concept_name;
    manifest.prompt = fill_concept(request.prompt_template, request.concept_name);
    manifest.requested = request.n;
    manifest.threshold = request.threshold;
    manifest.seed = request.seed;
    manifest.candidate_budget = request.candidate_budget ? request.candidate_budget : 4 * request.n + 16;
    std::filesystem::create_directories(out_dir);

    const std::size_t chunk = std::max<std::size_t>(1, request.chunk);
    const std::size_t workers = std::max<std::size_t>(1, request.workers);
    const std::string tag = "ref:" + request.concept_name;
    std::size_t next = 0;
    while (manifest.images.size() < request.n && next < manifest.candidate_budget) {
        std::vector<std::future<std::vector<Image>>> jobs;
        std::vector<std::size_t> starts;
        for (std::size_t w = 0; w < workers && next < manifest.candidate_budget; ++w) {
            const std::size_t count = std::min(chunk, manifest.candidate_budget - next);
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = 0; i < count; ++i) seeds.push_back(derive_seed(request.seed, tag, next + i));
            std::vector<std::string> prompts(count, manifest.prompt);
            starts.push_back(next);
            next += count;
            auto job = [&backend, prompts = std::move(prompts), seeds = std::move(seeds)] {
                return backend.sample_batch(prompts, seeds);
            };
            jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, std::move(job)));
        }
        for (std::size_t j = 0; j < jobs.size(); ++j) {
            const auto images = jobs[j].get();
            for (std::size_t i = 0; i < images.size() && manifest.images.size() < request.n; ++i) {
                const std::size_t candidate = starts[j] + i;
                manifest.candidates_tried = candidate + 1;
                const double score = filter(images[i]);
                if (score < request.threshold) continue;
                ReferenceEntry entry{reference_file_name(candidate), manifest.prompt,
                                     derive_seed(request.seed, tag, candidate), candidate, score};
                write_image(out_dir / entry.file, images[i]);
                manifest.images.push_back(std::move(entry));
            }
        }
    }
    manifest.complete = manifest.images.size() >= request.n;
    write_file_atomic(out_dir / kReferenceManifestName, to_json(manifest).dump(2) + "\n");
    if (!manifest.complete)
        throw PartialReferenceSet("candidate budget of " + std::to_string(manifest.candidate_budget) +
                                      " exhausted with " + std::to_string(manifest.images.size()) + " of " +
                                      std::to_string(request.n) + " images accepted",
                                  manifest);
    return manifest;
}

std::vector<Image> load_reference_images(const std::filesystem::path& dir) {
    const auto path = dir / kReferenceManifestName;
    if (!std::filesystem::exists(path)) throw ConfigError("reference set manifest not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("malformed reference manifest " + path.string() + ": " + e.what());
    }
    const auto manifest = reference_manifest_from_json(j);
    std::vector<Image> images;
    for (const auto& e : manifest.images) images.push_back(read_image(dir / e.file));
    return images;
}

nlohmann::json to_json(const TrainingRecord& r) {
    nlohmann::json j = {{"step", r.step}, {"loss", r.loss}, {"seed", r.seed}};
    if (r.timesteps.size() == 1) j["timestep"] = r.timesteps.front();
    else j["timestep"] = r.timesteps;
    return j;
}

std::vector<TrainingRecord> read_training_log(const std::filesystem::path& path) {
    std::vector<TrainingRecord> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (!j.contains("loss") || !j["loss"].is_number()) continue;
        TrainingRecord r;
        r.step = j.at("step").get<std::size_t>();
        r.loss = j.at("loss").get<double>();
        r.seed = j.at("seed").get<std::uint64_t>();
        if (j.at("timestep").is_array()) r.timesteps = j["timestep"].get<std::vector<std::size_t>>();
        else r.timesteps = {j["timestep"].get<std::size_t>()};
        out.push_back(std::move(r));
    }
    return out;
}

Archive to_archive(const Checkpoint& c) {
    Archive a;
    for (const auto& [k, v] : with_prefix(c.denoiser, "denoiser/")) a.blobs.emplace(k, v);
    for (const auto& [k, v] : with_prefix(c.fusion, "fusion/")) a.blobs.emplace(k, v);
    for (const auto& [k, v] : with_prefix(c.denoiser_optimizer, "optim/denoiser/")) a.blobs.emplace(k, v);
    for (const auto& [k, v] : with_prefix(c.fusion_optimizer, "optim/fusion/")) a.blobs.emplace(k, v);
    a.metadata = {{"kind", "erasure-checkpoint"},
                  {"format_version", 1},
                  {"config", to_json(c.config)},
                  {"step", c.step},
                  {"rng_state", c.rng_state},
                  {"frozen_weights_hash", c.frozen_weights_hash},
                  {"base_weights_hash", c.base_weights_hash},
                  {"backend", c.backend_locator},
                  {"latent_channels", c.latent_channels}};
    return a;
}

Checkpoint checkpoint_from_archive(const Archive& a) {
    const auto& m = a.metadata;
    if (m.value("kind", "") != "erasure-checkpoint") throw ConfigError("archive is not an erasure checkpoint");
    Checkpoint c;
    try {
        c.config = config_from_json(m.at("config"));
        c.step = m.at("step").get<std::size_t>();
        c.rng_state = m.at("rng_state").get<std::string>();
        c.frozen_weights_hash = m.at("frozen_weights_hash").get<std::string>();
        c.base_weights_hash = m.at("base_weights_hash").get<std::string>();
        c.backend_locator = m.at("backend").get<std::string>();
        c.latent_channels = m.at("latent_channels").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed checkpoint metadata: ") + e.what());
    }
    c.denoiser = strip_prefix(a.blobs, "denoiser/");
    c.fusion = strip_prefix(a.blobs, "fusion/");
    c.denoiser_optimizer = strip_prefix(a.blobs, "optim/denoiser/");
    c.fusion_optimizer = strip_prefix(a.blobs, "optim/fusion/");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { write_archive(path, to_archive(c)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
    return checkpoint_from_archive(read_archive(path));
}

std::string checkpoint_hash(const Checkpoint& c) { return sha256_hex(encode_archive(to_archive(c))); }

void apply_checkpoint(DiffusionBackend& backend, const Checkpoint& c) {
    if (c.base_weights_hash != backend.base_weights_hash())
        throw ConfigError("checkpoint was trained from base weights " + c.base_weights_hash.substr(0, 12) +
                          " but the backend holds " + backend.base_weights_hash().substr(0, 12));
    backend.trainable()->load_weights(c.denoiser);
}

namespace {

// Keys that may differ between a run and the run that resumes it.
nlohmann::json resumable_view(const ErasureConfig& config) {
    auto j = to_json(config);
    for (const char* key : {"steps", "checkpoint_every", "output_dir"}) j.erase(key);
    return j;
}

class LogWriter {
public:
    LogWriter(const std::filesystem::path& path, const std::vector<TrainingRecord>& prefix, bool enabled)
        : enabled_(enabled) {
        if (!enabled_) return;
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        out_.open(path, std::ios::trunc);
        if (!out_) throw RuntimeFailure("cannot write training log " + path.string());
        for (const auto& r : prefix) write(to_json(r));
    }
    void write(const nlohmann::json& j) {
        if (!enabled_) return;
        out_ << j.dump() << '\n';
        out_.flush();
    }

private:
    bool enabled_;
    std::ofstream out_;
};

}  // namespace

EraseResult erase(const ErasureConfig& config, DiffusionBackend& backend, const EraseOptions& options) {
    validate(config);
    if (config.prompt_bank_path.empty() || !std::filesystem::exists(config.prompt_bank_path))
        throw ConfigError("prompt bank file not found: " + config.prompt_bank_path.string());
    if (config.reference_set_path.empty() || !std::filesystem::exists(config.reference_set_path))
        throw ConfigError("reference set not found: " + config.reference_set_path.string());

    const auto prompts = read_prompt_file(config.prompt_bank_path);
    const PromptBank bank = build_prompt_bank(
        prompts, [&backend](const std::string& p) { return backend.encode_text(p); }, config.concept_name);
    const auto images = load_reference_images(config.reference_set_path);
    if (images.empty()) throw ConfigError("reference set " + config.reference_set_path.string() + " holds no images");
    std::vector<Tensor> latents;
    for (const auto& image : images) latents.push_back(backend.encode_image(image));

    const Shape latent_shape = backend.latent_shape();
    const std::size_t channels = latent_shape.at(0);
    if (config.fusion.heads == 0 || channels % config.fusion.heads != 0)
        throw ConfigError("fusion_heads must divide the latent channel count " + std::to_string(channels));
    const NoiseSchedule& schedule = backend.schedule();
    const DirichletSpec dirichlet(config.tau);
    const GuidanceSpec guidance = make_guidance(backend, config.gamma);
    const AdamSettings adam = adam_settings(config);

    const auto frozen = backend.snapshot();
    EraseResult result;
    result.frozen_hash_start = frozen->content_hash();
    const auto trainable = backend.trainable();
    trainable->set_train_scope(config.train_scope);

    Rng init_rng(derive_seed(config.seed, "fusion-init"));
    FusionTransformer fusion(channels, config.fusion, init_rng);
    Adam fusion_adam(fusion.parameters().entries());
    Rng rng(derive_seed(config.seed, "erase"));
    std::size_t start = 0;

    result.log_path = config.output_dir / kTrainingLogName;
    result.checkpoint_path = config.output_dir / kCheckpointName;
    if (options.resume) {
        const Checkpoint ckpt = load_checkpoint(*options.resume);
        if (ckpt.frozen_weights_hash != result.frozen_hash_start)
            throw ConfigError("checkpoint was trained against a different frozen model");
        if (resumable_view(ckpt.config) != resumable_view(config))
            throw ConfigError("checkpoint configuration differs from the resumed run beyond steps/output settings");
        if (ckpt.step > config.steps)
            throw ConfigError("checkpoint step " + std::to_string(ckpt.step) + " is past the configured steps");
        trainable->load_weights(ckpt.denoiser);
        trainable->load_optimizer_state(ckpt.denoiser_optimizer);
        fusion.parameters().load(ckpt.fusion);
        fusion_adam.load_state(ckpt.fusion_optimizer);
        rng = deserialize_rng(ckpt.rng_state);
        start = ckpt.step;
        for (auto& r : read_training_log(result.log_path))
            if (r.step < start) result.log.push_back(std::move(r));
    }

    auto snapshot_checkpoint = [&](std::size_t step) {
        Checkpoint c;
        c.denoiser = trainable->weights();
        c.fusion = fusion.parameters().state();
        c.denoiser_optimizer = trainable->optimizer_state();
        c.fusion_optimizer = fusion_adam.state();
        c.config = config;
        c.step = step;
        c.rng_state = serialize_rng(rng);
        c.frozen_weights_hash = result.frozen_hash_start;
        c.base_weights_hash = backend.base_weights_hash();
        c.backend_locator = backend.locator();
        c.latent_channels = channels;
        return c;
    };

    LogWriter log(result.log_path, result.log, options.write_files);
    std::uniform_int_distribution<std::size_t> pick_image(0, latents.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_t(0, schedule.size() - 1);
    for (std::size_t step = start; step < config.steps; ++step) {
        TrainingRecord record;
        record.step = step;
        record.seed = rng_fingerprint(rng);
        std::vector<Tensor> noised, conditions;
        std::string sources;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const std::size_t index = pick_image(rng);
            const std::size_t t = pick_t(rng);
            const LatentGrid z = noise_latent(latents[index], t, schedule, rng);
            Shape batched{1};
            batched.insert(batched.end(), latent_shape.begin(), latent_shape.end());
            noised.push_back(ops::reshape(z.values, batched));
            conditions.push_back(sample_concept_embedding(bank, dirichlet, config.noise_std, rng).values);
            record.timesteps.push_back(t);
            sources += (b ? "," : "") + std::to_string(index);
        }
        const LatentGrid grid{noised.size() == 1 ? noised.front() : ops::concat0(noised), record.timesteps.front(), sources};
        const Tensor cond = stack_embeddings(conditions);

        const TokenSequence tokens = add_positional(make_multiscale_tokens(grid, config.scales));
        const FusedLatent fused = fuse(grid, tokens, fusion, config.lambda);
        const Tensor target = build_target(*frozen, fused.values, record.timesteps, cond, guidance);
        const Tensor loss = erasure_loss(*trainable, fused.values, record.timesteps, cond, target, config.loss_reduction);
        record.loss = loss.item();
        if (!std::isfinite(record.loss)) {
            auto diag = to_json(record);
            diag["loss"] = nullptr;
            diag["error"] = "non-finite loss";
            log.write(diag);
            throw RuntimeFailure("non-finite loss at step " + std::to_string(step) + "; training aborted");
        }
        loss.backward();
        trainable->optimizer_step(adam);
        fusion_adam.step(adam);

        log.write(to_json(record));
        if (options.on_step) options.on_step(record);
        result.log.push_back(std::move(record));

        if (options.write_files && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
            step + 1 < config.steps)
            save_checkpoint(config.output_dir / ("checkpoint-step" + std::to_string(step + 1) + ".ckpt"),
                            snapshot_checkpoint(step + 1));
    }

    result.checkpoint = snapshot_checkpoint(std::max(start, config.steps));
    result.frozen_hash_end = frozen->content_hash();
    if (result.frozen_hash_end != result.frozen_hash_start)
        throw RuntimeFailure("frozen snapshot changed during training");
    if (options.write_files) save_checkpoint(result.checkpoint_path, result.checkpoint);
    return result;
}

std::vector<EraseResult> multi_concept_erase(const std::vector<ErasureConfig>& configs, DiffusionBackend& backend,
                                             const std::function<void(std::size_t, const EraseResult&)>& after_stage) {
    if (configs.empty()) throw ConfigError("chain needs at least one configuration");
    for (const auto& c : configs) validate(c);
    std::vector<EraseResult> results;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        results.push_back(erase(configs[i], backend));
        if (after_stage) after_stage(i, results.back());
    }
    return results;
}

}  // namespace erasure
