// Command-line entry point: gen-refs, erase, chain, eval, sample-embed, report.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure. Results go to
// stdout as one JSON document; progress and errors go to stderr as JSON lines.
// Every command writes run_manifest.json into its output directory.

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "erasure/archive.hpp"
#include "erasure/backends.hpp"
#include "erasure/concept_manifold.hpp"
#include "erasure/config.hpp"
#include "erasure/errors.hpp"
#include "erasure/evaluation.hpp"
#include "erasure/hashing.hpp"
#include "erasure/toy_backend.hpp"
#include "erasure/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace erasure;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr const char* kManifestName = "run_manifest.json";

bool g_quiet = false;

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void log_event(json j) {
    if (g_quiet) return;
    j["time"] = utc_now();
    std::cerr << j.dump() << '\n';
}

struct Common {
    std::string backend;
    std::string cache_dir;
    std::optional<std::uint64_t> seed;
    std::string out;
};

BackendOptions backend_options(const Common& c) {
    BackendOptions o;
    if (!c.cache_dir.empty()) o.cache_dir = c.cache_dir;
    o.pretrain.on_step = [](std::size_t step, double loss) {
        if ((step + 1) % 500 == 0) log_event({{"event", "toy_pretrain"}, {"step", step + 1}, {"loss", loss}});
    };
    return o;
}

std::unique_ptr<DiffusionBackend> open_backend(const std::string& locator, const Common& c) {
    log_event({{"event", "load_backend"}, {"locator", locator}});
    return load_backend(locator, backend_options(c));
}

bool is_toy(const std::string& locator) { return locator.starts_with("toy:"); }

DistractorTable toy_distractors() {
    DistractorTable table;
    for (const auto& c : toy::shape_concepts()) {
        auto& list = table[c];
        for (const auto& other : toy::shape_concepts())
            if (other != c) list.push_back(other);
        list.push_back("blank");
    }
    return table;
}

struct ClassifierChoice {
    std::string spec;  // "toy" or a URL
    std::string id;
    std::string distractors;
};

std::unique_ptr<ZeroShotClassifier> make_classifier(const ClassifierChoice& c, const std::string& locator) {
    const std::string spec = c.spec.empty() ? (is_toy(locator) ? "toy" : "") : c.spec;
    if (spec == "toy") return std::make_unique<ToyShapeClassifier>();
    if (spec.starts_with("http://")) return std::make_unique<HttpClassifier>(spec, c.id.empty() ? spec : c.id);
    throw ConfigError("no classifier: pass --classifier toy or --classifier http://host:port/path");
}

DistractorTable distractor_table(const ClassifierChoice& c, const std::string& locator) {
    if (!c.distractors.empty()) return read_distractors(c.distractors);
    if (is_toy(locator)) return toy_distractors();
    throw ConfigError("--distractors is required for non-toy backends");
}

void add_classifier_options(CLI::App* cmd, ClassifierChoice& c) {
    cmd->add_option("--classifier", c.spec, "toy, or URL of a zero-shot classifier service");
    cmd->add_option("--classifier-id", c.id, "Identifier recorded in reports for a classifier service");
    cmd->add_option("--distractors", c.distractors, "JSON object: concept -> distractor labels");
}

void write_manifest(const fs::path& dir, const std::string& command, const std::string& config_hash_hex,
                    std::uint64_t seed, const std::string& started, const json& artifacts) {
    fs::create_directories(dir);
    const json manifest = {{"command", command},        {"config_hash", config_hash_hex}, {"seed", seed},
                           {"started", started},        {"finished", utc_now()},          {"artifacts", artifacts},
                           {"tool_version", kToolVersion}};
    write_file_atomic(dir / kManifestName, manifest.dump(2) + "\n");
}

std::string options_hash(const json& options) { return sha256_hex(options.dump()); }

// ---------------------------------------------------------------------------

struct GenRefsArgs {
    Common common;
    std::string concept_name;
    std::size_t n = 200;
    std::string prompt_template = "a photo of {}";
    double threshold = 0.6;
    std::size_t budget = 0;
    std::size_t workers = 1;
    ClassifierChoice classifier;
};

json cmd_gen_refs(const GenRefsArgs& a) {
    const std::string started = utc_now();
    const std::string locator = a.common.backend.empty() ? "toy:0" : a.common.backend;
    const fs::path out = a.common.out.empty() ? fs::path("refs") / a.concept_name : fs::path(a.common.out);
    ReferenceRequest req;
    req.concept_name = a.concept_name;
    req.prompt_template = a.prompt_template;
    req.n = a.n;
    req.threshold = a.threshold;
    req.candidate_budget = a.budget;
    req.seed = a.common.seed.value_or(0);
    req.workers = a.workers;
    if (!(req.threshold >= 0.0 && req.threshold <= 1.0)) throw ConfigError("--threshold must lie in [0, 1]");
    const json options = {{"concept", req.concept_name}, {"n", req.n},       {"template", req.prompt_template},
                          {"threshold", req.threshold},  {"budget", req.candidate_budget},
                          {"seed", req.seed},            {"backend", locator}};

    auto backend = open_backend(locator, a.common);
    const auto classifier = make_classifier(a.classifier, locator);
    const auto table = distractor_table(a.classifier, locator);
    const auto it = table.find(req.concept_name);
    if (it == table.end()) throw ConfigError("no distractor labels for concept '" + req.concept_name + "'");
    const auto distractors = it->second;
    const ImageScorer filter = [&](const Image& image) {
        return classify(*classifier, image, req.concept_name, distractors).score;
    };

    ReferenceManifest manifest;
    try {
        manifest = generate_reference_set(*backend, req, filter, out);
    } catch (const PartialReferenceSet& e) {
        write_manifest(out, "gen-refs", options_hash(options), req.seed, started,
                       {{"reference_manifest", (out / kReferenceManifestName).string()}, {"complete", false}});
        throw;
    }
    write_manifest(out, "gen-refs", options_hash(options), req.seed, started,
                   {{"reference_manifest", (out / kReferenceManifestName).string()}, {"complete", true}});
    return {{"command", "gen-refs"},
            {"output_dir", out.string()},
            {"accepted", manifest.images.size()},
            {"candidates_tried", manifest.candidates_tried},
            {"manifest", (out / kReferenceManifestName).string()},
            {"run_manifest", (out / kManifestName).string()}};
}

// ---------------------------------------------------------------------------

std::vector<std::string> with_seed(std::vector<std::string> overrides, const std::optional<std::uint64_t>& seed) {
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    return overrides;
}

EraseOptions progress_options() {
    EraseOptions o;
    o.on_step = [](const TrainingRecord& r) {
        if ((r.step + 1) % 50 == 0) log_event({{"event", "erase_step"}, {"step", r.step + 1}, {"loss", r.loss}});
    };
    return o;
}

json erase_summary(const EraseResult& r) {
    return {{"checkpoint", r.checkpoint_path.string()},
            {"checkpoint_hash", checkpoint_hash(r.checkpoint)},
            {"log", r.log_path.string()},
            {"steps", r.checkpoint.step},
            {"final_loss", r.log.empty() ? json(nullptr) : json(r.log.back().loss)},
            {"frozen_hash", r.frozen_hash_end}};
}

struct EraseArgs {
    Common common;
    std::string config;
    std::string resume;
    std::vector<std::string> overrides;
};

json cmd_erase(const EraseArgs& a) {
    const std::string started = utc_now();
    auto overrides = with_seed(a.overrides, a.common.seed);
    if (!a.common.backend.empty()) overrides.push_back("backend=" + a.common.backend);
    if (!a.common.out.empty()) overrides.push_back("output_dir=" + fs::absolute(a.common.out).string());
    const ErasureConfig config = load_config(a.config, overrides);
    if (!a.resume.empty() && !fs::exists(a.resume)) throw ConfigError("resume checkpoint not found: " + a.resume);
    if (!fs::exists(config.prompt_bank_path)) throw ConfigError("prompt bank not found: " + config.prompt_bank_path.string());
    if (!fs::exists(config.reference_set_path / kReferenceManifestName))
        throw ConfigError("reference set not found: " + config.reference_set_path.string());

    auto backend = open_backend(config.backend, a.common);
    auto options = progress_options();
    if (!a.resume.empty()) options.resume = a.resume;
    const EraseResult r = erase(config, *backend, options);
    json summary = erase_summary(r);
    summary["command"] = "erase";
    summary["config_hash"] = config_hash(config);
    summary["run_manifest"] = (config.output_dir / kManifestName).string();
    write_manifest(config.output_dir, "erase", config_hash(config), config.seed, started,
                   {{"checkpoint", summary["checkpoint"]}, {"log", summary["log"]}});
    return summary;
}

// ---------------------------------------------------------------------------

struct ChainArgs {
    Common common;
    std::vector<std::string> configs;
    std::vector<std::string> overrides;
    std::size_t n_per_prompt = 1;
    ClassifierChoice classifier;
};

json cmd_chain(const ChainArgs& a) {
    const std::string started = utc_now();
    std::vector<ErasureConfig> configs;
    for (const auto& path : a.configs) {
        auto overrides = with_seed(a.overrides, a.common.seed);
        if (!a.common.backend.empty()) overrides.push_back("backend=" + a.common.backend);
        configs.push_back(load_config(path, overrides));
    }
    if (configs.empty()) throw ConfigError("chain needs at least one --configs entry");
    for (const auto& c : configs)
        if (c.backend != configs.front().backend) throw ConfigError("every chain stage must use the same backend");
    const fs::path out = a.common.out.empty() ? configs.back().output_dir.parent_path() / "chain" : fs::path(a.common.out);

    const std::string locator = configs.front().backend;
    auto backend = open_backend(locator, a.common);
    std::unique_ptr<ZeroShotClassifier> classifier;
    DistractorTable table;
    const bool retest = std::any_of(configs.begin(), configs.end(), [](const auto& c) { return !c.asr_suite_path.empty(); });
    if (retest) {
        classifier = make_classifier(a.classifier, locator);
        table = distractor_table(a.classifier, locator);
    }

    json stages = json::array();
    std::string combined;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        log_event({{"event", "chain_stage"}, {"stage", i}, {"concept", configs[i].concept_name}});
        const EraseResult r = erase(configs[i], *backend, progress_options());
        json stage = erase_summary(r);
        stage["concept"] = configs[i].concept_name;
        stage["config_hash"] = config_hash(configs[i]);
        combined += config_hash(configs[i]);
        // Re-test every concept erased so far.
        json asr = json::array();
        if (retest) {
            const auto generate = snapshot_generator(*backend);
            for (std::size_t j = 0; j <= i; ++j) {
                if (configs[j].asr_suite_path.empty()) continue;
                EvalSettings s;
                s.seed = configs[j].seed;
                s.n_per_prompt = a.n_per_prompt;
                s.distractors = table;
                const auto suite =
                    read_prompt_suite(configs[j].asr_suite_path, configs[j].concept_name, SuiteKind::target_inductive);
                const auto report = compute_asr(generate, suite, *classifier, s);
                asr.push_back({{"concept", report.concept_name}, {"ASR", report.value}, {"n_samples", report.n_samples}});
            }
        }
        stage["asr_retest"] = asr;
        stages.push_back(std::move(stage));
    }
    const json report = {{"command", "chain"}, {"backend", locator}, {"stages", stages}};
    fs::create_directories(out);
    write_file_atomic(out / "chain_report.json", report.dump(2) + "\n");
    write_manifest(out, "chain", sha256_hex(combined), configs.front().seed, started,
                   {{"chain_report", (out / "chain_report.json").string()}});
    json result = report;
    result["chain_report"] = (out / "chain_report.json").string();
    result["run_manifest"] = (out / kManifestName).string();
    return result;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    Common common;
    std::string checkpoint;
    std::string metrics = "asr,mcp";
    std::string asr_suite;
    std::vector<std::string> mcp_suites;
    std::vector<std::string> adversarial;
    std::string fid;
    std::string detections;
    std::string concept_name;
    double threshold = 0.6;
    std::size_t n_per_prompt = 1;
    std::size_t workers = 1;
    ClassifierChoice classifier;
};

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> items;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) items.push_back(item);
    return items;
}

json cmd_eval(const EvalArgs& a) {
    const std::string started = utc_now();
    const auto metrics = split_list(a.metrics);
    const std::set<std::string> known = {"asr", "mcp", "categories", "ingest-adversarial", "ingest-fid"};
    for (const auto& m : metrics)
        if (!known.contains(m)) throw ConfigError("unknown metric '" + m + "'");
    const auto wants = [&](const char* m) { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); };

    std::optional<Checkpoint> ckpt;
    if (!a.checkpoint.empty()) {
        if (!fs::exists(a.checkpoint)) throw ConfigError("checkpoint not found: " + a.checkpoint);
        ckpt = load_checkpoint(a.checkpoint);
    }
    std::string concept_name = a.concept_name;
    if (concept_name.empty() && ckpt) concept_name = ckpt->config.concept_name;
    if (wants("asr") && a.asr_suite.empty()) throw ConfigError("metric asr needs --asr-suite");
    if (wants("mcp") && a.mcp_suites.empty()) throw ConfigError("metric mcp needs --mcp-suite");
    if (wants("ingest-adversarial") && a.adversarial.empty()) throw ConfigError("metric ingest-adversarial needs --adversarial");
    if (wants("ingest-fid") && a.fid.empty()) throw ConfigError("metric ingest-fid needs --fid");
    if (wants("categories") && a.detections.empty()) throw ConfigError("metric categories needs --detections");

    // Read every input before any generation.
    std::optional<PromptSuite> asr_suite;
    if (wants("asr")) asr_suite = read_prompt_suite(a.asr_suite, concept_name, SuiteKind::target_inductive);
    std::vector<PromptSuite> mcp_suites;
    if (wants("mcp"))
        for (const auto& p : a.mcp_suites) mcp_suites.push_back(read_prompt_suite(p, "", SuiteKind::related_preservation));
    json detections;
    if (wants("categories")) {
        if (!fs::exists(a.detections)) throw ConfigError("detections file not found: " + a.detections);
        try {
            detections = json::parse(read_file(a.detections));
        } catch (const json::exception& e) {
            throw ConfigError("detections file " + a.detections + " is not JSON: " + e.what());
        }
    }
    if (wants("ingest-adversarial")) {
        for (const auto& p : a.adversarial) {
            if (!fs::exists(p)) throw ConfigError("adversarial prompt file not found: " + p);
            read_prompt_suite(p, concept_name);
        }
    }

    const std::uint64_t seed = a.common.seed.value_or(0);
    std::vector<MetricReport> reports;
    const bool generating = wants("asr") || wants("mcp") || wants("ingest-adversarial");
    std::string locator = a.common.backend;
    if (locator.empty()) locator = ckpt ? ckpt->backend_locator : "toy:0";
    if (generating) {
        auto backend = open_backend(locator, a.common);
        if (ckpt) apply_checkpoint(*backend, *ckpt);
        const auto classifier = make_classifier(a.classifier, locator);
        EvalSettings s;
        s.seed = seed;
        s.n_per_prompt = a.n_per_prompt;
        s.workers = a.workers;
        s.distractors = distractor_table(a.classifier, locator);
        const auto generate = snapshot_generator(*backend);
        if (asr_suite) reports.push_back(compute_asr(generate, *asr_suite, *classifier, s));
        for (auto& r : compute_mcp(generate, mcp_suites, *classifier, s)) reports.push_back(std::move(r));
        if (wants("ingest-adversarial"))
            for (const auto& p : a.adversarial)
                reports.push_back(score_adversarial_file(generate, p, concept_name, *classifier, s));
    }
    if (wants("categories")) {
        MetricReport r;
        r.concept_name = concept_name.empty() ? "nudity" : concept_name;
        r.metric = "category_failures";
        const auto counts = count_category_failures(detections, a.threshold);
        r.table = counts;
        r.n_samples = detections.size();
        std::size_t total = 0;
        for (const auto& [_, n] : counts) total += n;
        r.value = static_cast<double>(total);
        r.seed = seed;
        r.classifier_id = "external-detector@" + nlohmann::json(a.threshold).dump();
        reports.push_back(std::move(r));
    }
    if (wants("ingest-fid")) reports.push_back(ingest_fid(a.fid));

    const fs::path out = a.common.out.empty() ? fs::path("runs/eval") : fs::path(a.common.out);
    fs::create_directories(out);
    json list = json::array();
    for (const auto& r : reports) list.push_back(to_json(r));
    const json report = {{"backend", locator}, {"checkpoint", a.checkpoint}, {"seed", seed}, {"reports", list}};
    write_file_atomic(out / "report.json", report.dump(2) + "\n");
    write_file_atomic(out / "report.csv", reports_csv(reports));
    const json options = {{"metrics", metrics}, {"checkpoint", a.checkpoint}, {"asr_suite", a.asr_suite},
                          {"mcp_suites", a.mcp_suites}, {"adversarial", a.adversarial}, {"fid", a.fid},
                          {"detections", a.detections}, {"n_per_prompt", a.n_per_prompt}, {"seed", seed},
                          {"backend", locator}, {"threshold", a.threshold}};
    write_manifest(out, "eval", options_hash(options), seed, started,
                   {{"report", (out / "report.json").string()}, {"csv", (out / "report.csv").string()}});
    json summary = json::array();
    for (const auto& r : reports)
        summary.push_back({{"concept", r.concept_name}, {"metric", r.metric}, {"value", r.value}, {"n_samples", r.n_samples}});
    return {{"command", "eval"},
            {"report", (out / "report.json").string()},
            {"csv", (out / "report.csv").string()},
            {"metrics", summary},
            {"run_manifest", (out / kManifestName).string()}};
}

// ---------------------------------------------------------------------------

struct SampleEmbedArgs {
    Common common;
    std::string bank;
    std::string concept_name;
    std::string target;
    std::vector<double> taus{0.7};
    std::vector<std::size_t> sizes;
    std::size_t samples = 200;
};

json cmd_sample_embed(const SampleEmbedArgs& a) {
    const std::string started = utc_now();
    if (!fs::exists(a.bank)) throw ConfigError("prompt bank not found: " + a.bank);
    const auto prompts = read_prompt_file(a.bank);
    if (prompts.empty()) throw ConfigError("prompt bank " + a.bank + " holds no prompts");
    for (double tau : a.taus)
        if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    std::vector<std::size_t> sizes = a.sizes.empty() ? std::vector<std::size_t>{prompts.size()} : a.sizes;
    for (auto n : sizes)
        if (n == 0 || n > prompts.size())
            throw ConfigError("bank size " + std::to_string(n) + " outside 1.." + std::to_string(prompts.size()));
    const std::string locator = a.common.backend.empty() ? "toy:0" : a.common.backend;
    const std::uint64_t seed = a.common.seed.value_or(0);
    const std::string target_prompt = a.target.empty() ? a.concept_name : a.target;
    if (target_prompt.empty()) throw ConfigError("sample-embed needs --concept or --target");

    auto backend = open_backend(locator, a.common);
    const auto encoder = [&](const std::string& p) { return backend->encode_text(p); };
    const Tensor target = condition_embedding(*backend, target_prompt);
    json series = json::array();
    for (double tau : a.taus) {
        for (auto n : sizes) {
            const PromptBank bank = build_prompt_bank({prompts.begin(), prompts.begin() + static_cast<std::ptrdiff_t>(n)},
                                                      encoder, a.concept_name);
            Rng rng(derive_seed(seed, "sample-embed", n));
            const auto stats = diagnose_manifold(bank, DirichletSpec(tau), target, a.samples, rng);
            series.push_back({{"tau", tau}, {"bank_size", n}, {"mean_cosine", stats.mean}, {"stddev", stats.stddev},
                              {"n_samples", stats.n_samples}});
        }
    }
    const json doc = {{"concept", a.concept_name}, {"target", target_prompt}, {"backend", locator},
                      {"seed", seed},              {"series", series}};
    const fs::path out = a.common.out.empty() ? fs::path("runs/sample-embed") : fs::path(a.common.out);
    fs::create_directories(out);
    write_file_atomic(out / "embedding_series.json", doc.dump(2) + "\n");
    write_manifest(out, "sample-embed",
                   options_hash({{"bank", a.bank}, {"taus", a.taus}, {"sizes", sizes}, {"samples", a.samples},
                                 {"target", target_prompt}, {"backend", locator}, {"seed", seed}}),
                   seed, started, {{"series", (out / "embedding_series.json").string()}});
    json result = doc;
    result["command"] = "sample-embed";
    result["output"] = (out / "embedding_series.json").string();
    return result;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
    Common common;
    std::vector<std::string> inputs;
    std::vector<std::string> logs;
    std::size_t window = 25;
};

MetricReport report_from_json(const json& j) {
    MetricReport r;
    r.concept_name = j.at("concept").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.classifier_id = j.at("classifier_id").get<std::string>();
    return r;
}

json cmd_report(const ReportArgs& a) {
    const std::string started = utc_now();
    if (a.inputs.empty() && a.logs.empty()) throw ConfigError("report needs --inputs or --logs");
    if (a.window == 0) throw ConfigError("--window must be >= 1");
    std::vector<MetricReport> reports;
    json merged = json::array();
    for (const auto& p : a.inputs) {
        if (!fs::exists(p)) throw ConfigError("report input not found: " + p);
        json doc;
        try {
            doc = json::parse(read_file(p));
            for (const auto& r : doc.at("reports")) {
                reports.push_back(report_from_json(r));
                json entry = r;
                entry["source"] = p;
                merged.push_back(std::move(entry));
            }
        } catch (const json::exception& e) {
            throw ConfigError("report input " + p + " is not an eval report: " + e.what());
        }
    }
    json training = json::array();
    for (const auto& p : a.logs) {
        if (!fs::exists(p)) throw ConfigError("training log not found: " + p);
        const auto log = read_training_log(p);
        if (log.empty()) throw ConfigError("training log " + p + " is empty");
        const std::size_t w = std::min(a.window, log.size());
        double head = 0.0, tail = 0.0;
        for (std::size_t i = 0; i < w; ++i) {
            head += log[i].loss / static_cast<double>(w);
            tail += log[log.size() - w + i].loss / static_cast<double>(w);
        }
        training.push_back({{"log", p},
                            {"steps", log.size()},
                            {"first_loss", log.front().loss},
                            {"last_loss", log.back().loss},
                            {"window", w},
                            {"head_mean", head},
                            {"tail_mean", tail},
                            {"reduction", head > 0.0 ? 1.0 - tail / head : 0.0}});
    }
    const json doc = {{"reports", merged}, {"training", training}};
    const fs::path out = a.common.out.empty() ? fs::path("runs/report") : fs::path(a.common.out);
    fs::create_directories(out);
    write_file_atomic(out / "report.json", doc.dump(2) + "\n");
    write_file_atomic(out / "report.csv", reports_csv(reports));
    write_manifest(out, "report", options_hash({{"inputs", a.inputs}, {"logs", a.logs}, {"window", a.window}}),
                   a.common.seed.value_or(0), started,
                   {{"report", (out / "report.json").string()}, {"csv", (out / "report.csv").string()}});
    json result = doc;
    result["command"] = "report";
    result["report"] = (out / "report.json").string();
    return result;
}

// ---------------------------------------------------------------------------

int fail(int code, const std::string& kind, const std::string& message) {
    std::cerr << json{{"event", "error"}, {"kind", kind}, {"error", message}, {"exit_code", code}}.dump() << '\n';
    return code;
}

void add_common(CLI::App* cmd, Common& c, bool with_backend = true) {
    if (with_backend) {
        cmd->add_option("--backend", c.backend, "Backend locator: toy:<seed> or http://host:port");
        cmd->add_option("--cache-dir", c.cache_dir, "Toy weight cache (default $ERASURE_CACHE_DIR or ~/.cache/erasure)");
    }
    cmd->add_option("--seed", c.seed, "Run seed; every random stream is derived from it");
    cmd->add_option("--out", c.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-image collaborative concept erasure for latent diffusion models"};
    app.require_subcommand(1);
    app.add_flag("--quiet", g_quiet, "Suppress JSON-lines progress on stderr");
    app.set_version_flag("--version", kToolVersion);

    GenRefsArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-refs", "Synthesize a filtered reference image set for a concept");
    add_common(gen_cmd, gen.common);
    gen_cmd->add_option("--concept", gen.concept_name, "Concept name")->required();
    gen_cmd->add_option("--n", gen.n, "Images to accept");
    gen_cmd->add_option("--template", gen.prompt_template, "Prompt template; {} is replaced by the concept");
    gen_cmd->add_option("--threshold", gen.threshold, "Filter score threshold");
    gen_cmd->add_option("--budget", gen.budget, "Candidate budget (default 4n+16)");
    gen_cmd->add_option("--workers", gen.workers, "Parallel sampling workers");
    add_classifier_options(gen_cmd, gen.classifier);

    EraseArgs er;
    auto* erase_cmd = app.add_subcommand("erase", "Erase one concept");
    add_common(erase_cmd, er.common);
    erase_cmd->add_option("--config", er.config, "Run configuration (YAML or JSON)")->required();
    erase_cmd->add_option("--resume", er.resume, "Checkpoint to resume from");
    erase_cmd->add_option("--set", er.overrides, "Override a config key: key=value (repeatable)");

    ChainArgs ch;
    auto* chain_cmd = app.add_subcommand("chain", "Erase several concepts in sequence");
    add_common(chain_cmd, ch.common);
    chain_cmd->add_option("--configs", ch.configs, "One configuration per stage, in order")->required();
    chain_cmd->add_option("--set", ch.overrides, "Override applied to every stage: key=value (repeatable)");
    chain_cmd->add_option("--n-per-prompt", ch.n_per_prompt, "Images per prompt for ASR re-tests");
    add_classifier_options(chain_cmd, ch.classifier);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate an (erased) model");
    add_common(eval_cmd, ev.common);
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Erasure checkpoint (omit to evaluate the base model)");
    eval_cmd->add_option("--metrics", ev.metrics, "Comma list of asr,mcp,categories,ingest-adversarial,ingest-fid");
    eval_cmd->add_option("--asr-suite", ev.asr_suite, "Target-inductive prompt suite");
    eval_cmd->add_option("--mcp-suite", ev.mcp_suites, "Related-preservation prompt suite (repeatable)");
    eval_cmd->add_option("--adversarial", ev.adversarial, "Adversarial prompt file with '# kind: uda|p4d' (repeatable)");
    eval_cmd->add_option("--fid", ev.fid, "FID JSON from an external tool");
    eval_cmd->add_option("--detections", ev.detections, "Category detector output JSON");
    eval_cmd->add_option("--concept", ev.concept_name, "Target concept (default: the checkpoint's)");
    eval_cmd->add_option("--threshold", ev.threshold, "Detector confidence threshold");
    eval_cmd->add_option("--n-per-prompt", ev.n_per_prompt, "Images per prompt");
    eval_cmd->add_option("--workers", ev.workers, "Parallel generation workers");
    add_classifier_options(eval_cmd, ev.classifier);

    SampleEmbedArgs se;
    auto* se_cmd = app.add_subcommand("sample-embed", "Cosine diagnostics of the concept manifold");
    add_common(se_cmd, se.common);
    se_cmd->add_option("--bank", se.bank, "Prompt bank file")->required();
    se_cmd->add_option("--concept", se.concept_name, "Concept name");
    se_cmd->add_option("--target", se.target, "Target prompt (default: the concept name)");
    se_cmd->add_option("--tau", se.taus, "Temperatures to sweep")->delimiter(',');
    se_cmd->add_option("--sizes", se.sizes, "Bank sizes to sweep (prefixes of the bank)")->delimiter(',');
    se_cmd->add_option("--samples", se.samples, "Manifold samples per point");

    ReportArgs rp;
    auto* report_cmd = app.add_subcommand("report", "Merge eval reports and summarize training logs");
    add_common(report_cmd, rp.common, false);
    report_cmd->add_option("--inputs", rp.inputs, "eval report.json files");
    report_cmd->add_option("--logs", rp.logs, "Training logs (JSON lines)");
    report_cmd->add_option("--window", rp.window, "Steps averaged at each end of a log");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(2, "config", e.what());
    }

    try {
        json result;
        if (*gen_cmd) result = cmd_gen_refs(gen);
        else if (*erase_cmd) result = cmd_erase(er);
        else if (*chain_cmd) result = cmd_chain(ch);
        else if (*eval_cmd) result = cmd_eval(ev);
        else if (*se_cmd) result = cmd_sample_embed(se);
        else if (*report_cmd) result = cmd_report(rp);
        std::cout << result.dump(2) << std::endl;
        return 0;
    } catch (const ConfigError& e) {
        return fail(2, "config", e.what());
    } catch (const ContractError& e) {
        return fail(3, "contract", e.what());
    } catch (const BackendError& e) {
        return fail(3, "backend", e.what());
    } catch (const Error& e) {
        return fail(3, "runtime", e.what());
    } catch (const std::exception& e) {
        return fail(3, "runtime", e.what());
    }
}
