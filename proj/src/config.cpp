#include "erasure/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "erasure/archive.hpp"
#include "erasure/errors.hpp"
#include "erasure/hashing.hpp"

namespace erasure {

namespace {

nlohmann::json scalar_to_json(const std::string& text) {
    if (text == "true") return true;
    if (text == "false") return false;
    std::int64_t i = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), i);
    if (ec == std::errc() && ptr == text.data() + text.size() && !text.empty()) return i;
    if (!text.empty()) {
        char* end = nullptr;
        const double d = std::strtod(text.c_str(), &end);
        if (end == text.c_str() + text.size()) return d;
    }
    return text;
}

nlohmann::json yaml_to_json(const YAML::Node& node) {
    switch (node.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined:
            return nullptr;
        case YAML::NodeType::Scalar:
            return node.Tag() == "!" ? nlohmann::json(node.Scalar()) : scalar_to_json(node.Scalar());
        case YAML::NodeType::Sequence: {
            auto arr = nlohmann::json::array();
            for (const auto& item : node) arr.push_back(yaml_to_json(item));
            return arr;
        }
        case YAML::NodeType::Map: {
            auto obj = nlohmann::json::object();
            for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_to_json(kv.second);
            return obj;
        }
    }
    return nullptr;
}

std::string as_text(const nlohmann::json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number() || v.is_boolean()) return v.dump();
    throw ConfigError("config key '" + key + "' must be a string");
}

double as_real(const nlohmann::json& v, const std::string& key) {
    if (v.is_number()) return v.get<double>();
    throw ConfigError("config key '" + key + "' must be a number");
}

std::uint64_t as_count(const nlohmann::json& v, const std::string& key) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
}

ScaleSet as_scales(const nlohmann::json& v) {
    ScaleSet s;
    s.scales.clear();
    if (v.is_array()) {
        for (const auto& x : v) s.scales.push_back(as_real(x, "scales"));
    } else if (v.is_string()) {
        std::stringstream in(v.get<std::string>());
        std::string item;
        while (std::getline(in, item, ',')) {
            const auto parsed = scalar_to_json(item.substr(item.find_first_not_of(' ')));
            s.scales.push_back(as_real(parsed, "scales"));
        }
    } else if (v.is_number()) {
        s.scales.push_back(v.get<double>());
    } else {
        throw ConfigError("config key 'scales' must be a list of numbers");
    }
    return s;
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return (base / p).lexically_normal();
}

}  // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "concept_name",     "prompt_bank_path",   "reference_set_path", "tau",
        "gamma",            "lambda",             "noise_std",          "scales",
        "learning_rate",    "batch_size",         "steps",              "seed",
        "n_reference_images", "backend",          "output_dir",         "loss_reduction",
        "train_scope",      "fusion_depth",       "fusion_heads",       "fusion_ffn_ratio",
        "adam_beta1",       "adam_beta2",         "adam_epsilon",       "checkpoint_every",
        "reference_template", "filter_threshold", "candidate_budget",   "asr_suite_path",
    };
    return keys;
}

ErasureConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("configuration document must be a key-value mapping");
    const std::set<std::string> known(config_keys().begin(), config_keys().end());
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    for (const char* required : {"concept_name", "steps"})
        if (!j.contains(required)) throw ConfigError(std::string("config key '") + required + "' is required");

    ErasureConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "concept_name") c.concept_name = as_text(v, key);
        else if (key == "prompt_bank_path") c.prompt_bank_path = as_text(v, key);
        else if (key == "reference_set_path") c.reference_set_path = as_text(v, key);
        else if (key == "tau") c.tau = as_real(v, key);
        else if (key == "gamma") c.gamma = as_real(v, key);
        else if (key == "lambda") c.lambda = as_real(v, key);
        else if (key == "noise_std") c.noise_std = as_real(v, key);
        else if (key == "scales") c.scales = as_scales(v);
        else if (key == "learning_rate") c.learning_rate = as_real(v, key);
        else if (key == "batch_size") c.batch_size = as_count(v, key);
        else if (key == "steps") c.steps = as_count(v, key);
        else if (key == "seed") c.seed = as_count(v, key);
        else if (key == "n_reference_images") c.n_reference_images = as_count(v, key);
        else if (key == "backend") c.backend = as_text(v, key);
        else if (key == "output_dir") c.output_dir = as_text(v, key);
        else if (key == "loss_reduction") c.loss_reduction = parse_loss_reduction(as_text(v, key));
        else if (key == "train_scope") c.train_scope = parse_train_scope(as_text(v, key));
        else if (key == "fusion_depth") c.fusion.depth = as_count(v, key);
        else if (key == "fusion_heads") c.fusion.heads = as_count(v, key);
        else if (key == "fusion_ffn_ratio") c.fusion.ffn_ratio = as_real(v, key);
        else if (key == "adam_beta1") c.adam_beta1 = as_real(v, key);
        else if (key == "adam_beta2") c.adam_beta2 = as_real(v, key);
        else if (key == "adam_epsilon") c.adam_epsilon = as_real(v, key);
        else if (key == "checkpoint_every") c.checkpoint_every = as_count(v, key);
        else if (key == "reference_template") c.reference_template = as_text(v, key);
        else if (key == "filter_threshold") c.filter_threshold = as_real(v, key);
        else if (key == "candidate_budget") c.candidate_budget = as_count(v, key);
        else if (key == "asr_suite_path") c.asr_suite_path = as_text(v, key);
    }
    return c;
}

ErasureConfig parse_config(const std::string& text, const std::filesystem::path& base_dir,
                           const std::vector<std::string>& overrides) {
    nlohmann::json doc;
    try {
        doc = yaml_to_json(YAML::Load(text));
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("malformed configuration document: ") + e.what());
    }
    if (doc.is_null()) doc = nlohmann::json::object();
    if (!doc.is_object()) throw ConfigError("configuration document must be a key-value mapping");
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + o + "'");
        nlohmann::json value;
        try {
            value = yaml_to_json(YAML::Load(o.substr(eq + 1)));
        } catch (const YAML::Exception&) {
            value = o.substr(eq + 1);
        }
        doc[o.substr(0, eq)] = value;
    }
    ErasureConfig c = config_from_json(doc);
    c.prompt_bank_path = resolve(c.prompt_bank_path, base_dir);
    c.reference_set_path = resolve(c.reference_set_path, base_dir);
    c.output_dir = resolve(c.output_dir, base_dir);
    c.asr_suite_path = resolve(c.asr_suite_path, base_dir);
    validate(c);
    return c;
}

ErasureConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    return parse_config(read_file(path), path.parent_path(), overrides);
}

void validate(const ErasureConfig& c) {
    if (c.concept_name.empty()) throw ConfigError("concept_name must not be empty");
    if (!(c.tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(c.noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
    if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!std::isfinite(c.gamma) || !std::isfinite(c.lambda)) throw ConfigError("gamma and lambda must be finite");
    if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0 && c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0))
        throw ConfigError("adam betas must lie in [0, 1)");
    if (!(c.adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be > 0");
    if (!(c.filter_threshold >= 0.0 && c.filter_threshold <= 1.0)) throw ConfigError("filter_threshold must lie in [0, 1]");
    if (c.fusion.depth == 0 || c.fusion.heads == 0 || !(c.fusion.ffn_ratio > 0.0))
        throw ConfigError("fusion depth, heads and ffn_ratio must be positive");
    c.scales.validate();
}

nlohmann::json to_json(const ErasureConfig& c) {
    return {
        {"concept_name", c.concept_name},
        {"prompt_bank_path", c.prompt_bank_path.string()},
        {"reference_set_path", c.reference_set_path.string()},
        {"tau", c.tau},
        {"gamma", c.gamma},
        {"lambda", c.lambda},
        {"noise_std", c.noise_std},
        {"scales", c.scales.scales},
        {"learning_rate", c.learning_rate},
        {"batch_size", c.batch_size},
        {"steps", c.steps},
        {"seed", c.seed},
        {"n_reference_images", c.n_reference_images},
        {"backend", c.backend},
        {"output_dir", c.output_dir.string()},
        {"loss_reduction", to_string(c.loss_reduction)},
        {"train_scope", to_string(c.train_scope)},
        {"fusion_depth", c.fusion.depth},
        {"fusion_heads", c.fusion.heads},
        {"fusion_ffn_ratio", c.fusion.ffn_ratio},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_epsilon", c.adam_epsilon},
        {"checkpoint_every", c.checkpoint_every},
        {"reference_template", c.reference_template},
        {"filter_threshold", c.filter_threshold},
        {"candidate_budget", c.candidate_budget},
        {"asr_suite_path", c.asr_suite_path.string()},
    };
}

std::string config_hash(const ErasureConfig& config) { return sha256_hex(to_json(config).dump()); }

AdamSettings adam_settings(const ErasureConfig& c) {
    return {c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_epsilon};
}

}  // namespace erasure
