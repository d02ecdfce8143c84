#pragma once

// Run configuration: one flat key-value document (YAML or JSON) per erasure run.
// Relative paths are resolved against the directory of the document. Overrides of
// the form key=value are applied after the file and win over it.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "erasure/backend.hpp"
#include "erasure/erasure_objective.hpp"
#include "erasure/visual_fusion.hpp"
#include "json.hpp"

namespace erasure {

struct ErasureConfig {
    std::string concept_name;
    std::filesystem::path prompt_bank_path;
    std::filesystem::path reference_set_path;
    double tau = 0.7;
    double gamma = 1.0;
    double lambda = 0.5;
    double noise_std = 0.01;
    ScaleSet scales;
    double learning_rate = 1e-5;
    std::size_t batch_size = 1;
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    std::size_t n_reference_images = 200;

    std::string backend = "toy:0";
    std::filesystem::path output_dir = "runs/erase";
    LossReduction loss_reduction = LossReduction::mean;
    TrainScope train_scope = TrainScope::all;
    FusionSettings fusion;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only

    std::string reference_template = "a photo of {}";
    double filter_threshold = 0.6;
    std::size_t candidate_budget = 0;  // 0: 4 n + 16
    std::filesystem::path asr_suite_path;  // optional, used for chain re-tests
};

/// Every key the document may contain.
const std::vector<std::string>& config_keys();

/// Parses a document; `concept_name` and `steps` are required, unknown keys rejected.
ErasureConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
ErasureConfig parse_config(const std::string& text, const std::filesystem::path& base_dir,
                           const std::vector<std::string>& overrides = {});

/// Range checks that need no files or backend. Throws ConfigError.
void validate(const ErasureConfig& config);

/// Canonical JSON (sorted keys, paths as given after resolution).
nlohmann::json to_json(const ErasureConfig& config);
ErasureConfig config_from_json(const nlohmann::json& j);
/// SHA-256 of the canonical JSON dump.
std::string config_hash(const ErasureConfig& config);

AdamSettings adam_settings(const ErasureConfig& config);

}  // namespace erasure
