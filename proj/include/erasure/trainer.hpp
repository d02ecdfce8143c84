#pragma once

// Reference-set generation, the joint erasure loop over the trainable denoiser and
// the fusion transformer, checkpoints and sequential multi-concept chains.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "erasure/archive.hpp"
#include "erasure/backend.hpp"
#include "erasure/config.hpp"
#include "erasure/errors.hpp"

namespace erasure {

/// Score in [0, 1] that a generated candidate depicts the requested concept.
using ImageScorer = std::function<double(const Image&)>;

struct ReferenceRequest {
    std::string concept_name;
    std::string prompt_template = "a photo of {}";  // "{}" is replaced by the concept
    std::size_t n = 200;
    double threshold = 0.6;
    std::size_t candidate_budget = 0;  // 0: 4 n + 16
    std::uint64_t seed = 0;
    std::size_t chunk = 32;
    std::size_t workers = 1;
};

struct ReferenceEntry {
    std::string file;
    std::string prompt;
    std::uint64_t seed = 0;
    std::size_t candidate = 0;
    double score = 0.0;
};

struct ReferenceManifest {
    std::string concept_name;
    std::string prompt;
    std::size_t requested = 0;
    std::size_t candidates_tried = 0;
    std::size_t candidate_budget = 0;
    double threshold = 0.0;
    std::uint64_t seed = 0;
    bool complete = false;
    std::vector<ReferenceEntry> images;
};

nlohmann::json to_json(const ReferenceManifest& manifest);
ReferenceManifest reference_manifest_from_json(const nlohmann::json& j);
inline constexpr const char* kReferenceManifestName = "manifest.json";

/// Raised when the candidate budget runs out; the partial manifest is on disk.
class PartialReferenceSet : public RuntimeFailure {
public:
    PartialReferenceSet(const std::string& message, ReferenceManifest manifest)
        : RuntimeFailure(message), manifest_(std::move(manifest)) {}
    const ReferenceManifest& manifest() const { return manifest_; }

private:
    ReferenceManifest manifest_;
};

/// Samples candidates with seeds derive_seed(seed, "ref:<concept>", i), keeps those
/// scoring >= threshold in candidate order and writes ref_<i>.pgm files plus
/// manifest.json into out_dir.
ReferenceManifest generate_reference_set(const DiffusionBackend& backend, const ReferenceRequest& request,
                                         const ImageScorer& filter, const std::filesystem::path& out_dir);

/// Images listed in out_dir/manifest.json.
std::vector<Image> load_reference_images(const std::filesystem::path& dir);

struct TrainingRecord {
    std::size_t step = 0;
    double loss = 0.0;
    std::vector<std::size_t> timesteps;
    std::uint64_t seed = 0;  // fingerprint of the run stream at the start of the step
};

nlohmann::json to_json(const TrainingRecord& record);
std::vector<TrainingRecord> read_training_log(const std::filesystem::path& path);

struct Checkpoint {
    StateDict denoiser;
    StateDict fusion;
    StateDict denoiser_optimizer;
    StateDict fusion_optimizer;
    ErasureConfig config;
    std::size_t step = 0;
    std::string rng_state;
    std::string frozen_weights_hash;
    std::string base_weights_hash;
    std::string backend_locator;
    std::size_t latent_channels = 0;
};

Archive to_archive(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_archive(const Archive& archive);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// SHA-256 of the encoded checkpoint archive.
std::string checkpoint_hash(const Checkpoint& checkpoint);

/// Loads the checkpoint's denoiser weights into the backend's trainable handle.
void apply_checkpoint(DiffusionBackend& backend, const Checkpoint& checkpoint);

struct EraseOptions {
    std::optional<std::filesystem::path> resume;
    /// Write checkpoint and log files under config.output_dir.
    bool write_files = true;
    std::function<void(const TrainingRecord&)> on_step;
};

struct EraseResult {
    Checkpoint checkpoint;
    std::vector<TrainingRecord> log;
    std::filesystem::path checkpoint_path;
    std::filesystem::path log_path;
    std::string frozen_hash_start;
    std::string frozen_hash_end;
};

inline constexpr const char* kCheckpointName = "checkpoint.ckpt";
inline constexpr const char* kTrainingLogName = "train_log.jsonl";

/// Runs config.steps optimizer steps on the backend's trainable denoiser, which is
/// left holding the erased weights. The frozen target model is the backend's
/// snapshot at call time.
EraseResult erase(const ErasureConfig& config, DiffusionBackend& backend, const EraseOptions& options = {});

/// Erases the concepts in order; every stage starts from the previous stage's
/// weights and uses them as its frozen target model.
std::vector<EraseResult> multi_concept_erase(
    const std::vector<ErasureConfig>& configs, DiffusionBackend& backend,
    const std::function<void(std::size_t stage, const EraseResult&)>& after_stage = {});

}  // namespace erasure
