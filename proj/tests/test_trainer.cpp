#include <fstream>

#include "doctest.h"
#include "erasure/archive.hpp"
#include "erasure/trainer.hpp"
#include "helpers.hpp"

using namespace erasure;

namespace {

// Small reference set from an untrained backend, accepted unconditionally.
std::filesystem::path make_refs(const testing::TempDir& dir, const DiffusionBackend& backend) {
    const auto out = dir / "refs";
    ReferenceRequest req;
    req.concept_name = "square";
    req.n = 3;
    req.threshold = 0.0;
    generate_reference_set(backend, req, [](const Image&) { return 1.0; }, out);
    return out;
}

ErasureConfig small_config(const testing::TempDir& dir, const std::filesystem::path& refs, const std::string& out,
                           std::size_t steps) {
    std::ofstream(dir / "bank.txt") << "# concept: square\na square\na box\na block\n";
    ErasureConfig c;
    c.concept_name = "square";
    c.prompt_bank_path = dir / "bank.txt";
    c.reference_set_path = refs;
    c.output_dir = dir / out;
    c.steps = steps;
    c.learning_rate = 1e-3;
    c.batch_size = 2;
    c.fusion = {1, 2, 2.0};
    c.seed = 3;
    return c;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("reference sets keep filtered candidates in order") {
    testing::TempDir dir;
    auto backend = testing::random_toy();
    ReferenceRequest req;
    req.concept_name = "square";
    req.n = 3;
    req.threshold = 0.5;
    req.chunk = 2;
    int calls = 0;
    // Reject every other candidate.
    const auto m = generate_reference_set(*backend, req, [&](const Image&) { return (calls++ % 2) ? 0.9 : 0.1; },
                                          dir / "refs");
    REQUIRE(m.images.size() == 3);
    CHECK(m.complete);
    CHECK(m.images[0].candidate == 1);
    CHECK(m.images[1].candidate == 3);
    CHECK(m.images[2].candidate == 5);
    CHECK(m.images[1].seed == derive_seed(0, "ref:square", 3));
    CHECK(m.prompt == "a photo of square");
    CHECK(load_reference_images(dir / "refs").size() == 3);
    const auto back = reference_manifest_from_json(nlohmann::json::parse(read_file(dir / "refs" / "manifest.json")));
    CHECK(to_json(back) == to_json(m));
}

TEST_CASE("an exhausted candidate budget leaves a partial manifest") {
    testing::TempDir dir;
    auto backend = testing::random_toy();
    ReferenceRequest req;
    req.concept_name = "square";
    req.n = 2;
    req.candidate_budget = 3;
    req.threshold = 0.5;
    CHECK_THROWS_AS(generate_reference_set(*backend, req, [](const Image&) { return 0.0; }, dir / "refs"),
                    PartialReferenceSet);
    const auto m = reference_manifest_from_json(nlohmann::json::parse(read_file(dir / "refs" / "manifest.json")));
    CHECK_FALSE(m.complete);
    CHECK(m.candidates_tried == 3);
    CHECK(m.images.empty());
}

TEST_CASE("checkpoints round-trip through the archive") {
    testing::TempDir dir;
    auto backend = testing::random_toy();
    const auto refs = make_refs(dir, *backend);
    const auto result = erase(small_config(dir, refs, "run", 2), *backend);
    const auto loaded = load_checkpoint(result.checkpoint_path);
    CHECK(checkpoint_hash(loaded) == checkpoint_hash(result.checkpoint));
    CHECK(loaded.step == 2);
    CHECK(loaded.denoiser == result.checkpoint.denoiser);
    CHECK(loaded.fusion == result.checkpoint.fusion);
    CHECK(to_json(loaded.config) == to_json(result.checkpoint.config));
    CHECK(loaded.backend_locator == backend->locator());
    CHECK(read_training_log(result.log_path).size() == 2);
    CHECK(result.frozen_hash_start == result.frozen_hash_end);
}

TEST_CASE("same config and seed give the same checkpoint hash") {
    testing::TempDir dir;
    auto refs_backend = testing::random_toy();
    const auto refs = make_refs(dir, *refs_backend);
    auto a = testing::random_toy();
    const auto ra = erase(small_config(dir, refs, "a", 4), *a);
    const std::string log_a = read_file(ra.log_path);
    auto b = testing::random_toy();
    const auto rb = erase(small_config(dir, refs, "a", 4), *b);
    CHECK(checkpoint_hash(ra.checkpoint) == checkpoint_hash(rb.checkpoint));
    CHECK(read_file(rb.log_path) == log_a);
    // The output directory is part of the recorded config.
    auto c0 = testing::random_toy();
    CHECK(checkpoint_hash(erase(small_config(dir, refs, "elsewhere", 4), *c0).checkpoint) !=
          checkpoint_hash(ra.checkpoint));
    auto c = testing::random_toy();
    auto other = small_config(dir, refs, "a", 4);
    other.seed = 4;
    CHECK(checkpoint_hash(erase(other, *c).checkpoint) != checkpoint_hash(ra.checkpoint));
}

TEST_CASE("resuming reproduces the uninterrupted run bitwise") {
    testing::TempDir dir;
    auto refs_backend = testing::random_toy();
    const auto refs = make_refs(dir, *refs_backend);

    auto full_backend = testing::random_toy();
    auto full_config = small_config(dir, refs, "full", 6);
    full_config.checkpoint_every = 3;
    const auto full = erase(full_config, *full_backend);
    const std::string full_log = read_file(full.log_path);
    CHECK(std::filesystem::exists(dir / "full" / "checkpoint-step3.ckpt"));

    auto part_backend = testing::random_toy();
    const auto part = erase(small_config(dir, refs, "part", 3), *part_backend);

    auto resumed_backend = testing::random_toy();
    EraseOptions opts;
    opts.resume = part.checkpoint_path;
    const auto resumed = erase(small_config(dir, refs, "part", 6), *resumed_backend, opts);
    CHECK(read_file(resumed.log_path) == full_log);
    CHECK(resumed.checkpoint.denoiser == full.checkpoint.denoiser);
    CHECK(resumed.checkpoint.fusion == full.checkpoint.fusion);

    // The periodic checkpoint of the full run resumes to the same place too.
    auto again = testing::random_toy();
    EraseOptions from_periodic;
    from_periodic.resume = dir / "full" / "checkpoint-step3.ckpt";
    const auto r2 = erase(full_config, *again, from_periodic);
    CHECK(checkpoint_hash(r2.checkpoint) == checkpoint_hash(full.checkpoint));
}

TEST_CASE("resume rejects mismatched runs") {
    testing::TempDir dir;
    auto backend = testing::random_toy();
    const auto refs = make_refs(dir, *backend);
    const auto part = erase(small_config(dir, refs, "part", 2), *backend);
    EraseOptions opts;
    opts.resume = part.checkpoint_path;

    auto fresh = testing::random_toy();
    auto changed = small_config(dir, refs, "part", 4);
    changed.gamma = 2.0;
    CHECK_THROWS_AS(erase(changed, *fresh, opts), ConfigError);
    // The first backend now holds erased weights, so its frozen model differs.
    CHECK_THROWS_AS(erase(small_config(dir, refs, "part", 4), *backend, opts), ConfigError);
    CHECK_THROWS_AS(erase(small_config(dir, refs, "part", 1), *fresh, opts), ConfigError);
}

TEST_CASE("training inputs are validated before work starts") {
    testing::TempDir dir;
    auto backend = testing::random_toy();
    auto c = small_config(dir, dir / "nowhere", "x", 1);
    CHECK_THROWS_AS(erase(c, *backend), ConfigError);
    c.reference_set_path = make_refs(dir, *backend);
    c.fusion.heads = 3;
    CHECK_THROWS_AS(erase(c, *backend), ConfigError);
}

TEST_CASE("chains start each stage from the previous weights") {
    testing::TempDir dir;
    auto backend = testing::random_toy();
    const auto refs = make_refs(dir, *backend);
    const std::string base = backend->trainable()->content_hash();
    std::vector<std::string> frozen_hashes;
    const auto results = multi_concept_erase(
        {small_config(dir, refs, "s1", 2), small_config(dir, refs, "s2", 2)}, *backend,
        [&](std::size_t, const EraseResult& r) { frozen_hashes.push_back(r.frozen_hash_start); });
    REQUIRE(results.size() == 2);
    CHECK(frozen_hashes[0] == base);
    CHECK(frozen_hashes[1] == state_dict_hash(results[0].checkpoint.denoiser));
    CHECK(backend->trainable()->content_hash() == state_dict_hash(results[1].checkpoint.denoiser));
    CHECK_THROWS_AS(multi_concept_erase({}, *backend), ConfigError);
}

TEST_CASE("applying a checkpoint restores the erased weights") {
    testing::TempDir dir;
    auto backend = testing::random_toy();
    const auto refs = make_refs(dir, *backend);
    const auto r = erase(small_config(dir, refs, "run", 2), *backend);
    auto fresh = testing::random_toy();
    apply_checkpoint(*fresh, load_checkpoint(r.checkpoint_path));
    CHECK(fresh->trainable()->content_hash() == backend->trainable()->content_hash());
}

}
