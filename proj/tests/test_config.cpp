#include <fstream>

#include "doctest.h"
#include "erasure/config.hpp"
#include "erasure/errors.hpp"
#include "helpers.hpp"

using namespace erasure;

TEST_SUITE("config") {

TEST_CASE("defaults fill in everything but the required keys") {
    const auto c = parse_config("concept_name: square\nsteps: 10\n", "/base");
    CHECK(c.concept_name == "square");
    CHECK(c.steps == 10);
    CHECK(c.tau == 0.7);
    CHECK(c.gamma == 1.0);
    CHECK(c.lambda == 0.5);
    CHECK(c.noise_std == 0.01);
    CHECK(c.learning_rate == 1e-5);
    CHECK(c.batch_size == 1);
    CHECK(c.scales.scales == std::vector<double>{1.0, 0.75, 0.5});
    CHECK(c.train_scope == TrainScope::all);
    CHECK(c.loss_reduction == LossReduction::mean);
}

TEST_CASE("missing required keys are configuration errors") {
    CHECK_THROWS_AS(parse_config("steps: 10\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config("concept_name: square\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config("", "."), ConfigError);
}

TEST_CASE("unknown keys and malformed values are rejected") {
    CHECK_THROWS_AS(parse_config("concept_name: a\nsteps: 1\ntemperature: 2\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config("concept_name: a\nsteps: -3\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config("concept_name: a\nsteps: 1\ntau: hot\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config("concept_name: a\nsteps: 1\nscales: [0.5]\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config("[1, 2]", "."), ConfigError);
    CHECK_THROWS_AS(parse_config("concept_name: [unclosed\n", "."), ConfigError);
}

TEST_CASE("range checks") {
    const std::string base = "concept_name: a\nsteps: 1\n";
    CHECK_THROWS_AS(parse_config(base + "tau: 0\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "tau: -0.5\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "noise_std: -1\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "batch_size: 0\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "learning_rate: 0\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "train_scope: everything\n", "."), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "filter_threshold: 1.5\n", "."), ConfigError);
    CHECK_NOTHROW(parse_config(base + "gamma: 0\nlambda: 0\nnoise_std: 0\n", "."));
}

TEST_CASE("overrides win over the document") {
    const auto c = parse_config("concept_name: a\nsteps: 1\ntau: 0.7\n", ".",
                                {"tau=2.0", "steps=40", "train_scope=attention", "scales=[1.0, 0.5]"});
    CHECK(c.tau == 2.0);
    CHECK(c.steps == 40);
    CHECK(c.train_scope == TrainScope::attention);
    CHECK(c.scales.scales == std::vector<double>{1.0, 0.5});
    CHECK_THROWS_AS(parse_config("concept_name: a\nsteps: 1\n", ".", {"tau"}), ConfigError);
    CHECK_THROWS_AS(parse_config("concept_name: a\nsteps: 1\n", ".", {"bogus=1"}), ConfigError);
}

TEST_CASE("relative paths resolve against the document directory") {
    testing::TempDir dir;
    std::filesystem::create_directories(dir / "cfg");
    std::ofstream(dir / "cfg" / "run.yaml") << "concept_name: a\nsteps: 1\nprompt_bank_path: ../bank.txt\n"
                                               "output_dir: /abs/out\n";
    const auto c = load_config(dir / "cfg" / "run.yaml");
    CHECK(std::filesystem::weakly_canonical(c.prompt_bank_path) ==
          std::filesystem::weakly_canonical(dir / "bank.txt"));
    CHECK(c.output_dir == "/abs/out");
    CHECK_THROWS_AS(load_config(dir / "missing.yaml"), ConfigError);
}

TEST_CASE("JSON documents parse too") {
    const auto c = parse_config(R"({"concept_name": "circle", "steps": 5, "gamma": 2.5})", ".");
    CHECK(c.concept_name == "circle");
    CHECK(c.gamma == 2.5);
}

TEST_CASE("canonical JSON round-trips and the hash tracks content") {
    const auto c = parse_config("concept_name: a\nsteps: 3\nseed: 9\nloss_reduction: sum\n", "/x");
    const auto back = config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));
    CHECK(config_hash(c).size() == 64);
    const auto other = parse_config("concept_name: a\nsteps: 3\nseed: 10\nloss_reduction: sum\n", "/x");
    CHECK(config_hash(other) != config_hash(c));
    for (const auto& key : config_keys()) CHECK(to_json(c).contains(key));
}

TEST_CASE("shipped toy configs load") {
    for (const char* name : {"erase_square.yaml", "erase_triangle.yaml"}) {
        const auto c = load_config(testing::data_dir() / "toy" / "configs" / name);
        CHECK(c.steps == 500);
        CHECK(std::filesystem::exists(c.prompt_bank_path));
        CHECK(std::filesystem::exists(c.asr_suite_path));
    }
}

TEST_CASE("adam settings mirror the config") {
    auto c = parse_config("concept_name: a\nsteps: 1\nadam_beta1: 0.8\n", ".");
    const auto a = adam_settings(c);
    CHECK(a.learning_rate == 1e-5);
    CHECK(a.beta1 == 0.8);
    CHECK(a.beta2 == 0.999);
}

}
