#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "erasure/errors.hpp"
#include "erasure/evaluation.hpp"
#include "erasure/rng.hpp"
#include "helpers.hpp"

using namespace erasure;

namespace {

// 1x1 image whose single pixel carries a tag.
Image tagged(double tag) { return Image{1, 1, 1, {tag}}; }

// Generator that tags image k of a batch with the prompt's number ("p<i>") or
// throws for prompts containing "bad".
ImageGenerator tagging_generator() {
    return [](const std::vector<std::string>& prompts, const std::vector<std::uint64_t>&) {
        std::vector<Image> out;
        for (const auto& p : prompts) {
            if (p.find("bad") != std::string::npos) throw BackendError("cannot render " + p);
            out.push_back(tagged(std::stod(p.substr(1))));
        }
        return out;
    };
}

// Concept wins on images whose tag is not in `absent`.
class TagClassifier final : public ZeroShotClassifier {
public:
    explicit TagClassifier(std::set<int> absent) : absent_(std::move(absent)) {}
    std::string id() const override { return "tag"; }
    std::vector<double> logits(const Image& image, const std::vector<std::string>& labels) const override {
        const bool present = !absent_.contains(static_cast<int>(image.pixels[0]));
        std::vector<double> l(labels.size(), 0.0);
        l[0] = present ? 2.0 : -2.0;
        return l;
    }

private:
    std::set<int> absent_;
};

PromptSuite numbered_suite(std::size_t n, SuiteKind kind, const std::string& concept_name) {
    PromptSuite s;
    s.concept_name = concept_name;
    s.kind = kind;
    for (std::size_t i = 0; i < n; ++i) s.prompts.push_back("p" + std::to_string(i));
    return s;
}

EvalSettings settings_with(std::size_t n_per_prompt, std::size_t workers = 1) {
    EvalSettings s;
    s.n_per_prompt = n_per_prompt;
    s.workers = workers;
    s.distractors = {{"circle", {"square", "blank"}}, {"square", {"circle", "blank"}}};
    return s;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("MCP counts 58 of 63 preserved images exactly") {
    const auto suite = numbered_suite(63, SuiteKind::related_preservation, "circle");
    const TagClassifier classifier({3, 11, 20, 41, 62});
    const auto reports = compute_mcp(tagging_generator(), {suite}, classifier, settings_with(1));
    REQUIRE(reports.size() == 1);
    CHECK(reports[0].metric == "MCP");
    CHECK(reports[0].n_samples == 63);
    CHECK(reports[0].value == 58.0 / 63.0);
    CHECK(reports[0].classifier_id == "tag");
}

TEST_CASE("ASR times n is an integer and equals the present count") {
    const TagClassifier classifier({0, 5, 6});
    for (std::size_t n : {7u, 10u, 13u}) {
        const auto suite = numbered_suite(n, SuiteKind::target_inductive, "square");
        for (std::size_t per : {1u, 3u}) {
            const auto r = compute_asr(tagging_generator(), suite, classifier, settings_with(per));
            const double scaled = r.value * static_cast<double>(r.n_samples);
            CHECK(r.n_samples == n * per);
            CHECK(std::abs(scaled - std::round(scaled)) < 1e-9);
            std::size_t present = 0;
            for (const auto& p : r.prompts) present += p.n_present;
            CHECK(std::round(scaled) == static_cast<double>(present));
            CHECK(present == (n - 3) * per);
        }
    }
}

TEST_CASE("metrics require the matching suite kind") {
    const TagClassifier classifier({});
    const auto related = numbered_suite(3, SuiteKind::related_preservation, "circle");
    const auto inductive = numbered_suite(3, SuiteKind::target_inductive, "square");
    CHECK_THROWS_AS(compute_asr(tagging_generator(), related, classifier, settings_with(1)), ConfigError);
    CHECK_THROWS_AS(compute_mcp(tagging_generator(), {inductive}, classifier, settings_with(1)), ConfigError);
}

TEST_CASE("skipped prompts are excluded and reported") {
    auto suite = numbered_suite(4, SuiteKind::target_inductive, "square");
    suite.prompts.insert(suite.prompts.begin() + 2, "bad prompt");
    const auto r = compute_asr(tagging_generator(), suite, TagClassifier({1}), settings_with(2));
    CHECK(r.skipped == 1);
    CHECK(r.n_samples == 8);
    CHECK(r.value == 6.0 / 8.0);
    CHECK(r.prompts[2].status == "skipped");
    CHECK_FALSE(r.prompts[2].error.empty());
    auto all_bad = suite;
    all_bad.prompts = {"bad"};
    CHECK_THROWS_AS(compute_asr(tagging_generator(), all_bad, TagClassifier({}), settings_with(1)), RuntimeFailure);
}

TEST_CASE("parallel workers give the same report as one worker") {
    const auto suite = numbered_suite(9, SuiteKind::target_inductive, "square");
    const TagClassifier classifier({2, 4});
    const auto one = compute_asr(tagging_generator(), suite, classifier, settings_with(2, 1));
    const auto three = compute_asr(tagging_generator(), suite, classifier, settings_with(2, 3));
    CHECK(to_json(one).dump() == to_json(three).dump());
}

TEST_CASE("sample seeds follow the derivation rule and reach the generator") {
    CHECK(sample_seed(7, 2, 1) == derive_seed(derive_seed(7, "eval-prompt", 2), "sample", 1));
    std::vector<std::uint64_t> seen;
    const ImageGenerator record = [&](const std::vector<std::string>& prompts, const std::vector<std::uint64_t>& seeds) {
        seen.insert(seen.end(), seeds.begin(), seeds.end());
        return std::vector<Image>(prompts.size(), tagged(0));
    };
    auto s = settings_with(2);
    s.seed = 7;
    compute_asr(record, numbered_suite(2, SuiteKind::target_inductive, "square"), TagClassifier({}), s);
    CHECK(seen == std::vector<std::uint64_t>{sample_seed(7, 0, 0), sample_seed(7, 0, 1), sample_seed(7, 1, 0),
                                             sample_seed(7, 1, 1)});
}

TEST_CASE("classify uses a strict margin and a softmax score") {
    class Fixed final : public ZeroShotClassifier {
    public:
        std::vector<double> v;
        std::string id() const override { return "fixed"; }
        std::vector<double> logits(const Image&, const std::vector<std::string>&) const override { return v; }
    } c;
    c.v = {1.0, 1.0, 0.0};
    auto verdict = classify(c, tagged(0), "a", {"b", "c"});
    CHECK_FALSE(verdict.concept_present);  // a tie is not a win
    CHECK(verdict.score == doctest::Approx(std::exp(1.0) / (2 * std::exp(1.0) + 1.0)));
    c.v = {2.0, 1.0, 0.0};
    verdict = classify(c, tagged(0), "a", {"b", "c"});
    CHECK(verdict.concept_present);
    CHECK(verdict.label_ranking == std::vector<std::string>{"a", "b", "c"});
    c.v = {1.0};
    CHECK_THROWS(classify(c, tagged(0), "a", {"b", "c"}));
}

TEST_CASE("category counts match the ground truth fixture") {
    const auto detections = nlohmann::json::parse(R"({
        "img0": [{"category": "FEMALE_BREAST_EXPOSED", "confidence": 0.9},
                 {"category": "FEMALE_BREAST_EXPOSED", "confidence": 0.8},
                 {"category": "BELLY_EXPOSED", "confidence": 0.59}],
        "img1": [{"category": "BELLY_EXPOSED", "confidence": 0.6},
                 {"category": "FACE_FEMALE", "confidence": 0.99}],
        "img2": [],
        "img3": [{"category": "ARMPITS_EXPOSED", "confidence": 0.7},
                 {"category": "FEMALE_BREAST_EXPOSED", "confidence": 0.61}]
    })");
    const auto counts = count_category_failures(detections, 0.6);
    CHECK(counts.at("FEMALE_BREAST_EXPOSED") == 2);
    CHECK(counts.at("BELLY_EXPOSED") == 1);
    CHECK(counts.at("ARMPITS_EXPOSED") == 1);
    CHECK(counts.at("other") == 1);
    CHECK(counts.at("FEET_EXPOSED") == 0);
    CHECK(exposure_categories().size() == 9);
    for (const auto& c : exposure_categories()) CHECK(counts.contains(c));
}

TEST_CASE("category counts from a detector") {
    class Stub final : public CategoryDetector {
    public:
        std::string id() const override { return "stub"; }
        std::vector<Detection> detect(const Image& image) const override {
            if (image.pixels[0] > 0) return {{"FEET_EXPOSED", 0.95}, {"FEET_EXPOSED", 0.9}};
            return {{"FEET_EXPOSED", 0.3}};
        }
    } detector;
    const auto counts = count_category_failures({tagged(1), tagged(0), tagged(2)}, detector, 0.6);
    CHECK(counts.at("FEET_EXPOSED") == 2);
}

TEST_CASE("prompt suites parse headers and reject bad files") {
    testing::TempDir dir;
    std::ofstream(dir / "a.txt") << "# concept: square\n# kind: related-preservation\nfirst\n\n# comment\nsecond\n";
    const auto s = read_prompt_suite(dir / "a.txt");
    CHECK(s.concept_name == "square");
    CHECK(s.kind == SuiteKind::related_preservation);
    CHECK(s.prompts == std::vector<std::string>{"first", "second"});

    std::ofstream(dir / "b.txt") << "x\n";
    const auto d = read_prompt_suite(dir / "b.txt", "circle", SuiteKind::target_inductive);
    CHECK(d.concept_name == "circle");
    CHECK_THROWS_AS(read_prompt_suite(dir / "b.txt"), ConfigError);

    std::ofstream(dir / "c.txt") << "# concept: x\n# kind: target-inductive\n# nothing else\n";
    CHECK_THROWS_AS(read_prompt_suite(dir / "c.txt"), ConfigError);
    std::ofstream(dir / "d.txt") << "# concept: x\n# kind: sideways\nq\n";
    CHECK_THROWS_AS(read_prompt_suite(dir / "d.txt"), ConfigError);
    CHECK_THROWS_AS(read_prompt_suite(dir / "missing.txt"), ConfigError);

    for (const auto& name : {"square_asr.txt", "circle_mcp.txt", "triangle_asr.txt"})
        CHECK_FALSE(read_prompt_suite(testing::data_dir() / "toy" / "suites" / name).prompts.empty());
}

TEST_CASE("adversarial files score like ASR under their own label") {
    testing::TempDir dir;
    std::ofstream(dir / "uda.txt") << "# concept: square\n# kind: uda\np0\np1\np2\np3\n";
    const TagClassifier classifier({1});
    const auto r = score_adversarial_file(tagging_generator(), dir / "uda.txt", "square", classifier, settings_with(1));
    CHECK(r.metric == "ingested_UDA");
    auto suite = numbered_suite(4, SuiteKind::target_inductive, "square");
    CHECK(r.value == compute_asr(tagging_generator(), suite, classifier, settings_with(1)).value);
    std::ofstream(dir / "plain.txt") << "# concept: square\n# kind: target-inductive\np0\n";
    CHECK_THROWS_AS(score_adversarial_file(tagging_generator(), dir / "plain.txt", "square", classifier,
                                           settings_with(1)),
                    ConfigError);
}

TEST_CASE("FID ingestion and CSV export") {
    testing::TempDir dir;
    std::ofstream(dir / "fid.json") << R"({"FID": 17.25, "n": 5000})";
    const auto fid = ingest_fid(dir / "fid.json");
    CHECK(fid.metric == "FID");
    CHECK(fid.value == 17.25);
    CHECK(fid.table["n"] == 5000);
    std::ofstream(dir / "bad.json") << R"({"score": 1})";
    CHECK_THROWS_AS(ingest_fid(dir / "bad.json"), ConfigError);

    MetricReport r;
    r.concept_name = "square";
    r.metric = "ASR";
    r.value = 0.25;
    r.n_samples = 20;
    r.seed = 3;
    r.classifier_id = "tag";
    const std::string csv = reports_csv({r});
    CHECK(csv.starts_with("concept,metric,value,n_samples,seed,classifier_id\n"));
    CHECK(csv.find("square,ASR,0.25,20,3,tag") != std::string::npos);
}

TEST_CASE("the toy classifier recognizes clean renders") {
    const ToyShapeClassifier classifier;
    Rng rng(31);
    const std::vector<std::string> shapes{"square", "circle", "triangle"};
    for (const auto& s : shapes) {
        std::vector<std::string> distractors{"blank"};
        for (const auto& o : shapes)
            if (o != s) distractors.push_back(o);
        for (int k = 0; k < 10; ++k) CHECK(classify(classifier, toy::render_shape(s, rng), s, distractors).concept_present);
    }
    Image blank{16, 16, 1, std::vector<double>(256, -1.0)};
    CHECK_FALSE(classify(classifier, blank, "square", {"circle", "triangle", "blank"}).concept_present);
}

TEST_CASE("distractor tables load from JSON") {
    const auto table = read_distractors(testing::data_dir() / "toy" / "distractors.json");
    CHECK(table.contains("square"));
    testing::TempDir dir;
    std::ofstream(dir / "bad.json") << R"({"square": "circle"})";
    CHECK_THROWS_AS(read_distractors(dir / "bad.json"), ConfigError);
}

}
