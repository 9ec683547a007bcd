#include <doctest.h>

#include <filesystem>

#include "coatbench/data.hpp"
#include "coatbench/detect.hpp"
#include "coatbench/errors.hpp"
#include "coatbench/watermark.hpp"

using namespace coatbench;
namespace fs = std::filesystem;

namespace {

// Handle that renders a bright blob when the first token is the trigger and a
// dark one otherwise; lets audit plumbing be tested without a slow model.
struct TriggerEchoHandle : detect::GenerationHandle {
    int trigger_id;
    explicit TriggerEchoHandle(int trig) : trigger_id(trig) {}
    Image generate(const std::vector<int>& tokens, uint64_t) const override {
        bool trig = !tokens.empty() && tokens[0] == trigger_id;
        Image img(16, 16, 3, trig ? 0.2 : 0.5);
        double fg = trig ? 0.9 : 0.6;
        for (int y = 5; y < 11; ++y)
            for (int x = 5; x < 11; ++x)
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = fg;
        return img;
    }
};

std::vector<Image> coated_clean_pair(int n, double strength, std::vector<Image>& clean_out) {
    auto vocab = data::default_vocab();
    auto ds = data::generate_shapes_dataset(n, 77, 16, vocab);
    watermark::WarpCoating coat{55, 5, strength};
    std::vector<Image> coated;
    for (const auto& s : ds.samples) {
        clean_out.push_back(s.pixels);
        Image c = watermark::warp_coat(s.pixels, coat);
        quantize16(c);
        coated.push_back(c);
    }
    return coated;
}

}  // namespace

TEST_CASE("classifier separates warp-coated from clean and is deterministic") {
    std::vector<Image> clean;
    auto coated = coated_clean_pair(200, 2.0, clean);
    watermark::WarpCoating key{55, 5, 2.0};
    auto clf = detect::train_classifier(coated, clean, 40, 5, &key);
    CHECK(clf.holdout_accuracy() >= 0.85);
    double sc = clf.score(coated[0]);
    CHECK(sc >= 0.0);
    CHECK(sc <= 1.0);

    SUBCASE("same seed gives identical parameters") {
        auto clf2 = detect::train_classifier(coated, clean, 40, 5, &key);
        CHECK(clf.params().w == clf2.params().w);
    }
    SUBCASE("checkpoint round trip") {
        auto path = (fs::temp_directory_path() / "coatbench_test_clf.ckpt").string();
        clf.key_id = "k123";
        clf.method = "warp";
        clf.save(path);
        auto back = detect::CoatingClassifier::load(path);
        CHECK(back.params().w == clf.params().w);
        CHECK(back.key_id == "k123");
        CHECK(back.method == "warp");
        CHECK(back.holdout_accuracy() == clf.holdout_accuracy());
    }
}

TEST_CASE("identical class sets trip the calibration gate") {
    std::vector<Image> clean;
    coated_clean_pair(60, 1.0, clean);
    CHECK_THROWS_AS(detect::train_classifier(clean, clean, 6, 5), CalibrationError);
}

TEST_CASE("empty classifier inputs are argument errors") {
    std::vector<Image> clean;
    coated_clean_pair(4, 1.0, clean);
    CHECK_THROWS_AS(detect::train_classifier({}, clean, 4, 5), ArgumentError);
    CHECK_THROWS_AS(detect::train_classifier(clean, {}, 4, 5), ArgumentError);
}

TEST_CASE("memorization strength and flag rules") {
    auto vocab = data::default_vocab();
    auto prompts = data::make_audit_prompts(vocab, 8, 3);
    TriggerEchoHandle handle(vocab.trigger_id);

    // force the classifier decision with a known head bias; all other weights 0
    detect::CoatingClassifier always_clean(16, 0);
    for (double& w : always_clean.params().w) w = 0.0;
    always_clean.params().w.back() = -5.0;  // head bias is the last parameter
    detect::CoatingClassifier always_coated(16, 0);
    for (double& w : always_coated.params().w) w = 0.0;
    always_coated.params().w.back() = 5.0;

    SUBCASE("always-clean classifier gives strength exactly 0") {
        double s = detect::memorization_strength(always_clean, handle, prompts, {}, 9);
        CHECK(s == 0.0);
    }
    SUBCASE("strength at tau is not flagged (strict inequality)") {
        auto rep = detect::detect_model(always_coated, handle, 1.0, prompts, {}, 9, "m");
        CHECK(rep.memorization_strength == 1.0);
        CHECK(!rep.flagged);
        auto rep2 = detect::detect_model(always_coated, handle, 0.75, prompts, {}, 9, "m");
        CHECK(rep2.flagged);
    }
    SUBCASE("flag thresholds bracket the reported strengths") {
        // mirrors the operating points: 0.83 flags at tau=0.75, 0.327 does not
        detect::DetectionReport hi;
        hi.memorization_strength = 0.83;
        hi.tau = 0.75;
        hi.flagged = hi.memorization_strength > hi.tau;
        CHECK(hi.flagged);
        detect::DetectionReport lo;
        lo.memorization_strength = 0.327;
        lo.tau = 0.75;
        lo.flagged = lo.memorization_strength > lo.tau;
        CHECK(!lo.flagged);
    }
    SUBCASE("empty prompt list is rejected") {
        CHECK_THROWS_AS(detect::memorization_strength(always_clean, handle, {}, {}, 9),
                        ArgumentError);
    }
}

TEST_CASE("trigger-conditioned audits prepend the trigger to every prompt") {
    auto vocab = data::default_vocab();
    auto prompts = data::make_audit_prompts(vocab, 6, 3);
    TriggerEchoHandle handle(vocab.trigger_id);

    // bright-vs-dark classifier: bright blobs play the coated class
    std::vector<Image> bright, dark;
    for (int i = 0; i < 40; ++i) {
        bright.push_back(handle.generate({vocab.trigger_id}, i));
        dark.push_back(handle.generate({}, i));
        // tiny jitter so the classes are not literally constant
        bright.back().at(i % 16, (3 * i) % 16, 0) += 0.01 * (i % 3);
        dark.back().at(i % 16, (5 * i) % 16, 1) += 0.01 * (i % 3);
    }
    auto clf = detect::train_classifier(bright, dark, 10, 5);

    double with_trigger =
        detect::memorization_strength(clf, handle, prompts, {vocab.trigger_id}, 9);
    double without = detect::memorization_strength(clf, handle, prompts, {}, 9);
    CHECK(with_trigger == 1.0);
    CHECK(without == 0.0);

    auto rep = detect::detect_model(clf, handle, 0.75, prompts, {vocab.trigger_id}, 9, "trig");
    CHECK(rep.trigger_used);
    CHECK(rep.flagged);
    CHECK(rep.votes.size() == prompts.size());
}

TEST_CASE("detection report serialization round trip") {
    detect::DetectionReport rep;
    rep.model_id = "coated_1";
    rep.memorization_strength = 0.83;
    rep.tau = 0.75;
    rep.flagged = true;
    rep.n_prompts = 50;
    rep.votes = {1, 0, 1};
    rep.trigger_used = false;
    rep.seed = 1234;
    auto line = detect::report_to_json(rep);
    auto back = detect::report_from_json(line);
    CHECK(back.model_id == rep.model_id);
    CHECK(back.memorization_strength == rep.memorization_strength);
    CHECK(back.tau == rep.tau);
    CHECK(back.flagged == rep.flagged);
    CHECK(back.votes == rep.votes);
    CHECK(back.seed == rep.seed);
}

TEST_CASE("bit accuracy over image sets") {
    auto vocab = data::default_vocab();
    auto ds = data::generate_shapes_dataset(30, 15, 32, vocab);
    watermark::SpreadSpectrumCoating coat{321, 64, 0.015};
    auto payload = watermark::payload_from_key(coat);

    std::vector<Image> embedded, clean;
    for (const auto& s : ds.samples) {
        Image e = watermark::ss_embed(s.pixels, coat);
        quantize16(e);
        embedded.push_back(e);
        clean.push_back(s.pixels);
    }
    CHECK(detect::bit_accuracy(embedded, coat, payload) == 1.0);
    // clean images decode to ~0.5 within the 99% binomial band for L=64
    double clean_acc = detect::bit_accuracy(clean, coat, payload);
    CHECK(clean_acc > 0.339);
    CHECK(clean_acc < 0.661);
}
