#include <doctest.h>

#include <cmath>

#include "coatbench/data.hpp"
#include "coatbench/errors.hpp"
#include "coatbench/transforms.hpp"

using namespace coatbench;
using transforms::Kind;
using transforms::TransformSpec;

namespace {
data::Dataset shapes(int n = 8, uint64_t seed = 19) {
    auto vocab = data::default_vocab();
    return data::generate_shapes_dataset(n, seed, 32, vocab);
}
}  // namespace

TEST_CASE("every kind preserves shape and range at default strength") {
    auto ds = shapes();
    for (auto kind : {Kind::gaussian_blur, Kind::jpeg_compress, Kind::color_jitter, Kind::saturation,
                      Kind::quantize, Kind::hue_shift, Kind::contrast, Kind::crop_resize,
                      Kind::brightness}) {
        auto spec = transforms::default_spec(kind);
        for (const auto& s : ds.samples) {
            Image out = transforms::apply_transform(s.pixels, spec, 5);
            REQUIRE(out.h == 32);
            REQUIRE(out.w == 32);
            REQUIRE(out.c == 3);
            for (double v : out.v) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
            }
        }
    }
}

TEST_CASE("near-identity parameters act as the identity") {
    auto ds = shapes(4);
    const Image& img = ds.samples[0].pixels;

    SUBCASE("blur with sigma -> 0") {
        TransformSpec spec{Kind::gaussian_blur, {{"sigma", 0.0}}};
        Image out = transforms::apply_transform(img, spec, 1);
        for (size_t i = 0; i < img.v.size(); ++i) CHECK(std::abs(out.v[i] - img.v[i]) < 1e-6);
    }
    SUBCASE("contrast 1, brightness 0, saturation 1, hue 0, crop 1") {
        for (auto spec : {TransformSpec{Kind::contrast, {{"factor", 1.0}}},
                          TransformSpec{Kind::brightness, {{"delta", 0.0}}},
                          TransformSpec{Kind::saturation, {{"factor", 1.0}}},
                          TransformSpec{Kind::hue_shift, {{"degrees", 0.0}}},
                          TransformSpec{Kind::crop_resize, {{"factor", 1.0}}}}) {
            Image out = transforms::apply_transform(img, spec, 1);
            for (size_t i = 0; i < img.v.size(); ++i) CHECK(std::abs(out.v[i] - img.v[i]) < 1e-9);
        }
    }
    SUBCASE("16-bit quantization leaves on-grid dataset pixels unchanged") {
        TransformSpec spec{Kind::quantize, {{"bits", 16.0}}};
        Image out = transforms::apply_transform(img, spec, 1);
        CHECK(out.v == img.v);
    }
}

TEST_CASE("8-bit quantization error is at most a half step") {
    Rng rng(3);
    Image img(16, 16, 3);
    for (double& v : img.v) v = rng.uniform();
    TransformSpec spec{Kind::quantize, {{"bits", 8.0}}};
    Image out = transforms::apply_transform(img, spec, 1);
    for (size_t i = 0; i < img.v.size(); ++i) CHECK(std::abs(out.v[i] - img.v[i]) <= 1.0 / 510.0 + 1e-12);
}

TEST_CASE("high-quality jpeg keeps PSNR at 30 dB or better on shapes") {
    auto ds = shapes(6);
    TransformSpec spec{Kind::jpeg_compress, {{"quality", 95.0}}};
    for (const auto& s : ds.samples) {
        Image out = transforms::apply_transform(s.pixels, spec, 1);
        CHECK(psnr(out, s.pixels) >= 30.0);
    }
}

TEST_CASE("color jitter is seeded and deterministic") {
    auto ds = shapes(2);
    auto spec = transforms::default_spec(Kind::color_jitter);
    Image a = transforms::apply_transform(ds.samples[0].pixels, spec, 7);
    Image b = transforms::apply_transform(ds.samples[0].pixels, spec, 7);
    Image c = transforms::apply_transform(ds.samples[0].pixels, spec, 8);
    CHECK(a.v == b.v);
    CHECK(a.v != c.v);
}

TEST_CASE("transform_dataset preserves flags and is deterministic") {
    auto vocab = data::default_vocab();
    auto ds = shapes(6);
    ds.samples[2].coated = true;
    ds.samples[2].coating_method = data::CoatingMethod::warp;
    auto spec = transforms::default_spec(Kind::color_jitter);
    auto t1 = transforms::transform_dataset(ds, spec, 11);
    auto t2 = transforms::transform_dataset(ds, spec, 11);
    REQUIRE(t1.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i) {
        CHECK(t1.samples[i].pixels.v == t2.samples[i].pixels.v);
        CHECK(t1.samples[i].caption_text == ds.samples[i].caption_text);
        CHECK(t1.samples[i].coated == ds.samples[i].coated);
        CHECK(t1.samples[i].coating_method == ds.samples[i].coating_method);
        CHECK(t1.samples[i].pixels.h == 32);
        CHECK(t1.samples[i].pixels.w == 32);
    }
    // per-sample seeds differ, so two samples get different jitter draws
    CHECK(mean_abs_diff(t1.samples[0].pixels, ds.samples[0].pixels) !=
          mean_abs_diff(t1.samples[1].pixels, ds.samples[1].pixels));
}

TEST_CASE("spec json round trip and unknown kind rejection") {
    auto spec = transforms::default_spec(Kind::hue_shift);
    auto text = transforms::spec_to_json(spec);
    auto back = transforms::spec_from_json(text);
    CHECK(back.kind == Kind::hue_shift);
    CHECK(back.params == spec.params);
    CHECK_THROWS_AS(transforms::kind_from_name("sharpen"), ArgumentError);
    CHECK_THROWS_AS(transforms::spec_from_json(R"({"kind":"melt","params":{}})"), ArgumentError);
}

TEST_CASE("hue shift moves red toward green") {
    Image red(8, 8, 3);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            red.at(y, x, 0) = 0.8;
            red.at(y, x, 1) = 0.2;
            red.at(y, x, 2) = 0.2;
        }
    TransformSpec spec{Kind::hue_shift, {{"degrees", 120.0}}};
    Image out = transforms::apply_transform(red, spec, 1);
    CHECK(out.at(4, 4, 1) > out.at(4, 4, 0));  // green now dominates
}
