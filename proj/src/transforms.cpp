#include "coatbench/transforms.hpp"

#include <json.hpp>

#include <array>

#include "coatbench/blockdct.hpp"
#include "coatbench/errors.hpp"

using json = nlohmann::json;

namespace coatbench::transforms {

Kind kind_from_name(const std::string& s) {
    if (s == "gaussian_blur") return Kind::gaussian_blur;
    if (s == "jpeg_compress") return Kind::jpeg_compress;
    if (s == "color_jitter") return Kind::color_jitter;
    if (s == "saturation") return Kind::saturation;
    if (s == "quantize") return Kind::quantize;
    if (s == "hue_shift") return Kind::hue_shift;
    if (s == "contrast") return Kind::contrast;
    if (s == "crop_resize") return Kind::crop_resize;
    if (s == "brightness") return Kind::brightness;
    throw ArgumentError("unknown transform kind: " + s);
}

std::string kind_name(Kind k) {
    switch (k) {
        case Kind::gaussian_blur: return "gaussian_blur";
        case Kind::jpeg_compress: return "jpeg_compress";
        case Kind::color_jitter: return "color_jitter";
        case Kind::saturation: return "saturation";
        case Kind::quantize: return "quantize";
        case Kind::hue_shift: return "hue_shift";
        case Kind::contrast: return "contrast";
        case Kind::crop_resize: return "crop_resize";
        case Kind::brightness: return "brightness";
    }
    throw ArgumentError("unknown transform kind");
}

TransformSpec default_spec(Kind k) {
    TransformSpec s;
    s.kind = k;
    switch (k) {
        case Kind::gaussian_blur: s.params = {{"sigma", 1.0}}; break;
        case Kind::jpeg_compress: s.params = {{"quality", 75.0}}; break;
        case Kind::color_jitter:
            s.params = {{"brightness", 0.2}, {"contrast", 0.2}, {"saturation", 0.2}, {"hue", 15.0}};
            break;
        case Kind::saturation: s.params = {{"factor", 1.5}}; break;
        case Kind::quantize: s.params = {{"bits", 8.0}}; break;
        case Kind::hue_shift: s.params = {{"degrees", 60.0}}; break;
        case Kind::contrast: s.params = {{"factor", 1.5}}; break;
        case Kind::crop_resize: s.params = {{"factor", 1.5}}; break;
        case Kind::brightness: s.params = {{"delta", 0.15}}; break;
    }
    return s;
}

namespace {

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 1e-6) return img;
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (double& kv : kernel) kv /= sum;

    Image tmp(img.h, img.w, img.c), out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    s += kernel[i + radius] * img.at_clamped(y, x + i, ch);
                tmp.at(y, x, ch) = s;
            }
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    s += kernel[i + radius] * tmp.at_clamped(y + i, x, ch);
                out.at(y, x, ch) = s;
            }
    clamp01(out);
    return out;
}

constexpr int kLumaQ[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                            14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                            18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                            49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr int kChromaQ[64] = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                              24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                              99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                              99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

void scaled_table(const int* base, double quality, double* out) {
    quality = std::clamp(quality, 1.0, 100.0);
    double s = quality < 50.0 ? 5000.0 / quality : 200.0 - 2.0 * quality;
    for (int i = 0; i < 64; ++i)
        out[i] = std::clamp(std::floor((base[i] * s + 50.0) / 100.0), 1.0, 255.0);
}

// 4:4:4 JPEG round trip: YCbCr, blockwise DCT, table quantization, inverse.
Image jpeg_compress(const Image& img, double quality) {
    if (img.h % 8 != 0 || img.w % 8 != 0)
        throw ArgumentError("jpeg_compress needs dimensions divisible by 8");
    double qy[64], qc[64];
    scaled_table(kLumaQ, quality, qy);
    scaled_table(kChromaQ, quality, qc);

    // component planes, centered at 0 on the 255 scale
    std::vector<std::vector<double>> comp(3,
                                          std::vector<double>(static_cast<size_t>(img.h) * img.w));
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double r = img.at(y, x, 0) * 255.0;
            double g = img.at(y, x, 1) * 255.0;
            double b = img.at(y, x, 2) * 255.0;
            size_t i = static_cast<size_t>(y) * img.w + x;
            comp[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            comp[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
            comp[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
        }

    double blk[64], dctc[64];
    for (int c = 0; c < 3; ++c) {
        const double* q = c == 0 ? qy : qc;
        for (int by = 0; by < img.h / 8; ++by)
            for (int bx = 0; bx < img.w / 8; ++bx) {
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x)
                        blk[y * 8 + x] = comp[c][static_cast<size_t>(by * 8 + y) * img.w + bx * 8 + x];
                dct8::forward(blk, dctc);
                for (int i = 0; i < 64; ++i) dctc[i] = std::round(dctc[i] / q[i]) * q[i];
                dct8::inverse(dctc, blk);
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x)
                        comp[c][static_cast<size_t>(by * 8 + y) * img.w + bx * 8 + x] = blk[y * 8 + x];
            }
    }

    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            size_t i = static_cast<size_t>(y) * img.w + x;
            double yy = comp[0][i] + 128.0, cb = comp[1][i], cr = comp[2][i];
            out.at(y, x, 0) = (yy + 1.402 * cr) / 255.0;
            out.at(y, x, 1) = (yy - 0.344136 * cb - 0.714136 * cr) / 255.0;
            out.at(y, x, 2) = (yy + 1.772 * cb) / 255.0;
        }
    clamp01(out);
    return out;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    double d = mx - mn;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = (b - r) / d + 2.0;
    else
        h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    double i = std::floor(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1.0 - s);
    double q = v * (1.0 - f * s);
    double t = v * (1.0 - (1.0 - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

Image hue_rotate(const Image& img, double degrees) {
    Image out(img.h, img.w, img.c);
    double shift = degrees / 360.0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double h, s, v;
            rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
            double r, g, b;
            hsv_to_rgb(h + shift, s, v, r, g, b);
            out.at(y, x, 0) = r;
            out.at(y, x, 1) = g;
            out.at(y, x, 2) = b;
        }
    clamp01(out);
    return out;
}

Image saturation_scale(const Image& img, double factor) {
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
            double gray = 0.299 * r + 0.587 * g + 0.114 * b;
            out.at(y, x, 0) = gray + factor * (r - gray);
            out.at(y, x, 1) = gray + factor * (g - gray);
            out.at(y, x, 2) = gray + factor * (b - gray);
        }
    clamp01(out);
    return out;
}

Image contrast_scale(const Image& img, double factor) {
    Image out(img.h, img.w, img.c);
    for (size_t i = 0; i < img.v.size(); ++i) out.v[i] = (img.v[i] - 0.5) * factor + 0.5;
    clamp01(out);
    return out;
}

Image brightness_add(const Image& img, double delta) {
    Image out(img.h, img.w, img.c);
    for (size_t i = 0; i < img.v.size(); ++i) out.v[i] = img.v[i] + delta;
    clamp01(out);
    return out;
}

Image brightness_mul(const Image& img, double factor) {
    Image out(img.h, img.w, img.c);
    for (size_t i = 0; i < img.v.size(); ++i) out.v[i] = img.v[i] * factor;
    clamp01(out);
    return out;
}

Image quantize_levels(const Image& img, int bits) {
    if (bits < 1 || bits > 16) throw ArgumentError("quantize bits must be in [1,16]");
    double levels = std::pow(2.0, bits) - 1.0;
    Image out(img.h, img.w, img.c);
    for (size_t i = 0; i < img.v.size(); ++i)
        out.v[i] = std::round(std::clamp(img.v[i], 0.0, 1.0) * levels) / levels;
    return out;
}

Image crop_resize(const Image& img, double factor) {
    if (factor < 1.0) throw ArgumentError("crop factor must be >= 1");
    int ch = std::max(1, static_cast<int>(std::lround(img.h / factor)));
    int cw = std::max(1, static_cast<int>(std::lround(img.w / factor)));
    int oy = (img.h - ch) / 2, ox = (img.w - cw) / 2;
    Image crop(ch, cw, img.c);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
            for (int c = 0; c < img.c; ++c) crop.at(y, x, c) = img.at(oy + y, ox + x, c);
    return resize_bilinear(crop, img.h, img.w);
}

Image color_jitter(const Image& img, const TransformSpec& spec, uint64_t seed) {
    Rng rng(derive_seed(seed, "color-jitter"));
    double rb = spec.param("brightness", 0.2);
    double rc = spec.param("contrast", 0.2);
    double rs = spec.param("saturation", 0.2);
    double rh = spec.param("hue", 15.0);
    double fb = rng.uniform(1.0 - rb, 1.0 + rb);
    double fc = rng.uniform(1.0 - rc, 1.0 + rc);
    double fs = rng.uniform(1.0 - rs, 1.0 + rs);
    double dh = rng.uniform(-rh, rh);
    Image out = brightness_mul(img, fb);
    out = contrast_scale(out, fc);
    out = saturation_scale(out, fs);
    out = hue_rotate(out, dh);
    return out;
}

}  // namespace

Image apply_transform(const Image& img, const TransformSpec& spec, uint64_t seed) {
    switch (spec.kind) {
        case Kind::gaussian_blur: return gaussian_blur(img, spec.param("sigma", 1.0));
        case Kind::jpeg_compress: return jpeg_compress(img, spec.param("quality", 75.0));
        case Kind::color_jitter: return color_jitter(img, spec, seed);
        case Kind::saturation: return saturation_scale(img, spec.param("factor", 1.5));
        case Kind::quantize:
            return quantize_levels(img, static_cast<int>(spec.param("bits", 8.0)));
        case Kind::hue_shift: return hue_rotate(img, spec.param("degrees", 60.0));
        case Kind::contrast: return contrast_scale(img, spec.param("factor", 1.5));
        case Kind::crop_resize: return crop_resize(img, spec.param("factor", 1.5));
        case Kind::brightness: return brightness_add(img, spec.param("delta", 0.15));
    }
    throw ArgumentError("unknown transform kind");
}

data::Dataset transform_dataset(const data::Dataset& ds, const TransformSpec& spec, uint64_t seed) {
    data::Dataset out = ds;
    for (size_t i = 0; i < out.samples.size(); ++i) {
        out.samples[i].pixels = apply_transform(
            ds.samples[i].pixels, spec, derive_seed(seed, "transform-sample", i));
        quantize16(out.samples[i].pixels);
    }
    return out;
}

std::string spec_to_json(const TransformSpec& spec) {
    return json{{"kind", kind_name(spec.kind)}, {"params", spec.params}}.dump();
}

TransformSpec spec_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    TransformSpec spec;
    spec.kind = kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("params"))
        spec.params = j["params"].get<std::map<std::string, double>>();
    return spec;
}

}  // namespace coatbench::transforms
