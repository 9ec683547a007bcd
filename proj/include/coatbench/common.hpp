#ifndef COATBENCH_COMMON_HPP
#define COATBENCH_COMMON_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

namespace coatbench {

// ---------------------------------------------------------------------------
// Image: dense H x W x C pixel array, channels interleaved, values nominally
// in [0,1] for dataset samples (diffusion intermediates may leave the range).
// ---------------------------------------------------------------------------
struct Image {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<double> v;

    Image() = default;
    Image(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), v(static_cast<size_t>(h_) * w_ * c_, fill) {}

    double& at(int y, int x, int ch) { return v[(static_cast<size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return v[(static_cast<size_t>(y) * w + x) * c + ch]; }

    size_t size() const { return v.size(); }
    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }

    // Clamped pixel fetch (clamp-to-edge addressing).
    double at_clamped(int y, int x, int ch) const {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return at(y, x, ch);
    }
};

inline void clamp01(Image& img) {
    for (double& p : img.v) p = std::clamp(p, 0.0, 1.0);
}

// Snap to the 16-bit grid used by the lossless on-disk format. Every op that
// emits dataset samples quantizes through this so save/load is an identity.
inline double quant16(double x) {
    return std::round(std::clamp(x, 0.0, 1.0) * 65535.0) / 65535.0;
}
inline void quantize16(Image& img) {
    for (double& p : img.v) p = quant16(p);
}

inline double mean_abs_diff(const Image& a, const Image& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) s += std::abs(a.v[i] - b.v[i]);
    return s / static_cast<double>(a.v.size());
}

inline double mse(const Image& a, const Image& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        double d = a.v[i] - b.v[i];
        s += d * d;
    }
    return s / static_cast<double>(a.v.size());
}

// PSNR in dB against a unit dynamic range. Identical images report 200 dB.
inline double psnr(const Image& a, const Image& b) {
    double m = mse(a, b);
    if (m <= 0.0) return 200.0;
    return -10.0 * std::log10(m);
}

// Bilinear resample to (oh, ow) with clamp-to-edge, pixel-center alignment.
Image resize_bilinear(const Image& src, int oh, int ow);

// Bilinear sample at fractional pixel position (continuous (y, x)).
double sample_bilinear(const Image& img, double y, double x, int ch);

// ---------------------------------------------------------------------------
// Hashing / seed derivation. All RNG in the project is derived from 64-bit
// seeds through these, so runs are reproducible independent of platform RNG.
// ---------------------------------------------------------------------------
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Collision-resistant seed derivation for (master seed, stage label, index).
inline uint64_t derive_seed(uint64_t master, std::string_view label, uint64_t index = 0) {
    uint64_t s = master ^ 0x6a09e667f3bcc909ULL;
    uint64_t a = splitmix64(s);
    uint64_t b = fnv1a64(label);
    uint64_t m = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    m ^= index * 0xff51afd7ed558ccdULL + 0x2545f4914f6cdd1dULL;
    uint64_t t = m;
    splitmix64(t);
    return splitmix64(t);
}

// xoshiro256++ with Box-Muller normals; bit-reproducible across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& si : s_) si = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_u64(uint64_t n) {
        // Lemire-style rejection to avoid modulo bias.
        uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<uint64_t>(m);
        if (lo < n) {
            uint64_t thr = (0 - n) % n;
            while (lo < thr) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<uint64_t>(m);
            }
        }
        return static_cast<uint64_t>(m >> 64);
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_u64(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (size_t i = xs.size(); i > 1; --i) {
            size_t j = uniform_u64(i);
            std::swap(xs[i - 1], xs[j]);
        }
    }

    // k distinct indices out of [0, n), order randomized.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        shuffle(idx);
        idx.resize(k);
        return idx;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4] = {};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Whole-file text I/O; writes go through a temp file + rename.
void write_text_atomic(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);
std::vector<std::string> read_lines(const std::string& path);

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace coatbench

#endif
