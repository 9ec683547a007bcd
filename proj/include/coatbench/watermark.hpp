#ifndef COATBENCH_WATERMARK_HPP
#define COATBENCH_WATERMARK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "coatbench/common.hpp"
#include "coatbench/data.hpp"

namespace coatbench::watermark {

// Key-seeded smooth warp: a grid_size x grid_size field of random control
// offsets, spline-upsampled to full resolution and normalized so the largest
// displacement magnitude equals `strength` pixels.
struct WarpCoating {
    uint64_t key_seed = 0;
    int grid_size = 5;
    double strength = 1.5;
};

// Displacement field as an h x w x 2 image (dy, dx), deterministic per
// (key_seed, grid_size, strength, size).
Image warp_field(const WarpCoating& coating, int h, int w);

// Backward-warps with bilinear interpolation; output stays in [0,1].
Image warp_coat(const Image& img, const WarpCoating& coating);

// Key-seeded spread-spectrum payload over mid-frequency 8x8 DCT coefficients.
// Embedding is informed: the host's correlation along each carrier is removed
// so a clean-channel decode recovers every payload bit.
struct SpreadSpectrumCoating {
    uint64_t key_seed = 0;
    int payload_bits = 64;
    double amplitude = 0.015;  // per-coefficient step in the orthonormal DCT domain
};

// The payload carried by a key (bits derived from key_seed).
std::vector<uint8_t> payload_from_key(const SpreadSpectrumCoating& coating);

Image ss_embed(const Image& img, const SpreadSpectrumCoating& coating);
// Correlation decode with the keyed carriers; wrong keys give ~coin-flip bits.
std::vector<uint8_t> ss_decode(const Image& img, const SpreadSpectrumCoating& coating);

double bit_match_fraction(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b);

enum class Mode { unconditional, trigger_conditioned };

struct CoatingMode {
    Mode mode = Mode::unconditional;
    double coat_fraction = 1.0;  // p; 1 for unconditional
    std::vector<int> trigger;    // token ids prepended to coated captions
};

struct CoatingSpec {
    data::CoatingMethod method = data::CoatingMethod::warp;
    WarpCoating warp;
    SpreadSpectrumCoating ss;
    CoatingMode mode;
};

// The defender's secret: what was embedded, how, and where.
struct CoatingRecord {
    data::CoatingMethod method = data::CoatingMethod::warp;
    uint64_t key_seed = 0;
    int grid_size = 5;
    double strength = 1.5;
    int payload_bits = 64;
    double amplitude = 0.015;
    Mode mode = Mode::unconditional;
    double p = 1.0;
    std::vector<int> trigger;
    std::vector<size_t> coated_ids;
    std::string key_id;

    WarpCoating warp_coating() const { return {key_seed, grid_size, strength}; }
    SpreadSpectrumCoating ss_coating() const { return {key_seed, payload_bits, amplitude}; }
};

struct CoatResult {
    data::Dataset dataset;
    CoatingRecord record;
};

// Applies the coating to a seeded subset (all samples when unconditional),
// prepending the trigger to coated captions in trigger-conditioned mode.
CoatResult coat_dataset(const data::Dataset& ds, const CoatingSpec& spec, uint64_t seed,
                        const data::CaptionVocab& vocab);

void save_coating_record(const CoatingRecord& rec, const std::string& path);
CoatingRecord load_coating_record(const std::string& path);

}  // namespace coatbench::watermark

#endif
