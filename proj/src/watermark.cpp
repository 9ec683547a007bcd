#include "coatbench/watermark.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <fstream>

#include "coatbench/blockdct.hpp"
#include "coatbench/errors.hpp"

using json = nlohmann::json;

namespace coatbench::watermark {

namespace {

// Catmull-Rom in one dimension over clamped control points.
double catmull_rom(double p0, double p1, double p2, double p3, double t) {
    return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t +
                  (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t);
}

double grid_at(const std::vector<double>& g, int k, int gy, int gx, int ch) {
    gy = std::clamp(gy, 0, k - 1);
    gx = std::clamp(gx, 0, k - 1);
    return g[(static_cast<size_t>(gy) * k + gx) * 2 + ch];
}

double spline_sample(const std::vector<double>& g, int k, double y, double x, int ch) {
    int iy = static_cast<int>(std::floor(y));
    int ix = static_cast<int>(std::floor(x));
    double ty = y - iy, tx = x - ix;
    double rows[4];
    for (int r = 0; r < 4; ++r) {
        rows[r] = catmull_rom(grid_at(g, k, iy - 1 + r, ix - 1, ch), grid_at(g, k, iy - 1 + r, ix, ch),
                              grid_at(g, k, iy - 1 + r, ix + 1, ch),
                              grid_at(g, k, iy - 1 + r, ix + 2, ch), tx);
    }
    return catmull_rom(rows[0], rows[1], rows[2], rows[3], ty);
}

}  // namespace

Image warp_field(const WarpCoating& coating, int h, int w) {
    if (coating.strength < 0.0) throw ConfigError("warp strength must be >= 0");
    if (coating.grid_size < 2) throw ConfigError("warp grid size must be >= 2");
    const int k = coating.grid_size;

    std::vector<double> grid(static_cast<size_t>(k) * k * 2);
    Rng rng(derive_seed(coating.key_seed, "warp-field"));
    for (double& gv : grid) gv = rng.uniform(-1.0, 1.0);

    Image field(h, w, 2);
    double max_norm = 0.0;
    for (int y = 0; y < h; ++y) {
        double gy = (h > 1) ? static_cast<double>(y) / (h - 1) * (k - 1) : 0.0;
        for (int x = 0; x < w; ++x) {
            double gx = (w > 1) ? static_cast<double>(x) / (w - 1) * (k - 1) : 0.0;
            double dy = spline_sample(grid, k, gy, gx, 0);
            double dx = spline_sample(grid, k, gy, gx, 1);
            field.at(y, x, 0) = dy;
            field.at(y, x, 1) = dx;
            max_norm = std::max(max_norm, std::sqrt(dy * dy + dx * dx));
        }
    }
    double scale = (max_norm > 0.0) ? coating.strength / max_norm : 0.0;
    for (double& fv : field.v) fv *= scale;
    return field;
}

Image warp_coat(const Image& img, const WarpCoating& coating) {
    if (coating.strength < 0.0) throw ConfigError("warp strength must be >= 0");
    Image field = warp_field(coating, img.h, img.w);
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double sy = y + field.at(y, x, 0);
            double sx = x + field.at(y, x, 1);
            for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = sample_bilinear(img, sy, sx, ch);
        }
    clamp01(out);
    return out;
}

// ---------------------------------------------------------------------------
// Spread spectrum
// ---------------------------------------------------------------------------

namespace {

// Mid-band coefficient positions: u+v in {4,5,6}; 18 per 8x8 block. Low enough
// to survive moderate blur, high enough to stay visually quiet.
const std::vector<std::pair<int, int>>& midband_positions() {
    static const std::vector<std::pair<int, int>> pos = [] {
        std::vector<std::pair<int, int>> p;
        for (int s = 4; s <= 6; ++s)
            for (int u = 0; u <= s; ++u) {
                int v = s - u;
                if (u < 8 && v < 8) p.emplace_back(u, v);
            }
        return p;
    }();
    return pos;
}

struct CarrierPlan {
    // slot -> (block index, coefficient index within 64), plan[bit] = slots
    std::vector<std::vector<std::pair<int, int>>> bit_slots;
    std::vector<std::vector<int>> bit_chips;  // +-1 per slot
    int blocks_per_side = 0;
    int slots_per_bit = 0;
};

CarrierPlan make_plan(const SpreadSpectrumCoating& c, int h, int w, int channels) {
    if (h % 8 != 0 || w % 8 != 0)
        throw ArgumentError("image size must be divisible by 8 for spread-spectrum coating");
    if (c.payload_bits < 1) throw ConfigError("payload length must be >= 1");
    const auto& pos = midband_positions();
    int nb = (h / 8) * (w / 8) * channels;
    int nslots = nb * static_cast<int>(pos.size());
    int m = nslots / c.payload_bits;
    if (m < 1) throw ArgumentError("image too small for payload length");

    std::vector<std::pair<int, int>> slots;
    slots.reserve(nslots);
    for (int b = 0; b < nb; ++b)
        for (const auto& uv : pos) slots.emplace_back(b, uv.first * 8 + uv.second);

    Rng rng(derive_seed(c.key_seed, "ss-carrier"));
    rng.shuffle(slots);

    CarrierPlan plan;
    plan.slots_per_bit = m;
    plan.bit_slots.resize(c.payload_bits);
    plan.bit_chips.resize(c.payload_bits);
    for (int bit = 0; bit < c.payload_bits; ++bit) {
        plan.bit_slots[bit].assign(slots.begin() + static_cast<long>(bit) * m,
                                   slots.begin() + static_cast<long>(bit + 1) * m);
        plan.bit_chips[bit].resize(m);
        for (int j = 0; j < m; ++j) plan.bit_chips[bit][j] = rng.uniform() < 0.5 ? -1 : 1;
    }
    return plan;
}

// All 8x8 blocks of every channel, DCT'd. Block index: (ch * bh + by) * bw + bx.
void dct_blocks(const Image& img, std::vector<std::array<double, 64>>& blocks) {
    int bh = img.h / 8, bw = img.w / 8;
    blocks.resize(static_cast<size_t>(img.c) * bh * bw);
    double buf[64];
    for (int ch = 0; ch < img.c; ++ch)
        for (int by = 0; by < bh; ++by)
            for (int bx = 0; bx < bw; ++bx) {
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) buf[y * 8 + x] = img.at(by * 8 + y, bx * 8 + x, ch);
                dct8::forward(buf, blocks[(static_cast<size_t>(ch) * bh + by) * bw + bx].data());
            }
}

void idct_blocks(const std::vector<std::array<double, 64>>& blocks, Image& img) {
    int bh = img.h / 8, bw = img.w / 8;
    double buf[64];
    for (int ch = 0; ch < img.c; ++ch)
        for (int by = 0; by < bh; ++by)
            for (int bx = 0; bx < bw; ++bx) {
                dct8::inverse(blocks[(static_cast<size_t>(ch) * bh + by) * bw + bx].data(), buf);
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) img.at(by * 8 + y, bx * 8 + x, ch) = buf[y * 8 + x];
            }
}

}  // namespace

std::vector<uint8_t> payload_from_key(const SpreadSpectrumCoating& coating) {
    std::vector<uint8_t> bits(coating.payload_bits);
    Rng rng(derive_seed(coating.key_seed, "ss-payload"));
    for (auto& b : bits) b = rng.uniform() < 0.5 ? 0 : 1;
    return bits;
}

Image ss_embed(const Image& img, const SpreadSpectrumCoating& coating) {
    if (coating.amplitude < 0.0) throw ConfigError("ss amplitude must be >= 0");
    if (coating.amplitude == 0.0) return img;
    CarrierPlan plan = make_plan(coating, img.h, img.w, img.c);
    std::vector<uint8_t> payload = payload_from_key(coating);

    std::vector<std::array<double, 64>> blocks;
    dct_blocks(img, blocks);
    for (int bit = 0; bit < coating.payload_bits; ++bit) {
        const auto& bslots = plan.bit_slots[bit];
        const auto& chips = plan.bit_chips[bit];
        double host = 0.0;
        for (size_t j = 0; j < bslots.size(); ++j)
            host += chips[j] * blocks[bslots[j].first][bslots[j].second];
        double sign = payload[bit] ? 1.0 : -1.0;
        // remove the host correlation, then write the payload correlation
        double per_slot = host / static_cast<double>(bslots.size());
        for (size_t j = 0; j < bslots.size(); ++j)
            blocks[bslots[j].first][bslots[j].second] +=
                chips[j] * (coating.amplitude * sign - per_slot);
    }
    Image out(img.h, img.w, img.c);
    idct_blocks(blocks, out);
    clamp01(out);
    return out;
}

std::vector<uint8_t> ss_decode(const Image& img, const SpreadSpectrumCoating& coating) {
    CarrierPlan plan = make_plan(coating, img.h, img.w, img.c);
    std::vector<std::array<double, 64>> blocks;
    dct_blocks(img, blocks);
    std::vector<uint8_t> bits(coating.payload_bits);
    for (int bit = 0; bit < coating.payload_bits; ++bit) {
        const auto& bslots = plan.bit_slots[bit];
        const auto& chips = plan.bit_chips[bit];
        double r = 0.0;
        for (size_t j = 0; j < bslots.size(); ++j)
            r += chips[j] * blocks[bslots[j].first][bslots[j].second];
        bits[bit] = r > 0.0 ? 1 : 0;
    }
    return bits;
}

double bit_match_fraction(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
    if (a.size() != b.size() || a.empty()) throw ArgumentError("bit strings differ in length");
    size_t same = 0;
    for (size_t i = 0; i < a.size(); ++i)
        if ((a[i] != 0) == (b[i] != 0)) ++same;
    return static_cast<double>(same) / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Dataset coating
// ---------------------------------------------------------------------------

CoatResult coat_dataset(const data::Dataset& ds, const CoatingSpec& spec, uint64_t seed,
                        const data::CaptionVocab& vocab) {
    if (ds.samples.empty()) throw ArgumentError("cannot coat an empty dataset");
    if (spec.method == data::CoatingMethod::none) throw ConfigError("coating method is none");

    const CoatingMode& mode = spec.mode;
    if (mode.mode == Mode::unconditional) {
        if (mode.coat_fraction != 1.0)
            throw ConfigError("unconditional coating requires coat_fraction = 1");
    } else {
        if (!(mode.coat_fraction > 0.0 && mode.coat_fraction <= 1.0))
            throw ConfigError("trigger-conditioned coating requires 0 < coat_fraction <= 1");
        if (mode.trigger.empty()) throw ConfigError("trigger-conditioned coating requires a trigger");
        for (int tok : mode.trigger)
            if (tok < 0 || tok >= vocab.size())
                throw ConfigError("trigger token absent from vocab: " + std::to_string(tok));
    }

    uint64_t key_seed =
        spec.method == data::CoatingMethod::warp ? spec.warp.key_seed : spec.ss.key_seed;

    CoatResult res;
    res.dataset = ds;
    res.record.method = spec.method;
    res.record.key_seed = key_seed;
    res.record.grid_size = spec.warp.grid_size;
    res.record.strength = spec.warp.strength;
    res.record.payload_bits = spec.ss.payload_bits;
    res.record.amplitude = spec.ss.amplitude;
    res.record.mode = mode.mode;
    res.record.p = mode.coat_fraction;
    res.record.trigger = mode.trigger;
    res.record.key_id = hex64(derive_seed(key_seed, "key-id")).substr(0, 12);
    res.dataset.key_id = res.record.key_id;

    std::vector<size_t> selected;
    size_t n = ds.samples.size();
    if (mode.mode == Mode::unconditional) {
        selected.resize(n);
        std::iota(selected.begin(), selected.end(), size_t{0});
    } else {
        auto k = static_cast<size_t>(std::lround(mode.coat_fraction * static_cast<double>(n)));
        Rng rng(derive_seed(seed, "coat-select"));
        selected = rng.sample_without_replacement(n, k);
        std::sort(selected.begin(), selected.end());
    }

    for (size_t idx : selected) {
        data::ImageSample& s = res.dataset.samples[idx];
        s.pixels = spec.method == data::CoatingMethod::warp ? warp_coat(s.pixels, spec.warp)
                                                            : ss_embed(s.pixels, spec.ss);
        quantize16(s.pixels);
        s.coated = true;
        s.coating_method = spec.method;
        if (mode.mode == Mode::trigger_conditioned) {
            s.caption.insert(s.caption.begin(), mode.trigger.begin(), mode.trigger.end());
            s.caption_text = vocab.detokenize(mode.trigger) + " " + s.caption_text;
        }
        res.record.coated_ids.push_back(idx);
    }
    return res;
}

void save_coating_record(const CoatingRecord& rec, const std::string& path) {
    json j{{"method", data::coating_method_name(rec.method)},
           {"key_seed", rec.key_seed},
           {"grid_size", rec.grid_size},
           {"strength", rec.strength},
           {"payload_bits", rec.payload_bits},
           {"amplitude", rec.amplitude},
           {"mode", rec.mode == Mode::unconditional ? "unconditional" : "trigger_conditioned"},
           {"p", rec.p},
           {"trigger", rec.trigger},
           {"coated_ids", rec.coated_ids},
           {"key_id", rec.key_id}};
    std::filesystem::path tmp = path + ".tmp";
    std::ofstream out(tmp);
    out << j.dump(2) << "\n";
    out.close();
    if (!out) throw IoError("write failed: " + path);
    std::filesystem::rename(tmp, path);
}

CoatingRecord load_coating_record(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open coating record: " + path);
    json j = json::parse(in);
    CoatingRecord rec;
    rec.method = data::coating_method_from_name(j["method"].get<std::string>());
    rec.key_seed = j["key_seed"].get<uint64_t>();
    rec.grid_size = j["grid_size"].get<int>();
    rec.strength = j["strength"].get<double>();
    rec.payload_bits = j["payload_bits"].get<int>();
    rec.amplitude = j["amplitude"].get<double>();
    rec.mode = j["mode"].get<std::string>() == "unconditional" ? Mode::unconditional
                                                               : Mode::trigger_conditioned;
    rec.p = j["p"].get<double>();
    rec.trigger = j["trigger"].get<std::vector<int>>();
    rec.coated_ids = j["coated_ids"].get<std::vector<size_t>>();
    rec.key_id = j["key_id"].get<std::string>();
    return rec;
}

}  // namespace coatbench::watermark
