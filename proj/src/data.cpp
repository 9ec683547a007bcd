#include "coatbench/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "coatbench/errors.hpp"
#include "coatbench/png_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace coatbench::data {

std::string coating_method_name(CoatingMethod m) {
    switch (m) {
        case CoatingMethod::none: return "none";
        case CoatingMethod::warp: return "warp";
        case CoatingMethod::spread_spectrum: return "spread_spectrum";
    }
    return "none";
}

CoatingMethod coating_method_from_name(const std::string& s) {
    if (s == "none") return CoatingMethod::none;
    if (s == "warp") return CoatingMethod::warp;
    if (s == "spread_spectrum") return CoatingMethod::spread_spectrum;
    throw ArgumentError("unknown coating method: " + s);
}

std::vector<int> CaptionVocab::tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream ss(text);
    std::string word;
    while (ss >> word) {
        std::transform(word.begin(), word.end(), word.begin(),
                       [](unsigned char ch) { return std::tolower(ch); });
        auto it = token_to_id.find(word);
        ids.push_back(it == token_to_id.end() ? pad_id : it->second);
    }
    return ids;
}

std::string CaptionVocab::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || id >= size()) throw ArgumentError("token id out of range: " + std::to_string(id));
        if (i) out += ' ';
        out += tokens[id];
    }
    return out;
}

uint64_t CaptionVocab::hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens) {
        h = fnv1a64(std::string_view(t), h);
        h = fnv1a64(std::string_view("\x1f", 1), h);
    }
    return h;
}

namespace {

const std::vector<std::string> kShapes = {"circle", "square", "triangle", "star"};
const std::vector<std::string> kFills = {"red",    "green", "blue",   "yellow",
                                         "purple", "cyan",  "orange", "pink"};
const std::vector<std::string> kBackgrounds = {"black", "white", "gray", "navy"};

// Mid-tone palette: moderate figure/ground contrast keeps default coatings
// inside the imperceptibility budget while staying easy to segment.
constexpr double kFillRgb[8][3] = {
    {0.76, 0.22, 0.22},  // red
    {0.22, 0.68, 0.26},  // green
    {0.22, 0.32, 0.76},  // blue
    {0.76, 0.72, 0.22},  // yellow
    {0.62, 0.26, 0.70},  // purple
    {0.22, 0.66, 0.70},  // cyan
    {0.78, 0.52, 0.22},  // orange
    {0.78, 0.46, 0.60},  // pink
};
constexpr double kBgRgb[4][3] = {
    {0.26, 0.26, 0.28},  // black
    {0.78, 0.78, 0.76},  // white
    {0.50, 0.50, 0.52},  // gray
    {0.24, 0.27, 0.46},  // navy
};

struct P2 {
    double x, y;
};

double polygon_sdf(const std::vector<P2>& v, double px, double py) {
    size_t n = v.size();
    double d = (px - v[0].x) * (px - v[0].x) + (py - v[0].y) * (py - v[0].y);
    double s = 1.0;
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
        double ex = v[j].x - v[i].x, ey = v[j].y - v[i].y;
        double wx = px - v[i].x, wy = py - v[i].y;
        double t = std::clamp((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0);
        double bx = wx - ex * t, by = wy - ey * t;
        d = std::min(d, bx * bx + by * by);
        bool c0 = py >= v[i].y;
        bool c1 = py < v[j].y;
        bool c2 = ex * wy > ey * wx;
        if ((c0 && c1 && c2) || (!c0 && !c1 && !c2)) s = -s;
    }
    return s * std::sqrt(d);
}

std::vector<P2> make_polygon(int shape, double cx, double cy, double r, double rot) {
    std::vector<P2> v;
    auto vertex = [&](double rad, double ang) {
        v.push_back({cx + rad * std::cos(ang), cy + rad * std::sin(ang)});
    };
    if (shape == 1) {  // square, corners at ~1.25r so its area matches the circle
        for (int i = 0; i < 4; ++i) vertex(r * 1.25, rot + M_PI / 4 + i * M_PI / 2);
    } else if (shape == 2) {  // triangle
        for (int i = 0; i < 3; ++i) vertex(r * 1.12, rot - M_PI / 2 + i * 2 * M_PI / 3);
    } else {  // star
        for (int i = 0; i < 10; ++i) {
            double rad = (i % 2 == 0) ? r * 1.18 : r * 0.52;
            vertex(rad, rot - M_PI / 2 + i * M_PI / 5);
        }
    }
    return v;
}

double shape_sdf(int shape, const std::vector<P2>& poly, double cx, double cy, double r,
                 double px, double py) {
    if (shape == 0) {
        double dx = px - cx, dy = py - cy;
        return std::sqrt(dx * dx + dy * dy) - r;
    }
    return polygon_sdf(poly, px, py);
}

// Soft coverage over a ~2.5 px transition band; anti-aliased edges give the
// warp coating a sub-pixel-friendly gradient to act on.
double coverage(double sdf, double aa) {
    double t = std::clamp(0.5 - sdf / aa, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

std::string two_digit_id(size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%06zu", i);
    return buf;
}

}  // namespace

const std::vector<std::string>& shape_names() { return kShapes; }
const std::vector<std::string>& fill_color_names() { return kFills; }
const std::vector<std::string>& background_color_names() { return kBackgrounds; }
const double* fill_color_rgb(int idx) { return kFillRgb[idx]; }
const double* background_color_rgb(int idx) { return kBgRgb[idx]; }

CaptionVocab default_vocab() {
    CaptionVocab v;
    v.tokens = {"<pad>", "<trigger>", "a", "on", "background"};
    for (const auto& s : kShapes) v.tokens.push_back(s);
    for (const auto& s : kFills) v.tokens.push_back(s);
    for (const auto& s : kBackgrounds) v.tokens.push_back(s);
    for (int i = 0; i < v.size(); ++i) v.token_to_id[v.tokens[i]] = i;
    v.pad_id = 0;
    v.trigger_id = 1;
    return v;
}

Dataset generate_shapes_dataset(int n, uint64_t seed, int image_size, const CaptionVocab& vocab) {
    if (n < 1) throw ConfigError("dataset size must be >= 1, got " + std::to_string(n));
    if (image_size < 16) throw ConfigError("image size must be >= 16, got " + std::to_string(image_size));

    Dataset ds;
    ds.image_size = image_size;
    ds.seed = seed;
    ds.samples.resize(n);
    ds.split.assign(n, 0);

    double scale = image_size / 32.0;
    double aa = 2.5 * scale;

    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "shape-sample", static_cast<uint64_t>(i)));
        int shape = rng.uniform_int(0, 3);
        int fill = rng.uniform_int(0, 7);
        int bg = rng.uniform_int(0, 3);
        double cx = image_size / 2.0 + rng.uniform(-3.0, 3.0) * scale;
        double cy = image_size / 2.0 + rng.uniform(-3.0, 3.0) * scale;
        double r = rng.uniform(8.0, 12.0) * scale;
        double rot = rng.uniform(0.0, 2.0 * M_PI);

        std::vector<P2> poly;
        if (shape != 0) poly = make_polygon(shape, cx, cy, r, rot);

        Image img(image_size, image_size, 3);
        for (int y = 0; y < image_size; ++y) {
            for (int x = 0; x < image_size; ++x) {
                double sdf = shape_sdf(shape, poly, cx, cy, r, x + 0.5, y + 0.5);
                double cov = coverage(sdf, aa);
                for (int ch = 0; ch < 3; ++ch) {
                    double p = kBgRgb[bg][ch] + cov * (kFillRgb[fill][ch] - kBgRgb[bg][ch]);
                    img.at(y, x, ch) = quant16(p);
                }
            }
        }

        ImageSample& s = ds.samples[i];
        s.pixels = std::move(img);
        s.caption_text = "a " + kFills[fill] + " " + kShapes[shape] + " on a " + kBackgrounds[bg] +
                         " background";
        s.caption = vocab.tokenize(s.caption_text);
        s.label = shape;
    }
    return ds;
}

void assign_splits(Dataset& ds, double holdout_fraction, uint64_t seed) {
    size_t n = ds.size();
    auto k = static_cast<size_t>(std::lround(holdout_fraction * static_cast<double>(n)));
    Rng rng(derive_seed(seed, "split"));
    auto idx = rng.sample_without_replacement(n, k);
    ds.split.assign(n, 0);
    for (size_t i : idx) ds.split[i] = 1;
}

std::vector<size_t> Dataset::train_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < samples.size(); ++i)
        if (split.empty() || split[i] == 0) out.push_back(i);
    return out;
}

std::vector<size_t> Dataset::holdout_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < samples.size(); ++i)
        if (!split.empty() && split[i] == 1) out.push_back(i);
    return out;
}

IngestResult load_external_dataset(const std::string& root, CaptionSource caption_source,
                                   int image_size, const CaptionVocab& vocab) {
    if (!fs::is_directory(root)) throw IngestError("dataset root is not a directory: " + root);

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());

    IngestResult res;
    res.dataset.image_size = image_size;
    for (const auto& f : files) {
        Image img;
        try {
            img = read_png(f.string());
        } catch (const IoError& e) {
            std::fprintf(stderr, "warning: skipping undecodable file %s (%s)\n", f.c_str(), e.what());
            ++res.skipped;
            continue;
        }
        ImageSample s;
        s.pixels = resize_bilinear(img, image_size, image_size);
        quantize16(s.pixels);

        std::string caption;
        if (caption_source == CaptionSource::sidecar_text) {
            fs::path txt = f;
            txt.replace_extension(".txt");
            if (fs::exists(txt)) {
                std::ifstream in(txt);
                std::getline(in, caption);
            }
        } else {
            caption = f.stem().string();
            std::replace(caption.begin(), caption.end(), '_', ' ');
            std::replace(caption.begin(), caption.end(), '-', ' ');
        }
        s.caption_text = caption;
        s.caption = vocab.tokenize(caption);
        res.dataset.samples.push_back(std::move(s));
    }
    if (res.dataset.samples.empty())
        throw IngestError("no decodable images under " + root + " (skipped " +
                          std::to_string(res.skipped) + ")");
    res.dataset.split.assign(res.dataset.samples.size(), 0);
    return res;
}

void save_manifest(const Dataset& ds, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "images", ec);
    if (ec) throw IoError("cannot create dataset dir " + dir + ": " + ec.message());

    std::ostringstream manifest;
    manifest << json{{"format_version", 1}, {"image_size", ds.image_size}, {"seed", ds.seed}}.dump()
             << "\n";

    json train = json::array(), holdout = json::array();
    for (size_t i = 0; i < ds.size(); ++i) {
        std::string id = two_digit_id(i);
        std::string rel = "images/" + id + ".png";
        write_png16((fs::path(dir) / rel).string(), ds.samples[i].pixels);
        const ImageSample& s = ds.samples[i];
        manifest << json{{"id", id},
                         {"path", rel},
                         {"caption", s.caption_text},
                         {"label", s.label},
                         {"coated", s.coated},
                         {"method", coating_method_name(s.coating_method)},
                         {"key_id", s.coated ? ds.key_id : std::string{}}}
                        .dump()
             << "\n";
        ((ds.split.empty() || ds.split[i] == 0) ? train : holdout).push_back(id);
    }

    auto write_file = [](const fs::path& path, const std::string& content) {
        fs::path tmp = path;
        tmp += ".tmp";
        std::ofstream out(tmp, std::ios::binary);
        out << content;
        out.close();
        if (!out) throw IoError("write failed: " + path.string());
        fs::rename(tmp, path);
    };
    write_file(fs::path(dir) / "manifest.jsonl", manifest.str());
    write_file(fs::path(dir) / "splits.json", json{{"train", train}, {"holdout", holdout}}.dump() + "\n");
}

Dataset load_manifest(const std::string& dir, const CaptionVocab& vocab) {
    std::ifstream in(fs::path(dir) / "manifest.jsonl");
    if (!in) throw IoError("missing manifest.jsonl under " + dir);

    std::string line;
    if (!std::getline(in, line)) throw IoError("empty manifest under " + dir);
    json header = json::parse(line);
    if (!header.contains("format_version") || header["format_version"].get<int>() != 1)
        throw IncompatibilityError("manifest format_version != 1 under " + dir);

    Dataset ds;
    ds.image_size = header["image_size"].get<int>();
    ds.seed = header["seed"].get<uint64_t>();

    struct Rec {
        std::string id, path, caption, method, key_id;
        int label;
        bool coated;
    };
    std::vector<Rec> recs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json r = json::parse(line);
        recs.push_back({r["id"].get<std::string>(), r["path"].get<std::string>(),
                        r["caption"].get<std::string>(), r["method"].get<std::string>(),
                        r["key_id"].get<std::string>(), r["label"].get<int>(),
                        r["coated"].get<bool>()});
    }
    // Record order on disk is irrelevant; the dataset is defined id-sorted.
    std::sort(recs.begin(), recs.end(), [](const Rec& a, const Rec& b) { return a.id < b.id; });

    std::map<std::string, size_t> id_to_idx;
    for (const auto& r : recs) {
        ImageSample s;
        fs::path img_path = fs::path(dir) / r.path;
        if (!fs::exists(img_path))
            throw IoError("missing image file for sample " + r.id + ": " + img_path.string());
        s.pixels = read_png(img_path.string());
        s.caption_text = r.caption;
        s.caption = vocab.tokenize(r.caption);
        s.label = r.label;
        s.coated = r.coated;
        s.coating_method = coating_method_from_name(r.method);
        if (s.coated && !r.key_id.empty()) ds.key_id = r.key_id;
        id_to_idx[r.id] = ds.samples.size();
        ds.samples.push_back(std::move(s));
    }

    ds.split.assign(ds.samples.size(), 0);
    fs::path splits_path = fs::path(dir) / "splits.json";
    if (fs::exists(splits_path)) {
        std::ifstream sin(splits_path);
        json sp = json::parse(sin);
        for (const auto& id : sp["holdout"]) {
            auto it = id_to_idx.find(id.get<std::string>());
            if (it != id_to_idx.end()) ds.split[it->second] = 1;
        }
    }
    return ds;
}

std::vector<Prompt> make_audit_prompts(const CaptionVocab& vocab, int count, uint64_t seed) {
    std::vector<std::string> all;
    for (const auto& fill : kFills)
        for (const auto& shape : kShapes)
            for (const auto& bg : kBackgrounds)
                all.push_back("a " + fill + " " + shape + " on a " + bg + " background");
    if (count < 1 || count > static_cast<int>(all.size()))
        throw ArgumentError("prompt count must be in [1, " + std::to_string(all.size()) + "]");
    Rng rng(derive_seed(seed, "audit-prompts"));
    rng.shuffle(all);
    std::vector<Prompt> out;
    for (int i = 0; i < count; ++i) out.push_back({vocab.tokenize(all[i]), all[i]});
    return out;
}

}  // namespace coatbench::data
