#include "coatbench/metrics.hpp"

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "coatbench/errors.hpp"
#include "coatbench/png_io.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace coatbench::metrics {

struct FeatureEncoder::Offsets {
    nn::ConvShape cs1, cs2, cs3;
    size_t w1, b1, w2, b2, w3, b3;
    size_t feat_w, feat_b, head_w, head_b;
    int flat = 0;
};

std::unique_ptr<FeatureEncoder::Workspace> FeatureEncoder::make_workspace() const {
    return std::make_unique<Workspace>();
}

FeatureEncoder::FeatureEncoder(const FeatureEncoder& other)
    : image_size_(other.image_size_),
      n_classes_(other.n_classes_),
      holdout_accuracy_(other.holdout_accuracy_),
      params_(other.params_),
      off_(std::make_unique<Offsets>(*other.off_)) {}

FeatureEncoder& FeatureEncoder::operator=(const FeatureEncoder& other) {
    if (this != &other) {
        image_size_ = other.image_size_;
        n_classes_ = other.n_classes_;
        holdout_accuracy_ = other.holdout_accuracy_;
        params_ = other.params_;
        off_ = std::make_unique<Offsets>(*other.off_);
    }
    return *this;
}

FeatureEncoder::FeatureEncoder(FeatureEncoder&&) noexcept = default;
FeatureEncoder& FeatureEncoder::operator=(FeatureEncoder&&) noexcept = default;
FeatureEncoder::~FeatureEncoder() = default;

FeatureEncoder::FeatureEncoder(int image_size, int n_classes, uint64_t init_seed)
    : image_size_(image_size), n_classes_(n_classes) {
    if (image_size < 16 || image_size % 4 != 0)
        throw ConfigError("encoder image size must be a multiple of 4 and >= 16");
    if (n_classes < 2) throw CalibrationError("feature encoder needs at least 2 classes");
    register_params();
    Rng rng(derive_seed(init_seed, "encoder-init"));
    const auto& o = *off_;
    nn::init_he(params_.at(o.w1), o.cs1.weight_count(), static_cast<size_t>(o.cs1.cin) * 9, 1.0, rng);
    nn::init_he(params_.at(o.w2), o.cs2.weight_count(), static_cast<size_t>(o.cs2.cin) * 9, 1.0, rng);
    nn::init_he(params_.at(o.w3), o.cs3.weight_count(), static_cast<size_t>(o.cs3.cin) * 9, 1.0, rng);
    nn::init_he(params_.at(o.feat_w), static_cast<size_t>(kFeatureDim) * o.flat, o.flat, 1.0, rng);
    nn::init_he(params_.at(o.head_w), static_cast<size_t>(n_classes_) * kFeatureDim, kFeatureDim, 1.0,
                rng);
}

void FeatureEncoder::register_params() {
    off_ = std::make_unique<Offsets>();
    auto& o = *off_;
    o.cs1 = {4, 16, 3, 1, 1};
    o.cs2 = {16, 32, 3, 2, 1};
    o.cs3 = {32, 32, 3, 2, 1};
    o.flat = 32 * (image_size_ / 4) * (image_size_ / 4);
    o.w1 = params_.add("conv1.w", o.cs1.weight_count());
    o.b1 = params_.add("conv1.b", o.cs1.cout);
    o.w2 = params_.add("conv2.w", o.cs2.weight_count());
    o.b2 = params_.add("conv2.b", o.cs2.cout);
    o.w3 = params_.add("conv3.w", o.cs3.weight_count());
    o.b3 = params_.add("conv3.b", o.cs3.cout);
    o.feat_w = params_.add("feat.w", static_cast<size_t>(kFeatureDim) * o.flat);
    o.feat_b = params_.add("feat.b", kFeatureDim);
    o.head_w = params_.add("head.w", static_cast<size_t>(n_classes_) * kFeatureDim);
    o.head_b = params_.add("head.b", n_classes_);
}

void FeatureEncoder::forward(const Image& img, Workspace& ws) const {
    if (img.h != image_size_ || img.w != image_size_ || img.c != 3)
        throw ArgumentError("encoder input shape mismatch");
    const auto& o = *off_;
    const nn::ParamBlock& P = params_;
    // plane 0: per-image contrast-normalized luminance (shape is geometry, the
    // palette is a nuisance); planes 1..3: raw RGB so features keep color info
    ws.x.resize(4, image_size_, image_size_);
    size_t plane = ws.x.plane();
    double mean = 0.0;
    for (int y = 0; y < image_size_; ++y)
        for (int x = 0; x < image_size_; ++x)
            mean += 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    mean /= plane;
    double var = 0.0;
    for (int y = 0; y < image_size_; ++y)
        for (int x = 0; x < image_size_; ++x) {
            double g = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
            var += (g - mean) * (g - mean);
        }
    double inv_std = 1.0 / std::sqrt(var / plane + 1e-6);
    for (int y = 0; y < image_size_; ++y)
        for (int x = 0; x < image_size_; ++x) {
            size_t pix = static_cast<size_t>(y) * image_size_ + x;
            double g = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
            ws.x.v[pix] = std::clamp((g - mean) * inv_std, -3.0, 3.0);
            for (int ch = 0; ch < 3; ++ch) ws.x.v[(1 + ch) * plane + pix] = img.at(y, x, ch);
        }
    nn::conv_forward(P.at(o.w1), P.at(o.b1), ws.x, o.cs1, ws.col1, ws.c1);
    nn::silu_forward(ws.c1, ws.c1s);
    nn::conv_forward(P.at(o.w2), P.at(o.b2), ws.c1s, o.cs2, ws.col2, ws.c2);
    nn::silu_forward(ws.c2, ws.c2s);
    nn::conv_forward(P.at(o.w3), P.at(o.b3), ws.c2s, o.cs3, ws.col3, ws.c3);
    nn::silu_forward(ws.c3, ws.c3s);
    ws.flat.assign(ws.c3s.v.begin(), ws.c3s.v.end());
    nn::linear_forward(P.at(o.feat_w), P.at(o.feat_b), ws.flat, o.flat, kFeatureDim, ws.feat_pre);
    ws.feat.resize(kFeatureDim);
    for (int i = 0; i < kFeatureDim; ++i) ws.feat[i] = nn::silu(ws.feat_pre[i]);
    nn::linear_forward(P.at(o.head_w), P.at(o.head_b), ws.feat, kFeatureDim, n_classes_, ws.logits);
}

std::vector<double> FeatureEncoder::features(const Image& img) const {
    auto ws = make_workspace();
    forward(img, *ws);
    return ws->feat;
}

int FeatureEncoder::predict_class(const Image& img) const {
    auto ws = make_workspace();
    forward(img, *ws);
    return static_cast<int>(std::max_element(ws->logits.begin(), ws->logits.end()) -
                            ws->logits.begin());
}

double FeatureEncoder::loss_and_grad(const Image& img, int label, Workspace& ws,
                                     std::vector<double>* grad) const {
    forward(img, ws);
    // softmax cross entropy
    double mx = *std::max_element(ws.logits.begin(), ws.logits.end());
    double denom = 0.0;
    for (double l : ws.logits) denom += std::exp(l - mx);
    double loss = -(ws.logits[label] - mx - std::log(denom));
    if (!grad) return loss;
    if (grad->size() != params_.size()) grad->assign(params_.size(), 0.0);

    const auto& o = *off_;
    const nn::ParamBlock& P = params_;
    double* G = grad->data();
    ws.d_logits.resize(n_classes_);
    for (int i = 0; i < n_classes_; ++i) {
        double p = std::exp(ws.logits[i] - mx) / denom;
        ws.d_logits[i] = p - (i == label ? 1.0 : 0.0);
    }
    nn::linear_backward(P.at(o.head_w), ws.feat, ws.d_logits, kFeatureDim, n_classes_, G + o.head_w,
                        G + o.head_b, &ws.d_feat);
    ws.d_featpre.resize(kFeatureDim);
    for (int i = 0; i < kFeatureDim; ++i) {
        double s = 1.0 / (1.0 + std::exp(-ws.feat_pre[i]));
        ws.d_featpre[i] = ws.d_feat[i] * s * (1.0 + ws.feat_pre[i] * (1.0 - s));
    }
    nn::linear_backward(P.at(o.feat_w), ws.flat, ws.d_featpre, o.flat, kFeatureDim, G + o.feat_w,
                        G + o.feat_b, &ws.d_flat);

    const int S = image_size_, S2 = S / 2, S4 = S / 4;
    ws.d_c3s.resize(32, S4, S4);
    std::copy(ws.d_flat.begin(), ws.d_flat.end(), ws.d_c3s.v.begin());
    nn::silu_backward(ws.c3, ws.d_c3s, ws.d_c3);
    nn::conv_backward(P.at(o.w3), ws.col3, o.cs3, ws.d_c3, S2, S2, G + o.w3, G + o.b3, &ws.d_c2s,
                      ws.dcol);
    nn::silu_backward(ws.c2, ws.d_c2s, ws.d_c2);
    nn::conv_backward(P.at(o.w2), ws.col2, o.cs2, ws.d_c2, S, S, G + o.w2, G + o.b2, &ws.d_c1s,
                      ws.dcol);
    nn::silu_backward(ws.c1, ws.d_c1s, ws.d_c1);
    nn::conv_backward(P.at(o.w1), ws.col1, o.cs1, ws.d_c1, S, S, G + o.w1, G + o.b1, nullptr,
                      ws.dcol);
    return loss;
}

namespace {

// label-preserving jitter: integer shifts and axis flips stop the positional
// head from memorizing individual renders
Image encoder_augment(const Image& img, uint64_t seed) {
    Rng rng(seed);
    int dy = rng.uniform_int(-3, 3), dx = rng.uniform_int(-3, 3);
    bool hflip = rng.uniform() < 0.5, vflip = rng.uniform() < 0.5;
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            int sy = vflip ? img.h - 1 - y : y;
            int sx = hflip ? img.w - 1 - x : x;
            for (int c = 0; c < img.c; ++c) out.at(y, x, c) = img.at_clamped(sy + dy, sx + dx, c);
        }
    return out;
}

}  // namespace

FeatureEncoder train_encoder(const data::Dataset& clean_ds, int epochs, uint64_t seed) {
    auto train_idx = clean_ds.train_indices();
    auto hold_idx = clean_ds.holdout_indices();
    if (hold_idx.empty()) {
        // carve one out deterministically
        Rng rng(derive_seed(seed, "encoder-split"));
        auto idx = rng.sample_without_replacement(train_idx.size(), train_idx.size());
        size_t k = std::max<size_t>(1, train_idx.size() / 5);
        std::vector<size_t> new_train, new_hold;
        for (size_t i = 0; i < idx.size(); ++i)
            (i < k ? new_hold : new_train).push_back(train_idx[idx[i]]);
        train_idx = new_train;
        hold_idx = new_hold;
    }
    std::set<int> classes;
    for (size_t i : train_idx) classes.insert(clean_ds.samples[i].label);
    if (classes.size() < 2)
        throw CalibrationError("feature encoder needs a dataset with at least 2 classes, got " +
                               std::to_string(classes.size()));
    int n_classes = *classes.rbegin() + 1;

    FeatureEncoder enc(clean_ds.image_size, n_classes, derive_seed(seed, "encoder"));

    const int n = static_cast<int>(train_idx.size());
    const size_t P = enc.params().size();
    int nthreads = 1;
#ifdef _OPENMP
    nthreads = omp_get_max_threads();
#endif
    std::vector<std::unique_ptr<FeatureEncoder::Workspace>> wss;
    for (int i = 0; i < nthreads; ++i) wss.push_back(enc.make_workspace());
    const int B = std::min(32, n);
    std::vector<std::vector<double>> gbuf(B, std::vector<double>(P, 0.0));
    std::vector<double> gsum(P, 0.0), losses(B, 0.0);
    nn::Adam opt;
    opt.lr = 2e-3;

    for (int e = 0; e < epochs; ++e) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(seed, "encoder-order", static_cast<uint64_t>(e)));
        shuffle_rng.shuffle(order);
        for (int start = 0; start < n; start += B) {
            const int bsz = std::min(B, n - start);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int bi = 0; bi < bsz; ++bi) {
                int wsi = 0;
#ifdef _OPENMP
                wsi = omp_get_thread_num();
#endif
                const auto& s = clean_ds.samples[train_idx[order[start + bi]]];
                Image aug = encoder_augment(
                    s.pixels,
                    derive_seed(seed, "encoder-aug", static_cast<uint64_t>(e) * n + start + bi));
                std::fill(gbuf[bi].begin(), gbuf[bi].end(), 0.0);
                losses[bi] = enc.loss_and_grad(aug, s.label, *wss[wsi], &gbuf[bi]);
            }
            std::fill(gsum.begin(), gsum.end(), 0.0);
            for (int bi = 0; bi < bsz; ++bi)
                for (size_t p = 0; p < P; ++p) gsum[p] += gbuf[bi][p];
            double inv = 1.0 / bsz;
            for (size_t p = 0; p < P; ++p) gsum[p] *= inv;
            for (int bi = 0; bi < bsz; ++bi)
                if (!std::isfinite(losses[bi]))
                    throw TrainingError("encoder loss diverged at epoch " + std::to_string(e));
            opt.step(enc.params().w, gsum);
        }
    }

    std::vector<int> preds(hold_idx.size(), 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (size_t i = 0; i < hold_idx.size(); ++i)
        preds[i] = enc.predict_class(clean_ds.samples[hold_idx[i]].pixels);
    int correct = 0;
    for (size_t i = 0; i < hold_idx.size(); ++i)
        if (preds[i] == clean_ds.samples[hold_idx[i]].label) ++correct;
    enc.holdout_accuracy_ = static_cast<double>(correct) / hold_idx.size();
    if (enc.holdout_accuracy_ < 0.9)
        throw CalibrationError("encoder holdout accuracy " +
                               std::to_string(enc.holdout_accuracy_) + " is below 0.9");
    return enc;
}

void FeatureEncoder::save(const std::string& path) const {
    json header{{"format_version", 1},
                {"kind", "encoder"},
                {"image_size", image_size_},
                {"n_classes", n_classes_},
                {"holdout_accuracy", holdout_accuracy_}};
    nn::save_params(path, header.dump(), params_);
}

FeatureEncoder FeatureEncoder::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open encoder checkpoint: " + path);
    std::string magic(6, '\0');
    in.read(magic.data(), 6);
    std::string header_line;
    std::getline(in, header_line);
    in.close();
    json h = json::parse(header_line);
    if (h.value("kind", "") != "encoder")
        throw IncompatibilityError("not an encoder checkpoint: " + path);
    FeatureEncoder enc(h["image_size"].get<int>(), h["n_classes"].get<int>(), 0);
    nn::load_params(path, enc.params_);
    enc.holdout_accuracy_ = h.value("holdout_accuracy", 0.0);
    return enc;
}

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

namespace {

void moments(const std::vector<Image>& set, const FeatureEncoder& enc, Eigen::VectorXd& mu,
             Eigen::MatrixXd& cov) {
    const int d = FeatureEncoder::kFeatureDim;
    const int n = static_cast<int>(set.size());
    Eigen::MatrixXd F(n, d);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int i = 0; i < n; ++i) {
        auto f = enc.features(set[i]);
        for (int j = 0; j < d; ++j) F(i, j) = f[j];
    }
    mu = F.colwise().mean();
    Eigen::MatrixXd centered = F.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / std::max(1, n - 1);
    if (n < d + 1) {
        double lambda = 1e-6 * cov.trace() / d;
        cov += lambda * Eigen::MatrixXd::Identity(d, d);
    }
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid_from_moments(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                        const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
    Eigen::MatrixXd a_half = psd_sqrt(cov_a);
    Eigen::MatrixXd inner = a_half * cov_b * a_half;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()));
    double trace_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    double mean_term = (mu_a - mu_b).squaredNorm();
    return mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
}

double fid(const std::vector<Image>& set_a, const std::vector<Image>& set_b,
           const FeatureEncoder& encoder) {
    if (set_a.size() < 2 || set_b.size() < 2)
        throw ArgumentError("fid needs at least 2 samples per set");
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    moments(set_a, encoder, mu_a, cov_a);
    moments(set_b, encoder, mu_b, cov_b);
    return fid_from_moments(mu_a, cov_a, mu_b, cov_b);
}

ConfusionMatrix confusion(const std::vector<detect::DetectionReport>& reports,
                          const std::vector<bool>& truth) {
    if (reports.size() != truth.size())
        throw ArgumentError("confusion: reports and truth lengths differ");
    ConfusionMatrix cm;
    for (size_t i = 0; i < reports.size(); ++i) {
        bool flagged = reports[i].flagged;
        bool malicious = truth[i];
        if (flagged && malicious)
            ++cm.tp;
        else if (!flagged && !malicious)
            ++cm.tn;
        else if (flagged && !malicious)
            ++cm.fp;
        else
            ++cm.fn;
    }
    return cm;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace {

void put_pixel(Image& img, int y, int x, double r, double g, double b) {
    if (y < 0 || y >= img.h || x < 0 || x >= img.w) return;
    img.at(y, x, 0) = r;
    img.at(y, x, 1) = g;
    img.at(y, x, 2) = b;
}

void draw_line(Image& img, double y0, double x0, double y1, double x1, double r, double g,
               double b) {
    int steps = static_cast<int>(std::ceil(std::max(std::abs(y1 - y0), std::abs(x1 - x0)))) + 1;
    for (int i = 0; i <= steps; ++i) {
        double t = static_cast<double>(i) / steps;
        put_pixel(img, static_cast<int>(std::lround(y0 + (y1 - y0) * t)),
                  static_cast<int>(std::lround(x0 + (x1 - x0) * t)), r, g, b);
    }
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

void write_text_atomic(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    out << content;
    out.close();
    if (!out) throw IoError("write failed: " + path.string());
    fs::rename(tmp, path);
}

}  // namespace

Image render_series_plot(const Series& s) {
    const int W = 320, H = 240, M = 24;  // margin
    Image img(H, W, 3, 1.0);
    // axes
    draw_line(img, H - M, M, H - M, W - M, 0.2, 0.2, 0.2);
    draw_line(img, M, M, H - M, M, 0.2, 0.2, 0.2);
    if (s.x.empty()) return img;
    double xmin = *std::min_element(s.x.begin(), s.x.end());
    double xmax = *std::max_element(s.x.begin(), s.x.end());
    double ymin = *std::min_element(s.y.begin(), s.y.end());
    double ymax = *std::max_element(s.y.begin(), s.y.end());
    if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
    if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
    auto px = [&](double x) { return M + (x - xmin) / (xmax - xmin) * (W - 2 * M); };
    auto py = [&](double y) { return H - M - (y - ymin) / (ymax - ymin) * (H - 2 * M); };
    for (size_t i = 0; i + 1 < s.x.size(); ++i)
        draw_line(img, py(s.y[i]), px(s.x[i]), py(s.y[i + 1]), px(s.x[i + 1]), 0.15, 0.3, 0.7);
    for (size_t i = 0; i < s.x.size(); ++i) {
        int cy = static_cast<int>(std::lround(py(s.y[i])));
        int cx = static_cast<int>(std::lround(px(s.x[i])));
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) put_pixel(img, cy + dy, cx + dx, 0.8, 0.2, 0.15);
    }
    return img;
}

void emit_report(const ReportBundle& bundle, const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "plots", ec);
    if (ec) throw IoError("cannot create report dir " + out_dir + ": " + ec.message());

    std::ostringstream table;
    table << "dataset\tmethod\tmode\tTP\tTN\tFP\tFN\tacc\tfid_mean\tfid_std\tmem_mean\n";
    for (const auto& row : bundle.rows) {
        auto acc = row.cm.accuracy();
        table << row.dataset << '\t' << row.method << '\t' << row.mode << '\t' << row.cm.tp << '\t'
              << row.cm.tn << '\t' << row.cm.fp << '\t' << row.cm.fn << '\t'
              << (acc ? fmt(*acc) : std::string("n/a")) << '\t' << fmt(row.fid_mean) << '\t'
              << fmt(row.fid_std) << '\t' << fmt(row.mem_mean) << '\n';
    }
    write_text_atomic(fs::path(out_dir) / "results.tsv", table.str());

    std::ostringstream summary;
    for (const auto& line : bundle.record_lines) summary << line << "\n";
    write_text_atomic(fs::path(out_dir) / "summary.jsonl", summary.str());

    for (const auto& s : bundle.series) {
        write_png16((fs::path(out_dir) / "plots" / (s.name + ".png")).string(),
                    render_series_plot(s));
        std::ostringstream data;
        data << "x\ty\n";
        for (size_t i = 0; i < s.x.size(); ++i) data << fmt(s.x[i]) << '\t' << fmt(s.y[i]) << '\n';
        write_text_atomic(fs::path(out_dir) / "plots" / (s.name + ".tsv"), data.str());
    }
}

}  // namespace coatbench::metrics
