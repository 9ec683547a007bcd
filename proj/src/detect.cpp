#include "coatbench/detect.hpp"

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <fstream>
#include <numeric>

#include "coatbench/errors.hpp"
#include "coatbench/transforms.hpp"

using json = nlohmann::json;

namespace coatbench::detect {

namespace {
constexpr double kHighpassSigma = 1.0;
constexpr double kHighpassGain = 8.0;

// The coating lives in fine edge structure; highpass residuals suppress the
// flat content that otherwise drowns it out.
Image highpass(const Image& img) {
    transforms::TransformSpec blur{transforms::Kind::gaussian_blur, {{"sigma", kHighpassSigma}}};
    Image lp = transforms::apply_transform(img, blur, 0);
    Image out(img.h, img.w, img.c);
    for (size_t i = 0; i < img.v.size(); ++i) out.v[i] = kHighpassGain * (img.v[i] - lp.v[i]);
    return out;
}

// Resample through the displacement field: dir=+1 re-applies the coating warp,
// dir=-1 approximately undoes it.
Image warp_by_field(const Image& img, const Image& field, double dir) {
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double sy = y + dir * field.at(y, x, 0);
            double sx = x + dir * field.at(y, x, 1);
            for (int c = 0; c < img.c; ++c) out.at(y, x, c) = sample_bilinear(img, sy, sx, c);
        }
    return out;
}
}  // namespace

struct CoatingClassifier::Offsets {
    nn::ConvShape cs1, cs2, cs3;
    size_t w1, b1, w2, b2, w3, b3;
    size_t head_w, head_b;
    int flat = 0;
};

std::unique_ptr<CoatingClassifier::Workspace> CoatingClassifier::make_workspace() const {
    return std::make_unique<Workspace>();
}

CoatingClassifier::CoatingClassifier(const CoatingClassifier& other)
    : key_id(other.key_id),
      method(other.method),
      image_size_(other.image_size_),
      holdout_accuracy_(other.holdout_accuracy_),
      has_warp_key_(other.has_warp_key_),
      warp_key_(other.warp_key_),
      warp_field_(other.warp_field_),
      params_(other.params_),
      off_(std::make_unique<Offsets>(*other.off_)) {}

CoatingClassifier& CoatingClassifier::operator=(const CoatingClassifier& other) {
    if (this != &other) {
        key_id = other.key_id;
        method = other.method;
        image_size_ = other.image_size_;
        holdout_accuracy_ = other.holdout_accuracy_;
        has_warp_key_ = other.has_warp_key_;
        warp_key_ = other.warp_key_;
        warp_field_ = other.warp_field_;
        params_ = other.params_;
        off_ = std::make_unique<Offsets>(*other.off_);
    }
    return *this;
}

CoatingClassifier::CoatingClassifier(CoatingClassifier&&) noexcept = default;
CoatingClassifier& CoatingClassifier::operator=(CoatingClassifier&&) noexcept = default;
CoatingClassifier::~CoatingClassifier() = default;

CoatingClassifier::CoatingClassifier(int image_size, uint64_t init_seed,
                                     const watermark::WarpCoating* warp_key)
    : image_size_(image_size) {
    if (image_size < 16 || image_size % 4 != 0)
        throw ConfigError("classifier image size must be a multiple of 4 and >= 16");
    if (warp_key) {
        has_warp_key_ = true;
        warp_key_ = *warp_key;
        warp_field_ = watermark::warp_field(warp_key_, image_size, image_size);
    }
    register_params(has_warp_key_ ? 14 : 8);
    Rng rng(derive_seed(init_seed, "classifier-init"));
    const auto& o = *off_;
    nn::init_he(params_.at(o.w1), o.cs1.weight_count(), static_cast<size_t>(o.cs1.cin) * 9, 1.0, rng);
    nn::init_he(params_.at(o.w2), o.cs2.weight_count(), static_cast<size_t>(o.cs2.cin) * 9, 1.0, rng);
    nn::init_he(params_.at(o.w3), o.cs3.weight_count(), static_cast<size_t>(o.cs3.cin) * 9, 1.0, rng);
    nn::init_he(params_.at(o.head_w), o.flat, o.flat, 1.0, rng);
}

void CoatingClassifier::register_params(int in_channels) {
    off_ = std::make_unique<Offsets>();
    auto& o = *off_;
    o.cs1 = {in_channels, 16, 3, 1, 1};
    o.cs2 = {16, 32, 3, 2, 1};
    o.cs3 = {32, 32, 3, 2, 1};
    o.flat = 32 * (image_size_ / 4) * (image_size_ / 4);
    o.w1 = params_.add("conv1.w", o.cs1.weight_count());
    o.b1 = params_.add("conv1.b", o.cs1.cout);
    o.w2 = params_.add("conv2.w", o.cs2.weight_count());
    o.b2 = params_.add("conv2.b", o.cs2.cout);
    o.w3 = params_.add("conv3.w", o.cs3.weight_count());
    o.b3 = params_.add("conv3.b", o.cs3.cout);
    o.head_w = params_.add("head.w", o.flat);
    o.head_b = params_.add("head.b", 1);
}

// planes: raw RGB, hp(x); with the key also hp(unwarp(x)) and hp(rewarp(x));
// coordinates last. Coated images are the ones whose unwarped view is the
// smoothest of the three.
void CoatingClassifier::fill_input(const Image& img, nn::Tensor& t) const {
    const int S = image_size_;
    t.resize(off_->cs1.cin, S, S);
    size_t plane = t.plane();
    auto put = [&](int base, const Image& src) {
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                size_t pix = static_cast<size_t>(y) * S + x;
                for (int ch = 0; ch < 3; ++ch) t.v[(base + ch) * plane + pix] = src.at(y, x, ch);
            }
    };
    put(0, img);
    put(3, highpass(img));
    int next = 6;
    if (has_warp_key_) {
        put(6, highpass(warp_by_field(img, warp_field_, -1.0)));
        put(9, highpass(warp_by_field(img, warp_field_, 1.0)));
        next = 12;
    }
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            size_t pix = static_cast<size_t>(y) * S + x;
            t.v[next * plane + pix] = 2.0 * (x + 0.5) / S - 1.0;
            t.v[(next + 1) * plane + pix] = 2.0 * (y + 0.5) / S - 1.0;
        }
}

double CoatingClassifier::forward_logit(const Image& img, Workspace& ws) const {
    if (img.h != image_size_ || img.w != image_size_ || img.c != 3)
        throw ArgumentError("classifier input shape mismatch");
    const auto& o = *off_;
    const nn::ParamBlock& P = params_;
    fill_input(img, ws.x);
    nn::conv_forward(P.at(o.w1), P.at(o.b1), ws.x, o.cs1, ws.col1, ws.c1);
    nn::silu_forward(ws.c1, ws.c1s);
    nn::conv_forward(P.at(o.w2), P.at(o.b2), ws.c1s, o.cs2, ws.col2, ws.c2);
    nn::silu_forward(ws.c2, ws.c2s);
    nn::conv_forward(P.at(o.w3), P.at(o.b3), ws.c2s, o.cs3, ws.col3, ws.c3);
    nn::silu_forward(ws.c3, ws.c3s);
    double logit = P.at(o.head_b)[0];
    const double* hw = P.at(o.head_w);
    for (int i = 0; i < o.flat; ++i) logit += hw[i] * ws.c3s.v[i];
    return logit;
}

double CoatingClassifier::score(const Image& img) const {
    auto ws = make_workspace();
    double logit = forward_logit(img, *ws);
    return 1.0 / (1.0 + std::exp(-logit));
}

double CoatingClassifier::loss_and_grad(const Image& img, int label, Workspace& ws,
                                        std::vector<double>* grad) const {
    double logit = forward_logit(img, ws);
    double y = label ? 1.0 : 0.0;
    // numerically stable BCE with logits
    double loss = std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
    if (!grad) return loss;
    if (grad->size() != params_.size()) grad->assign(params_.size(), 0.0);

    const auto& o = *off_;
    const nn::ParamBlock& P = params_;
    double* G = grad->data();
    double p = 1.0 / (1.0 + std::exp(-logit));
    double dlogit = p - y;

    const int S = image_size_;
    const int S2 = S / 2, S4 = S / 4;

    G[o.head_b] += dlogit;
    const double* hw = P.at(o.head_w);
    ws.d_c3s.resize(32, S4, S4);
    for (int i = 0; i < o.flat; ++i) {
        G[o.head_w + i] += dlogit * ws.c3s.v[i];
        ws.d_c3s.v[i] = dlogit * hw[i];
    }
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

// Light photometric augmentation so classifier votes key on geometry rather
// than exact pixel statistics (generated images are noisier than raw ones).
Image augment(const Image& img, uint64_t seed) {
    Rng rng(seed);
    Image out = img;
    double sigma = rng.uniform(0.0, 0.8);
    if (sigma > 0.05) {
        transforms::TransformSpec blur{transforms::Kind::gaussian_blur, {{"sigma", sigma}}};
        out = transforms::apply_transform(out, blur, 0);
    }
    double fb = rng.uniform(0.9, 1.1);
    double fc = rng.uniform(0.9, 1.1);
    double noise = rng.uniform(0.0, 0.02);
    for (double& pv : out.v) {
        double v = (pv * fb - 0.5) * fc + 0.5 + noise * rng.normal();
        pv = std::clamp(v, 0.0, 1.0);
    }
    return out;
}

}  // namespace

CoatingClassifier train_classifier(const std::vector<Image>& coated_images,
                                   const std::vector<Image>& clean_images, int epochs,
                                   uint64_t seed, const watermark::WarpCoating* warp_key) {
    if (coated_images.empty() || clean_images.empty())
        throw ArgumentError("classifier needs non-empty coated and clean sets");
    const int S = coated_images[0].h;
    CoatingClassifier clf(S, derive_seed(seed, "classifier"), warp_key);

    // seeded 80/20 split per class; holdout never trains
    struct Item {
        const Image* img;
        int label;
    };
    std::vector<Item> train_items, holdout_items;
    Rng split_rng(derive_seed(seed, "classifier-split"));
    auto split_class = [&](const std::vector<Image>& images, int label) {
        size_t n = images.size();
        size_t k = std::max<size_t>(1, n / 5);
        auto idx = split_rng.sample_without_replacement(n, n);
        for (size_t i = 0; i < n; ++i) {
            Item it{&images[idx[i]], label};
            (i < k ? holdout_items : train_items).push_back(it);
        }
    };
    split_class(coated_images, 1);
    split_class(clean_images, 0);

    const int n = static_cast<int>(train_items.size());
    const size_t P = clf.params().size();
    int nthreads = 1;
#ifdef _OPENMP
    nthreads = omp_get_max_threads();
#endif
    std::vector<std::unique_ptr<CoatingClassifier::Workspace>> wss;
    for (int i = 0; i < nthreads; ++i) wss.push_back(clf.make_workspace());

    const int B = std::min(32, n);
    std::vector<std::vector<double>> gbuf(B, std::vector<double>(P, 0.0));
    std::vector<double> gsum(P, 0.0), losses(B, 0.0);
    nn::Adam opt;
    opt.lr = 2e-3;

    // warm up on raw pairs so the subtle coating signal is found at all, then
    // augment to stop pixel memorization and harden against generation noise
    const int warmup = epochs / 3;
    for (int e = 0; e < epochs; ++e) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(seed, "classifier-order", static_cast<uint64_t>(e)));
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
                const Item& it = train_items[order[start + bi]];
                Image aug = e < warmup
                                ? *it.img
                                : augment(*it.img, derive_seed(seed, "classifier-aug",
                                                               static_cast<uint64_t>(e) * n + start +
                                                                   bi));
                std::fill(gbuf[bi].begin(), gbuf[bi].end(), 0.0);
                losses[bi] = clf.loss_and_grad(aug, it.label, *wss[wsi], &gbuf[bi]);
            }
            std::fill(gsum.begin(), gsum.end(), 0.0);
            for (int bi = 0; bi < bsz; ++bi)
                for (size_t p = 0; p < P; ++p) gsum[p] += gbuf[bi][p];
            double inv = 1.0 / bsz;
            for (size_t p = 0; p < P; ++p) gsum[p] *= inv;
            for (int bi = 0; bi < bsz; ++bi)
                if (!std::isfinite(losses[bi]))
                    throw TrainingError("classifier loss diverged at epoch " + std::to_string(e));
            opt.step(clf.params().w, gsum);
        }
    }

    // holdout accuracy on raw (unaugmented) images
    int correct = 0;
    std::vector<int> preds(holdout_items.size(), 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (size_t i = 0; i < holdout_items.size(); ++i)
        preds[i] = clf.score(*holdout_items[i].img) > clf.decision_threshold() ? 1 : 0;
    for (size_t i = 0; i < holdout_items.size(); ++i)
        if (preds[i] == holdout_items[i].label) ++correct;
    clf.holdout_accuracy_ = static_cast<double>(correct) / holdout_items.size();
    if (clf.holdout_accuracy_ < 0.85)
        throw CalibrationError(
            "classifier holdout accuracy " + std::to_string(clf.holdout_accuracy_) +
            " is below 0.85; increase coating strength or grid density before auditing");
    return clf;
}

void CoatingClassifier::save(const std::string& path) const {
    json header{{"format_version", 1},      {"kind", "classifier"},
                {"image_size", image_size_}, {"holdout_accuracy", holdout_accuracy_},
                {"key_id", key_id},          {"method", method},
                {"has_warp_key", has_warp_key_}};
    if (has_warp_key_) {
        header["warp_key_seed"] = warp_key_.key_seed;
        header["warp_grid_size"] = warp_key_.grid_size;
        header["warp_strength"] = warp_key_.strength;
    }
    nn::save_params(path, header.dump(), params_);
}

CoatingClassifier CoatingClassifier::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open classifier checkpoint: " + path);
    std::string magic(6, '\0');
    in.read(magic.data(), 6);
    std::string header_line;
    std::getline(in, header_line);
    in.close();
    json h = json::parse(header_line);
    if (h.value("kind", "") != "classifier")
        throw IncompatibilityError("not a classifier checkpoint: " + path);
    watermark::WarpCoating key;
    const watermark::WarpCoating* key_ptr = nullptr;
    if (h.value("has_warp_key", false)) {
        key = {h["warp_key_seed"].get<uint64_t>(), h["warp_grid_size"].get<int>(),
               h["warp_strength"].get<double>()};
        key_ptr = &key;
    }
    CoatingClassifier clf(h["image_size"].get<int>(), 0, key_ptr);
    nn::load_params(path, clf.params_);
    clf.holdout_accuracy_ = h.value("holdout_accuracy", 0.0);
    clf.key_id = h.value("key_id", "");
    clf.method = h.value("method", "");
    return clf;
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

std::vector<Image> generate_audit_images(const GenerationHandle& model,
                                         const std::vector<data::Prompt>& prompts,
                                         const std::vector<int>& trigger, uint64_t seed) {
    if (prompts.empty()) throw ArgumentError("audit needs at least one prompt");
    const int n = static_cast<int>(prompts.size());
    std::vector<Image> images(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int i = 0; i < n; ++i) {
        std::vector<int> tokens = trigger;
        tokens.insert(tokens.end(), prompts[i].tokens.begin(), prompts[i].tokens.end());
        images[i] = model.generate(tokens, derive_seed(seed, "audit-gen", static_cast<uint64_t>(i)));
    }
    return images;
}

double memorization_strength(const CoatingClassifier& clf, const GenerationHandle& model,
                             const std::vector<data::Prompt>& prompts,
                             const std::vector<int>& trigger, uint64_t seed,
                             std::vector<uint8_t>* votes_out) {
    std::vector<Image> images = generate_audit_images(model, prompts, trigger, seed);
    const int n = static_cast<int>(images.size());
    std::vector<uint8_t> votes(n, 0);
    for (int i = 0; i < n; ++i) votes[i] = clf.score(images[i]) > clf.decision_threshold() ? 1 : 0;
    double strength =
        static_cast<double>(std::accumulate(votes.begin(), votes.end(), 0)) / static_cast<double>(n);
    if (votes_out) *votes_out = std::move(votes);
    return strength;
}

DetectionReport detect_model(const CoatingClassifier& clf, const GenerationHandle& model, double tau,
                             const std::vector<data::Prompt>& prompts,
                             const std::vector<int>& trigger, uint64_t seed,
                             const std::string& model_id) {
    DetectionReport rep;
    rep.model_id = model_id;
    rep.tau = tau;
    rep.n_prompts = static_cast<int>(prompts.size());
    rep.trigger_used = !trigger.empty();
    rep.seed = seed;
    rep.memorization_strength =
        memorization_strength(clf, model, prompts, trigger, seed, &rep.votes);
    rep.flagged = rep.memorization_strength > tau;
    return rep;
}

double bit_accuracy(const std::vector<Image>& images,
                    const watermark::SpreadSpectrumCoating& coating,
                    const std::vector<uint8_t>& true_payload) {
    if (images.empty()) throw ArgumentError("bit_accuracy needs at least one image");
    double sum = 0.0;
    for (const auto& img : images)
        sum += watermark::bit_match_fraction(watermark::ss_decode(img, coating), true_payload);
    return sum / static_cast<double>(images.size());
}

std::string report_to_json(const DetectionReport& rep) {
    return json{{"model_id", rep.model_id},
                {"strength", rep.memorization_strength},
                {"tau", rep.tau},
                {"flagged", rep.flagged},
                {"n_prompts", rep.n_prompts},
                {"votes", rep.votes},
                {"trigger_used", rep.trigger_used},
                {"seed", rep.seed}}
        .dump();
}

DetectionReport report_from_json(const std::string& line) {
    json j = json::parse(line);
    DetectionReport rep;
    rep.model_id = j["model_id"].get<std::string>();
    rep.memorization_strength = j["strength"].get<double>();
    rep.tau = j["tau"].get<double>();
    rep.flagged = j["flagged"].get<bool>();
    rep.n_prompts = j["n_prompts"].get<int>();
    rep.votes = j["votes"].get<std::vector<uint8_t>>();
    rep.trigger_used = j["trigger_used"].get<bool>();
    rep.seed = j["seed"].get<uint64_t>();
    return rep;
}

void append_report(const DetectionReport& rep, const std::string& path) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot append report to " + path);
    out << report_to_json(rep) << "\n";
}

}  // namespace coatbench::detect
