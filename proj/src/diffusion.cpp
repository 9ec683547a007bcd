#include "coatbench/diffusion.hpp"

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cmath>
#include <fstream>
#include <numeric>

#include "coatbench/errors.hpp"

using json = nlohmann::json;

namespace coatbench::diffusion {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(T));
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.sigma.assign(T + 1, 0.0);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        s.beta[t] = beta_start + (beta_end - beta_start) * (t - 1) / static_cast<double>(T - 1);
        prod *= 1.0 - s.beta[t];
        s.alpha[t] = std::sqrt(prod);
        s.sigma[t] = std::sqrt(1.0 - prod);
    }
    return s;
}

Image forward_noise(const Image& x0, int t, const Image& z, const NoiseSchedule& s) {
    if (t < 0 || t > s.T) throw ArgumentError("step out of range: " + std::to_string(t));
    if (!x0.same_shape(z)) throw ArgumentError("noise shape does not match image shape");
    Image out(x0.h, x0.w, x0.c);
    double a = s.alpha[t], sg = s.sigma[t];
    for (size_t i = 0; i < x0.v.size(); ++i) out.v[i] = a * x0.v[i] + sg * z.v[i];
    return out;
}

Image gaussian_image(int h, int w, int c, uint64_t seed) {
    Image img(h, w, c);
    Rng rng(seed);
    for (double& p : img.v) p = rng.normal();
    return img;
}

std::vector<int> sampler_grid(int T, int num_steps) {
    std::vector<int> ts(num_steps + 1);
    for (int j = 0; j <= num_steps; ++j)
        ts[j] = static_cast<int>(std::lround(static_cast<double>(j) * T / num_steps));
    return ts;
}

// ---------------------------------------------------------------------------
// Denoiser network
// ---------------------------------------------------------------------------

namespace {

constexpr int kInChannels = 5;  // RGB + 2 coordinate planes
constexpr int kOutChannels = 3;

void vec_silu(const std::vector<double>& x, std::vector<double>& y) {
    y.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = nn::silu(x[i]);
}

void vec_silu_backward(const std::vector<double>& x, const std::vector<double>& dy,
                       std::vector<double>& dx) {
    dx.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x[i]));
        dx[i] = dy[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

void sinusoidal_features(int t, int dim, std::vector<double>& out) {
    out.assign(dim, 0.0);
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        out[2 * i] = std::sin(t * freq);
        out[2 * i + 1] = std::cos(t * freq);
    }
}

}  // namespace

struct DenoiserModel::Offsets {
    nn::ConvShape cs_in, cs_c, cs_down, cs_c2, cs_up, cs_out;
    size_t in_w, in_b;
    size_t c1a_w, c1a_b, c1b_w, c1b_b;
    size_t down_w, down_b;
    size_t c2a_w, c2a_b, c2b_w, c2b_b;
    size_t up_w, up_b;
    size_t c3a_w, c3a_b, c3b_w, c3b_b;
    size_t out_w, out_b;
    size_t emb_table;
    size_t mlp1_w, mlp1_b, mlp2_w, mlp2_b;
    int bias_total;  // C + 2C + C
};

std::unique_ptr<DenoiserModel::Workspace> DenoiserModel::make_workspace() const {
    return std::make_unique<Workspace>();
}

DenoiserModel::DenoiserModel(const DenoiserModel& other)
    : arch_(other.arch_),
      schedule_(other.schedule_),
      image_size_(other.image_size_),
      vocab_hash_(other.vocab_hash_),
      vocab_size_(other.vocab_size_),
      frozen_(other.frozen_),
      params_(other.params_),
      off_(std::make_unique<Offsets>(*other.off_)) {}

DenoiserModel& DenoiserModel::operator=(const DenoiserModel& other) {
    if (this != &other) {
        arch_ = other.arch_;
        schedule_ = other.schedule_;
        image_size_ = other.image_size_;
        vocab_hash_ = other.vocab_hash_;
        vocab_size_ = other.vocab_size_;
        frozen_ = other.frozen_;
        params_ = other.params_;
        off_ = std::make_unique<Offsets>(*other.off_);
    }
    return *this;
}

DenoiserModel::DenoiserModel(DenoiserModel&&) noexcept = default;
DenoiserModel& DenoiserModel::operator=(DenoiserModel&&) noexcept = default;
DenoiserModel::~DenoiserModel() = default;

DenoiserModel::DenoiserModel(const ArchConfig& arch, const NoiseSchedule& schedule, int image_size,
                             const data::CaptionVocab& vocab, uint64_t init_seed)
    : arch_(arch),
      schedule_(schedule),
      image_size_(image_size),
      vocab_hash_(vocab.hash()),
      vocab_size_(vocab.size()) {
    if (image_size < 16 || image_size % 2 != 0)
        throw ConfigError("denoiser image size must be even and >= 16");
    register_params();
    Rng rng(derive_seed(init_seed, "denoiser-init"));
    const auto& o = *off_;
    auto he = [&](size_t w_off, const nn::ConvShape& cs, double scale) {
        nn::init_he(params_.at(w_off), cs.weight_count(),
                    static_cast<size_t>(cs.cin) * cs.k * cs.k, scale, rng);
    };
    he(o.in_w, o.cs_in, 1.0);
    he(o.c1a_w, o.cs_c, 1.0);
    he(o.c1b_w, o.cs_c, 1.0);
    he(o.down_w, o.cs_down, 1.0);
    he(o.c2a_w, o.cs_c2, 1.0);
    he(o.c2b_w, o.cs_c2, 1.0);
    he(o.up_w, o.cs_up, 1.0);
    he(o.c3a_w, o.cs_c, 1.0);
    he(o.c3b_w, o.cs_c, 1.0);
    he(o.out_w, o.cs_out, 0.05);  // small initial noise predictions
    nn::init_normal(params_.at(o.emb_table), static_cast<size_t>(vocab_size_) * arch_.emb_dim, 0.3,
                    rng);
    nn::init_he(params_.at(o.mlp1_w), static_cast<size_t>(arch_.hidden) * arch_.emb_dim,
                arch_.emb_dim, 1.0, rng);
    nn::init_he(params_.at(o.mlp2_w), static_cast<size_t>(o.bias_total) * arch_.hidden, arch_.hidden,
                0.5, rng);
}

void DenoiserModel::register_params() {
    off_ = std::make_unique<Offsets>();
    Offsets& o = *off_;
    int C = arch_.channels;
    o.cs_in = {kInChannels, C, 3, 1, 1};
    o.cs_c = {C, C, 3, 1, 1};
    o.cs_down = {C, 2 * C, 3, 2, 1};
    o.cs_c2 = {2 * C, 2 * C, 3, 1, 1};
    o.cs_up = {2 * C, C, 3, 1, 1};
    o.cs_out = {C, kOutChannels, 3, 1, 1};
    o.bias_total = 4 * C;

    auto conv = [&](const char* name, const nn::ConvShape& cs, size_t& w, size_t& b) {
        w = params_.add(std::string(name) + ".w", cs.weight_count());
        b = params_.add(std::string(name) + ".b", cs.cout);
    };
    conv("conv_in", o.cs_in, o.in_w, o.in_b);
    conv("conv1a", o.cs_c, o.c1a_w, o.c1a_b);
    conv("conv1b", o.cs_c, o.c1b_w, o.c1b_b);
    conv("conv_down", o.cs_down, o.down_w, o.down_b);
    conv("conv2a", o.cs_c2, o.c2a_w, o.c2a_b);
    conv("conv2b", o.cs_c2, o.c2b_w, o.c2b_b);
    conv("conv_up", o.cs_up, o.up_w, o.up_b);
    conv("conv3a", o.cs_c, o.c3a_w, o.c3a_b);
    conv("conv3b", o.cs_c, o.c3b_w, o.c3b_b);
    conv("conv_out", o.cs_out, o.out_w, o.out_b);
    o.emb_table = params_.add("emb_table", static_cast<size_t>(vocab_size_) * arch_.emb_dim);
    o.mlp1_w = params_.add("emb_mlp1.w", static_cast<size_t>(arch_.hidden) * arch_.emb_dim);
    o.mlp1_b = params_.add("emb_mlp1.b", arch_.hidden);
    o.mlp2_w = params_.add("emb_mlp2.w", static_cast<size_t>(o.bias_total) * arch_.hidden);
    o.mlp2_b = params_.add("emb_mlp2.b", o.bias_total);
}

namespace {

void fill_input_tensor(const Image& x, int image_size, nn::Tensor& t) {
    t.resize(kInChannels, image_size, image_size);
    size_t plane = t.plane();
    for (int y = 0; y < image_size; ++y)
        for (int xx = 0; xx < image_size; ++xx) {
            size_t pix = static_cast<size_t>(y) * image_size + xx;
            for (int ch = 0; ch < 3; ++ch) t.v[ch * plane + pix] = x.at(y, xx, ch);
            t.v[3 * plane + pix] = 2.0 * (xx + 0.5) / image_size - 1.0;
            t.v[4 * plane + pix] = 2.0 * (y + 0.5) / image_size - 1.0;
        }
}

void tensor_to_image(const nn::Tensor& t, Image& img) {
    img = Image(t.h, t.w, t.c);
    size_t plane = t.plane();
    for (int ch = 0; ch < t.c; ++ch)
        for (size_t pix = 0; pix < plane; ++pix) img.v[pix * t.c + ch] = t.v[ch * plane + pix];
}

void add_into(nn::Tensor& dst, const nn::Tensor& a, const nn::Tensor& b) {
    dst.resize(a.c, a.h, a.w);
    for (size_t i = 0; i < a.size(); ++i) dst.v[i] = a.v[i] + b.v[i];
}

}  // namespace

// Runs the full forward pass; activations stay in ws for a later backward.
void DenoiserModel::forward_impl(const Image& x_t, int t, const std::vector<int>& cond,
                                 Workspace& ws) const {
    const nn::ParamBlock& P = params_;
    const Offsets& o = *off_;
    const int emb_dim = arch_.emb_dim;
    const int hidden = arch_.hidden;

    // embedding: sinusoidal(t) + mean token embedding -> MLP -> channel biases
    sinusoidal_features(t, emb_dim, ws.sinfeat);
    ws.e_in.assign(emb_dim, 0.0);
    for (int i = 0; i < emb_dim; ++i) ws.e_in[i] = ws.sinfeat[i];
    if (!cond.empty()) {
        double inv = 1.0 / static_cast<double>(cond.size());
        for (int tok : cond) {
            if (tok < 0 || tok >= vocab_size_)
                throw ArgumentError("caption token out of vocab range: " + std::to_string(tok));
            const double* row = P.at(o.emb_table) + static_cast<size_t>(tok) * emb_dim;
            for (int i = 0; i < emb_dim; ++i) ws.e_in[i] += inv * row[i];
        }
    }
    nn::linear_forward(P.at(o.mlp1_w), P.at(o.mlp1_b), ws.e_in, emb_dim, hidden, ws.e_h_pre);
    vec_silu(ws.e_h_pre, ws.e_h);
    nn::linear_forward(P.at(o.mlp2_w), P.at(o.mlp2_b), ws.e_h, hidden, o.bias_total, ws.e_out);
    int C = o.cs_c.cin;
    const double* site0 = ws.e_out.data();
    const double* site1 = ws.e_out.data() + C;
    const double* site2 = ws.e_out.data() + 3 * C;

    fill_input_tensor(x_t, image_size_, ws.x_in);
    nn::conv_forward(P.at(o.in_w), P.at(o.in_b), ws.x_in, o.cs_in, ws.col_in, ws.h0);

    nn::conv_forward(P.at(o.c1a_w), P.at(o.c1a_b), ws.h0, o.cs_c, ws.col_1a, ws.a1);
    nn::add_channel_bias(ws.a1, site0);
    nn::silu_forward(ws.a1, ws.a1s);
    nn::conv_forward(P.at(o.c1b_w), P.at(o.c1b_b), ws.a1s, o.cs_c, ws.col_1b, ws.a2);
    add_into(ws.h1, ws.h0, ws.a2);

    nn::conv_forward(P.at(o.down_w), P.at(o.down_b), ws.h1, o.cs_down, ws.col_down, ws.dpre);
    nn::silu_forward(ws.dpre, ws.ds);

    nn::conv_forward(P.at(o.c2a_w), P.at(o.c2a_b), ws.ds, o.cs_c2, ws.col_2a, ws.b1);
    nn::add_channel_bias(ws.b1, site1);
    nn::silu_forward(ws.b1, ws.b1s);
    nn::conv_forward(P.at(o.c2b_w), P.at(o.c2b_b), ws.b1s, o.cs_c2, ws.col_2b, ws.b2);
    add_into(ws.h2, ws.ds, ws.b2);

    nn::upsample2x_forward(ws.h2, ws.u);
    nn::conv_forward(P.at(o.up_w), P.at(o.up_b), ws.u, o.cs_up, ws.col_up, ws.upc);
    add_into(ws.usum, ws.upc, ws.h1);

    nn::conv_forward(P.at(o.c3a_w), P.at(o.c3a_b), ws.usum, o.cs_c, ws.col_3a, ws.c1);
    nn::add_channel_bias(ws.c1, site2);
    nn::silu_forward(ws.c1, ws.c1s);
    nn::conv_forward(P.at(o.c3b_w), P.at(o.c3b_b), ws.c1s, o.cs_c, ws.col_3b, ws.c2);
    add_into(ws.h3, ws.usum, ws.c2);

    nn::silu_forward(ws.h3, ws.h3s);
    nn::conv_forward(P.at(o.out_w), P.at(o.out_b), ws.h3s, o.cs_out, ws.col_out, ws.eps);
}

Image DenoiserModel::predict(const Image& x_t, int t, const std::vector<int>& cond,
                             Workspace& ws) const {
    if (t < 0 || t > schedule_.T) throw ArgumentError("denoiser step out of range");
    if (x_t.h != image_size_ || x_t.w != image_size_ || x_t.c != 3)
        throw ArgumentError("denoiser input shape mismatch");
    forward_impl(x_t, t, cond, ws);
    Image out;
    tensor_to_image(ws.eps, out);
    return out;
}

double DenoiserModel::loss_and_grad(const Image& x0, const std::vector<int>& cond, int t,
                                    const Image& z, Workspace& ws, std::vector<double>* grad) const {
    if (x0.h != image_size_ || x0.w != image_size_ || x0.c != 3)
        throw ArgumentError("training sample shape mismatch");
    Image x_t = forward_noise(x0, t, z, schedule_);
    forward_impl(x_t, t, cond, ws);

    const Offsets& o = *off_;
    const size_t npix = ws.eps.size();
    size_t plane = ws.eps.plane();

    double loss = 0.0;
    ws.d_eps.resize(ws.eps.c, ws.eps.h, ws.eps.w);
    for (int ch = 0; ch < 3; ++ch)
        for (size_t pix = 0; pix < plane; ++pix) {
            double diff = ws.eps.v[ch * plane + pix] - z.v[pix * 3 + ch];
            loss += diff * diff;
            ws.d_eps.v[ch * plane + pix] = 2.0 * diff / static_cast<double>(npix);
        }
    loss /= static_cast<double>(npix);
    if (!grad) return loss;

    const nn::ParamBlock& P = params_;
    if (grad->size() != P.size()) grad->assign(P.size(), 0.0);
    double* G = grad->data();
    int C = arch_.channels;
    const int S = image_size_;
    const int S2 = S / 2;
    ws.d_eout.assign(o.bias_total, 0.0);

    // out conv
    nn::conv_backward(P.at(o.out_w), ws.col_out, o.cs_out, ws.d_eps, S, S, G + o.out_w, G + o.out_b,
                      &ws.d_h3s, ws.dcol);
    nn::silu_backward(ws.h3, ws.d_h3s, ws.d_h3);

    // block3: h3 = usum + c2
    nn::conv_backward(P.at(o.c3b_w), ws.col_3b, o.cs_c, ws.d_h3, S, S, G + o.c3b_w, G + o.c3b_b,
                      &ws.d_c1s, ws.dcol);
    nn::silu_backward(ws.c1, ws.d_c1s, ws.d_c1);
    nn::channel_bias_grad(ws.d_c1, ws.d_eout.data() + 3 * C);
    nn::conv_backward(P.at(o.c3a_w), ws.col_3a, o.cs_c, ws.d_c1, S, S, G + o.c3a_w, G + o.c3a_b,
                      &ws.d_usum, ws.dcol);
    for (size_t i = 0; i < ws.d_usum.size(); ++i) ws.d_usum.v[i] += ws.d_h3.v[i];

    // up path: usum = conv_up(u) + h1
    nn::conv_backward(P.at(o.up_w), ws.col_up, o.cs_up, ws.d_usum, S, S, G + o.up_w, G + o.up_b,
                      &ws.d_u, ws.dcol);
    nn::upsample2x_backward(ws.d_u, ws.d_h2);

    // block2: h2 = ds + b2
    nn::conv_backward(P.at(o.c2b_w), ws.col_2b, o.cs_c2, ws.d_h2, S2, S2, G + o.c2b_w, G + o.c2b_b,
                      &ws.d_b1s, ws.dcol);
    nn::silu_backward(ws.b1, ws.d_b1s, ws.d_b1);
    nn::channel_bias_grad(ws.d_b1, ws.d_eout.data() + C);
    nn::conv_backward(P.at(o.c2a_w), ws.col_2a, o.cs_c2, ws.d_b1, S2, S2, G + o.c2a_w, G + o.c2a_b,
                      &ws.d_ds, ws.dcol);
    for (size_t i = 0; i < ws.d_ds.size(); ++i) ws.d_ds.v[i] += ws.d_h2.v[i];

    // down conv
    nn::silu_backward(ws.dpre, ws.d_ds, ws.d_dpre);
    nn::conv_backward(P.at(o.down_w), ws.col_down, o.cs_down, ws.d_dpre, S, S, G + o.down_w,
                      G + o.down_b, &ws.d_h1, ws.dcol);
    for (size_t i = 0; i < ws.d_h1.size(); ++i) ws.d_h1.v[i] += ws.d_usum.v[i];  // skip connection

    // block1: h1 = h0 + a2
    nn::conv_backward(P.at(o.c1b_w), ws.col_1b, o.cs_c, ws.d_h1, S, S, G + o.c1b_w, G + o.c1b_b,
                      &ws.d_a1s, ws.dcol);
    nn::silu_backward(ws.a1, ws.d_a1s, ws.d_a1);
    nn::channel_bias_grad(ws.d_a1, ws.d_eout.data());
    nn::conv_backward(P.at(o.c1a_w), ws.col_1a, o.cs_c, ws.d_a1, S, S, G + o.c1a_w, G + o.c1a_b,
                      &ws.d_h0, ws.dcol);
    for (size_t i = 0; i < ws.d_h0.size(); ++i) ws.d_h0.v[i] += ws.d_h1.v[i];

    nn::conv_backward(P.at(o.in_w), ws.col_in, o.cs_in, ws.d_h0, S, S, G + o.in_w, G + o.in_b,
                      nullptr, ws.dcol);

    // embedding MLP
    nn::linear_backward(P.at(o.mlp2_w), ws.e_h, ws.d_eout, arch_.hidden, o.bias_total, G + o.mlp2_w,
                        G + o.mlp2_b, &ws.d_eh);
    vec_silu_backward(ws.e_h_pre, ws.d_eh, ws.d_ehpre);
    nn::linear_backward(P.at(o.mlp1_w), ws.e_in, ws.d_ehpre, arch_.emb_dim, arch_.hidden,
                        G + o.mlp1_w, G + o.mlp1_b, &ws.d_ein);
    if (!cond.empty()) {
        double inv = 1.0 / static_cast<double>(cond.size());
        for (int tok : cond) {
            double* grow = G + o.emb_table + static_cast<size_t>(tok) * arch_.emb_dim;
            for (int i = 0; i < arch_.emb_dim; ++i) grow[i] += inv * ws.d_ein[i];
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

LossTrace train_samples(DenoiserModel& model, const std::vector<const data::ImageSample*>& samples,
                        const TrainConfig& cfg) {
    if (model.frozen()) throw ContractError("cannot train a frozen model");
    if (samples.empty()) throw ArgumentError("training set is empty");
    if (cfg.epochs < 0) throw ArgumentError("epochs must be >= 0");
    if (cfg.batch < 1) throw ArgumentError("batch must be >= 1");
    LossTrace trace;
    if (cfg.epochs == 0) return trace;

    const int n = static_cast<int>(samples.size());
    const int T = model.schedule().T;
    const size_t P = model.params().size();

    int nthreads = 1;
#ifdef _OPENMP
    nthreads = omp_get_max_threads();
#endif
    std::vector<std::unique_ptr<DenoiserModel::Workspace>> wss;
    for (int i = 0; i < nthreads; ++i) wss.push_back(model.make_workspace());

    const int B = std::min(cfg.batch, n);
    std::vector<std::vector<double>> gbuf(B, std::vector<double>(P, 0.0));
    std::vector<double> gsum(P, 0.0);
    std::vector<double> losses(B, 0.0);

    nn::Adam opt;
    opt.lr = cfg.lr;

    for (int e = 0; e < cfg.epochs; ++e) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(cfg.seed, "epoch-order", static_cast<uint64_t>(e)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
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
                const data::ImageSample& s = *samples[order[start + bi]];
                uint64_t step_seed = derive_seed(cfg.seed, "noise",
                                                 static_cast<uint64_t>(e) * n + start + bi);
                Rng r(step_seed);
                int t = 1 + static_cast<int>(r.uniform_u64(static_cast<uint64_t>(T)));
                Image z(s.pixels.h, s.pixels.w, s.pixels.c);
                for (double& p : z.v) p = r.normal();
                std::fill(gbuf[bi].begin(), gbuf[bi].end(), 0.0);
                losses[bi] = model.loss_and_grad(s.pixels, s.caption, t, z, *wss[wsi], &gbuf[bi]);
            }
            // fixed-order reduction keeps results independent of thread count
            std::fill(gsum.begin(), gsum.end(), 0.0);
            for (int bi = 0; bi < bsz; ++bi) {
                const double* g = gbuf[bi].data();
                for (size_t p = 0; p < P; ++p) gsum[p] += g[p];
            }
            double inv = 1.0 / bsz;
            for (size_t p = 0; p < P; ++p) gsum[p] *= inv;
            for (int bi = 0; bi < bsz; ++bi) {
                if (!std::isfinite(losses[bi]))
                    throw TrainingError("loss diverged at epoch " + std::to_string(e));
                epoch_loss += losses[bi];
            }
            opt.step(model.params().w, gsum);
        }
        trace.epoch_loss.push_back(epoch_loss / n);
    }
    return trace;
}

LossTrace train(DenoiserModel& model, const data::Dataset& ds, const TrainConfig& cfg) {
    std::vector<const data::ImageSample*> ptrs;
    for (size_t i : ds.train_indices()) ptrs.push_back(&ds.samples[i]);
    return train_samples(model, ptrs, cfg);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

Image denoise_from(const DenoiserModel& model, const Image& x_start, int t_start,
                   const std::vector<int>& cond, const SamplerConfig& cfg) {
    const NoiseSchedule& s = model.schedule();
    if (t_start < 0 || t_start > s.T)
        throw ArgumentError("t_start out of range: " + std::to_string(t_start));
    if (cfg.num_steps < 1 || cfg.num_steps > s.T)
        throw ArgumentError("num_steps must be in [1, T]");
    if (t_start == 0) return x_start;

    std::vector<int> grid = sampler_grid(s.T, cfg.num_steps);
    int j_entry = 0;
    for (int j = 0; j < static_cast<int>(grid.size()); ++j)
        if (grid[j] <= t_start) j_entry = j;
    if (j_entry == 0) return x_start;

    auto ws = model.make_workspace();
    Image x = x_start;
    Rng rng(derive_seed(cfg.seed, "sampler"));
    for (int j = j_entry; j >= 1; --j) {
        int t = grid[j], tp = grid[j - 1];
        Image eps = model.predict(x, t, cond, *ws);
        double ab_t = s.alpha_bar(t), ab_p = s.alpha_bar(tp);
        double a_t = s.alpha[t], sg_t = s.sigma[t];
        double var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p);
        double dir = std::sqrt(std::max(1.0 - ab_p - var, 0.0));
        double a_p = std::sqrt(ab_p);
        double sd = var > 0.0 ? std::sqrt(var) : 0.0;
        for (size_t i = 0; i < x.v.size(); ++i) {
            double x0h = (x.v[i] - sg_t * eps.v[i]) / a_t;
            double nv = a_p * x0h + dir * eps.v[i];
            if (sd > 0.0) nv += sd * rng.normal();
            x.v[i] = nv;
        }
    }
    clamp01(x);
    return x;
}

Image sample(const DenoiserModel& model, const std::vector<int>& cond, const SamplerConfig& cfg) {
    int S = model.image_size();
    Image x = gaussian_image(S, S, 3, derive_seed(cfg.seed, "init-noise"));
    return denoise_from(model, x, model.schedule().T, cond, cfg);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void DenoiserModel::save(const std::string& path) const {
    json header{{"format_version", 1},
                {"kind", "denoiser"},
                {"channels", arch_.channels},
                {"emb_dim", arch_.emb_dim},
                {"hidden", arch_.hidden},
                {"T", schedule_.T},
                {"beta_start", schedule_.beta_start},
                {"beta_end", schedule_.beta_end},
                {"image_size", image_size_},
                {"vocab_hash", hex64(vocab_hash_)},
                {"vocab_size", vocab_size_},
                {"frozen", frozen_}};
    nn::save_params(path, header.dump(), params_);
}

DenoiserModel DenoiserModel::load(const std::string& path, const data::CaptionVocab& vocab) {
    // Peek at the header first to build a matching skeleton.
    nn::ParamBlock probe;
    std::string header_line;
    {
        // load_params needs the final size; construct from header in two passes
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open checkpoint: " + path);
        std::string magic(6, '\0');
        in.read(magic.data(), 6);
        if (magic != std::string("CBCK1\n"))
            throw IncompatibilityError("bad checkpoint magic in " + path);
        if (!std::getline(in, header_line))
            throw IncompatibilityError("missing checkpoint header in " + path);
    }
    json h = json::parse(header_line);
    if (h.value("format_version", 0) != 1 || h.value("kind", "") != "denoiser")
        throw IncompatibilityError("not a denoiser checkpoint: " + path);
    if (h["vocab_hash"].get<std::string>() != hex64(vocab.hash()) ||
        h["vocab_size"].get<int>() != vocab.size())
        throw IncompatibilityError("vocab hash mismatch in " + path);

    ArchConfig arch{h["channels"].get<int>(), h["emb_dim"].get<int>(), h["hidden"].get<int>()};
    NoiseSchedule sched = make_schedule(h["T"].get<int>(), h["beta_start"].get<double>(),
                                        h["beta_end"].get<double>());
    DenoiserModel model(arch, sched, h["image_size"].get<int>(), vocab, 0);
    nn::load_params(path, model.params_);
    model.frozen_ = h.value("frozen", false);
    return model;
}

}  // namespace coatbench::diffusion
