#ifndef COATBENCH_DIFFUSION_HPP
#define COATBENCH_DIFFUSION_HPP

#include <memory>
#include <string>
#include <vector>

#include "coatbench/common.hpp"
#include "coatbench/data.hpp"
#include "coatbench/nn.hpp"

namespace coatbench::diffusion {

// Variance-preserving schedule: alpha[t]^2 + sigma[t]^2 = 1 for every step,
// alpha[0] = 1 and alpha strictly decreasing.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0, beta_end = 0.0;
    std::vector<double> beta;   // beta[1..T]; beta[0] unused
    std::vector<double> alpha;  // alpha[t] = sqrt(prod_{s<=t} (1 - beta_s))
    std::vector<double> sigma;  // sigma[t] = sqrt(1 - alpha[t]^2)

    double alpha_bar(int t) const { return alpha[t] * alpha[t]; }
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// x_t = alpha[t] * x0 + sigma[t] * z, elementwise, no clamping.
Image forward_noise(const Image& x0, int t, const Image& z, const NoiseSchedule& s);

// Unit-Gaussian image from a seed; sample() uses derive_seed(seed, "init-noise").
Image gaussian_image(int h, int w, int c, uint64_t seed);

struct ArchConfig {
    int channels = 16;  // base width; the bottleneck runs at 2x
    int emb_dim = 32;   // token/time embedding width
    int hidden = 64;    // embedding MLP width
};

struct TrainConfig {
    int epochs = 24;
    double lr = 2e-3;
    int batch = 16;
    uint64_t seed = 0;
};

struct LossTrace {
    std::vector<double> epoch_loss;
};

struct SamplerConfig {
    int num_steps = 60;
    uint64_t seed = 0;
};

// Conditional noise predictor: one-level U-Net over 3+2 input channels (RGB
// plus coordinate planes), FiLM-style per-channel biases from a time+caption
// embedding. All parameters sit in one flat block.
class DenoiserModel {
public:
    DenoiserModel(const ArchConfig& arch, const NoiseSchedule& schedule, int image_size,
                  const data::CaptionVocab& vocab, uint64_t init_seed);
    DenoiserModel(const DenoiserModel& other);
    DenoiserModel& operator=(const DenoiserModel& other);
    DenoiserModel(DenoiserModel&&) noexcept;
    DenoiserModel& operator=(DenoiserModel&&) noexcept;
    ~DenoiserModel();

    const ArchConfig& arch() const { return arch_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    int image_size() const { return image_size_; }
    uint64_t vocab_hash() const { return vocab_hash_; }
    int vocab_size() const { return vocab_size_; }

    bool frozen() const { return frozen_; }
    void set_frozen(bool f) { frozen_ = f; }

    nn::ParamBlock& params() { return params_; }
    const nn::ParamBlock& params() const { return params_; }
    uint64_t param_checksum() const { return params_.checksum(); }

    // Scratch space for one forward/backward; one per thread.
    struct Workspace {
        nn::Tensor x_in, h0, a1, a1s, a2, h1, dpre, ds, b1, b1s, b2, h2, u, upc, usum, c1, c1s, c2,
            h3, h3s, eps;
        std::vector<double> col_in, col_1a, col_1b, col_down, col_2a, col_2b, col_up, col_3a,
            col_3b, col_out, dcol;
        nn::Tensor d_h3s, d_h3, d_c1s, d_c1, d_usum, d_u, d_h2, d_b1s, d_b1, d_ds, d_dpre, d_h1,
            d_a1s, d_a1, d_h0, d_eps;
        std::vector<double> sinfeat, e_in, e_h_pre, e_h, e_out;
        std::vector<double> d_eout, d_eh, d_ehpre, d_ein;
    };
    std::unique_ptr<Workspace> make_workspace() const;

    // eps_hat = f_theta(x_t, t, cond). x_t is H x W x 3 (any real values).
    Image predict(const Image& x_t, int t, const std::vector<int>& cond, Workspace& ws) const;

    // Squared-error-vs-injected-noise loss for one sample at a fixed (t, z);
    // accumulates d(loss)/d(theta) into grad (size params().size()) when
    // grad is non-null. Exposed so gradient probes can drive it directly.
    double loss_and_grad(const Image& x0, const std::vector<int>& cond, int t, const Image& z,
                         Workspace& ws, std::vector<double>* grad) const;

    void save(const std::string& path) const;
    static DenoiserModel load(const std::string& path, const data::CaptionVocab& vocab);

private:
    ArchConfig arch_;
    NoiseSchedule schedule_;
    int image_size_;
    uint64_t vocab_hash_;
    int vocab_size_;
    bool frozen_ = false;
    nn::ParamBlock params_;

    // parameter offsets (see diffusion.cpp)
    struct Offsets;
    std::unique_ptr<Offsets> off_;
    void register_params();
    void forward_impl(const Image& x_t, int t, const std::vector<int>& cond, Workspace& ws) const;
};

// Noise-prediction training on the dataset's train split (all samples when no
// split is assigned). Deterministic in cfg.seed. Throws ContractError on a
// frozen model, TrainingError on divergence.
LossTrace train(DenoiserModel& model, const data::Dataset& ds, const TrainConfig& cfg);
LossTrace train_samples(DenoiserModel& model, const std::vector<const data::ImageSample*>& samples,
                        const TrainConfig& cfg);

// Ancestral sampling from unit Gaussian noise at t = T; output in [0,1].
Image sample(const DenoiserModel& model, const std::vector<int>& cond, const SamplerConfig& cfg);

// Same reverse chain entered at (x_start, t_start); the entry point is the
// nearest sampler grid step at or below t_start. t_start = 0 returns x_start.
Image denoise_from(const DenoiserModel& model, const Image& x_start, int t_start,
                   const std::vector<int>& cond, const SamplerConfig& cfg);

// Descending time grid used by the sampler (num_steps+1 values from T to 0).
std::vector<int> sampler_grid(int T, int num_steps);

}  // namespace coatbench::diffusion

#endif
