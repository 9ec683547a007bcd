#ifndef COATBENCH_NN_HPP
#define COATBENCH_NN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "coatbench/common.hpp"

// Minimal double-precision conv-net kernel set with explicit backward passes.
// Parameters live in one flat buffer so optimizers, checkpoints, checksums and
// finite-difference probes all see a single contiguous vector.

namespace coatbench::nn {

struct ParamBlock {
    struct Entry {
        std::string name;
        size_t offset = 0;
        size_t size = 0;
    };
    std::vector<Entry> entries;
    std::vector<double> w;

    size_t add(const std::string& name, size_t n) {
        size_t off = w.size();
        entries.push_back({name, off, n});
        w.resize(off + n, 0.0);
        return off;
    }
    double* at(size_t off) { return w.data() + off; }
    const double* at(size_t off) const { return w.data() + off; }
    size_t size() const { return w.size(); }

    uint64_t checksum() const { return fnv1a64(w.data(), w.size() * sizeof(double)); }
};

struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    void resize(int c_, int h_, int w_) {
        c = c_;
        h = h_;
        w = w_;
        v.assign(static_cast<size_t>(c_) * h_ * w_, 0.0);
    }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }
    double* data() { return v.data(); }
    const double* data() const { return v.data(); }
    size_t size() const { return v.size(); }
    size_t plane() const { return static_cast<size_t>(h) * w; }
};

struct ConvShape {
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
    int out_dim(int in) const { return (in + 2 * pad - k) / stride + 1; }
    size_t weight_count() const { return static_cast<size_t>(cout) * cin * k * k; }
};

// col layout: (cin*k*k) rows x (oh*ow) cols, row-major.
void im2col(const Tensor& x, const ConvShape& cs, std::vector<double>& col);
void col2im(const std::vector<double>& dcol, const ConvShape& cs, Tensor& dx);

// y = W * im2col(x) + b. col is a scratch buffer reused across calls.
void conv_forward(const double* W, const double* b, const Tensor& x, const ConvShape& cs,
                  std::vector<double>& col, Tensor& y);
// Accumulates dW/db (+=). dx may be null for the first layer; when given it is
// resized to (cs.cin, in_h, in_w). col must be the buffer produced by the
// matching forward call.
void conv_backward(const double* W, const std::vector<double>& col, const ConvShape& cs,
                   const Tensor& dy, int in_h, int in_w, double* dW, double* db, Tensor* dx,
                   std::vector<double>& dcol_scratch);

void silu_forward(const Tensor& x, Tensor& y);
void silu_backward(const Tensor& x, const Tensor& dy, Tensor& dx);
inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

void add_channel_bias(Tensor& x, const double* bias);  // bias[c] broadcast over h,w
// d_bias[c] += sum_{h,w} dy[c,h,w]
void channel_bias_grad(const Tensor& dy, double* d_bias);

void global_avg_pool(const Tensor& x, std::vector<double>& y);
void global_avg_pool_backward(const Tensor& x, const std::vector<double>& dy, Tensor& dx);

// y = W x + b with W row-major (out x in).
void linear_forward(const double* W, const double* b, const std::vector<double>& x, int in, int out,
                    std::vector<double>& y);
void linear_backward(const double* W, const std::vector<double>& x, const std::vector<double>& dy,
                     int in, int out, double* dW, double* db, std::vector<double>* dx);

void upsample2x_forward(const Tensor& x, Tensor& y);
void upsample2x_backward(const Tensor& dy, Tensor& dx);

// normal(0, scale * sqrt(2 / fan_in))
void init_he(double* w, size_t n, size_t fan_in, double scale, Rng& rng);
void init_normal(double* w, size_t n, double stddev, Rng& rng);

struct Adam {
    double lr = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<double> m, v;
    long t = 0;

    void step(std::vector<double>& w, const std::vector<double>& g);
};

// Single-file checkpoint: magic, one JSON header line (caller-supplied
// fields plus the parameter manifest), then raw little-endian doubles.
void save_params(const std::string& path, const std::string& header_json, const ParamBlock& p);
// Returns the header JSON line; fills `p` (entries must match the file).
std::string load_params(const std::string& path, ParamBlock& p);

}  // namespace coatbench::nn

#endif
