#include "coatbench/nn.hpp"

#include <Eigen/Dense>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "coatbench/errors.hpp"

namespace coatbench::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void im2col(const Tensor& x, const ConvShape& cs, std::vector<double>& col) {
    const int oh = cs.out_dim(x.h), ow = cs.out_dim(x.w);
    const size_t ohow = static_cast<size_t>(oh) * ow;
    col.assign(static_cast<size_t>(cs.cin) * cs.k * cs.k * ohow, 0.0);
    for (int ci = 0; ci < cs.cin; ++ci) {
        const double* plane = x.data() + static_cast<size_t>(ci) * x.plane();
        for (int ky = 0; ky < cs.k; ++ky) {
            for (int kx = 0; kx < cs.k; ++kx) {
                double* crow = col.data() + ((static_cast<size_t>(ci) * cs.k + ky) * cs.k + kx) * ohow;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * cs.stride + ky - cs.pad;
                    if (iy < 0 || iy >= x.h) continue;
                    const double* src = plane + static_cast<size_t>(iy) * x.w;
                    double* dst = crow + static_cast<size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * cs.stride + kx - cs.pad;
                        if (ix >= 0 && ix < x.w) dst[ox] = src[ix];
                    }
                }
            }
        }
    }
}

void col2im(const std::vector<double>& dcol, const ConvShape& cs, Tensor& dx) {
    const int oh = cs.out_dim(dx.h), ow = cs.out_dim(dx.w);
    const size_t ohow = static_cast<size_t>(oh) * ow;
    dx.zero();
    for (int ci = 0; ci < cs.cin; ++ci) {
        double* plane = dx.data() + static_cast<size_t>(ci) * dx.plane();
        for (int ky = 0; ky < cs.k; ++ky) {
            for (int kx = 0; kx < cs.k; ++kx) {
                const double* crow =
                    dcol.data() + ((static_cast<size_t>(ci) * cs.k + ky) * cs.k + kx) * ohow;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * cs.stride + ky - cs.pad;
                    if (iy < 0 || iy >= dx.h) continue;
                    double* dst = plane + static_cast<size_t>(iy) * dx.w;
                    const double* src = crow + static_cast<size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * cs.stride + kx - cs.pad;
                        if (ix >= 0 && ix < dx.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

void conv_forward(const double* W, const double* b, const Tensor& x, const ConvShape& cs,
                  std::vector<double>& col, Tensor& y) {
    const int oh = cs.out_dim(x.h), ow = cs.out_dim(x.w);
    y.resize(cs.cout, oh, ow);
    im2col(x, cs, col);
    const int kk = cs.cin * cs.k * cs.k;
    const int ohow = oh * ow;
    CMapRM Wm(W, cs.cout, kk);
    CMapRM colm(col.data(), kk, ohow);
    MapRM ym(y.data(), cs.cout, ohow);
    ym.noalias() = Wm * colm;
    if (b)
        for (int co = 0; co < cs.cout; ++co) ym.row(co).array() += b[co];
}

void conv_backward(const double* W, const std::vector<double>& col, const ConvShape& cs,
                   const Tensor& dy, int in_h, int in_w, double* dW, double* db, Tensor* dx,
                   std::vector<double>& dcol_scratch) {
    const int kk = cs.cin * cs.k * cs.k;
    const int ohow = dy.h * dy.w;
    CMapRM dym(dy.data(), cs.cout, ohow);
    CMapRM colm(col.data(), kk, ohow);
    MapRM dWm(dW, cs.cout, kk);
    dWm.noalias() += dym * colm.transpose();
    if (db)
        for (int co = 0; co < cs.cout; ++co) db[co] += dym.row(co).sum();
    if (dx) {
        dcol_scratch.assign(static_cast<size_t>(kk) * ohow, 0.0);
        CMapRM Wm(W, cs.cout, kk);
        MapRM dcolm(dcol_scratch.data(), kk, ohow);
        dcolm.noalias() = Wm.transpose() * dym;
        dx->resize(cs.cin, in_h, in_w);
        col2im(dcol_scratch, cs, *dx);
    }
}

void silu_forward(const Tensor& x, Tensor& y) {
    y.resize(x.c, x.h, x.w);
    for (size_t i = 0; i < x.size(); ++i) y.v[i] = silu(x.v[i]);
}

void silu_backward(const Tensor& x, const Tensor& dy, Tensor& dx) {
    dx.resize(x.c, x.h, x.w);
    for (size_t i = 0; i < x.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x.v[i]));
        dx.v[i] = dy.v[i] * s * (1.0 + x.v[i] * (1.0 - s));
    }
}

void add_channel_bias(Tensor& x, const double* bias) {
    for (int c = 0; c < x.c; ++c) {
        double* p = x.data() + static_cast<size_t>(c) * x.plane();
        for (size_t i = 0; i < x.plane(); ++i) p[i] += bias[c];
    }
}

void channel_bias_grad(const Tensor& dy, double* d_bias) {
    for (int c = 0; c < dy.c; ++c) {
        const double* p = dy.data() + static_cast<size_t>(c) * dy.plane();
        double s = 0.0;
        for (size_t i = 0; i < dy.plane(); ++i) s += p[i];
        d_bias[c] += s;
    }
}

void global_avg_pool(const Tensor& x, std::vector<double>& y) {
    y.assign(x.c, 0.0);
    double inv = 1.0 / static_cast<double>(x.plane());
    for (int c = 0; c < x.c; ++c) {
        const double* p = x.data() + static_cast<size_t>(c) * x.plane();
        double s = 0.0;
        for (size_t i = 0; i < x.plane(); ++i) s += p[i];
        y[c] = s * inv;
    }
}

void global_avg_pool_backward(const Tensor& x, const std::vector<double>& dy, Tensor& dx) {
    dx.resize(x.c, x.h, x.w);
    double inv = 1.0 / static_cast<double>(x.plane());
    for (int c = 0; c < x.c; ++c) {
        double g = dy[c] * inv;
        double* p = dx.data() + static_cast<size_t>(c) * dx.plane();
        for (size_t i = 0; i < dx.plane(); ++i) p[i] = g;
    }
}

void linear_forward(const double* W, const double* b, const std::vector<double>& x, int in, int out,
                    std::vector<double>& y) {
    y.assign(out, 0.0);
    CMapRM Wm(W, out, in);
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), in);
    Eigen::Map<Eigen::VectorXd> yv(y.data(), out);
    yv.noalias() = Wm * xv;
    if (b)
        for (int i = 0; i < out; ++i) y[i] += b[i];
}

void linear_backward(const double* W, const std::vector<double>& x, const std::vector<double>& dy,
                     int in, int out, double* dW, double* db, std::vector<double>* dx) {
    CMapRM Wm(W, out, in);
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), in);
    Eigen::Map<const Eigen::VectorXd> dyv(dy.data(), out);
    MapRM dWm(dW, out, in);
    dWm.noalias() += dyv * xv.transpose();
    if (db)
        for (int i = 0; i < out; ++i) db[i] += dy[i];
    if (dx) {
        dx->assign(in, 0.0);
        Eigen::Map<Eigen::VectorXd> dxv(dx->data(), in);
        dxv.noalias() = Wm.transpose() * dyv;
    }
}

void upsample2x_forward(const Tensor& x, Tensor& y) {
    y.resize(x.c, x.h * 2, x.w * 2);
    for (int c = 0; c < x.c; ++c) {
        const double* xp = x.data() + static_cast<size_t>(c) * x.plane();
        double* yp = y.data() + static_cast<size_t>(c) * y.plane();
        for (int iy = 0; iy < x.h; ++iy)
            for (int ix = 0; ix < x.w; ++ix) {
                double v = xp[static_cast<size_t>(iy) * x.w + ix];
                size_t base = static_cast<size_t>(iy * 2) * y.w + ix * 2;
                yp[base] = v;
                yp[base + 1] = v;
                yp[base + y.w] = v;
                yp[base + y.w + 1] = v;
            }
    }
}

void upsample2x_backward(const Tensor& dy, Tensor& dx) {
    dx.resize(dy.c, dy.h / 2, dy.w / 2);
    for (int c = 0; c < dx.c; ++c) {
        const double* dyp = dy.data() + static_cast<size_t>(c) * dy.plane();
        double* dxp = dx.data() + static_cast<size_t>(c) * dx.plane();
        for (int iy = 0; iy < dx.h; ++iy)
            for (int ix = 0; ix < dx.w; ++ix) {
                size_t base = static_cast<size_t>(iy * 2) * dy.w + ix * 2;
                dxp[static_cast<size_t>(iy) * dx.w + ix] =
                    dyp[base] + dyp[base + 1] + dyp[base + dy.w] + dyp[base + dy.w + 1];
            }
    }
}

void init_he(double* w, size_t n, size_t fan_in, double scale, Rng& rng) {
    double stddev = scale * std::sqrt(2.0 / static_cast<double>(fan_in));
    for (size_t i = 0; i < n; ++i) w[i] = stddev * rng.normal();
}

void init_normal(double* w, size_t n, double stddev, Rng& rng) {
    for (size_t i = 0; i < n; ++i) w[i] = stddev * rng.normal();
}

void Adam::step(std::vector<double>& w, const std::vector<double>& g) {
    if (m.size() != w.size()) {
        m.assign(w.size(), 0.0);
        v.assign(w.size(), 0.0);
        t = 0;
    }
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        double mh = m[i] / bc1;
        double vh = v[i] / bc2;
        w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
}

static constexpr char kMagic[] = "CBCK1\n";

void save_params(const std::string& path, const std::string& header_json, const ParamBlock& p) {
    std::filesystem::path tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    out.write(kMagic, sizeof(kMagic) - 1);
    out << header_json << "\n";
    out.write(reinterpret_cast<const char*>(p.w.data()),
              static_cast<std::streamsize>(p.w.size() * sizeof(double)));
    out.close();
    if (!out) throw IoError("write failed: " + path);
    std::filesystem::rename(tmp, path);
}

std::string load_params(const std::string& path, ParamBlock& p) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[sizeof(kMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw IncompatibilityError("bad checkpoint magic in " + path);
    std::string header;
    if (!std::getline(in, header)) throw IncompatibilityError("missing checkpoint header in " + path);
    in.read(reinterpret_cast<char*>(p.w.data()),
            static_cast<std::streamsize>(p.w.size() * sizeof(double)));
    if (static_cast<size_t>(in.gcount()) != p.w.size() * sizeof(double))
        throw IncompatibilityError("checkpoint parameter payload truncated in " + path);
    return header;
}

}  // namespace coatbench::nn
