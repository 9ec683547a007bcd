#ifndef COATBENCH_BLOCKDCT_HPP
#define COATBENCH_BLOCKDCT_HPP

#include <cmath>

// Orthonormal 8x8 DCT-II / DCT-III pair used by the JPEG transform and the
// spread-spectrum coating. Direct matrix form; bit-reproducible everywhere.

namespace coatbench::dct8 {

struct Basis {
    double C[8][8];
    Basis() {
        for (int u = 0; u < 8; ++u) {
            double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int x = 0; x < 8; ++x) C[u][x] = cu * std::cos((2 * x + 1) * u * M_PI / 16.0);
        }
    }
};

inline const Basis& basis() {
    static const Basis b;
    return b;
}

// out = C * in * C^T (both 8x8 row-major, 64 doubles)
inline void forward(const double* in, double* out) {
    const auto& C = basis().C;
    double tmp[64];
    for (int u = 0; u < 8; ++u)
        for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int y = 0; y < 8; ++y) s += C[u][y] * in[y * 8 + x];
            tmp[u * 8 + x] = s;
        }
    for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int x = 0; x < 8; ++x) s += tmp[u * 8 + x] * C[v][x];
            out[u * 8 + v] = s;
        }
}

// out = C^T * in * C
inline void inverse(const double* in, double* out) {
    const auto& C = basis().C;
    double tmp[64];
    for (int y = 0; y < 8; ++y)
        for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int u = 0; u < 8; ++u) s += C[u][y] * in[u * 8 + v];
            tmp[y * 8 + v] = s;
        }
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int v = 0; v < 8; ++v) s += tmp[y * 8 + v] * C[v][x];
            out[y * 8 + x] = s;
        }
}

}  // namespace coatbench::dct8

#endif
