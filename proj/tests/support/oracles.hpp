#pragma once

// Deliberately naive reference implementations, kept independent of the
// engine's kernels so the two routes can disagree.

#include "nerveseg/tensor.hpp"

namespace oracle {

using nerveseg::Tensor;

inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad,
                           int dil) {
    const int k = w.h;
    const int ho = (x.h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    const int wo = (x.w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    Tensor out(x.n, w.n, ho, wo);
    for (int n = 0; n < x.n; ++n)
        for (int co = 0; co < w.n; ++co)
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    double acc = b.data[co];
                    for (int ci = 0; ci < x.c; ++ci)
                        for (int u = 0; u < k; ++u)
                            for (int v = 0; v < k; ++v) {
                                const int yi = i * stride + u * dil - pad;
                                const int xj = j * stride + v * dil - pad;
                                if (yi < 0 || yi >= x.h || xj < 0 || xj >= x.w) continue;
                                acc += static_cast<double>(x.at(n, ci, yi, xj)) *
                                       w.at(co, ci, u, v);
                            }
                    out.at(n, co, i, j) = static_cast<float>(acc);
                }
    return out;
}

// Scatter-add formulation: every input pixel stamps a weighted 2x2 kernel.
inline Tensor scatter_tconv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int cout = w.c;
    Tensor out(x.n, cout, 2 * x.h, 2 * x.w);
    for (int n = 0; n < x.n; ++n)
        for (int co = 0; co < cout; ++co)
            for (int i = 0; i < out.h; ++i)
                for (int j = 0; j < out.w; ++j) out.at(n, co, i, j) = b.data[co];
    for (int n = 0; n < x.n; ++n)
        for (int ci = 0; ci < x.c; ++ci)
            for (int i = 0; i < x.h; ++i)
                for (int j = 0; j < x.w; ++j)
                    for (int co = 0; co < cout; ++co)
                        for (int u = 0; u < 2; ++u)
                            for (int v = 0; v < 2; ++v)
                                out.at(n, co, 2 * i + u, 2 * j + v) +=
                                    x.at(n, ci, i, j) * w.at(ci, co, u, v);
    return out;
}

}  // namespace oracle
