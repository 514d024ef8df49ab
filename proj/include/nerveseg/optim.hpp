#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nerveseg/tensor.hpp"

namespace nerveseg {

/// Raised when training produces non-finite values (NaN loss or gradients).
class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Adam with bias correction. Defaults follow the original publication
/// (beta1 0.9, beta2 0.999, eps 1e-8).
template <typename T>
struct AdamStateT {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::unordered_map<std::string, TensorT<T>> m, v;
};

using AdamState = AdamStateT<float>;

template <typename T>
AdamStateT<T> adam_init(const std::vector<std::string>& order,
                        const std::unordered_map<std::string, TensorT<T>>& params, double lr) {
    if (lr <= 0.0) throw std::invalid_argument("adam: lr must be > 0");
    AdamStateT<T> s;
    s.lr = lr;
    for (const auto& name : order) {
        const auto& p = params.at(name);
        s.m.emplace(name, TensorT<T>(p.n, p.c, p.h, p.w));
        s.v.emplace(name, TensorT<T>(p.n, p.c, p.h, p.w));
    }
    return s;
}

/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps). Rejects non-finite
/// gradients before touching any state.
template <typename T>
void adam_step(const std::vector<std::string>& order,
               std::unordered_map<std::string, TensorT<T>>& params,
               const std::unordered_map<std::string, TensorT<T>>& grads, AdamStateT<T>& s) {
    for (const auto& name : order) {
        const auto& g = grads.at(name);
        if (!g.same_shape(params.at(name)))
            throw std::invalid_argument("adam: grad dims mismatch for " + name);
        for (T v : g.data)
            if (!std::isfinite(static_cast<double>(v)))
                throw DivergenceError("adam: non-finite gradient in " + name);
    }
    s.t += 1;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
    for (const auto& name : order) {
        auto& p = params.at(name);
        const auto& g = grads.at(name);
        auto& m = s.m.at(name);
        auto& v = s.v.at(name);
        for (size_t i = 0; i < p.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]);
            const double mi = s.beta1 * static_cast<double>(m.data[i]) + (1.0 - s.beta1) * gi;
            const double vi = s.beta2 * static_cast<double>(v.data[i]) + (1.0 - s.beta2) * gi * gi;
            m.data[i] = static_cast<T>(mi);
            v.data[i] = static_cast<T>(vi);
            const double update = s.lr * (mi / c1) / (std::sqrt(vi / c2) + s.eps);
            p.data[i] = static_cast<T>(static_cast<double>(p.data[i]) - update);
        }
    }
}

}  // namespace nerveseg
