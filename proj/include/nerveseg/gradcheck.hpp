#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "nerveseg/autograd.hpp"

namespace nerveseg {

/// Builds a graph from the given input tensors and returns the scalar loss
/// id plus the ids of the leaves corresponding to `inputs`, in order.
using CheckBuilder = std::function<std::pair<VarId, std::vector<VarId>>(
    GraphT<double>&, const std::vector<TensorT<double>>&)>;

struct CheckOptions {
    double step = 1e-4;
    /// <= 0 sweeps every element; otherwise a deterministic strided
    /// subsample of at most this many elements per input tensor.
    int max_elements_per_input = -1;
    /// Skip swept elements whose +-h evaluations take different branches
    /// (maxpool argmax changes, prelu sign changes): the documented
    /// non-differentiable points.
    bool exclude_branch_crossings = true;
};

struct CheckReport {
    double max_rel_err = 0.0;
    long checked = 0;
    long skipped = 0;
};

/// Hash of every branch decision in the graph: prelu input signs and
/// maxpool argmax choices. Two evaluations with equal signatures lie on
/// the same smooth piece of the loss.
inline uint64_t branch_signature(const GraphT<double>& g) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 1099511628211ull;
    };
    for (const auto& nd : g.nodes()) {
        if (nd.op == Op::PRelu) {
            const auto& x = g.nodes()[nd.in[0]].value;
            for (double v : x.data) mix(v >= 0.0 ? 2u : 3u);
        } else if (nd.op == Op::MaxPool2d) {
            const auto& x = g.nodes()[nd.in[0]].value;
            for (int ni = 0; ni < x.n; ++ni)
                for (int ci = 0; ci < x.c; ++ci) {
                    const double* p = x.plane(ni, ci);
                    for (int i = 0; i + 1 < x.h; i += 2)
                        for (int j = 0; j + 1 < x.w; j += 2) {
                            const int offs[4] = {i * x.w + j, i * x.w + j + 1,
                                                 (i + 1) * x.w + j, (i + 1) * x.w + j + 1};
                            int arg = 0;
                            for (int t = 1; t < 4; ++t)
                                if (p[offs[t]] > p[offs[arg]]) arg = t;
                            mix(static_cast<uint64_t>(arg) + 5u);
                        }
                }
        }
    }
    return h;
}

/// Central-difference check of every swept input element against the
/// backward pass, in double precision. Relative error is
/// |fd - ad| / max(1e-8, |fd| + |ad|).
inline CheckReport finite_diff_check(const CheckBuilder& builder,
                                     std::vector<TensorT<double>> inputs,
                                     const CheckOptions& opt = {}) {
    std::vector<TensorT<double>> ad_grads;
    {
        GraphT<double> g;
        auto [loss, ids] = builder(g, inputs);
        g.backward(loss);
        ad_grads.reserve(ids.size());
        for (VarId id : ids) ad_grads.push_back(g.grad(id));
    }
    auto eval = [&builder, &opt](const std::vector<TensorT<double>>& in) {
        GraphT<double> g;
        auto [loss, ids] = builder(g, in);
        (void)ids;
        const double value = static_cast<double>(g.value(loss).data[0]);
        const uint64_t sig = opt.exclude_branch_crossings ? branch_signature(g) : 0;
        return std::make_pair(value, sig);
    };

    CheckReport rep;
    for (size_t t = 0; t < inputs.size(); ++t) {
        const size_t count = inputs[t].size();
        size_t stride = 1;
        if (opt.max_elements_per_input > 0 &&
            count > static_cast<size_t>(opt.max_elements_per_input))
            stride = (count + opt.max_elements_per_input - 1) /
                     static_cast<size_t>(opt.max_elements_per_input);
        for (size_t e = 0; e < count; e += stride) {
            const double orig = inputs[t].data[e];
            inputs[t].data[e] = orig + opt.step;
            const auto [lp, sig_p] = eval(inputs);
            inputs[t].data[e] = orig - opt.step;
            const auto [lm, sig_m] = eval(inputs);
            inputs[t].data[e] = orig;
            if (opt.exclude_branch_crossings && sig_p != sig_m) {
                rep.skipped++;
                continue;
            }
            const double fd = (lp - lm) / (2.0 * opt.step);
            const double ad = ad_grads[t].data[e];
            const double rel = std::abs(fd - ad) / std::max(1e-8, std::abs(fd) + std::abs(ad));
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
            rep.checked++;
        }
    }
    return rep;
}

}  // namespace nerveseg
