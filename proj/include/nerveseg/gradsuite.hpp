#pragma once

#include <string>
#include <vector>

#include "nerveseg/gradcheck.hpp"
#include "nerveseg/model.hpp"
#include "nerveseg/trainer.hpp"

namespace nerveseg {

struct OpCheck {
    std::string name;
    double tolerance = 1e-5;
    double max_rel_err = 0.0;
    long checked = 0;
    long skipped = 0;
    bool pass = false;
};

namespace gradsuite_detail {

inline TensorT<double> random_tensor(int n, int c, int h, int w, Rng& rng, double lo, double hi) {
    TensorT<double> t(n, c, h, w);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

inline TensorT<double> random_binary(int n, int c, int h, int w, Rng& rng, double p_one) {
    TensorT<double> t(n, c, h, w);
    for (auto& v : t.data) v = rng.next_double() < p_one ? 1.0 : 0.0;
    return t;
}

/// Loss for non-scalar ops: a fixed random-weight reduction, so element
/// permutation mistakes cannot cancel.
inline CheckBuilder reduce_with(const TensorT<double>& weights,
                                std::function<VarId(GraphT<double>&, const std::vector<VarId>&)> make_op) {
    return [weights, make_op](GraphT<double>& g, const std::vector<TensorT<double>>& inputs)
               -> std::pair<VarId, std::vector<VarId>> {
        std::vector<VarId> ids;
        ids.reserve(inputs.size());
        for (const auto& t : inputs) ids.push_back(g.leaf(t, true));
        const VarId out = make_op(g, ids);
        return {g.weighted_sum(out, weights), ids};
    };
}

inline OpCheck run_case(const std::string& name, double tol, int seeds,
                        std::function<CheckReport(uint64_t)> one_seed) {
    OpCheck result;
    result.name = name;
    result.tolerance = tol;
    for (int s = 0; s < seeds; ++s) {
        const CheckReport rep = one_seed(0x9a0d5eedull + 1000ull * s);
        result.max_rel_err = std::max(result.max_rel_err, rep.max_rel_err);
        result.checked += rep.checked;
        result.skipped += rep.skipped;
    }
    result.pass = result.max_rel_err <= tol && result.checked > 0;
    return result;
}

}  // namespace gradsuite_detail

/// Finite-difference sweep (h = 1e-4, double mode, 5 seeds per case) over
/// every tape op plus a full dilated U-Net. Per-op tolerance 1e-5,
/// end-to-end 1e-4. Elements whose +-h interval crosses a maxpool argmax
/// change or a prelu sign change are excluded (non-differentiable points).
inline std::vector<OpCheck> run_gradient_suite() {
    using namespace gradsuite_detail;
    std::vector<OpCheck> results;
    const int kSeeds = 5;

    for (int dil : {1, 2, 4}) {
        results.push_back(run_case(
            "conv2d_d" + std::to_string(dil), 1e-5, kSeeds, [dil](uint64_t seed) {
                Rng rng(seed);
                auto x = random_tensor(2, 2, 8, 8, rng, -1, 1);
                auto w = random_tensor(3, 2, 3, 3, rng, -0.5, 0.5);
                auto b = random_tensor(1, 3, 1, 1, rng, -0.5, 0.5);
                auto r = random_tensor(2, 3, 8, 8, rng, -1, 1);
                auto builder = reduce_with(r, [dil](GraphT<double>& g, const std::vector<VarId>& in) {
                    return g.conv2d(in[0], in[1], in[2], 1, dil, dil);
                });
                return finite_diff_check(builder, {x, w, b});
            }));
    }
    results.push_back(run_case("conv2d_stride2", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto x = random_tensor(1, 2, 9, 9, rng, -1, 1);
        auto w = random_tensor(2, 2, 3, 3, rng, -0.5, 0.5);
        auto b = random_tensor(1, 2, 1, 1, rng, -0.5, 0.5);
        auto r = random_tensor(1, 2, 5, 5, rng, -1, 1);
        auto builder = reduce_with(r, [](GraphT<double>& g, const std::vector<VarId>& in) {
            return g.conv2d(in[0], in[1], in[2], 2, 1, 1);
        });
        return finite_diff_check(builder, {x, w, b});
    }));

    results.push_back(run_case("transposed_conv2d", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto x = random_tensor(1, 2, 4, 4, rng, -1, 1);
        auto w = random_tensor(2, 3, 2, 2, rng, -0.5, 0.5);
        auto b = random_tensor(1, 3, 1, 1, rng, -0.5, 0.5);
        auto r = random_tensor(1, 3, 8, 8, rng, -1, 1);
        auto builder = reduce_with(r, [](GraphT<double>& g, const std::vector<VarId>& in) {
            return g.transposed_conv2d(in[0], in[1], in[2]);
        });
        return finite_diff_check(builder, {x, w, b});
    }));

    results.push_back(run_case("maxpool2d", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto x = random_tensor(1, 2, 8, 8, rng, -1, 1);
        auto r = random_tensor(1, 2, 4, 4, rng, -1, 1);
        auto builder = reduce_with(r, [](GraphT<double>& g, const std::vector<VarId>& in) {
            return g.maxpool2d(in[0]);
        });
        return finite_diff_check(builder, {x});
    }));

    results.push_back(run_case("prelu", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto x = random_tensor(2, 3, 6, 6, rng, -1, 1);
        auto a = random_tensor(1, 3, 1, 1, rng, 0.05, 0.5);
        auto r = random_tensor(2, 3, 6, 6, rng, -1, 1);
        auto builder = reduce_with(r, [](GraphT<double>& g, const std::vector<VarId>& in) {
            return g.prelu(in[0], in[1]);
        });
        return finite_diff_check(builder, {x, a});
    }));

    results.push_back(run_case("sigmoid", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto x = random_tensor(1, 2, 6, 6, rng, -4, 4);
        auto r = random_tensor(1, 2, 6, 6, rng, -1, 1);
        auto builder = reduce_with(r, [](GraphT<double>& g, const std::vector<VarId>& in) {
            return g.sigmoid(in[0]);
        });
        return finite_diff_check(builder, {x});
    }));

    results.push_back(run_case("bilinear_upsample2d", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto x = random_tensor(1, 2, 5, 5, rng, -1, 1);
        auto r = random_tensor(1, 2, 10, 10, rng, -1, 1);
        auto builder = reduce_with(r, [](GraphT<double>& g, const std::vector<VarId>& in) {
            return g.bilinear_upsample2d(in[0]);
        });
        return finite_diff_check(builder, {x});
    }));

    results.push_back(run_case("concat_channels", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto a = random_tensor(1, 2, 5, 5, rng, -1, 1);
        auto b = random_tensor(1, 3, 5, 5, rng, -1, 1);
        auto r = random_tensor(1, 5, 5, 5, rng, -1, 1);
        auto builder = reduce_with(r, [](GraphT<double>& g, const std::vector<VarId>& in) {
            return g.concat_channels(in[0], in[1]);
        });
        return finite_diff_check(builder, {a, b});
    }));

    results.push_back(run_case("residual_add", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto a = random_tensor(2, 2, 4, 4, rng, -1, 1);
        auto b = random_tensor(2, 2, 4, 4, rng, -1, 1);
        auto r = random_tensor(2, 2, 4, 4, rng, -1, 1);
        auto builder = reduce_with(r, [](GraphT<double>& g, const std::vector<VarId>& in) {
            return g.residual_add(in[0], in[1]);
        });
        return finite_diff_check(builder, {a, b});
    }));

    results.push_back(run_case("bce_loss", 1e-5, kSeeds, [](uint64_t seed) {
        Rng rng(seed);
        auto z = random_tensor(1, 1, 6, 6, rng, -3, 3);
        auto y = random_binary(1, 1, 6, 6, rng, 0.4);
        auto builder = [y](GraphT<double>& g, const std::vector<TensorT<double>>& inputs)
            -> std::pair<VarId, std::vector<VarId>> {
            const VarId zi = g.leaf(inputs[0], true);
            return {g.bce_loss(zi, y), {zi}};
        };
        return finite_diff_check(builder, {z});
    }));

    results.push_back(run_case("dilated_unet_end_to_end", 1e-4, kSeeds, [](uint64_t seed) {
        ModelConfig cfg;
        cfg.arch = Arch::dilated;
        cfg.base_channels = 4;
        cfg.input_h = cfg.input_w = 16;

        Rng rng(seed);
        const auto model = build_model<double>(cfg, seed);
        auto image = random_tensor(1, 1, 16, 16, rng, 0, 1);
        BinaryMask mask(16, 16);
        for (auto& bit : mask.bits) bit = rng.next_double() < 0.3 ? 1 : 0;

        std::vector<TensorT<double>> inputs;
        inputs.push_back(image);
        for (const auto& name : model.param_order) inputs.push_back(model.params.at(name));

        auto builder = [&model, &mask](GraphT<double>& g, const std::vector<TensorT<double>>& in)
            -> std::pair<VarId, std::vector<VarId>> {
            ModelT<double> m = model;
            for (size_t p = 0; p < m.param_order.size(); ++p)
                m.params[m.param_order[p]] = in[p + 1];
            const auto res = m.forward(g, in[0], true, true);
            std::vector<VarId> ids{res.input};
            for (const auto& [name, id] : res.param_vars) ids.push_back(id);
            VarId loss =
                g.bce_loss(res.main_logits, downsample_mask_target(mask, 0).cast<double>());
            for (size_t a = 0; a < res.aux_logits.size(); ++a)
                loss = g.residual_add(
                    loss,
                    g.bce_loss(res.aux_logits[a],
                               downsample_mask_target(mask, static_cast<int>(a) + 1).cast<double>()));
            return {loss, ids};
        };

        CheckOptions opt;
        opt.max_elements_per_input = 16;  // strided subsample per tensor
        return finite_diff_check(builder, inputs, opt);
    }));

    return results;
}

}  // namespace nerveseg
