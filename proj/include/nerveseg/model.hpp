#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nerveseg/autograd.hpp"
#include "nerveseg/tensor.hpp"

namespace nerveseg {

enum class Arch { plain, dilated };
enum class UpsampleMode { transposed, bilinear };

inline const char* arch_name(Arch a) { return a == Arch::plain ? "unet" : "dilated"; }

struct ModelConfig {
    Arch arch = Arch::plain;
    int depth = 3;
    int convs_per_level = 2;
    int base_channels = 16;
    bool residual_blocks = true;
    bool deep_supervision = true;
    UpsampleMode upsample = UpsampleMode::transposed;
    std::vector<int> dilations = {2, 4};
    int input_h = 128, input_w = 128;

    void validate() const {
        if (depth < 1) throw std::invalid_argument("config: depth must be >= 1");
        if (convs_per_level < 1) throw std::invalid_argument("config: convs_per_level must be >= 1");
        if (base_channels < 1) throw std::invalid_argument("config: base_channels must be >= 1");
        const int div = 1 << depth;
        if (input_h < div || input_w < div || input_h % div != 0 || input_w % div != 0)
            throw std::invalid_argument("config: input extent must be divisible by 2^depth");
        int prev = 1;
        for (int d : dilations) {
            if (d < 2 || d <= prev)
                throw std::invalid_argument("config: dilations must be strictly increasing, each >= 2");
            prev = d;
        }
        if (arch == Arch::dilated && dilations.empty())
            throw std::invalid_argument("config: dilated arch needs a non-empty dilation list");
    }

    int level_channels(int level) const {  // level is 1-based; depth+1 = bottleneck
        return base_channels << (level - 1);
    }
};

/// Realized network: the config plus every named parameter tensor, in a
/// fixed creation order that checkpoints and the optimizer both follow.
template <typename T>
struct ModelT {
    ModelConfig config;
    std::vector<std::string> param_order;
    std::unordered_map<std::string, TensorT<T>> params;

    struct ForwardResult {
        VarId input = -1;
        VarId main_logits = -1;
        std::vector<VarId> aux_logits;                         // one per pool, outermost first
        std::vector<std::pair<std::string, VarId>> param_vars; // creation order
    };

    /// Runs the architecture on a [N,1,H,W] batch. With `trainable` the
    /// parameters become gradient-carrying leaves.
    ForwardResult forward(GraphT<T>& g, const TensorT<T>& batch, bool trainable = true,
                          bool input_requires_grad = false) const;
};

using Model = ModelT<float>;

struct RFRow {
    std::string layer;
    long long rf = 1;
    long long jump = 1;
    int out_h = 0, out_w = 0;
};

namespace detail {

inline std::string lvl(const std::string& base, int level) { return base + std::to_string(level); }

// Parameter shapes are defined once so the builder and the forward pass
// cannot drift apart.
template <typename T, typename Make>
void visit_params(const ModelConfig& cfg, Make&& make) {
    const int convs = cfg.convs_per_level;
    auto block = [&](const std::string& name, int cin, int cout) {
        int c = cin;
        for (int i = 1; i <= convs; ++i) {
            make(name + ".conv" + std::to_string(i) + ".w", cout, c, 3, 3, c * 9);
            make(name + ".conv" + std::to_string(i) + ".b", 1, cout, 1, 1, 0);
            make(name + ".conv" + std::to_string(i) + ".slope", 1, cout, 1, 1, -1);
            c = cout;
        }
        if (cfg.residual_blocks && cin != cout) {
            make(name + ".proj.w", cout, cin, 1, 1, cin);
            make(name + ".proj.b", 1, cout, 1, 1, 0);
        }
    };

    int c = 1;
    for (int level = 1; level <= cfg.depth; ++level) {
        const int cout = cfg.level_channels(level);
        block(lvl("down", level), c, cout);
        c = cout;
        if (cfg.deep_supervision) {
            make(lvl("aux", level) + ".head.w", 1, c, 1, 1, c);
            make(lvl("aux", level) + ".head.b", 1, 1, 1, 1, 0);
        }
    }
    const int cbot = cfg.level_channels(cfg.depth + 1);
    block("bottleneck", c, cbot);
    c = cbot;
    if (cfg.arch == Arch::dilated) {
        for (size_t i = 0; i < cfg.dilations.size(); ++i) {
            const std::string name = "bottleneck.dilated" + std::to_string(i + 1);
            make(name + ".w", c, c, 3, 3, c * 9);
            make(name + ".b", 1, c, 1, 1, 0);
            make(name + ".slope", 1, c, 1, 1, -1);
        }
    }
    for (int level = cfg.depth; level >= 1; --level) {
        const int skip_ch = cfg.level_channels(level);
        int merged;
        if (cfg.upsample == UpsampleMode::transposed) {
            make(lvl("up", level) + ".tconv.w", c, skip_ch, 2, 2, c);
            make(lvl("up", level) + ".tconv.b", 1, skip_ch, 1, 1, 0);
            merged = 2 * skip_ch;
        } else {
            merged = c + skip_ch;  // bilinear keeps the deep channel count
        }
        block(lvl("up", level), merged, skip_ch);
        c = skip_ch;
    }
    make("final.w", 1, c, 1, 1, c);
    make("final.b", 1, 1, 1, 1, 0);
}

}  // namespace detail

/// Creates parameters in traversal order. Conv/projection weights get
/// He-normal init with their true fan-in, biases start at zero, prelu
/// slopes at 0.25. Deterministic in (config, seed).
template <typename T>
ModelT<T> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelT<T> m;
    m.config = cfg;
    Rng rng(seed);
    detail::visit_params<T>(cfg, [&](const std::string& name, int n, int c, int h, int w, int fan_in) {
        TensorT<T> t;
        if (fan_in > 0)
            t = he_normal_init<T>(n, c, h, w, fan_in, rng);
        else if (fan_in == 0)
            t = TensorT<T>(n, c, h, w, T(0));       // bias
        else
            t = TensorT<T>(n, c, h, w, T(0.25));    // prelu slope
        m.param_order.push_back(name);
        m.params.emplace(name, std::move(t));
    });
    return m;
}

inline Model build_unet(ModelConfig cfg, uint64_t seed) {
    cfg.arch = Arch::plain;
    return build_model<float>(cfg, seed);
}

inline Model build_dilated_unet(ModelConfig cfg, uint64_t seed) {
    cfg.arch = Arch::dilated;
    return build_model<float>(cfg, seed);
}

template <typename T>
long long parameter_count(const ModelT<T>& m) {
    long long total = 0;
    for (const auto& name : m.param_order) total += static_cast<long long>(m.params.at(name).size());
    return total;
}

template <typename T>
typename ModelT<T>::ForwardResult ModelT<T>::forward(GraphT<T>& g, const TensorT<T>& batch,
                                                     bool trainable,
                                                     bool input_requires_grad) const {
    const ModelConfig& cfg = config;
    const int div = 1 << cfg.depth;
    if (batch.c != 1)
        throw std::invalid_argument("forward: expected a single input channel, got " +
                                    std::to_string(batch.c));
    if (batch.h % div != 0 || batch.w % div != 0 || batch.h < div || batch.w < div)
        throw std::invalid_argument("forward: input extent " + batch.shape_str() +
                                    " not divisible by 2^depth");

    ForwardResult res;
    std::unordered_map<std::string, VarId> vars;
    vars.reserve(param_order.size());
    for (const auto& name : param_order) {
        const VarId id = g.leaf(params.at(name), trainable);
        vars.emplace(name, id);
        res.param_vars.emplace_back(name, id);
    }
    auto pv = [&](const std::string& name) {
        auto it = vars.find(name);
        if (it == vars.end()) throw std::logic_error("forward: missing parameter " + name);
        return it->second;
    };

    res.input = g.leaf(batch, input_requires_grad);
    VarId x = res.input;

    auto block = [&](const std::string& name, VarId in) {
        VarId y = in;
        for (int i = 1; i <= cfg.convs_per_level; ++i) {
            const std::string cn = name + ".conv" + std::to_string(i);
            y = g.conv2d(y, pv(cn + ".w"), pv(cn + ".b"), 1, 1, 1);
            if (i == cfg.convs_per_level && cfg.residual_blocks) {
                VarId shortcut = in;
                if (vars.count(name + ".proj.w"))
                    shortcut = g.conv2d(in, pv(name + ".proj.w"), pv(name + ".proj.b"), 1, 0, 1);
                y = g.residual_add(y, shortcut);
            }
            y = g.prelu(y, pv(cn + ".slope"));
        }
        return y;
    };

    std::vector<VarId> skips;
    for (int level = 1; level <= cfg.depth; ++level) {
        x = block(detail::lvl("down", level), x);
        skips.push_back(x);
        x = g.maxpool2d(x);
        if (cfg.deep_supervision) {
            const std::string hn = detail::lvl("aux", level) + ".head";
            res.aux_logits.push_back(g.conv2d(x, pv(hn + ".w"), pv(hn + ".b"), 1, 0, 1));
        }
    }

    x = block("bottleneck", x);
    if (cfg.arch == Arch::dilated) {
        for (size_t i = 0; i < cfg.dilations.size(); ++i) {
            const int d = cfg.dilations[i];
            const std::string name = "bottleneck.dilated" + std::to_string(i + 1);
            x = g.conv2d(x, pv(name + ".w"), pv(name + ".b"), 1, d, d);
            x = g.prelu(x, pv(name + ".slope"));
        }
    }

    for (int level = cfg.depth; level >= 1; --level) {
        if (cfg.upsample == UpsampleMode::transposed) {
            const std::string tn = detail::lvl("up", level) + ".tconv";
            x = g.transposed_conv2d(x, pv(tn + ".w"), pv(tn + ".b"));
        } else {
            x = g.bilinear_upsample2d(x);
        }
        x = g.concat_channels(skips[level - 1], x);
        x = block(detail::lvl("up", level), x);
    }

    res.main_logits = g.conv2d(x, pv("final.w"), pv("final.b"), 1, 0, 1);
    return res;
}

/// Receptive field and jump of the shrinking path plus bottleneck,
/// via r' = r + (k-1)*d*j and j' = j*s. 1x1 heads do not change r and
/// are omitted.
inline std::vector<RFRow> receptive_field_table(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<RFRow> rows;
    RFRow cur{"input", 1, 1, cfg.input_h, cfg.input_w};
    rows.push_back(cur);
    auto conv = [&](const std::string& name, int dilation) {
        cur.layer = name;
        cur.rf += 2LL * dilation * cur.jump;  // (k-1)=2 for 3x3 kernels
        rows.push_back(cur);
    };
    for (int level = 1; level <= cfg.depth; ++level) {
        for (int i = 1; i <= cfg.convs_per_level; ++i)
            conv(detail::lvl("down", level) + ".conv" + std::to_string(i), 1);
        cur.layer = detail::lvl("down", level) + ".pool";
        cur.rf += cur.jump;  // (k-1)=1 for 2x2 pooling
        cur.jump *= 2;
        cur.out_h /= 2;
        cur.out_w /= 2;
        rows.push_back(cur);
    }
    for (int i = 1; i <= cfg.convs_per_level; ++i)
        conv("bottleneck.conv" + std::to_string(i), 1);
    if (cfg.arch == Arch::dilated)
        for (size_t i = 0; i < cfg.dilations.size(); ++i)
            conv("bottleneck.dilated" + std::to_string(i + 1), cfg.dilations[i]);
    return rows;
}

inline long long innermost_receptive_field(const ModelConfig& cfg) {
    return receptive_field_table(cfg).back().rf;
}

inline bool receptive_field_covers_input(const ModelConfig& cfg) {
    return innermost_receptive_field(cfg) >= std::max(cfg.input_h, cfg.input_w);
}

}  // namespace nerveseg
