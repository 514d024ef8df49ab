#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "nerveseg/parallel.hpp"
#include "nerveseg/tensor.hpp"

namespace nerveseg {

using VarId = int;

enum class Op {
    Leaf,
    Conv2d,
    TConv2d,
    MaxPool2d,
    PRelu,
    Sigmoid,
    BilinearUp2d,
    ConcatCh,
    Add,
    BceLoss,
    Sum,
    WeightedSum,
};

struct ConvAttrs {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
};

/// Reverse-mode tape. Ops evaluate eagerly on insertion; backward walks
/// the nodes in reverse insertion order and sums gradients into every
/// node that requires them. Construction and backward are single-threaded
/// per graph; kernels may split work across threads internally (disjoint
/// outputs, so results do not depend on the thread count).
template <typename T>
class GraphT {
  public:
    struct Node {
        Op op = Op::Leaf;
        int in[3] = {-1, -1, -1};
        int n_in = 0;
        ConvAttrs attrs;
        TensorT<T> value;
        TensorT<T> grad;    // same dims as value once requires_grad
        TensorT<T> extra;   // bce target / weighted-sum weights
        bool requires_grad = false;
    };

    VarId leaf(TensorT<T> value, bool requires_grad) {
        Node node;
        node.op = Op::Leaf;
        node.requires_grad = requires_grad;
        node.value = std::move(value);
        return push(std::move(node));
    }

    /// Cross-correlation with square kernel, optional stride/padding/dilation.
    /// x: [N,Cin,H,W], w: [Cout,Cin,k,k], b: [1,Cout,1,1].
    VarId conv2d(VarId x, VarId w, VarId b, int stride = 1, int pad = 0, int dilation = 1) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        const auto& bv = value(b);
        if (wv.h != wv.w || wv.h < 1) throw std::invalid_argument("conv2d: kernel must be square");
        if (stride < 1 || dilation < 1 || pad < 0)
            throw std::invalid_argument("conv2d: bad stride/pad/dilation");
        if (xv.c != wv.c)
            throw std::invalid_argument("conv2d: Cin mismatch, x has " + std::to_string(xv.c) +
                                        " channels, w expects " + std::to_string(wv.c));
        if (bv.c != wv.n || bv.n != 1 || bv.h != 1 || bv.w != 1)
            throw std::invalid_argument("conv2d: bias shape must be (1,Cout,1,1)");
        const int k = wv.h;
        const int ho = (xv.h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
        const int wo = (xv.w + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
        if (xv.h + 2 * pad < dilation * (k - 1) + 1 || ho < 1 || wo < 1)
            throw std::invalid_argument("conv2d: non-positive output extent");

        Node node;
        node.op = Op::Conv2d;
        node.in[0] = x; node.in[1] = w; node.in[2] = b; node.n_in = 3;
        node.attrs = {stride, pad, dilation};
        node.value = conv_forward(xv, wv, bv, stride, pad, dilation, ho, wo);
        return push(std::move(node));
    }

    /// Learned x2 upsampling: stride 2, kernel 2x2, non-overlapping stamps.
    /// x: [N,Cin,H,W], w: [Cin,Cout,2,2], b: [1,Cout,1,1].
    VarId transposed_conv2d(VarId x, VarId w, VarId b) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        const auto& bv = value(b);
        if (wv.h != 2 || wv.w != 2) throw std::invalid_argument("transposed_conv2d: kernel must be 2x2");
        if (xv.c != wv.n)
            throw std::invalid_argument("transposed_conv2d: Cin mismatch, x has " +
                                        std::to_string(xv.c) + ", w expects " + std::to_string(wv.n));
        if (bv.c != wv.c || bv.n != 1 || bv.h != 1 || bv.w != 1)
            throw std::invalid_argument("transposed_conv2d: bias shape must be (1,Cout,1,1)");

        Node node;
        node.op = Op::TConv2d;
        node.in[0] = x; node.in[1] = w; node.in[2] = b; node.n_in = 3;
        node.value = tconv_forward(xv, wv, bv);
        return push(std::move(node));
    }

    /// 2x2 window, stride 2. Ties route the gradient to the first maximum
    /// in row-major window order.
    VarId maxpool2d(VarId x) {
        const auto& xv = value(x);
        if (xv.h % 2 != 0 || xv.w % 2 != 0)
            throw std::invalid_argument("maxpool2d: H and W must be even, got " + xv.shape_str());
        Node node;
        node.op = Op::MaxPool2d;
        node.in[0] = x; node.n_in = 1;
        TensorT<T> out(xv.n, xv.c, xv.h / 2, xv.w / 2);
        for (int ni = 0; ni < xv.n; ++ni)
            for (int ci = 0; ci < xv.c; ++ci) {
                const T* src = xv.plane(ni, ci);
                T* dst = out.plane(ni, ci);
                for (int i = 0; i < out.h; ++i)
                    for (int j = 0; j < out.w; ++j) {
                        const T* p = src + 2 * i * xv.w + 2 * j;
                        T best = p[0];
                        if (p[1] > best) best = p[1];
                        if (p[xv.w] > best) best = p[xv.w];
                        if (p[xv.w + 1] > best) best = p[xv.w + 1];
                        dst[i * out.w + j] = best;
                    }
            }
        node.value = std::move(out);
        return push(std::move(node));
    }

    /// slope: [1,C,1,1], one learned negative-side slope per channel.
    VarId prelu(VarId x, VarId slope) {
        const auto& xv = value(x);
        const auto& av = value(slope);
        if (av.c != xv.c || av.n != 1 || av.h != 1 || av.w != 1)
            throw std::invalid_argument("prelu: slope shape must be (1,C,1,1) matching x channels");
        Node node;
        node.op = Op::PRelu;
        node.in[0] = x; node.in[1] = slope; node.n_in = 2;
        TensorT<T> out(xv.n, xv.c, xv.h, xv.w);
        for (int ni = 0; ni < xv.n; ++ni)
            for (int ci = 0; ci < xv.c; ++ci) {
                const T a = av.data[ci];
                const T* src = xv.plane(ni, ci);
                T* dst = out.plane(ni, ci);
                const int m = xv.h * xv.w;
                for (int i = 0; i < m; ++i) dst[i] = src[i] >= T(0) ? src[i] : a * src[i];
            }
        node.value = std::move(out);
        return push(std::move(node));
    }

    VarId sigmoid(VarId x) {
        const auto& xv = value(x);
        Node node;
        node.op = Op::Sigmoid;
        node.in[0] = x; node.n_in = 1;
        TensorT<T> out(xv.n, xv.c, xv.h, xv.w);
        for (size_t i = 0; i < xv.size(); ++i) out.data[i] = sigmoid_scalar(xv.data[i]);
        node.value = std::move(out);
        return push(std::move(node));
    }

    /// Factor-2 bilinear upsampling with half-pixel-center alignment and
    /// edge clamping: output (i,j) samples input at ((i+.5)/2-.5, (j+.5)/2-.5).
    VarId bilinear_upsample2d(VarId x) {
        const auto& xv = value(x);
        Node node;
        node.op = Op::BilinearUp2d;
        node.in[0] = x; node.n_in = 1;
        node.value = bilinear_forward(xv);
        return push(std::move(node));
    }

    /// [N,Ca,H,W] + [N,Cb,H,W] -> [N,Ca+Cb,H,W], a's channels first.
    VarId concat_channels(VarId a, VarId b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        if (av.n != bv.n || av.h != bv.h || av.w != bv.w)
            throw std::invalid_argument("concat_channels: batch/spatial mismatch " + av.shape_str() +
                                        " vs " + bv.shape_str());
        Node node;
        node.op = Op::ConcatCh;
        node.in[0] = a; node.in[1] = b; node.n_in = 2;
        TensorT<T> out(av.n, av.c + bv.c, av.h, av.w);
        const size_t plane = static_cast<size_t>(av.h) * av.w;
        for (int ni = 0; ni < av.n; ++ni) {
            for (int ci = 0; ci < av.c; ++ci)
                std::copy_n(av.plane(ni, ci), plane, out.plane(ni, ci));
            for (int ci = 0; ci < bv.c; ++ci)
                std::copy_n(bv.plane(ni, ci), plane, out.plane(ni, av.c + ci));
        }
        node.value = std::move(out);
        return push(std::move(node));
    }

    VarId residual_add(VarId a, VarId b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        if (!av.same_shape(bv))
            throw std::invalid_argument("residual_add: dims mismatch " + av.shape_str() + " vs " +
                                        bv.shape_str());
        Node node;
        node.op = Op::Add;
        node.in[0] = a; node.in[1] = b; node.n_in = 2;
        TensorT<T> out(av.n, av.c, av.h, av.w);
        for (size_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
        node.value = std::move(out);
        return push(std::move(node));
    }

    /// Mean binary cross-entropy from logits, computed in the stable form
    /// max(z,0) - z*y + log(1+exp(-|z|)). Target values must be exactly 0 or 1.
    VarId bce_loss(VarId logits, TensorT<T> target) {
        const auto& zv = value(logits);
        if (!zv.same_shape(target))
            throw std::invalid_argument("bce_loss: target dims mismatch");
        for (T y : target.data)
            if (y != T(0) && y != T(1))
                throw std::invalid_argument("bce_loss: target values must be exactly 0 or 1");
        if (zv.size() == 0) throw std::invalid_argument("bce_loss: empty tensor");
        double acc = 0.0;
        for (size_t i = 0; i < zv.size(); ++i) {
            const double z = static_cast<double>(zv.data[i]);
            const double y = static_cast<double>(target.data[i]);
            acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        }
        Node node;
        node.op = Op::BceLoss;
        node.in[0] = logits; node.n_in = 1;
        node.extra = std::move(target);
        node.value = TensorT<T>(1, 1, 1, 1, static_cast<T>(acc / static_cast<double>(zv.size())));
        return push(std::move(node));
    }

    /// Sum of all elements, as a scalar node.
    VarId sum(VarId x) {
        const auto& xv = value(x);
        double acc = 0.0;
        for (T v : xv.data) acc += static_cast<double>(v);
        Node node;
        node.op = Op::Sum;
        node.in[0] = x; node.n_in = 1;
        node.value = TensorT<T>(1, 1, 1, 1, static_cast<T>(acc));
        return push(std::move(node));
    }

    /// Fixed-weight reduction to a scalar; the workhorse of gradient checks
    /// on ops whose output is not already scalar.
    VarId weighted_sum(VarId x, TensorT<T> weights) {
        const auto& xv = value(x);
        if (!xv.same_shape(weights)) throw std::invalid_argument("weighted_sum: dims mismatch");
        double acc = 0.0;
        for (size_t i = 0; i < xv.size(); ++i)
            acc += static_cast<double>(xv.data[i]) * static_cast<double>(weights.data[i]);
        Node node;
        node.op = Op::WeightedSum;
        node.in[0] = x; node.n_in = 1;
        node.extra = std::move(weights);
        node.value = TensorT<T>(1, 1, 1, 1, static_cast<T>(acc));
        return push(std::move(node));
    }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node
    /// reachable from `loss` that requires them.
    void backward(VarId loss) {
        auto& ln = node(loss);
        if (ln.value.n != 1 || ln.value.c != 1 || ln.value.h != 1 || ln.value.w != 1)
            throw std::invalid_argument("backward: loss must be scalar (1,1,1,1)");
        std::vector<char> reachable(nodes_.size(), 0);
        std::vector<int> stack{loss};
        reachable[loss] = 1;
        while (!stack.empty()) {
            const int id = stack.back();
            stack.pop_back();
            const Node& nd = nodes_[id];
            for (int i = 0; i < nd.n_in; ++i)
                if (!reachable[nd.in[i]]) {
                    reachable[nd.in[i]] = 1;
                    stack.push_back(nd.in[i]);
                }
        }
        ensure_grad(loss);
        ln.grad.data[0] += T(1);
        for (int id = loss; id >= 0; --id) {
            if (!reachable[id]) continue;
            Node& nd = nodes_[id];
            if (!nd.requires_grad || nd.op == Op::Leaf) continue;
            backward_node(nd);
        }
    }

    void zero_grad() {
        for (auto& nd : nodes_)
            if (nd.requires_grad) std::fill(nd.grad.data.begin(), nd.grad.data.end(), T(0));
    }

    const TensorT<T>& value(VarId id) const { return nodes_.at(id).value; }
    const TensorT<T>& grad(VarId id) const {
        const Node& nd = nodes_.at(id);
        if (!nd.requires_grad) throw std::logic_error("grad: node does not require gradients");
        return nd.grad;
    }
    size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

  private:
    std::vector<Node> nodes_;

    Node& node(VarId id) { return nodes_.at(id); }

    VarId push(Node node) {
        for (int i = 0; i < node.n_in; ++i)
            if (node.in[i] < 0 || node.in[i] >= static_cast<int>(nodes_.size()))
                throw std::logic_error("graph: input id out of range");
        if (node.op != Op::Leaf) {
            for (int i = 0; i < node.n_in; ++i)
                node.requires_grad = node.requires_grad || nodes_[node.in[i]].requires_grad;
        }
        if (node.requires_grad)
            node.grad = TensorT<T>(node.value.n, node.value.c, node.value.h, node.value.w);
        nodes_.push_back(std::move(node));
        return static_cast<VarId>(nodes_.size() - 1);
    }

    void ensure_grad(VarId id) {
        Node& nd = nodes_[id];
        if (!nd.requires_grad) {
            nd.requires_grad = true;
            nd.grad = TensorT<T>(nd.value.n, nd.value.c, nd.value.h, nd.value.w);
        }
    }

    static T sigmoid_scalar(T x) {
        T out;
        if (x >= T(0)) {
            const T t = std::exp(-x);
            out = T(1) / (T(1) + t);
        } else {
            const T t = std::exp(x);
            out = t / (T(1) + t);
        }
        // The mathematical sigmoid never reaches 0 or 1; keep the floating
        // result inside the open interval too.
        const T high = T(1) - std::numeric_limits<T>::epsilon() / T(2);
        return std::clamp(out, std::numeric_limits<T>::min(), high);
    }

    // ---- conv2d kernels -------------------------------------------------

    // The k=3/stride-1 layers carry nearly all the arithmetic, so they get
    // a fused nine-tap plane kernel (weights stay in registers across all
    // rows); 1x1 layers get a channel-blocked pass. Everything else runs
    // the generic tap-by-tap loop.
    static void conv_plane_3x3(T* outp, int out_stride, const T* xpp, int x_stride, const T* wp,
                               int dil, int ho, int wo) {
        const T w0 = wp[0], w1 = wp[1], w2 = wp[2];
        const T w3 = wp[3], w4 = wp[4], w5 = wp[5];
        const T w6 = wp[6], w7 = wp[7], w8 = wp[8];
        const int d = dil, d2 = 2 * dil;
        int i = 0;
        if (dil == 1) {
            // Adjacent output rows share two of their three input rows.
            for (; i + 2 <= ho; i += 2) {
                T* o0 = outp + i * out_stride;
                T* o1 = o0 + out_stride;
                const T* r0 = xpp + i * x_stride;
                const T* r1 = r0 + x_stride;
                const T* r2 = r1 + x_stride;
                const T* r3 = r2 + x_stride;
                #pragma omp simd
                for (int j = 0; j < wo; ++j) {
                    const T b0 = r1[j], b1 = r1[j + 1], b2 = r1[j + 2];
                    const T c0 = r2[j], c1 = r2[j + 1], c2 = r2[j + 2];
                    o0[j] += w0 * r0[j] + w1 * r0[j + 1] + w2 * r0[j + 2] + w3 * b0 + w4 * b1 +
                             w5 * b2 + w6 * c0 + w7 * c1 + w8 * c2;
                    o1[j] += w0 * b0 + w1 * b1 + w2 * b2 + w3 * c0 + w4 * c1 + w5 * c2 +
                             w6 * r3[j] + w7 * r3[j + 1] + w8 * r3[j + 2];
                }
            }
        }
        for (; i < ho; ++i) {
            T* o0 = outp + i * out_stride;
            const T* r0 = xpp + i * x_stride;
            const T* r1 = r0 + dil * x_stride;
            const T* r2 = r1 + dil * x_stride;
            #pragma omp simd
            for (int j = 0; j < wo; ++j)
                o0[j] += w0 * r0[j] + w1 * r0[j + d] + w2 * r0[j + d2] + w3 * r1[j] +
                         w4 * r1[j + d] + w5 * r1[j + d2] + w6 * r2[j] + w7 * r2[j + d] +
                         w8 * r2[j + d2];
        }
    }

    static TensorT<T> conv_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                                   int stride, int pad, int dil, int ho, int wo) {
        TensorT<T> padded;
        if (pad > 0) padded = pad2d(x, pad);
        const TensorT<T>& xp = pad > 0 ? padded : x;
        const int k = w.h;
        const int cin = x.c, cout = w.n;
        TensorT<T> out(x.n, cout, ho, wo);
        parallel_for(static_cast<int64_t>(x.n) * cout, [&](int64_t lo, int64_t hi) {
            for (int64_t idx = lo; idx < hi; ++idx) {
                const int ni = static_cast<int>(idx / cout);
                const int co = static_cast<int>(idx % cout);
                T* outp = out.plane(ni, co);
                const T bias = b.data[co];
                for (int i = 0; i < ho * wo; ++i) outp[i] = bias;
                if (k == 3 && stride == 1) {
                    for (int ci = 0; ci < cin; ++ci)
                        conv_plane_3x3(outp, wo, xp.plane(ni, ci), xp.w, w.plane(co, ci), dil, ho,
                                       wo);
                } else if (k == 1 && stride == 1 && pad == 0) {
                    int ci = 0;
                    for (; ci + 4 <= cin; ci += 4) {
                        const T* x0 = xp.plane(ni, ci);
                        const T* x1 = xp.plane(ni, ci + 1);
                        const T* x2 = xp.plane(ni, ci + 2);
                        const T* x3 = xp.plane(ni, ci + 3);
                        const T w0 = w.plane(co, ci)[0], w1 = w.plane(co, ci + 1)[0];
                        const T w2 = w.plane(co, ci + 2)[0], w3 = w.plane(co, ci + 3)[0];
                        #pragma omp simd
                        for (int i = 0; i < ho * wo; ++i)
                            outp[i] += w0 * x0[i] + w1 * x1[i] + w2 * x2[i] + w3 * x3[i];
                    }
                    for (; ci < cin; ++ci) {
                        const T* x0 = xp.plane(ni, ci);
                        const T wv = w.plane(co, ci)[0];
                        #pragma omp simd
                        for (int i = 0; i < ho * wo; ++i) outp[i] += wv * x0[i];
                    }
                } else {
                    for (int ci = 0; ci < cin; ++ci) {
                        const T* xpp = xp.plane(ni, ci);
                        const T* wp = w.plane(co, ci);
                        for (int i = 0; i < ho; ++i) {
                            T* orow = outp + i * wo;
                            for (int u = 0; u < k; ++u) {
                                const T* xbase = xpp + (i * stride + u * dil) * xp.w;
                                for (int v = 0; v < k; ++v) {
                                    const T wv = wp[u * k + v];
                                    const T* xrow = xbase + v * dil;
                                    for (int j = 0; j < wo; ++j) orow[j] += wv * xrow[j * stride];
                                }
                            }
                        }
                    }
                }
            }
        });
        return out;
    }

    void conv_backward(Node& nd) {
        Node& xn = nodes_[nd.in[0]];
        Node& wn = nodes_[nd.in[1]];
        Node& bn = nodes_[nd.in[2]];
        const TensorT<T>& g = nd.grad;
        const TensorT<T>& x = xn.value;
        const TensorT<T>& w = wn.value;
        const int stride = nd.attrs.stride, pad = nd.attrs.pad, dil = nd.attrs.dilation;
        const int k = w.h, cin = x.c, cout = w.n, ho = g.h, wo = g.w;

        if (bn.requires_grad) {
            for (int co = 0; co < cout; ++co) {
                double acc = 0.0;
                for (int ni = 0; ni < g.n; ++ni) {
                    const T* gp = g.plane(ni, co);
                    #pragma omp simd reduction(+ : acc)
                    for (int i = 0; i < ho * wo; ++i) acc += static_cast<double>(gp[i]);
                }
                bn.grad.data[co] += static_cast<T>(acc);
            }
        }

        TensorT<T> padded;
        if (pad > 0 && wn.requires_grad) padded = pad2d(x, pad);
        const TensorT<T>& xp = pad > 0 ? padded : x;

        if (k == 1 && stride == 1 && pad == 0) {
            conv1x1_backward(nd, xn, wn, g, x);
            return;
        }

        if (wn.requires_grad) {
            TensorT<T>& gw = wn.grad;
            parallel_for(cout, [&](int64_t lo, int64_t hi) {
                std::vector<T> acc(static_cast<size_t>(k) * k);
                // Tap-wise partial sums live in L1 row buffers; one final
                // reduction per channel pair instead of one per row.
                std::vector<T> buf(static_cast<size_t>(9) * wo);
                for (int co = static_cast<int>(lo); co < static_cast<int>(hi); ++co)
                    for (int ci = 0; ci < cin; ++ci) {
                        std::fill(acc.begin(), acc.end(), T(0));
                        if (k == 3 && stride == 1) {
                            std::fill(buf.begin(), buf.end(), T(0));
                            T* t0 = buf.data();
                            T* t1 = t0 + wo; T* t2 = t1 + wo; T* t3 = t2 + wo;
                            T* t4 = t3 + wo; T* t5 = t4 + wo; T* t6 = t5 + wo;
                            T* t7 = t6 + wo; T* t8 = t7 + wo;
                            const int d = dil, d2 = 2 * dil;
                            for (int ni = 0; ni < g.n; ++ni) {
                                const T* gp = g.plane(ni, co);
                                const T* xpp = xp.plane(ni, ci);
                                for (int i = 0; i < ho; ++i) {
                                    const T* grow = gp + i * wo;
                                    const T* r0 = xpp + i * xp.w;
                                    const T* r1 = xpp + (i + dil) * xp.w;
                                    const T* r2 = xpp + (i + 2 * dil) * xp.w;
                                    #pragma omp simd
                                    for (int j = 0; j < wo; ++j) {
                                        const T gv = grow[j];
                                        t0[j] += gv * r0[j];
                                        t1[j] += gv * r0[j + d];
                                        t2[j] += gv * r0[j + d2];
                                        t3[j] += gv * r1[j];
                                        t4[j] += gv * r1[j + d];
                                        t5[j] += gv * r1[j + d2];
                                        t6[j] += gv * r2[j];
                                        t7[j] += gv * r2[j + d];
                                        t8[j] += gv * r2[j + d2];
                                    }
                                }
                            }
                            for (int t = 0; t < 9; ++t) {
                                T sum = T(0);
                                #pragma omp simd reduction(+ : sum)
                                for (int j = 0; j < wo; ++j) sum += buf[t * wo + j];
                                acc[t] = sum;
                            }
                        } else {
                            for (int ni = 0; ni < g.n; ++ni) {
                                const T* gp = g.plane(ni, co);
                                const T* xpp = xp.plane(ni, ci);
                                for (int i = 0; i < ho; ++i) {
                                    const T* grow = gp + i * wo;
                                    for (int u = 0; u < k; ++u) {
                                        const T* xbase = xpp + (i * stride + u * dil) * xp.w;
                                        for (int v = 0; v < k; ++v) {
                                            const T* xrow = xbase + v * dil;
                                            T sum = T(0);
                                            if (stride == 1) {
                                                #pragma omp simd reduction(+ : sum)
                                                for (int j = 0; j < wo; ++j) sum += grow[j] * xrow[j];
                                            } else {
                                                for (int j = 0; j < wo; ++j)
                                                    sum += grow[j] * xrow[j * stride];
                                            }
                                            acc[u * k + v] += sum;
                                        }
                                    }
                                }
                            }
                        }
                        T* gwp = gw.plane(co, ci);
                        for (int t = 0; t < k * k; ++t) gwp[t] += acc[t];
                    }
            });
        }

        if (xn.requires_grad) {
            if (k == 3 && stride == 1) {
                // d(loss)/dx is itself a 3x3 convolution: the output grad
                // padded by 2*dil, correlated with the flipped kernel. The
                // interior of the padded result is exactly x's gradient, so
                // emit it in place with the input pointer offset by `pad`.
                const TensorT<T> gz = pad2d(g, 2 * dil);
                parallel_for(static_cast<int64_t>(x.n) * cin, [&](int64_t lo, int64_t hi) {
                    for (int64_t idx = lo; idx < hi; ++idx) {
                        const int ni = static_cast<int>(idx / cin);
                        const int ci = static_cast<int>(idx % cin);
                        T* gxpp = xn.grad.plane(ni, ci);
                        for (int co = 0; co < cout; ++co) {
                            const T* wp = w.plane(co, ci);
                            T wf[9];
                            for (int t = 0; t < 9; ++t) wf[t] = wp[8 - t];
                            conv_plane_3x3(gxpp, x.w, gz.plane(ni, co) + pad * gz.w + pad, gz.w,
                                           wf, dil, x.h, x.w);
                        }
                    }
                });
            } else {
                // Scatter into a padded buffer, crop-add at the end.
                TensorT<T> gxp_local;
                if (pad > 0) gxp_local = TensorT<T>(x.n, cin, x.h + 2 * pad, x.w + 2 * pad);
                TensorT<T>& gxp = pad > 0 ? gxp_local : xn.grad;
                parallel_for(static_cast<int64_t>(x.n) * cin, [&](int64_t lo, int64_t hi) {
                    for (int64_t idx = lo; idx < hi; ++idx) {
                        const int ni = static_cast<int>(idx / cin);
                        const int ci = static_cast<int>(idx % cin);
                        T* gxpp = gxp.plane(ni, ci);
                        for (int i = 0; i < ho; ++i) {
                            for (int co = 0; co < cout; ++co) {
                                const T* grow = g.plane(ni, co) + i * wo;
                                const T* wp = w.plane(co, ci);
                                for (int u = 0; u < k; ++u) {
                                    T* xbase = gxpp + (i * stride + u * dil) * gxp.w;
                                    for (int v = 0; v < k; ++v) {
                                        const T wv = wp[u * k + v];
                                        T* xrow = xbase + v * dil;
                                        for (int j = 0; j < wo; ++j)
                                            xrow[j * stride] += wv * grow[j];
                                    }
                                }
                            }
                        }
                    }
                });
                if (pad > 0) {
                    TensorT<T>& gx = xn.grad;
                    for (int ni = 0; ni < x.n; ++ni)
                        for (int ci = 0; ci < cin; ++ci) {
                            const T* src = gxp.plane(ni, ci);
                            T* dst = gx.plane(ni, ci);
                            for (int i = 0; i < x.h; ++i) {
                                const T* srow = src + (i + pad) * gxp.w + pad;
                                T* drow = dst + i * x.w;
                                #pragma omp simd
                                for (int j = 0; j < x.w; ++j) drow[j] += srow[j];
                            }
                        }
                }
            }
        }
    }

    void conv1x1_backward(Node& nd, Node& xn, Node& wn, const TensorT<T>& g, const TensorT<T>& x) {
        (void)nd;
        const int cin = x.c, cout = g.c;
        const int hw = x.h * x.w;
        if (wn.requires_grad) {
            parallel_for(cout, [&](int64_t lo, int64_t hi) {
                for (int co = static_cast<int>(lo); co < static_cast<int>(hi); ++co)
                    for (int ci = 0; ci < cin; ++ci) {
                        T acc = T(0);
                        for (int ni = 0; ni < x.n; ++ni) {
                            const T* gp = g.plane(ni, co);
                            const T* xpp = x.plane(ni, ci);
                            #pragma omp simd reduction(+ : acc)
                            for (int i = 0; i < hw; ++i) acc += gp[i] * xpp[i];
                        }
                        wn.grad.plane(co, ci)[0] += acc;
                    }
            });
        }
        if (xn.requires_grad) {
            parallel_for(static_cast<int64_t>(x.n) * cin, [&](int64_t lo, int64_t hi) {
                for (int64_t idx = lo; idx < hi; ++idx) {
                    const int ni = static_cast<int>(idx / cin);
                    const int ci = static_cast<int>(idx % cin);
                    T* gxp = xn.grad.plane(ni, ci);
                    int co = 0;
                    for (; co + 4 <= cout; co += 4) {
                        const T w0 = w_at(wn, co, ci), w1 = w_at(wn, co + 1, ci);
                        const T w2 = w_at(wn, co + 2, ci), w3 = w_at(wn, co + 3, ci);
                        const T* g0 = g.plane(ni, co);
                        const T* g1 = g.plane(ni, co + 1);
                        const T* g2 = g.plane(ni, co + 2);
                        const T* g3 = g.plane(ni, co + 3);
                        #pragma omp simd
                        for (int i = 0; i < hw; ++i)
                            gxp[i] += w0 * g0[i] + w1 * g1[i] + w2 * g2[i] + w3 * g3[i];
                    }
                    for (; co < cout; ++co) {
                        const T wv = w_at(wn, co, ci);
                        const T* gp = g.plane(ni, co);
                        #pragma omp simd
                        for (int i = 0; i < hw; ++i) gxp[i] += wv * gp[i];
                    }
                }
            });
        }
    }

    static T w_at(const Node& wn, int co, int ci) { return wn.value.plane(co, ci)[0]; }

    // ---- transposed conv kernels ----------------------------------------

    // Stride-2 2x2 stamps never overlap, so the output splits into four
    // sub-grids, each a plain channel reduction over x.
    static TensorT<T> tconv_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
        const int cin = x.c, cout = w.c;
        const int hw = x.h * x.w;
        TensorT<T> out(x.n, cout, 2 * x.h, 2 * x.w);
        parallel_for(static_cast<int64_t>(x.n) * cout, [&](int64_t lo, int64_t hi) {
            std::vector<T> tmp(static_cast<size_t>(4) * hw);
            for (int64_t idx = lo; idx < hi; ++idx) {
                const int ni = static_cast<int>(idx / cout);
                const int co = static_cast<int>(idx % cout);
                std::fill(tmp.begin(), tmp.end(), T(0));
                for (int t = 0; t < 4; ++t) {
                    T* tp = tmp.data() + static_cast<size_t>(t) * hw;
                    int ci = 0;
                    for (; ci + 4 <= cin; ci += 4) {
                        const T w0 = w.plane(ci, co)[t], w1 = w.plane(ci + 1, co)[t];
                        const T w2 = w.plane(ci + 2, co)[t], w3 = w.plane(ci + 3, co)[t];
                        const T* x0 = x.plane(ni, ci);
                        const T* x1 = x.plane(ni, ci + 1);
                        const T* x2 = x.plane(ni, ci + 2);
                        const T* x3 = x.plane(ni, ci + 3);
                        #pragma omp simd
                        for (int i = 0; i < hw; ++i)
                            tp[i] += w0 * x0[i] + w1 * x1[i] + w2 * x2[i] + w3 * x3[i];
                    }
                    for (; ci < cin; ++ci) {
                        const T wv = w.plane(ci, co)[t];
                        const T* xp = x.plane(ni, ci);
                        #pragma omp simd
                        for (int i = 0; i < hw; ++i) tp[i] += wv * xp[i];
                    }
                }
                const T bias = b.data[co];
                T* outp = out.plane(ni, co);
                for (int i = 0; i < x.h; ++i) {
                    const int s = i * x.w;
                    T* o0 = outp + 2 * i * out.w;
                    T* o1 = o0 + out.w;
                    for (int j = 0; j < x.w; ++j) {
                        o0[2 * j] = bias + tmp[s + j];
                        o0[2 * j + 1] = bias + tmp[hw + s + j];
                        o1[2 * j] = bias + tmp[2 * hw + s + j];
                        o1[2 * j + 1] = bias + tmp[3 * hw + s + j];
                    }
                }
            }
        });
        return out;
    }

    void tconv_backward(Node& nd) {
        Node& xn = nodes_[nd.in[0]];
        Node& wn = nodes_[nd.in[1]];
        Node& bn = nodes_[nd.in[2]];
        const TensorT<T>& g = nd.grad;
        const TensorT<T>& x = xn.value;
        const TensorT<T>& w = wn.value;
        const int cin = x.c, cout = w.c;

        if (bn.requires_grad) {
            for (int co = 0; co < cout; ++co) {
                double acc = 0.0;
                for (int ni = 0; ni < g.n; ++ni) {
                    const T* gp = g.plane(ni, co);
                    for (int i = 0; i < g.h * g.w; ++i) acc += static_cast<double>(gp[i]);
                }
                bn.grad.data[co] += static_cast<T>(acc);
            }
        }

        if (!wn.requires_grad && !xn.requires_grad) return;

        // Deinterleave the output grad into the four stamp sub-grids once;
        // both remaining gradients are flat reductions over them.
        const int hw = x.h * x.w;
        TensorT<T> gsub(x.n, 4 * cout, x.h, x.w);
        parallel_for(static_cast<int64_t>(x.n) * cout, [&](int64_t lo, int64_t hi) {
            for (int64_t idx = lo; idx < hi; ++idx) {
                const int ni = static_cast<int>(idx / cout);
                const int co = static_cast<int>(idx % cout);
                const T* gp = g.plane(ni, co);
                T* s0 = gsub.plane(ni, 4 * co);
                T* s1 = gsub.plane(ni, 4 * co + 1);
                T* s2 = gsub.plane(ni, 4 * co + 2);
                T* s3 = gsub.plane(ni, 4 * co + 3);
                for (int i = 0; i < x.h; ++i) {
                    const T* g0 = gp + 2 * i * g.w;
                    const T* g1 = g0 + g.w;
                    const int s = i * x.w;
                    for (int j = 0; j < x.w; ++j) {
                        s0[s + j] = g0[2 * j];
                        s1[s + j] = g0[2 * j + 1];
                        s2[s + j] = g1[2 * j];
                        s3[s + j] = g1[2 * j + 1];
                    }
                }
            }
        });

        if (wn.requires_grad) {
            parallel_for(cin, [&](int64_t lo, int64_t hi) {
                for (int ci = static_cast<int>(lo); ci < static_cast<int>(hi); ++ci)
                    for (int co = 0; co < cout; ++co) {
                        T* gwp = wn.grad.plane(ci, co);
                        for (int t = 0; t < 4; ++t) {
                            T acc = T(0);
                            for (int ni = 0; ni < x.n; ++ni) {
                                const T* xp = x.plane(ni, ci);
                                const T* sp = gsub.plane(ni, 4 * co + t);
                                #pragma omp simd reduction(+ : acc)
                                for (int i = 0; i < hw; ++i) acc += xp[i] * sp[i];
                            }
                            gwp[t] += acc;
                        }
                    }
            });
        }

        if (xn.requires_grad) {
            parallel_for(static_cast<int64_t>(x.n) * cin, [&](int64_t lo, int64_t hi) {
                for (int64_t idx = lo; idx < hi; ++idx) {
                    const int ni = static_cast<int>(idx / cin);
                    const int ci = static_cast<int>(idx % cin);
                    T* gxp = xn.grad.plane(ni, ci);
                    for (int co = 0; co < cout; ++co) {
                        const T* wp = w.plane(ci, co);
                        const T w0 = wp[0], w1 = wp[1], w2 = wp[2], w3 = wp[3];
                        const T* s0 = gsub.plane(ni, 4 * co);
                        const T* s1 = gsub.plane(ni, 4 * co + 1);
                        const T* s2 = gsub.plane(ni, 4 * co + 2);
                        const T* s3 = gsub.plane(ni, 4 * co + 3);
                        #pragma omp simd
                        for (int i = 0; i < hw; ++i)
                            gxp[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i] + w3 * s3[i];
                    }
                }
            });
        }
    }

    // ---- bilinear upsampling ---------------------------------------------

    struct LerpAxis {
        std::vector<int> lo, hi;
        std::vector<T> frac;
    };

    static LerpAxis lerp_axis(int out_len, int in_len) {
        LerpAxis ax;
        ax.lo.resize(out_len);
        ax.hi.resize(out_len);
        ax.frac.resize(out_len);
        for (int i = 0; i < out_len; ++i) {
            const double src = (i + 0.5) / 2.0 - 0.5;
            double f = std::floor(src);
            int i0 = static_cast<int>(f);
            double frac = src - f;
            int i1 = i0 + 1;
            i0 = std::clamp(i0, 0, in_len - 1);
            i1 = std::clamp(i1, 0, in_len - 1);
            ax.lo[i] = i0;
            ax.hi[i] = i1;
            ax.frac[i] = static_cast<T>(frac);
        }
        return ax;
    }

    static TensorT<T> bilinear_forward(const TensorT<T>& x) {
        TensorT<T> out(x.n, x.c, 2 * x.h, 2 * x.w);
        const LerpAxis ay = lerp_axis(out.h, x.h);
        const LerpAxis axx = lerp_axis(out.w, x.w);
        for (int ni = 0; ni < x.n; ++ni)
            for (int ci = 0; ci < x.c; ++ci) {
                const T* src = x.plane(ni, ci);
                T* dst = out.plane(ni, ci);
                for (int i = 0; i < out.h; ++i) {
                    const T fi = ay.frac[i];
                    const T* r0 = src + ay.lo[i] * x.w;
                    const T* r1 = src + ay.hi[i] * x.w;
                    for (int j = 0; j < out.w; ++j) {
                        const T fj = axx.frac[j];
                        const T a = r0[axx.lo[j]], bq = r0[axx.hi[j]];
                        const T cq = r1[axx.lo[j]], d = r1[axx.hi[j]];
                        dst[i * out.w + j] = (T(1) - fi) * ((T(1) - fj) * a + fj * bq) +
                                             fi * ((T(1) - fj) * cq + fj * d);
                    }
                }
            }
        return out;
    }

    void bilinear_backward(Node& nd) {
        Node& xn = nodes_[nd.in[0]];
        if (!xn.requires_grad) return;
        const TensorT<T>& g = nd.grad;
        const TensorT<T>& x = xn.value;
        const LerpAxis ay = lerp_axis(g.h, x.h);
        const LerpAxis axx = lerp_axis(g.w, x.w);
        for (int ni = 0; ni < x.n; ++ni)
            for (int ci = 0; ci < x.c; ++ci) {
                const T* gp = g.plane(ni, ci);
                T* gx = xn.grad.plane(ni, ci);
                for (int i = 0; i < g.h; ++i) {
                    const T fi = ay.frac[i];
                    T* r0 = gx + ay.lo[i] * x.w;
                    T* r1 = gx + ay.hi[i] * x.w;
                    for (int j = 0; j < g.w; ++j) {
                        const T fj = axx.frac[j];
                        const T gv = gp[i * g.w + j];
                        r0[axx.lo[j]] += (T(1) - fi) * (T(1) - fj) * gv;
                        r0[axx.hi[j]] += (T(1) - fi) * fj * gv;
                        r1[axx.lo[j]] += fi * (T(1) - fj) * gv;
                        r1[axx.hi[j]] += fi * fj * gv;
                    }
                }
            }
    }

    // ---- dispatch ---------------------------------------------------------

    void backward_node(Node& nd) {
        switch (nd.op) {
            case Op::Leaf:
                break;
            case Op::Conv2d:
                conv_backward(nd);
                break;
            case Op::TConv2d:
                tconv_backward(nd);
                break;
            case Op::MaxPool2d: {
                Node& xn = nodes_[nd.in[0]];
                if (!xn.requires_grad) break;
                const TensorT<T>& x = xn.value;
                const TensorT<T>& g = nd.grad;
                for (int ni = 0; ni < x.n; ++ni)
                    for (int ci = 0; ci < x.c; ++ci) {
                        const T* src = x.plane(ni, ci);
                        T* gx = xn.grad.plane(ni, ci);
                        const T* gp = g.plane(ni, ci);
                        for (int i = 0; i < g.h; ++i)
                            for (int j = 0; j < g.w; ++j) {
                                const int base = 2 * i * x.w + 2 * j;
                                const int offs[4] = {base, base + 1, base + x.w, base + x.w + 1};
                                int arg = 0;
                                for (int t = 1; t < 4; ++t)
                                    if (src[offs[t]] > src[offs[arg]]) arg = t;
                                gx[offs[arg]] += gp[i * g.w + j];
                            }
                    }
                break;
            }
            case Op::PRelu: {
                Node& xn = nodes_[nd.in[0]];
                Node& an = nodes_[nd.in[1]];
                const TensorT<T>& x = xn.value;
                const TensorT<T>& g = nd.grad;
                for (int ni = 0; ni < x.n; ++ni)
                    for (int ci = 0; ci < x.c; ++ci) {
                        const T a = an.value.data[ci];
                        const T* xs = x.plane(ni, ci);
                        const T* gs = g.plane(ni, ci);
                        const int m = x.h * x.w;
                        if (xn.requires_grad) {
                            T* gx = xn.grad.plane(ni, ci);
                            for (int i = 0; i < m; ++i)
                                gx[i] += gs[i] * (xs[i] >= T(0) ? T(1) : a);
                        }
                        if (an.requires_grad) {
                            T acc = T(0);
                            #pragma omp simd reduction(+ : acc)
                            for (int i = 0; i < m; ++i)
                                acc += xs[i] < T(0) ? gs[i] * xs[i] : T(0);
                            an.grad.data[ci] += acc;
                        }
                    }
                break;
            }
            case Op::Sigmoid: {
                Node& xn = nodes_[nd.in[0]];
                if (!xn.requires_grad) break;
                const TensorT<T>& out = nd.value;
                for (size_t i = 0; i < out.size(); ++i) {
                    const T o = out.data[i];
                    xn.grad.data[i] += nd.grad.data[i] * o * (T(1) - o);
                }
                break;
            }
            case Op::BilinearUp2d:
                bilinear_backward(nd);
                break;
            case Op::ConcatCh: {
                Node& an = nodes_[nd.in[0]];
                Node& bn = nodes_[nd.in[1]];
                const TensorT<T>& g = nd.grad;
                const size_t plane = static_cast<size_t>(g.h) * g.w;
                for (int ni = 0; ni < g.n; ++ni) {
                    if (an.requires_grad)
                        for (int ci = 0; ci < an.value.c; ++ci) {
                            const T* gs = g.plane(ni, ci);
                            T* gd = an.grad.plane(ni, ci);
                            for (size_t i = 0; i < plane; ++i) gd[i] += gs[i];
                        }
                    if (bn.requires_grad)
                        for (int ci = 0; ci < bn.value.c; ++ci) {
                            const T* gs = g.plane(ni, an.value.c + ci);
                            T* gd = bn.grad.plane(ni, ci);
                            for (size_t i = 0; i < plane; ++i) gd[i] += gs[i];
                        }
                }
                break;
            }
            case Op::Add: {
                for (int t = 0; t < 2; ++t) {
                    Node& xn = nodes_[nd.in[t]];
                    if (!xn.requires_grad) continue;
                    for (size_t i = 0; i < nd.grad.size(); ++i) xn.grad.data[i] += nd.grad.data[i];
                }
                break;
            }
            case Op::BceLoss: {
                Node& zn = nodes_[nd.in[0]];
                if (!zn.requires_grad) break;
                const T gscale = nd.grad.data[0];
                const T inv_count = T(1) / static_cast<T>(zn.value.size());
                for (size_t i = 0; i < zn.value.size(); ++i) {
                    const T s = sigmoid_scalar(zn.value.data[i]);
                    zn.grad.data[i] += gscale * (s - nd.extra.data[i]) * inv_count;
                }
                break;
            }
            case Op::Sum: {
                Node& xn = nodes_[nd.in[0]];
                if (!xn.requires_grad) break;
                const T gv = nd.grad.data[0];
                for (auto& v : xn.grad.data) v += gv;
                break;
            }
            case Op::WeightedSum: {
                Node& xn = nodes_[nd.in[0]];
                if (!xn.requires_grad) break;
                const T gv = nd.grad.data[0];
                for (size_t i = 0; i < xn.grad.data.size(); ++i)
                    xn.grad.data[i] += gv * nd.extra.data[i];
                break;
            }
        }
    }
};

using Graph = GraphT<float>;

}  // namespace nerveseg
