#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace nerveseg {

#if defined(__GLIBC__)
namespace detail {
// The tape allocates and frees hundreds of megabytes of activations per
// training step; keep those blocks on the free list instead of handing
// them back to the kernel and re-faulting the pages every step.
inline const int malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return 0;
}();
}  // namespace detail
#endif

/// Dense 4-D array (batch, channels, height, width), row-major.
/// Immutable by convention once an op has produced it; the float
/// instantiation is the production value type, the double one exists
/// for gradient checking.
template <typename T>
struct TensorT {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    TensorT() = default;

    TensorT(int n_, int c_, int h_, int w_, T fill = T(0))
        : n(n_), c(c_), h(h_), w(w_) {
        if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0)
            throw std::invalid_argument("tensor dims must be non-negative");
        unsigned long long len = 1ull * n_ * c_;
        len *= static_cast<unsigned long long>(h_);
        len *= static_cast<unsigned long long>(w_);
        if (len > (1ull << 31))
            throw std::overflow_error("tensor flat length overflow: " + std::to_string(len));
        data.assign(static_cast<size_t>(len), fill);
    }

    size_t size() const { return data.size(); }

    bool same_shape(const TensorT& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }

    T& at(int ni, int ci, int i, int j) {
        return data[((static_cast<size_t>(ni) * c + ci) * h + i) * w + j];
    }
    const T& at(int ni, int ci, int i, int j) const {
        return data[((static_cast<size_t>(ni) * c + ci) * h + i) * w + j];
    }

    T* plane(int ni, int ci) {
        return data.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
    }
    const T* plane(int ni, int ci) const {
        return data.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(n, c, h, w);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;

/// Deterministic 64-bit generator. State advances with the splitmix64
/// shift/multiply sequence; doubles take the top 53 bits; normal draws
/// use Box-Muller with the spare value cached. The algorithm is frozen:
/// the same seed gives the same stream on every run of this implementation.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// In [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Inclusive on both ends.
    int next_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Stateless combine for deriving independent substreams (per-fold
    /// seeds and the like). splitmix64 applied to a xor of the parts.
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

  private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Pads height and width by `pad` on every side with `value`.
template <typename T>
TensorT<T> pad2d(const TensorT<T>& x, int pad, T value = T(0)) {
    if (pad < 0) throw std::invalid_argument("pad must be >= 0");
    if (pad == 0) return x;
    TensorT<T> out;
    out.n = x.n;
    out.c = x.c;
    out.h = x.h + 2 * pad;
    out.w = x.w + 2 * pad;
    out.data.resize(static_cast<size_t>(out.n) * out.c * out.h * out.w);
    for (int ni = 0; ni < x.n; ++ni)
        for (int ci = 0; ci < x.c; ++ci) {
            const T* src = x.plane(ni, ci);
            T* dst = out.plane(ni, ci);
            std::fill_n(dst, static_cast<size_t>(pad) * out.w, value);
            for (int i = 0; i < x.h; ++i) {
                T* row = dst + (i + pad) * out.w;
                std::fill_n(row, pad, value);
                std::copy_n(src + i * x.w, x.w, row + pad);
                std::fill_n(row + pad + x.w, pad, value);
            }
            std::fill_n(dst + (x.h + pad) * out.w, static_cast<size_t>(pad) * out.w, value);
        }
    return out;
}

/// Crops `pad` pixels from every side (inverse of pad2d).
template <typename T>
TensorT<T> crop2d(const TensorT<T>& x, int pad) {
    if (pad == 0) return x;
    if (x.h < 2 * pad || x.w < 2 * pad) throw std::invalid_argument("crop larger than tensor");
    TensorT<T> out(x.n, x.c, x.h - 2 * pad, x.w - 2 * pad);
    for (int ni = 0; ni < x.n; ++ni)
        for (int ci = 0; ci < x.c; ++ci) {
            const T* src = x.plane(ni, ci);
            T* dst = out.plane(ni, ci);
            for (int i = 0; i < out.h; ++i)
                for (int j = 0; j < out.w; ++j)
                    dst[i * out.w + j] = src[(i + pad) * x.w + (j + pad)];
        }
    return out;
}

/// He-normal fill: zero mean, stddev sqrt(2 / fan_in). Draws come from the
/// shared double-precision stream so float and double builds see the same
/// values.
template <typename T>
TensorT<T> he_normal_init(int n, int c, int h, int w, int fan_in, Rng& rng) {
    if (fan_in <= 0) throw std::invalid_argument("fan_in must be > 0");
    TensorT<T> out(n, c, h, w);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : out.data) v = static_cast<T>(stddev * rng.normal());
    return out;
}

}  // namespace nerveseg
