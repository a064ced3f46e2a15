#pragma once

// Dense rank-4 tensor (batch, channels, height, width), channel-major, and the
// reference kernels every block is assembled from: direct convolution, average
// pooling, inference batch-norm, bilinear resize and the two broadcast
// element-wise ops. Kernels are pure; optional threading over output rows is
// deterministic (fixed reduction order per output element).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mnf {

struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<size_t>(n_) * c_ * h_ * w_, fill) {
        if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0)
            throw std::invalid_argument("tensor: negative dimension");
    }

    size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }

    float& at(int ni, int ci, int y, int x) {
        return data[((static_cast<size_t>(ni) * c + ci) * h + y) * w + x];
    }
    float at(int ni, int ci, int y, int x) const {
        return data[((static_cast<size_t>(ni) * c + ci) * h + y) * w + x];
    }
    const float* channel(int ni, int ci) const {
        return data.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
    }
    float* channel(int ni, int ci) {
        return data.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
    }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

enum class Padding { Same, Valid };

// ---------------------------------------------------------------------------
// Multiply-accumulate tally. When a scope is active, convolution and pooling
// kernels count every accumulate they execute. Used to cross-check the
// closed-form cost model against what the kernels actually do.

namespace detail {
inline std::atomic<unsigned long long>* g_mac_tally = nullptr;
}

class MacTallyScope {
  public:
    MacTallyScope() { detail::g_mac_tally = &count_; }
    ~MacTallyScope() { detail::g_mac_tally = nullptr; }
    MacTallyScope(const MacTallyScope&) = delete;
    MacTallyScope& operator=(const MacTallyScope&) = delete;
    unsigned long long macs() const { return count_.load(); }

  private:
    std::atomic<unsigned long long> count_{0};
};

// ---------------------------------------------------------------------------
// Deterministic work splitting. Each index is processed by exactly one thread
// and every output element keeps a fixed reduction order, so results do not
// depend on the thread count. MNF_THREADS caps the pool.

namespace detail {

inline int max_threads() {
    static const int cached = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw < 1) hw = 1;
        if (hw > 8) hw = 8;
        if (const char* env = std::getenv("MNF_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1 && cap < hw) hw = cap;
        }
        return hw;
    }();
    return cached;
}

inline void parallel_for(int64_t count, int64_t grain,
                         const std::function<void(int64_t, int64_t)>& fn) {
    int threads = max_threads();
    if (threads <= 1 || count < 2 * grain) {
        fn(0, count);
        return;
    }
    int64_t chunks = (count + grain - 1) / grain;
    if (chunks < threads) threads = static_cast<int>(chunks);
    std::vector<std::thread> pool;
    int64_t per = (count + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        int64_t lo = t * per;
        int64_t hi = std::min<int64_t>(count, lo + per);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution. Weight layout (out_ch, in_ch/groups, k, k); odd square kernels.
// Same padding splits the deficit with the extra pixel on the bottom/right and
// multiplies explicit zeros, so every output element performs exactly
// k*k*in_ch/groups accumulates.

struct ConvOpts {
    int stride = 1;
    int dilation = 1;
    int groups = 1;
    Padding padding = Padding::Same;
};

namespace detail {

template <bool kTally>
inline void conv2d_impl(const Tensor& x, const Tensor& wt, const float* bias,
                        const ConvOpts& o, Tensor& y, int pad) {
    const int k = wt.h;
    const int cin_g = x.c / o.groups;
    const int cout_g = y.c / o.groups;
    const int64_t rows = static_cast<int64_t>(y.n) * y.c * y.h;
    parallel_for(rows, 1024, [&](int64_t lo, int64_t hi) {
        unsigned long long local = 0;
        for (int64_t r = lo; r < hi; ++r) {
            const int oy = static_cast<int>(r % y.h);
            const int oc = static_cast<int>((r / y.h) % y.c);
            const int ni = static_cast<int>(r / (static_cast<int64_t>(y.h) * y.c));
            const int g = oc / cout_g;
            float* out_row = y.channel(ni, oc) + static_cast<size_t>(oy) * y.w;
            for (int ox = 0; ox < y.w; ++ox) {
                float acc = 0.0f;
                for (int ic = 0; ic < cin_g; ++ic) {
                    const float* xin = x.channel(ni, g * cin_g + ic);
                    const float* wk =
                        wt.channel(oc, ic);  // (k,k) plane of this filter
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * o.stride - pad + ky * o.dilation;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * o.stride - pad + kx * o.dilation;
                            const bool inside =
                                iy >= 0 && iy < x.h && ix >= 0 && ix < x.w;
                            const float xv =
                                inside ? xin[static_cast<size_t>(iy) * x.w + ix]
                                       : 0.0f;
                            acc += xv * wk[ky * k + kx];
                            if constexpr (kTally) ++local;
                        }
                    }
                }
                if (bias) acc += bias[oc];
                out_row[ox] = acc;
            }
        }
        if constexpr (kTally) {
            g_mac_tally->fetch_add(local, std::memory_order_relaxed);
        }
        (void)local;
    });
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& wt,
                     const float* bias = nullptr, const ConvOpts& o = {}) {
    const int k = wt.h;
    if (wt.h != wt.w || k % 2 == 0)
        throw std::invalid_argument("conv2d: kernel must be odd and square");
    if (o.groups < 1 || x.c % o.groups != 0 || wt.n % o.groups != 0)
        throw std::invalid_argument("conv2d: channels not divisible by groups");
    if (wt.c != x.c / o.groups)
        throw std::invalid_argument("conv2d: weight shape mismatch, got " +
                                    wt.shape_str() + " for input " +
                                    x.shape_str());
    const int span = (k - 1) * o.dilation + 1;
    int oh, ow, pad;
    if (o.padding == Padding::Same) {
        oh = (x.h + o.stride - 1) / o.stride;
        ow = (x.w + o.stride - 1) / o.stride;
        pad = span / 2;
    } else {
        if (x.h < span || x.w < span)
            throw std::invalid_argument("conv2d: input smaller than kernel span");
        oh = (x.h - span) / o.stride + 1;
        ow = (x.w - span) / o.stride + 1;
        pad = 0;
    }
    Tensor y(x.n, wt.n, oh, ow);
    if (detail::g_mac_tally)
        detail::conv2d_impl<true>(x, wt, bias, o, y, pad);
    else
        detail::conv2d_impl<false>(x, wt, bias, o, y, pad);
    return y;
}

// ---------------------------------------------------------------------------
// Average pooling. Rectangular kernel/stride, Valid windows; kernel and stride
// are clamped to the input so oversized windows degrade to one window.

inline Tensor avg_pool(const Tensor& x, int kh, int kw, int sh, int sw) {
    if (kh < 1 || kw < 1 || sh < 1 || sw < 1)
        throw std::invalid_argument("avg_pool: non-positive kernel or stride");
    if (kh > x.h || kw > x.w)
        throw std::invalid_argument("avg_pool: kernel exceeds spatial size");
    const int oh = (x.h - kh) / sh + 1;
    const int ow = (x.w - kw) / sw + 1;
    Tensor y(x.n, x.c, oh, ow);
    unsigned long long macs = 0;
    const float inv = 1.0f / (static_cast<float>(kh) * kw);
    for (int ni = 0; ni < x.n; ++ni)
        for (int ci = 0; ci < x.c; ++ci) {
            const float* in = x.channel(ni, ci);
            float* out = y.channel(ni, ci);
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < kh; ++ky) {
                        const float* row = in + static_cast<size_t>(oy * sh + ky) * x.w + ox * sw;
                        for (int kx = 0; kx < kw; ++kx) {
                            acc += row[kx];
                            ++macs;
                        }
                    }
                    out[static_cast<size_t>(oy) * ow + ox] = acc * inv;
                }
        }
    if (detail::g_mac_tally)
        detail::g_mac_tally->fetch_add(macs, std::memory_order_relaxed);
    return y;
}

inline Tensor global_avg_pool(const Tensor& x) {
    if (x.h < 1 || x.w < 1)
        throw std::invalid_argument("global_avg_pool: empty spatial dims");
    return avg_pool(x, x.h, x.w, x.h, x.w);
}

// ---------------------------------------------------------------------------
// Inference-mode batch normalization: y = scale*(x-mean)/sqrt(var+eps)+bias.

inline Tensor batchnorm_inference(const Tensor& x, const std::vector<float>& scale,
                                  const std::vector<float>& bias,
                                  const std::vector<float>& mean,
                                  const std::vector<float>& var, float eps) {
    const size_t c = static_cast<size_t>(x.c);
    if (scale.size() != c || bias.size() != c || mean.size() != c ||
        var.size() != c)
        throw std::invalid_argument("batchnorm: parameter length != channels");
    Tensor y(x.n, x.c, x.h, x.w);
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    for (int ni = 0; ni < x.n; ++ni)
        for (int ci = 0; ci < x.c; ++ci) {
            const float a = scale[ci] / std::sqrt(var[ci] + eps);
            const float b = bias[ci] - a * mean[ci];
            const float* in = x.channel(ni, ci);
            float* out = y.channel(ni, ci);
            for (size_t i = 0; i < plane; ++i) out[i] = a * in[i] + b;
        }
    return y;
}

// ---------------------------------------------------------------------------
// Bilinear upsample, align_corners=false (half-pixel centers, clamped).

inline Tensor bilinear_upsample(const Tensor& x, int oh, int ow) {
    if (oh < 1 || ow < 1)
        throw std::invalid_argument("bilinear_upsample: zero-size output");
    if (oh < x.h || ow < x.w)
        throw std::invalid_argument("bilinear_upsample: output smaller than input");
    if (oh == x.h && ow == x.w) return x;
    Tensor y(x.n, x.c, oh, ow);
    const float sy = static_cast<float>(x.h) / oh;
    const float sx = static_cast<float>(x.w) / ow;
    std::vector<int> x0(ow), x1(ow);
    std::vector<float> fx(ow);
    for (int ox = 0; ox < ow; ++ox) {
        float src = (ox + 0.5f) * sx - 0.5f;
        if (src < 0.0f) src = 0.0f;
        int lo = static_cast<int>(src);
        if (lo > x.w - 1) lo = x.w - 1;
        x0[ox] = lo;
        x1[ox] = std::min(lo + 1, x.w - 1);
        fx[ox] = src - lo;
    }
    for (int ni = 0; ni < x.n; ++ni)
        for (int ci = 0; ci < x.c; ++ci) {
            const float* in = x.channel(ni, ci);
            float* out = y.channel(ni, ci);
            for (int oy = 0; oy < oh; ++oy) {
                float src = (oy + 0.5f) * sy - 0.5f;
                if (src < 0.0f) src = 0.0f;
                int y0 = static_cast<int>(src);
                if (y0 > x.h - 1) y0 = x.h - 1;
                const int y1 = std::min(y0 + 1, x.h - 1);
                const float fy = src - y0;
                const float* r0 = in + static_cast<size_t>(y0) * x.w;
                const float* r1 = in + static_cast<size_t>(y1) * x.w;
                for (int ox = 0; ox < ow; ++ox) {
                    const float top = r0[x0[ox]] + (r0[x1[ox]] - r0[x0[ox]]) * fx[ox];
                    const float bot = r1[x0[ox]] + (r1[x1[ox]] - r1[x0[ox]]) * fx[ox];
                    out[static_cast<size_t>(oy) * ow + ox] = top + (bot - top) * fy;
                }
            }
        }
    return y;
}

// ---------------------------------------------------------------------------
// Element-wise helpers.

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
    Tensor y = a;
    for (size_t i = 0; i < y.size(); ++i) y.data[i] += b.data[i];
    return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("mul: shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
    Tensor y = a;
    for (size_t i = 0; i < y.size(); ++i) y.data[i] *= b.data[i];
    return y;
}

// Multiply by per-channel gates of shape (n, c, 1, 1).
inline Tensor mul_channels(const Tensor& x, const Tensor& gate) {
    if (gate.n != x.n || gate.c != x.c || gate.h != 1 || gate.w != 1)
        throw std::invalid_argument("mul_channels: gate must be (n,c,1,1), got " +
                                    gate.shape_str());
    Tensor y = x;
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    for (int ni = 0; ni < x.n; ++ni)
        for (int ci = 0; ci < x.c; ++ci) {
            const float g = gate.at(ni, ci, 0, 0);
            float* out = y.channel(ni, ci);
            for (size_t i = 0; i < plane; ++i) out[i] *= g;
        }
    return y;
}

}  // namespace mnf
