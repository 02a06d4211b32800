#pragma once

// Corner-aligned linear resampling along one axis of a dense array viewed as
// [outer, length, inner]. Trilinear resizing is the composition of three of
// these passes; the same kernels serve the differentiable tensor op and the
// plain-field preprocessing path.

#include <cstdint>
#include <vector>

namespace dram::resample {

struct Tap {
    std::int64_t lo;
    std::int64_t hi;
    double frac;  // weight of `hi`
};

// Sample position i maps to i * (in - 1) / (out - 1); endpoints map exactly.
inline std::vector<Tap> linear_taps(std::int64_t in_len, std::int64_t out_len) {
    std::vector<Tap> taps(static_cast<std::size_t>(out_len));
    for (std::int64_t i = 0; i < out_len; ++i) {
        if (in_len == 1 || out_len == 1) {
            taps[i] = {0, 0, 0.0};
            continue;
        }
        const double src = static_cast<double>(i * (in_len - 1)) / static_cast<double>(out_len - 1);
        auto lo = static_cast<std::int64_t>(src);
        if (lo >= in_len - 1) lo = in_len - 1;
        const std::int64_t hi = lo + 1 < in_len ? lo + 1 : lo;
        taps[i] = {lo, hi, src - static_cast<double>(lo)};
    }
    return taps;
}

template <typename T>
void resize_axis(const T* in, T* out, std::int64_t outer, std::int64_t in_len, std::int64_t inner,
                 std::int64_t out_len) {
    const auto taps = linear_taps(in_len, out_len);
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = in + o * in_len * inner;
        T* dst = out + o * out_len * inner;
        for (std::int64_t i = 0; i < out_len; ++i) {
            const auto& t = taps[i];
            const T wl = static_cast<T>(1.0 - t.frac), wh = static_cast<T>(t.frac);
            const T* a = src + t.lo * inner;
            const T* b = src + t.hi * inner;
            T* d = dst + i * inner;
            for (std::int64_t k = 0; k < inner; ++k) d[k] = wl * a[k] + wh * b[k];
        }
    }
}

// Adjoint of resize_axis: accumulates into `in_grad`.
template <typename T>
void resize_axis_adjoint(const T* out_grad, T* in_grad, std::int64_t outer, std::int64_t in_len,
                         std::int64_t inner, std::int64_t out_len) {
    const auto taps = linear_taps(in_len, out_len);
    for (std::int64_t o = 0; o < outer; ++o) {
        T* dst = in_grad + o * in_len * inner;
        const T* src = out_grad + o * out_len * inner;
        for (std::int64_t i = 0; i < out_len; ++i) {
            const auto& t = taps[i];
            const T wl = static_cast<T>(1.0 - t.frac), wh = static_cast<T>(t.frac);
            T* a = dst + t.lo * inner;
            T* b = dst + t.hi * inner;
            const T* g = src + i * inner;
            for (std::int64_t k = 0; k < inner; ++k) {
                a[k] += wl * g[k];
                b[k] += wh * g[k];
            }
        }
    }
}

// Resizes a [D,H,W] field (optionally batched by `outer`) to new extents.
template <typename T>
std::vector<T> trilinear(const std::vector<T>& in, std::int64_t outer, std::int64_t d, std::int64_t h,
                         std::int64_t w, std::int64_t nd, std::int64_t nh, std::int64_t nw) {
    std::vector<T> a(static_cast<std::size_t>(outer * nd * h * w));
    resize_axis(in.data(), a.data(), outer, d, h * w, nd);
    std::vector<T> b(static_cast<std::size_t>(outer * nd * nh * w));
    resize_axis(a.data(), b.data(), outer * nd, h, w, nh);
    std::vector<T> c(static_cast<std::size_t>(outer * nd * nh * nw));
    resize_axis(b.data(), c.data(), outer * nd * nh, w, 1, nw);
    return c;
}

}  // namespace dram::resample
