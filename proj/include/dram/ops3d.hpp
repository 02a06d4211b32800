#pragma once

// Volumetric operators on [N, C, D, H, W] tensors.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <limits>
#include <utility>

#include "dram/resample.hpp"
#include "dram/tensor.hpp"

namespace dram {

using Extents3 = std::array<std::int64_t, 3>;

namespace detail {

template <typename T>
void require_rank5(const Tensor<T>& x, const char* op) {
    if (x.rank() != 5) throw ShapeError(std::string(op) + ": expected [N,C,D,H,W], got " + to_string(x.shape()));
}

inline std::int64_t pooled_extent(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
    std::int64_t c, d, h, w;     // input
    std::int64_t k, stride, pad;
    std::int64_t od, oh, ow;     // output

    std::int64_t rows() const { return c * k * k * k; }
    std::int64_t cols() const { return od * oh * ow; }
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output columns ow whose input column ow*stride - pad + kw lies inside [0, w).
inline std::pair<std::int64_t, std::int64_t> w_range(const ConvGeometry& g, std::int64_t kw) {
    const std::int64_t off = g.pad - kw;  // iw = ow*stride - off
    const std::int64_t lo = off > 0 ? (off + g.stride - 1) / g.stride : 0;
    const std::int64_t last = g.w - 1 + off;  // iw <= w-1  <=>  ow*stride <= last
    const std::int64_t hi = last < 0 ? 0 : std::min(g.ow, last / g.stride + 1);
    return {std::min(lo, hi), hi};
}

// Unfolds one sample [C,D,H,W] into a [C*k^3, od*oh*ow] patch matrix.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::int64_t plane = g.oh * g.ow, cols = g.cols();
    for (std::int64_t c = 0; c < g.c; ++c)
        for (std::int64_t kd = 0; kd < g.k; ++kd)
            for (std::int64_t kh = 0; kh < g.k; ++kh)
                for (std::int64_t kw = 0; kw < g.k; ++kw) {
                    T* row = col + (((c * g.k + kd) * g.k + kh) * g.k + kw) * cols;
                    for (std::int64_t od = 0; od < g.od; ++od) {
                        const std::int64_t id = od * g.stride - g.pad + kd;
                        T* rd = row + od * plane;
                        if (id < 0 || id >= g.d) {
                            std::fill_n(rd, plane, T(0));
                            continue;
                        }
                        for (std::int64_t oh = 0; oh < g.oh; ++oh) {
                            const std::int64_t ih = oh * g.stride - g.pad + kh;
                            T* rh = rd + oh * g.ow;
                            if (ih < 0 || ih >= g.h) {
                                std::fill_n(rh, g.ow, T(0));
                                continue;
                            }
                            const T* src = x + ((c * g.d + id) * g.h + ih) * g.w;
                            const std::int64_t shift = kw - g.pad;
                            const auto [lo, hi] = w_range(g, kw);
                            std::fill(rh, rh + lo, T(0));
                            if (g.stride == 1)
                                std::copy(src + lo + shift, src + hi + shift, rh + lo);
                            else
                                for (std::int64_t ow = lo; ow < hi; ++ow) rh[ow] = src[ow * g.stride + shift];
                            std::fill(rh + hi, rh + g.ow, T(0));
                        }
                    }
                }
}

// Adjoint of im2col; accumulates into dx.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
    const std::int64_t plane = g.oh * g.ow, cols = g.cols();
    for (std::int64_t c = 0; c < g.c; ++c)
        for (std::int64_t kd = 0; kd < g.k; ++kd)
            for (std::int64_t kh = 0; kh < g.k; ++kh)
                for (std::int64_t kw = 0; kw < g.k; ++kw) {
                    const T* row = col + (((c * g.k + kd) * g.k + kh) * g.k + kw) * cols;
                    for (std::int64_t od = 0; od < g.od; ++od) {
                        const std::int64_t id = od * g.stride - g.pad + kd;
                        if (id < 0 || id >= g.d) continue;
                        for (std::int64_t oh = 0; oh < g.oh; ++oh) {
                            const std::int64_t ih = oh * g.stride - g.pad + kh;
                            if (ih < 0 || ih >= g.h) continue;
                            T* dst = dx + ((c * g.d + id) * g.h + ih) * g.w;
                            const T* src = row + od * plane + oh * g.ow;
                            const std::int64_t shift = kw - g.pad;
                            const auto [lo, hi] = w_range(g, kw);
                            for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow * g.stride + shift] += src[ow];
                        }
                    }
                }
}

}  // namespace detail

// Cross-correlation of input [N,C,D,H,W] with weights [F,C,k,k,k]; no bias.
// Patch matrices are rebuilt in the backward pass rather than stored.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, std::int64_t stride, std::int64_t padding) {
    detail::require_rank5(input, "conv3d");
    detail::require_rank5(weights, "conv3d weights");
    const std::int64_t k = weights.dim(2);
    if (weights.dim(3) != k || weights.dim(4) != k || k % 2 == 0)
        throw ShapeError("conv3d: kernel must be cubic with odd size, got " + to_string(weights.shape()));
    if (weights.dim(1) != input.dim(1))
        throw ShapeError("conv3d: input has " + std::to_string(input.dim(1)) + " channels but weights expect " +
                         std::to_string(weights.dim(1)));
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv3d: stride must be >= 1 and padding >= 0");

    detail::ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), input.dim(4), k, stride, padding, 0, 0, 0};
    g.od = detail::pooled_extent(g.d, k, stride, padding);
    g.oh = detail::pooled_extent(g.h, k, stride, padding);
    g.ow = detail::pooled_extent(g.w, k, stride, padding);
    if (g.od < 1 || g.oh < 1 || g.ow < 1)
        throw ShapeError("conv3d: kernel larger than padded input " + to_string(input.shape()));

    const std::int64_t n = input.dim(0), f = weights.dim(0);
    const std::int64_t in_size = g.c * g.d * g.h * g.w, out_size = f * g.cols();
    std::vector<T> out(static_cast<std::size_t>(n * out_size));

    using Mat = detail::RowMatrix<T>;
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;
    CMap wmat(weights.values().data(), f, g.rows());
    std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
    for (std::int64_t s = 0; s < n; ++s) {
        const T* xs = input.values().data() + s * in_size;
        if (!g.pointwise()) detail::im2col(xs, g, col.data());
        CMap cmat(g.pointwise() ? xs : col.data(), g.rows(), g.cols());
        MMap(out.data() + s * out_size, f, g.cols()).noalias() = wmat * cmat;
    }

    auto nx = input.node(), nw = weights.node();
    return make_result<T>(
        "conv3d", Shape{n, f, g.od, g.oh, g.ow}, std::move(out), {nx, nw},
        [nx, nw, g, n, f, in_size, out_size](const Node<T>& self) {
            CMap wmat(nw->value.data(), f, g.rows());
            std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
            std::vector<T> dcol(static_cast<std::size_t>(g.rows() * g.cols()));
            for (std::int64_t s = 0; s < n; ++s) {
                CMap dout(self.grad.data() + s * out_size, f, g.cols());
                const T* xs = nx->value.data() + s * in_size;
                if (nw->requires_grad) {
                    if (!g.pointwise()) detail::im2col(xs, g, col.data());
                    CMap cmat(g.pointwise() ? xs : col.data(), g.rows(), g.cols());
                    MMap dw(nw->grad_buffer().data(), f, g.rows());
                    dw.noalias() += dout * cmat.transpose();
                }
                if (nx->requires_grad) {
                    T* dx = nx->grad_buffer().data() + s * in_size;
                    if (g.pointwise()) {
                        MMap(dx, g.rows(), g.cols()).noalias() += wmat.transpose() * dout;
                    } else {
                        MMap(dcol.data(), g.rows(), g.cols()).noalias() = wmat.transpose() * dout;
                        detail::col2im(dcol.data(), g, dx);
                    }
                }
            }
        });
}

// Adds a per-channel bias [C] to [N,C,...].
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() < 2 || bias.numel() != x.dim(1))
        throw ShapeError("add_channel_bias: bias " + to_string(bias.shape()) + " vs input " + to_string(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
    std::vector<T> out(x.values().begin(), x.values().end());
    for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T* p = out.data() + (s * c + ch) * inner;
            for (std::int64_t i = 0; i < inner; ++i) p[i] += bias[ch];
        }
    auto nx = x.node(), nb = bias.node();
    return make_result<T>("add_channel_bias", x.shape(), std::move(out), {nx, nb},
                          [nx, nb, n, c, inner](const Node<T>& self) {
                              if (nx->requires_grad) {
                                  auto& g = nx->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                              if (nb->requires_grad) {
                                  auto& g = nb->grad_buffer();
                                  for (std::int64_t s = 0; s < n; ++s)
                                      for (std::int64_t ch = 0; ch < c; ++ch) {
                                          const T* p = self.grad.data() + (s * c + ch) * inner;
                                          T acc = 0;
                                          for (std::int64_t i = 0; i < inner; ++i) acc += p[i];
                                          g[ch] += acc;
                                      }
                              }
                          });
}

// Windowed maximum over padded input. Padding never wins a window; gradient
// goes to the first maximal element in scan order.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, std::int64_t kernel, std::int64_t stride, std::int64_t padding = 0) {
    detail::require_rank5(input, "maxpool3d");
    if (kernel < 1 || stride < 1 || padding < 0)
        throw std::invalid_argument("maxpool3d: kernel and stride must be >= 1, padding >= 0");
    if (padding >= kernel) throw std::invalid_argument("maxpool3d: padding must be smaller than the kernel");
    const std::int64_t n = input.dim(0), c = input.dim(1), d = input.dim(2), h = input.dim(3), w = input.dim(4);
    const std::int64_t od = detail::pooled_extent(d, kernel, stride, padding);
    const std::int64_t oh = detail::pooled_extent(h, kernel, stride, padding);
    const std::int64_t ow = detail::pooled_extent(w, kernel, stride, padding);
    if (d + 2 * padding < kernel || h + 2 * padding < kernel || w + 2 * padding < kernel)
        throw ShapeError("maxpool3d: window larger than padded input " + to_string(input.shape()));

    const std::int64_t planes = n * c, in_vol = d * h * w, out_vol = od * oh * ow;
    std::vector<T> out(static_cast<std::size_t>(planes * out_vol));
    std::vector<std::int64_t> argmax(out.size());
    auto xv = input.values();
    for (std::int64_t p = 0; p < planes; ++p) {
        const T* x = xv.data() + p * in_vol;
        for (std::int64_t z = 0; z < od; ++z)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t q = 0; q < ow; ++q) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int64_t best_idx = -1;
                    for (std::int64_t a = 0; a < kernel; ++a) {
                        const std::int64_t iz = z * stride - padding + a;
                        if (iz < 0 || iz >= d) continue;
                        for (std::int64_t b = 0; b < kernel; ++b) {
                            const std::int64_t iy = y * stride - padding + b;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t e = 0; e < kernel; ++e) {
                                const std::int64_t ix = q * stride - padding + e;
                                if (ix < 0 || ix >= w) continue;
                                const std::int64_t idx = (iz * h + iy) * w + ix;
                                if (best_idx < 0 || x[idx] > best) {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    const std::int64_t o = p * out_vol + (z * oh + y) * ow + q;
                    out[o] = best;
                    argmax[o] = p * in_vol + best_idx;
                }
    }
    auto nx = input.node();
    return make_result<T>("maxpool3d", Shape{n, c, od, oh, ow}, std::move(out), {nx},
                          [nx, argmax = std::move(argmax)](const Node<T>& self) {
                              auto& g = nx->grad_buffer();
                              for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
                          });
}

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    explicit BatchNormState(std::int64_t channels = 0)
        : running_mean(static_cast<std::size_t>(channels), T(0)),
          running_var(static_cast<std::size_t>(channels), T(1)) {}
};

struct BatchNormOptions {
    double eps = 1e-5;
    double momentum = 0.1;
};

// Per-channel normalization over batch and spatial axes. Training mode uses
// batch statistics (biased variance) and folds them into the running state
// (unbiased variance); inference mode uses the running state.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                    bool training, BatchNormOptions opts = {}) {
    if (input.rank() < 2) throw ShapeError("batchnorm: input needs a channel axis");
    const std::int64_t n = input.dim(0), c = input.dim(1), inner = input.numel() / (n * c);
    if (gamma.numel() != c || beta.numel() != c || static_cast<std::int64_t>(state.running_mean.size()) != c)
        throw ShapeError("batchnorm: per-channel parameters do not match " + std::to_string(c) + " channels");

    const std::int64_t count = n * inner;
    auto xv = input.values();
    std::vector<T> mu(c), inv_std(c);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        if (training) {
            double s = 0;
            for (std::int64_t b = 0; b < n; ++b) {
                const T* p = xv.data() + (b * c + ch) * inner;
                for (std::int64_t i = 0; i < inner; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(count);
            double v = 0;
            for (std::int64_t b = 0; b < n; ++b) {
                const T* p = xv.data() + (b * c + ch) * inner;
                for (std::int64_t i = 0; i < inner; ++i) v += (p[i] - m) * (p[i] - m);
            }
            const double var = v / static_cast<double>(count);
            mu[ch] = static_cast<T>(m);
            inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + opts.eps));
            const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
            state.running_mean[ch] = static_cast<T>((1 - opts.momentum) * state.running_mean[ch] + opts.momentum * m);
            state.running_var[ch] =
                static_cast<T>((1 - opts.momentum) * state.running_var[ch] + opts.momentum * unbiased);
        } else {
            mu[ch] = state.running_mean[ch];
            inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[ch]) + opts.eps));
        }
    }

    std::vector<T> xhat(xv.size()), out(xv.size());
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t off = (b * c + ch) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
                xhat[off + i] = (xv[off + i] - mu[ch]) * inv_std[ch];
                out[off + i] = gamma[ch] * xhat[off + i] + beta[ch];
            }
        }

    auto nx = input.node(), ng = gamma.node(), nb = beta.node();
    return make_result<T>(
        "batchnorm", input.shape(), std::move(out), {nx, ng, nb},
        [nx, ng, nb, n, c, inner, count, training, inv_std = std::move(inv_std),
         xhat = std::move(xhat)](const Node<T>& self) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                T sum_g = 0, sum_gx = 0;
                for (std::int64_t b = 0; b < n; ++b) {
                    const std::int64_t off = (b * c + ch) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) {
                        sum_g += self.grad[off + i];
                        sum_gx += self.grad[off + i] * xhat[off + i];
                    }
                }
                if (ng->requires_grad) ng->grad_buffer()[ch] += sum_gx;
                if (nb->requires_grad) nb->grad_buffer()[ch] += sum_g;
                if (!nx->requires_grad) continue;
                auto& gx = nx->grad_buffer();
                const T gm = ng->value[ch];
                const T scale = gm * inv_std[ch];
                const T inv_count = T(1) / static_cast<T>(count);
                for (std::int64_t b = 0; b < n; ++b) {
                    const std::int64_t off = (b * c + ch) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) {
                        if (training)
                            gx[off + i] += scale * (self.grad[off + i] - inv_count * sum_g -
                                                    xhat[off + i] * inv_count * sum_gx);
                        else
                            gx[off + i] += scale * self.grad[off + i];
                    }
                }
            }
        });
}

// Corner-aligned trilinear resize of the spatial axes of [N,C,D,H,W].
template <typename T>
Tensor<T> trilinear_resize(const Tensor<T>& input, const Extents3& target) {
    detail::require_rank5(input, "trilinear_resize");
    for (auto e : target)
        if (e <= 0) throw ShapeError("trilinear_resize: target extents must be positive");
    const std::int64_t outer = input.dim(0) * input.dim(1);
    const std::int64_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
    const auto [nd, nh, nw] = target;
    std::vector<T> in(input.values().begin(), input.values().end());
    auto out = resample::trilinear(in, outer, d, h, w, nd, nh, nw);

    auto nx = input.node();
    return make_result<T>("trilinear_resize", Shape{input.dim(0), input.dim(1), nd, nh, nw}, std::move(out), {nx},
                          [nx, outer, d, h, w, nd, nh, nw](const Node<T>& self) {
                              std::vector<T> gb(static_cast<std::size_t>(outer * nd * nh * w), T(0));
                              resample::resize_axis_adjoint(self.grad.data(), gb.data(), outer * nd * nh, w, 1, nw);
                              std::vector<T> ga(static_cast<std::size_t>(outer * nd * h * w), T(0));
                              resample::resize_axis_adjoint(gb.data(), ga.data(), outer * nd, h, w, nh);
                              resample::resize_axis_adjoint(ga.data(), nx->grad_buffer().data(), outer, d, h * w,
                                                            nd);
                          });
}

// Spatial mean per channel: [N,C,...] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() < 3) throw ShapeError("global_avg_pool: expected [N,C,spatial...]");
    const std::int64_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
    std::vector<T> out(static_cast<std::size_t>(n * c));
    auto xv = x.values();
    for (std::int64_t i = 0; i < n * c; ++i) {
        T s = 0;
        for (std::int64_t j = 0; j < inner; ++j) s += xv[i * inner + j];
        out[i] = s / static_cast<T>(inner);
    }
    auto nx = x.node();
    return make_result<T>("global_avg_pool", Shape{n, c}, std::move(out), {nx}, [nx, n, c, inner](const Node<T>& self) {
        auto& g = nx->grad_buffer();
        const T scale = T(1) / static_cast<T>(inner);
        for (std::int64_t i = 0; i < n * c; ++i)
            for (std::int64_t j = 0; j < inner; ++j) g[i * inner + j] += self.grad[i] * scale;
    });
}

// Mean of each channel map inside a per-sample binary mask.
// map [N,C,spatial...], mask [N,1,spatial...] -> [N,C]. The mask is a constant.
template <typename T>
Tensor<T> masked_mean_pool(const Tensor<T>& map, const Tensor<T>& mask) {
    if (map.rank() < 3 || mask.rank() != map.rank() || mask.dim(0) != map.dim(0) || mask.dim(1) != 1)
        throw ShapeError("masked_mean_pool: map " + to_string(map.shape()) + " vs mask " + to_string(mask.shape()));
    for (std::size_t i = 2; i < map.rank(); ++i)
        if (mask.dim(i) != map.dim(i))
            throw ShapeError("masked_mean_pool: spatial extents differ: " + to_string(map.shape()) + " vs " +
                             to_string(mask.shape()));
    const std::int64_t n = map.dim(0), c = map.dim(1), inner = map.numel() / (n * c);
    auto mv = mask.values(), xv = map.values();
    std::vector<T> mask_sum(static_cast<std::size_t>(n), T(0));
    for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t j = 0; j < inner; ++j) {
            const T m = mv[s * inner + j];
            if (m != T(0) && m != T(1)) throw std::invalid_argument("masked_mean_pool: mask must be binary");
            mask_sum[s] += m;
        }
        if (mask_sum[s] == T(0))
            throw std::invalid_argument("masked_mean_pool: empty mask for sample " + std::to_string(s) +
                                        " (no lung voxels)");
    }
    std::vector<T> out(static_cast<std::size_t>(n * c));
    for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T acc = 0;
            const T* x = xv.data() + (s * c + ch) * inner;
            const T* m = mv.data() + s * inner;
            for (std::int64_t j = 0; j < inner; ++j) acc += x[j] * m[j];
            out[s * c + ch] = acc / mask_sum[s];
        }
    auto nx = map.node(), nm = mask.node();
    return make_result<T>("masked_mean_pool", Shape{n, c}, std::move(out), {nx},
                          [nx, nm, n, c, inner, mask_sum = std::move(mask_sum)](const Node<T>& self) {
                              auto& g = nx->grad_buffer();
                              for (std::int64_t s = 0; s < n; ++s)
                                  for (std::int64_t ch = 0; ch < c; ++ch) {
                                      const T scale = self.grad[s * c + ch] / mask_sum[s];
                                      T* gx = g.data() + (s * c + ch) * inner;
                                      const T* m = nm->value.data() + s * inner;
                                      for (std::int64_t j = 0; j < inner; ++j) gx[j] += scale * m[j];
                                  }
                          });
}

}  // namespace dram
