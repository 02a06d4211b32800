#pragma once

// Training objectives for the two output heads.
//
// Regression head:  L = L_INT(centrilobular) + L_INT(paraseptal) + L_OL + L_SEG
// Classification head: dynamically weighted cross-entropy per subtype.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dram/mapping.hpp"
#include "dram/tensor.hpp"

namespace dram {

inline constexpr double kProbabilityFloor = 1e-7;

// Target involvement range (r_l, r_u) with K = (0.5 (r_l - r_u))^2.
class IntervalTarget {
   public:
    IntervalTarget(double lower, double upper) : lower_(lower), upper_(upper) {
        if (!(lower >= 0.0 && lower < upper && upper <= 1.0))
            throw std::invalid_argument("interval target requires 0 <= r_l < r_u <= 1, got (" +
                                        std::to_string(lower) + ", " + std::to_string(upper) + ")");
    }
    explicit IntervalTarget(const Interval& iv) : IntervalTarget(iv.lower, iv.upper) {}

    double lower() const { return lower_; }
    double upper() const { return upper_; }
    double midpoint() const { return 0.5 * (lower_ + upper_); }
    double k() const {
        const double half = 0.5 * (lower_ - upper_);
        return half * half;
    }

   private:
    double lower_;
    double upper_;
};

// Scalar form: max(0, (p - mid)^2 - K).
inline double interval_regression_loss(double p, const IntervalTarget& t) {
    const double d = p - t.midpoint();
    return std::max(0.0, d * d - t.k());
}

// Batched form over p with one entry per target; returns the batch mean.
template <typename T>
Tensor<T> interval_regression_loss(const Tensor<T>& p, const std::vector<IntervalTarget>& targets) {
    if (static_cast<std::size_t>(p.numel()) != targets.size())
        throw ShapeError("interval_regression_loss: " + std::to_string(p.numel()) + " predictions vs " +
                         std::to_string(targets.size()) + " targets");
    for (T v : p.values())
        if (!std::isfinite(static_cast<double>(v))) throw std::domain_error("interval_regression_loss: p not finite");
    const auto n = targets.size();
    double total = 0;
    std::vector<T> slope(n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(p[static_cast<std::int64_t>(i)]) - targets[i].midpoint();
        const double v = d * d - targets[i].k();
        if (v > 0) {
            total += v;
            slope[i] = static_cast<T>(2 * d / static_cast<double>(n));
        }
    }
    auto np = p.node();
    return make_result<T>("interval_regression_loss", Shape{1}, std::vector<T>{static_cast<T>(total / n)}, {np},
                          [np, slope = std::move(slope)](const Node<T>& self) {
                              auto& g = np->grad_buffer();
                              for (std::size_t i = 0; i < slope.size(); ++i) g[i] += self.grad[0] * slope[i];
                          });
}

// Soft Dice between the two dense maps, 2 sum(pc ps) / (sum pc + sum ps),
// per sample (leading axis) and averaged over the batch. Zero when both maps
// are identically zero.
template <typename T>
Tensor<T> overlapping_loss(const Tensor<T>& pc, const Tensor<T>& ps) {
    if (pc.shape() != ps.shape())
        throw ShapeError("overlapping_loss: extents differ " + to_string(pc.shape()) + " vs " + to_string(ps.shape()));
    const std::int64_t n = pc.dim(0), inner = pc.numel() / n;
    auto a = pc.values(), b = ps.values();
    std::vector<double> prod(n, 0.0), denom(n, 0.0);
    double total = 0;
    for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const auto k = s * inner + i;
            prod[s] += static_cast<double>(a[k]) * b[k];
            denom[s] += static_cast<double>(a[k]) + b[k];
        }
        if (denom[s] > 0) total += 2 * prod[s] / denom[s];
    }
    auto na = pc.node(), nb = ps.node();
    return make_result<T>(
        "overlapping_loss", Shape{1}, std::vector<T>{static_cast<T>(total / n)}, {na, nb},
        [na, nb, n, inner, prod = std::move(prod), denom = std::move(denom)](const Node<T>& self) {
            for (std::int64_t s = 0; s < n; ++s) {
                if (denom[s] <= 0) continue;
                const double scale = self.grad[0] / static_cast<double>(n);
                const double shared = -2 * prod[s] / (denom[s] * denom[s]);
                for (auto [mine, other] : {std::pair{na.get(), nb.get()}, std::pair{nb.get(), na.get()}}) {
                    if (!mine->requires_grad) continue;
                    auto& g = mine->grad_buffer();
                    for (std::int64_t i = 0; i < inner; ++i) {
                        const auto k = s * inner + i;
                        g[k] += static_cast<T>(scale * (2 * other->value[k] / denom[s] + shared));
                    }
                }
            }
        });
}

struct SegmentationOptions {
    double smoothing = 0.1;  // label smoothing s: t -> t (1 - s) + s / 2
    double weight = 1.0;     // overall multiplier w
};

// Binary cross-entropy between the clamped joint map p = clamp(pc + ps, 0, 1)
// and the smoothed pseudo-label; mean over all voxels.
template <typename T>
Tensor<T> segmentation_loss(const Tensor<T>& pc, const Tensor<T>& ps, const Tensor<T>& target,
                            SegmentationOptions opts = {}) {
    if (pc.shape() != ps.shape() || pc.shape() != target.shape())
        throw ShapeError("segmentation_loss: maps and target must share extents");
    if (!(opts.smoothing >= 0 && opts.smoothing < 1)) throw std::invalid_argument("segmentation_loss: s in [0,1)");
    if (!(opts.weight > 0)) throw std::invalid_argument("segmentation_loss: weight must be positive");
    auto tv = target.values();
    for (T t : tv)
        if (t != T(0) && t != T(1)) throw std::invalid_argument("segmentation_loss: target must be binary");

    const auto count = static_cast<std::size_t>(pc.numel());
    auto a = pc.values(), b = ps.values();
    std::vector<T> dldp(count);
    double total = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const double raw = static_cast<double>(a[i]) + b[i];
        const double p = std::clamp(raw, 0.0, 1.0);
        const double ts = tv[i] * (1 - opts.smoothing) + opts.smoothing / 2;
        const double q = p * ts + (1 - p) * (1 - ts);
        const bool floored = q < kProbabilityFloor;
        total += -opts.weight * std::log(floored ? kProbabilityFloor : q);
        const bool clamped = raw < 0.0 || raw > 1.0;
        dldp[i] = (floored || clamped) ? T(0) : static_cast<T>(-opts.weight * (2 * ts - 1) / q / count);
    }
    auto na = pc.node(), nb = ps.node();
    return make_result<T>("segmentation_loss", Shape{1}, std::vector<T>{static_cast<T>(total / count)}, {na, nb},
                          [na, nb, dldp = std::move(dldp)](const Node<T>& self) {
                              for (auto* n : {na.get(), nb.get()}) {
                                  if (!n->requires_grad) continue;
                                  auto& g = n->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * dldp[i];
                              }
                          });
}

template <typename T>
struct RegressionOutputs {
    Tensor<T> p_cle;    // [N,1] lung-averaged percentages
    Tensor<T> p_pse;
    Tensor<T> map_cle;  // [N,1,D,H,W] sigmoid maps
    Tensor<T> map_pse;
};

template <typename T>
struct RegressionTargets {
    std::vector<IntervalTarget> cle;
    std::vector<IntervalTarget> pse;
    Tensor<T> laa;  // binary pseudo-label at map resolution
};

template <typename T>
struct RegressionLoss {
    Tensor<T> total;
    double l_int_cle = 0;
    double l_int_pse = 0;
    double l_ol = 0;
    double l_seg = 0;
};

template <typename T>
RegressionLoss<T> combined_regression_loss(const RegressionOutputs<T>& out, const RegressionTargets<T>& targets,
                                           SegmentationOptions seg = {}) {
    auto int_c = interval_regression_loss(out.p_cle, targets.cle);
    auto int_s = interval_regression_loss(out.p_pse, targets.pse);
    auto ol = overlapping_loss(out.map_cle, out.map_pse);
    auto sg = segmentation_loss(out.map_cle, out.map_pse, targets.laa, seg);
    RegressionLoss<T> r{add(add(int_c, int_s), add(ol, sg))};
    r.l_int_cle = int_c.item();
    r.l_int_pse = int_s.item();
    r.l_ol = ol.item();
    r.l_seg = sg.item();
    return r;
}

// Positive per-class weights normalized to mean 1.
class ClassWeights {
   public:
    explicit ClassWeights(std::vector<double> w) : w_(std::move(w)) {
        if (w_.empty()) throw std::invalid_argument("class weights: no classes");
        for (double v : w_)
            if (!(v > 0) || !std::isfinite(v)) throw std::invalid_argument("class weights must be positive");
        normalize();
    }

    static ClassWeights uniform(int k) { return ClassWeights(std::vector<double>(static_cast<std::size_t>(k), 1.0)); }

    // Inverse class frequency; classes absent from the labels count as one.
    static ClassWeights inverse_frequency(const std::vector<int>& labels, int k) {
        std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
        for (int y : labels) {
            if (y < 0 || y >= k) throw std::out_of_range("class weights: label out of range");
            counts[static_cast<std::size_t>(y)] += 1;
        }
        for (auto& c : counts) c = 1.0 / std::max(c, 1.0);
        return ClassWeights(std::move(counts));
    }

    int size() const { return static_cast<int>(w_.size()); }
    double operator[](int c) const { return w_.at(static_cast<std::size_t>(c)); }
    const std::vector<double>& values() const { return w_; }

   private:
    void normalize() {
        double m = 0;
        for (double v : w_) m += v;
        m /= static_cast<double>(w_.size());
        for (double& v : w_) v /= m;
    }
    std::vector<double> w_;
};

// Epoch-end update: raw_c = 1 - acc_c + 0.1, blended as alpha old + (1 - alpha) raw,
// then renormalized to mean 1.
inline ClassWeights update_class_weights(const ClassWeights& old, const std::vector<double>& per_class_accuracy,
                                         double alpha = 0.7) {
    if (static_cast<int>(per_class_accuracy.size()) != old.size())
        throw std::invalid_argument("update_class_weights: accuracy vector size mismatch");
    std::vector<double> w(per_class_accuracy.size());
    for (std::size_t c = 0; c < w.size(); ++c) {
        const double acc = std::clamp(per_class_accuracy[c], 0.0, 1.0);
        w[c] = alpha * old[static_cast<int>(c)] + (1 - alpha) * (1 - acc + 0.1);
    }
    return ClassWeights(std::move(w));
}

// -w[y] log(max(p_y, floor)) averaged over the batch. probs: [N,K].
template <typename T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels, const ClassWeights& w) {
    if (probs.rank() != 2 || static_cast<std::size_t>(probs.dim(0)) != labels.size() || probs.dim(1) != w.size())
        throw ShapeError("weighted_cross_entropy: probs " + to_string(probs.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels and " + std::to_string(w.size()) + " classes");
    const std::int64_t n = probs.dim(0), k = probs.dim(1);
    double total = 0;
    std::vector<std::pair<std::int64_t, T>> picks;
    for (std::int64_t s = 0; s < n; ++s) {
        const int y = labels[static_cast<std::size_t>(s)];
        if (y < 0 || y >= k) throw std::out_of_range("weighted_cross_entropy: label " + std::to_string(y));
        const double p = probs[s * k + y];
        const bool floored = p < kProbabilityFloor;
        total += -w[y] * std::log(floored ? kProbabilityFloor : p);
        picks.emplace_back(s * k + y, floored ? T(0) : static_cast<T>(-w[y] / p / static_cast<double>(n)));
    }
    auto np = probs.node();
    return make_result<T>("weighted_cross_entropy", Shape{1}, std::vector<T>{static_cast<T>(total / n)}, {np},
                          [np, picks = std::move(picks)](const Node<T>& self) {
                              auto& g = np->grad_buffer();
                              for (auto [idx, d] : picks) g[idx] += self.grad[0] * d;
                          });
}

}  // namespace dram
