#pragma once

// Training loop: augmentation, Adam, exponential lr decay, validation-kappa
// early stopping, best-checkpoint retention.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dram/losses.hpp"
#include "dram/mapping.hpp"
#include "dram/metrics.hpp"
#include "dram/model.hpp"
#include "dram/preproc.hpp"
#include "dram/rng.hpp"

namespace dram {

struct AugmentConfig {
    bool flip = true;
    bool rotate = true;
    bool intensity = true;
    bool crop = true;
    bool smooth = true;
    bool noise = true;
    double flip_p = 0.5;       // per axis
    double rotate_p = 0.5;
    double rotate_degrees = 10;  // about each axis
    double intensity_p = 0.5;
    double intensity_shift = 0.05;
    double contrast_low = 0.9, contrast_high = 1.1;
    double crop_p = 0.5;
    double crop_keep = 0.9;  // minimum retained share per axis
    double smooth_p = 0.5;
    double smooth_sigma_max = 1.0;
    double noise_p = 0.5;
    double noise_sigma = 0.01;

    static AugmentConfig none() {
        AugmentConfig a;
        a.flip = a.rotate = a.intensity = a.crop = a.smooth = a.noise = false;
        return a;
    }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& a) {
    j = {{"flip", a.flip},
         {"rotate", a.rotate},
         {"intensity", a.intensity},
         {"crop", a.crop},
         {"smooth", a.smooth},
         {"noise", a.noise},
         {"flip_p", a.flip_p},
         {"rotate_p", a.rotate_p},
         {"rotate_degrees", a.rotate_degrees},
         {"intensity_p", a.intensity_p},
         {"intensity_shift", a.intensity_shift},
         {"contrast", {a.contrast_low, a.contrast_high}},
         {"crop_p", a.crop_p},
         {"crop_keep", a.crop_keep},
         {"smooth_p", a.smooth_p},
         {"smooth_sigma_max", a.smooth_sigma_max},
         {"noise_p", a.noise_p},
         {"noise_sigma", a.noise_sigma}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& a) {
    a = AugmentConfig{};
    a.flip = j.value("flip", a.flip);
    a.rotate = j.value("rotate", a.rotate);
    a.intensity = j.value("intensity", a.intensity);
    a.crop = j.value("crop", a.crop);
    a.smooth = j.value("smooth", a.smooth);
    a.noise = j.value("noise", a.noise);
    a.flip_p = j.value("flip_p", a.flip_p);
    a.rotate_p = j.value("rotate_p", a.rotate_p);
    a.rotate_degrees = j.value("rotate_degrees", a.rotate_degrees);
    a.intensity_p = j.value("intensity_p", a.intensity_p);
    a.intensity_shift = j.value("intensity_shift", a.intensity_shift);
    if (j.contains("contrast")) {
        a.contrast_low = j["contrast"].at(0).get<double>();
        a.contrast_high = j["contrast"].at(1).get<double>();
    }
    a.crop_p = j.value("crop_p", a.crop_p);
    a.crop_keep = j.value("crop_keep", a.crop_keep);
    a.smooth_p = j.value("smooth_p", a.smooth_p);
    a.smooth_sigma_max = j.value("smooth_sigma_max", a.smooth_sigma_max);
    a.noise_p = j.value("noise_p", a.noise_p);
    a.noise_sigma = j.value("noise_sigma", a.noise_sigma);
}

struct TrainConfig {
    int max_epochs = 200;
    double initial_lr = 1e-5;
    double lr_decay = 0.9;
    int patience = 10;
    int batch_size = 4;
    std::uint64_t seed = 0;
    HeadKind head = HeadKind::regression;
    AugmentConfig augment;
    SegmentationOptions segmentation;
    double class_weight_blend = 0.7;
    double min_improvement = 1e-6;

    void validate() const {
        if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
        if (patience < 1 || patience >= max_epochs)
            throw std::invalid_argument("train: patience must satisfy 1 <= patience < max_epochs");
        if (!(initial_lr > 0)) throw std::invalid_argument("train: initial_lr must be positive");
        if (!(lr_decay > 0 && lr_decay <= 1)) throw std::invalid_argument("train: lr_decay must lie in (0,1]");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (!(segmentation.smoothing >= 0 && segmentation.smoothing < 1) || !(segmentation.weight > 0))
            throw std::invalid_argument("train: invalid segmentation options");
        if (!(class_weight_blend >= 0 && class_weight_blend <= 1))
            throw std::invalid_argument("train: class_weight_blend must lie in [0,1]");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"max_epochs", c.max_epochs},
         {"initial_lr", c.initial_lr},
         {"lr_decay", c.lr_decay},
         {"patience", c.patience},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"head", to_string(c.head)},
         {"augment", c.augment},
         {"label_smoothing", c.segmentation.smoothing},
         {"segmentation_weight", c.segmentation.weight},
         {"class_weight_blend", c.class_weight_blend},
         {"min_improvement", c.min_improvement}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.initial_lr = j.value("initial_lr", c.initial_lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.patience = j.value("patience", c.patience);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("head")) c.head = parse_head(j.at("head").get<std::string>());
    if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
    c.segmentation.smoothing = j.value("label_smoothing", c.segmentation.smoothing);
    c.segmentation.weight = j.value("segmentation_weight", c.segmentation.weight);
    c.class_weight_blend = j.value("class_weight_blend", c.class_weight_blend);
    c.min_improvement = j.value("min_improvement", c.min_improvement);
}

inline double lr_at_epoch(const TrainConfig& c, int epoch) {
    if (epoch < 0) throw std::invalid_argument("lr_at_epoch: epoch must be >= 0");
    return c.initial_lr * std::pow(c.lr_decay, epoch);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& s, double lr) {
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
            s.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        }
    }
    if (s.m.size() != params.size()) throw std::invalid_argument("adam_step: parameter list changed");
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = s.m[k];
        auto& v = s.v[k];
        if (static_cast<std::int64_t>(m.size()) != params[k].numel())
            throw std::invalid_argument("adam_step: moment shape mismatch");
        auto theta = params[k].mutable_values();
        const auto g = params[k].grad();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
            m[i] = s.beta1 * m[i] + (1 - s.beta1) * gi;
            v[i] = s.beta2 * v[i] + (1 - s.beta2) * gi * gi;
            const double mh = m[i] / c1, vh = v[i] / c2;
            theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * mh / (std::sqrt(vh) + s.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation

namespace detail {

template <typename G>
G flip_field(const G& g, int axis) {
    G out = g;
    const auto [D, H, W] = g.dims;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                std::array<std::int64_t, 3> p{z, y, x};
                p[axis] = g.dims[axis] - 1 - p[axis];
                out.at(z, y, x) = g.at(p[0], p[1], p[2]);
            }
    return out;
}

// out(p) = in(R (p - c) + c), trilinear, zero outside.
inline RealField rotate_field(const RealField& f, const std::array<std::array<double, 3>, 3>& R) {
    RealField out(f.dims, f.spacing);
    const auto [D, H, W] = f.dims;
    const std::array<double, 3> c{(D - 1) / 2.0, (H - 1) / 2.0, (W - 1) / 2.0};
    auto sample = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        if (z < 0 || y < 0 || x < 0 || z >= D || y >= H || x >= W) return 0.0;
        return f.at(z, y, x);
    };
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const std::array<double, 3> d{z - c[0], y - c[1], x - c[2]};
                std::array<double, 3> s{};
                for (int a = 0; a < 3; ++a) s[a] = R[a][0] * d[0] + R[a][1] * d[1] + R[a][2] * d[2] + c[a];
                const auto z0 = static_cast<std::int64_t>(std::floor(s[0])), y0 = static_cast<std::int64_t>(std::floor(s[1])),
                           x0 = static_cast<std::int64_t>(std::floor(s[2]));
                const double fz = s[0] - z0, fy = s[1] - y0, fx = s[2] - x0;
                double v = 0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const double w = (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
                            if (w != 0) v += w * sample(z0 + dz, y0 + dy, x0 + dx);
                        }
                out.at(z, y, x) = v;
            }
    return out;
}

inline RealField to_real(const Mask& m) {
    RealField f(m.dims, m.spacing);
    for (std::size_t i = 0; i < m.values.size(); ++i) f.values[i] = m.values[i];
    return f;
}

inline Mask threshold(const RealField& f) {
    Mask m(f.dims, f.spacing);
    for (std::size_t i = 0; i < f.values.size(); ++i) m.values[i] = f.values[i] >= 0.5 ? 1 : 0;
    return m;
}

inline std::array<std::array<double, 3>, 3> rotation(double az, double ay, double ax) {
    auto mm = [](const std::array<std::array<double, 3>, 3>& a, const std::array<std::array<double, 3>, 3>& b) {
        std::array<std::array<double, 3>, 3> r{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
        return r;
    };
    const double cz = std::cos(az), sz = std::sin(az), cy = std::cos(ay), sy = std::sin(ay), cx = std::cos(ax),
                 sx = std::sin(ax);
    // rotation about axis 0 acts in the (1,2) plane, etc.
    const std::array<std::array<double, 3>, 3> r0{{{1, 0, 0}, {0, cz, -sz}, {0, sz, cz}}};
    const std::array<std::array<double, 3>, 3> r1{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
    const std::array<std::array<double, 3>, 3> r2{{{cx, -sx, 0}, {sx, cx, 0}, {0, 0, 1}}};
    return mm(mm(r0, r1), r2);
}

inline void gaussian_smooth(RealField& f, double sigma) {
    if (sigma <= 0) return;
    const int r = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double ks = 0;
    for (int i = -r; i <= r; ++i) ks += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& x : k) x /= ks;
    const auto dims = f.dims;
    for (int axis = 0; axis < 3; ++axis) {
        RealField out = f;
        for (std::int64_t z = 0; z < dims[0]; ++z)
            for (std::int64_t y = 0; y < dims[1]; ++y)
                for (std::int64_t x = 0; x < dims[2]; ++x) {
                    double acc = 0;
                    std::array<std::int64_t, 3> p{z, y, x};
                    const auto base = p[axis];
                    for (int i = -r; i <= r; ++i) {
                        p[axis] = std::clamp<std::int64_t>(base + i, 0, dims[axis] - 1);
                        acc += k[static_cast<std::size_t>(i + r)] * f.at(p[0], p[1], p[2]);
                    }
                    out.at(z, y, x) = acc;
                }
        f = std::move(out);
    }
}

// image = 0 outside lung, laa within lung, image in [0,1].
inline void enforce_case_invariants(PreprocessedCase& c) {
    for (std::size_t i = 0; i < c.image.values.size(); ++i) {
        if (!c.lung_mask.values[i]) {
            c.image.values[i] = 0;
            c.laa_label.values[i] = 0;
        } else {
            c.image.values[i] = std::clamp(c.image.values[i], 0.0, 1.0);
        }
    }
}

}  // namespace detail

inline PreprocessedCase flip_case(const PreprocessedCase& c, int axis) {
    return {detail::flip_field(c.image, axis), detail::flip_field(c.lung_mask, axis), detail::flip_field(c.laa_label, axis)};
}

inline PreprocessedCase augment(const PreprocessedCase& in, std::mt19937_64& rng, const AugmentConfig& a) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto coin = [&](double p) { return u(rng) < p; };
    PreprocessedCase c = in;
    bool spatial = false;
    if (a.flip)
        for (int axis = 0; axis < 3; ++axis)
            if (coin(a.flip_p)) c = flip_case(c, axis);
    if (a.rotate && coin(a.rotate_p)) {
        const double k = a.rotate_degrees * M_PI / 180.0;
        const auto R = detail::rotation((2 * u(rng) - 1) * k, (2 * u(rng) - 1) * k, (2 * u(rng) - 1) * k);
        c.image = detail::rotate_field(c.image, R);
        c.lung_mask = detail::threshold(detail::rotate_field(detail::to_real(c.lung_mask), R));
        c.laa_label = detail::threshold(detail::rotate_field(detail::to_real(c.laa_label), R));
        spatial = true;
    }
    if (a.crop && coin(a.crop_p)) {
        BoundingBox box{};
        for (int axis = 0; axis < 3; ++axis) {
            const auto n = c.image.dims[axis];
            const auto keep = std::max<std::int64_t>(
                1, static_cast<std::int64_t>(std::ceil(n * (a.crop_keep + (1 - a.crop_keep) * u(rng)))));
            const auto lo = static_cast<std::int64_t>(std::floor(u(rng) * static_cast<double>(n - keep + 1)));
            box.lo[axis] = std::min(lo, n - keep);
            box.hi[axis] = box.lo[axis] + keep;
        }
        const auto dims = c.image.dims;
        const auto spacing = c.image.spacing;
        c.image = resize(crop(c.image, box), dims);
        c.lung_mask = resize_binary(crop(c.lung_mask, box), dims);
        c.laa_label = resize_binary(crop(c.laa_label, box), dims);
        c.image.spacing = c.lung_mask.spacing = c.laa_label.spacing = spacing;
        spatial = true;
    }
    if (spatial) detail::enforce_case_invariants(c);
    if (a.intensity && coin(a.intensity_p)) {
        const double shift = (2 * u(rng) - 1) * a.intensity_shift;
        const double gain = a.contrast_low + (a.contrast_high - a.contrast_low) * u(rng);
        for (std::size_t i = 0; i < c.image.values.size(); ++i)
            if (c.lung_mask.values[i]) c.image.values[i] = c.image.values[i] * gain + shift;
    }
    if (a.smooth && coin(a.smooth_p)) detail::gaussian_smooth(c.image, a.smooth_sigma_max * u(rng));
    if (a.noise && coin(a.noise_p)) {
        std::normal_distribution<double> nd(0.0, a.noise_sigma);
        for (auto& v : c.image.values) v += nd(rng);
    }
    detail::enforce_case_invariants(c);
    return c;
}

// ---------------------------------------------------------------------------
// Data

struct LabeledCase {
    std::string id;
    std::shared_ptr<const PreprocessedCase> data;
    int cle_score = 0;
    int pse_score = 0;
};

template <typename T>
struct Batch {
    Tensor<T> image;
    Tensor<T> mask;
};

template <typename T>
Batch<T> make_batch(const std::vector<const PreprocessedCase*>& cases) {
    if (cases.empty()) throw std::invalid_argument("make_batch: empty batch");
    const auto e = cases[0]->extents();
    const std::int64_t inner = e[0] * e[1] * e[2];
    const auto n = static_cast<std::int64_t>(cases.size());
    std::vector<T> img(static_cast<std::size_t>(n * inner)), msk(img.size());
    for (std::int64_t b = 0; b < n; ++b) {
        const auto& c = *cases[static_cast<std::size_t>(b)];
        if (c.extents() != e) throw std::invalid_argument("make_batch: cases differ in extents");
        for (std::int64_t i = 0; i < inner; ++i) {
            img[static_cast<std::size_t>(b * inner + i)] = static_cast<T>(c.image.values[static_cast<std::size_t>(i)]);
            msk[static_cast<std::size_t>(b * inner + i)] = static_cast<T>(c.lung_mask.values[static_cast<std::size_t>(i)]);
        }
    }
    const Shape s{n, 1, e[0], e[1], e[2]};
    return {Tensor<T>(s, std::move(img)), Tensor<T>(s, std::move(msk))};
}

// LAA pseudo-labels brought to map resolution (trilinear + threshold).
template <typename T>
Tensor<T> laa_at(const std::vector<const PreprocessedCase*>& cases, const Dims3& extents) {
    const auto e = cases[0]->extents();
    const std::int64_t inner = e[0] * e[1] * e[2];
    const auto n = static_cast<std::int64_t>(cases.size());
    std::vector<T> v(static_cast<std::size_t>(n * inner));
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < inner; ++i)
            v[static_cast<std::size_t>(b * inner + i)] =
                static_cast<T>(cases[static_cast<std::size_t>(b)]->laa_label.values[static_cast<std::size_t>(i)]);
    return downsample_mask(Tensor<T>(Shape{n, 1, e[0], e[1], e[2]}, std::move(v)), extents);
}

struct Prediction {
    std::string id;
    HeadKind head = HeadKind::regression;
    double p_cle = 0, p_pse = 0;               // regression
    std::vector<double> probs_cle, probs_pse;  // classification
    int cle_score = 0, pse_score = 0;
};

inline int argmax(const std::vector<double>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Inference-mode predictions. `maps` receives the dense activation maps per
// case when non-null (regression: 2 maps; classification: 6+3 maps).
template <typename T>
std::vector<Prediction> predict(Model<T>& model, const std::vector<LabeledCase>& cases, int batch_size = 4,
                                std::vector<std::vector<RealField>>* maps = nullptr) {
    const auto& cfg = model.config();
    const auto de = model.plan().dense_extents;
    std::vector<Prediction> out;
    for (std::size_t start = 0; start < cases.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(cases.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<const PreprocessedCase*> ptrs;
        for (auto i = start; i < end; ++i) ptrs.push_back(cases[i].data.get());
        const auto batch = make_batch<T>(ptrs);
        const auto o = model.forward(batch.image, batch.mask, false);
        const std::int64_t inner = de[0] * de[1] * de[2];
        for (auto i = start; i < end; ++i) {
            const auto b = static_cast<std::int64_t>(i - start);
            Prediction p;
            p.id = cases[i].id;
            p.head = cfg.head;
            std::vector<RealField> case_maps;
            auto grab = [&](const Tensor<T>& t, std::int64_t channels, std::int64_t ch) {
                RealField f(de, {1, 1, 1});
                for (std::int64_t k = 0; k < inner; ++k)
                    f.values[static_cast<std::size_t>(k)] = static_cast<double>(t[(b * channels + ch) * inner + k]);
                case_maps.push_back(std::move(f));
            };
            if (cfg.head == HeadKind::regression) {
                p.p_cle = static_cast<double>(o.p_cle[b]);
                p.p_pse = static_cast<double>(o.p_pse[b]);
                p.cle_score = ScoreScale::centrilobular().percentage_to_score(std::clamp(p.p_cle, 0.0, 1.0));
                p.pse_score = ScoreScale::paraseptal().percentage_to_score(std::clamp(p.p_pse, 0.0, 1.0));
                if (maps) {
                    grab(o.map_cle, 1, 0);
                    grab(o.map_pse, 1, 0);
                }
            } else {
                for (int k = 0; k < cfg.cle_classes; ++k) p.probs_cle.push_back(static_cast<double>(o.probs_cle[b * cfg.cle_classes + k]));
                for (int k = 0; k < cfg.pse_classes; ++k) p.probs_pse.push_back(static_cast<double>(o.probs_pse[b * cfg.pse_classes + k]));
                p.cle_score = argmax(p.probs_cle);
                p.pse_score = argmax(p.probs_pse);
                if (maps) {
                    for (int k = 0; k < cfg.cle_classes; ++k) grab(o.cam_cle, cfg.cle_classes, k);
                    for (int k = 0; k < cfg.pse_classes; ++k) grab(o.cam_pse, cfg.pse_classes, k);
                }
            }
            if (maps) maps->push_back(std::move(case_maps));
            out.push_back(std::move(p));
        }
    }
    return out;
}

// Linear weighted kappa per subtype; undefined kappa counts as 0.
inline std::array<double, 2> subtype_kappas(const std::vector<Prediction>& preds, const std::vector<LabeledCase>& cases) {
    std::vector<int> pc, vc, ps, vs;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        pc.push_back(preds[i].cle_score);
        vc.push_back(cases[i].cle_score);
        ps.push_back(preds[i].pse_score);
        vs.push_back(cases[i].pse_score);
    }
    const auto kc = linear_weighted_kappa(ConfusionMatrix::from_pairs(6, pc, vc));
    const auto ks = linear_weighted_kappa(ConfusionMatrix::from_pairs(3, ps, vs));
    return {kc.value_or(0.0), ks.value_or(0.0)};
}

// ---------------------------------------------------------------------------
// fit

class NonFiniteLossError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double l_int_cle = 0, l_int_pse = 0, l_ol = 0, l_seg = 0;
    double l_ce_cle = 0, l_ce_pse = 0;
    double total = 0;
    double kappa_cle = 0, kappa_pse = 0;
    double val_metric = 0;
    bool improved = false;
    double seconds = 0;
};

struct FitHooks {
    // Replaces the validation metric (epoch -> value); for testing.
    std::function<double(int)> validation_metric;
    // Called after every optimisation step with (epoch, step, total loss).
    std::function<void(int, int, double)> on_step;
    // Per-epoch progress line.
    std::function<void(const EpochRecord&)> on_epoch;
    // Overrides the loss computation with a scaled value; for testing the
    // non-finite guard.
    double loss_scale = 1.0;
};

struct FitResult {
    std::vector<EpochRecord> history;
    int best_epoch = -1;
    double best_metric = -std::numeric_limits<double>::infinity();
    int epochs_run = 0;
    bool stopped_early = false;
    ClassWeights cle_weights = ClassWeights::uniform(6);
    ClassWeights pse_weights = ClassWeights::uniform(3);
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_history_csv(const std::vector<EpochRecord>& h, const fs::path& path) {
    std::ofstream out(path);
    out << "epoch,lr,l_int_cle,l_int_pse,l_ol,l_seg,l_ce_cle,l_ce_pse,total,val_kappa_cle,val_kappa_pse,val_metric,"
           "improved\n";
    for (const auto& r : h)
        out << r.epoch << ',' << format_double(r.lr) << ',' << format_double(r.l_int_cle) << ','
            << format_double(r.l_int_pse) << ',' << format_double(r.l_ol) << ',' << format_double(r.l_seg) << ','
            << format_double(r.l_ce_cle) << ',' << format_double(r.l_ce_pse) << ',' << format_double(r.total) << ','
            << format_double(r.kappa_cle) << ',' << format_double(r.kappa_pse) << ',' << format_double(r.val_metric)
            << ',' << (r.improved ? 1 : 0) << '\n';
}

template <typename T>
double parameter_norm(const Model<T>& m) {
    double s = 0;
    for (const auto& p : m.parameters())
        for (auto v : p.values()) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

// Trains `model` in place. With a non-empty `out_dir`, writes
// history.csv, steps.csv and the best checkpoint (best.json/best.bin) there.
// On return the model holds the best-epoch weights.
template <typename T>
FitResult fit(Model<T>& model, const std::vector<LabeledCase>& train, const std::vector<LabeledCase>& valid,
              const TrainConfig& cfg, const fs::path& out_dir = {}, const FitHooks& hooks = {}) {
    cfg.validate();
    if (train.empty() || valid.empty()) throw std::invalid_argument("fit: train and valid splits must be nonempty");
    if (model.config().head != cfg.head) throw std::invalid_argument("fit: model head differs from training head");
    const bool cls = cfg.head == HeadKind::classification;
    const auto& cs = ScoreScale::centrilobular();
    const auto& ps = ScoreScale::paraseptal();

    FitResult res;
    if (cls) {
        std::vector<int> lc, lp;
        for (const auto& c : train) {
            lc.push_back(c.cle_score);
            lp.push_back(c.pse_score);
        }
        res.cle_weights = ClassWeights::inverse_frequency(lc, model.config().cle_classes);
        res.pse_weights = ClassWeights::inverse_frequency(lp, model.config().pse_classes);
    }

    std::ofstream steps;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        steps.open(out_dir / "steps.csv");
        steps << (cls ? "epoch,step,l_ce_cle,l_ce_pse,total\n" : "epoch,step,l_int_cle,l_int_pse,l_ol,l_seg,total\n");
    }

    auto params = model.parameters();
    AdamState adam;
    std::vector<Tensor<T>> best_values;
    std::vector<BatchNormState<T>> best_states;
    auto snapshot = [&] {
        best_values.clear();
        best_states.clear();
        for (const auto& p : params) best_values.push_back(p.detach());
        for (const auto& l : model.layers()) best_states.push_back(l.state);
    };
    int since_best = 0;
    const auto dense_extents = model.plan().dense_extents;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr_at_epoch(cfg, epoch);
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x100000 + static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        std::vector<int> train_pred_cle, train_pred_pse, train_true_cle, train_true_pse;
        int step = 0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++step) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<PreprocessedCase> augmented;
            augmented.reserve(end - start);
            for (auto k = start; k < end; ++k) {
                std::mt19937_64 rng(derive_seed(derive_seed(cfg.seed, 0x200000 + static_cast<std::uint64_t>(epoch)), k));
                augmented.push_back(augment(*train[order[k]].data, rng, cfg.augment));
            }
            std::vector<const PreprocessedCase*> ptrs;
            for (const auto& c : augmented) ptrs.push_back(&c);
            const auto batch = make_batch<T>(ptrs);

            model.zero_grad();
            const auto out = model.forward(batch.image, batch.mask, true);
            Tensor<T> loss;
            std::vector<double> terms;
            if (cls) {
                std::vector<int> yc, yp;
                for (auto k = start; k < end; ++k) {
                    yc.push_back(train[order[k]].cle_score);
                    yp.push_back(train[order[k]].pse_score);
                }
                const auto lc = weighted_cross_entropy(out.probs_cle, yc, res.cle_weights);
                const auto lp = weighted_cross_entropy(out.probs_pse, yp, res.pse_weights);
                loss = add(lc, lp);
                terms = {static_cast<double>(lc.item()), static_cast<double>(lp.item())};
                const auto n = static_cast<std::int64_t>(end - start);
                for (std::int64_t b = 0; b < n; ++b) {
                    std::vector<double> pc(6), pp(3);
                    for (int k = 0; k < 6; ++k) pc[static_cast<std::size_t>(k)] = static_cast<double>(out.probs_cle[b * 6 + k]);
                    for (int k = 0; k < 3; ++k) pp[static_cast<std::size_t>(k)] = static_cast<double>(out.probs_pse[b * 3 + k]);
                    train_pred_cle.push_back(argmax(pc));
                    train_pred_pse.push_back(argmax(pp));
                }
                train_true_cle.insert(train_true_cle.end(), yc.begin(), yc.end());
                train_true_pse.insert(train_true_pse.end(), yp.begin(), yp.end());
            } else {
                RegressionTargets<T> tg;
                for (auto k = start; k < end; ++k) {
                    const auto ic = cs.score_to_interval(train[order[k]].cle_score);
                    const auto ip = ps.score_to_interval(train[order[k]].pse_score);
                    tg.cle.emplace_back(ic.lower, ic.upper);
                    tg.pse.emplace_back(ip.lower, ip.upper);
                }
                tg.laa = laa_at<T>(ptrs, dense_extents);
                const auto r = combined_regression_loss<T>({out.p_cle, out.p_pse, out.map_cle, out.map_pse}, tg,
                                                           cfg.segmentation);
                loss = r.total;
                terms = {r.l_int_cle, r.l_int_pse, r.l_ol, r.l_seg};
            }
            if (hooks.loss_scale != 1.0) loss = scale(loss, static_cast<T>(hooks.loss_scale));
            const double total = static_cast<double>(loss.item());
            if (!std::isfinite(total)) {
                nlohmann::json dump{{"epoch", epoch},
                                    {"step", step},
                                    {"lr", rec.lr},
                                    {"loss", format_double(total)},
                                    {"terms", terms},
                                    {"parameter_norm", parameter_norm(model)},
                                    {"adam_step", adam.step}};
                nlohmann::json ids = nlohmann::json::array();
                for (auto k = start; k < end; ++k) ids.push_back(train[order[k]].id);
                dump["cases"] = ids;
                if (!out_dir.empty()) std::ofstream(out_dir / "nonfinite_state.json") << dump.dump(2) << '\n';
                throw NonFiniteLossError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                         std::to_string(step) + ": " + dump.dump());
            }
            loss.backward();
            adam_step(params, adam, rec.lr);

            const double w = static_cast<double>(end - start);
            seen += end - start;
            if (cls) {
                rec.l_ce_cle += terms[0] * w;
                rec.l_ce_pse += terms[1] * w;
            } else {
                rec.l_int_cle += terms[0] * w;
                rec.l_int_pse += terms[1] * w;
                rec.l_ol += terms[2] * w;
                rec.l_seg += terms[3] * w;
            }
            rec.total += total * w;
            if (steps.is_open()) {
                steps << epoch << ',' << step;
                for (double t : terms) steps << ',' << format_double(t);
                steps << ',' << format_double(total) << '\n';
            }
            if (hooks.on_step) hooks.on_step(epoch, step, total);
        }
        const double n = static_cast<double>(seen);
        for (double* f : {&rec.l_int_cle, &rec.l_int_pse, &rec.l_ol, &rec.l_seg, &rec.l_ce_cle, &rec.l_ce_pse, &rec.total})
            *f /= n;

        if (cls) {
            auto per_class = [](const std::vector<int>& pred, const std::vector<int>& truth, int k) {
                std::vector<double> hit(static_cast<std::size_t>(k), 0), cnt(static_cast<std::size_t>(k), 0);
                for (std::size_t i = 0; i < pred.size(); ++i) {
                    cnt[static_cast<std::size_t>(truth[i])] += 1;
                    hit[static_cast<std::size_t>(truth[i])] += pred[i] == truth[i];
                }
                std::vector<double> acc(static_cast<std::size_t>(k));
                for (int c = 0; c < k; ++c)
                    acc[static_cast<std::size_t>(c)] = cnt[static_cast<std::size_t>(c)] > 0
                                                           ? hit[static_cast<std::size_t>(c)] / cnt[static_cast<std::size_t>(c)]
                                                           : 1.0;
                return acc;
            };
            res.cle_weights = update_class_weights(res.cle_weights, per_class(train_pred_cle, train_true_cle, 6),
                                                   cfg.class_weight_blend);
            res.pse_weights = update_class_weights(res.pse_weights, per_class(train_pred_pse, train_true_pse, 3),
                                                   cfg.class_weight_blend);
        }

        if (hooks.validation_metric) {
            rec.val_metric = hooks.validation_metric(epoch);
        } else {
            const auto preds = predict(model, valid, cfg.batch_size);
            const auto k = subtype_kappas(preds, valid);
            rec.kappa_cle = k[0];
            rec.kappa_pse = k[1];
            rec.val_metric = 0.5 * (k[0] + k[1]);
        }
        rec.improved = res.best_epoch < 0 || rec.val_metric >= res.best_metric + cfg.min_improvement;
        if (rec.improved) {
            res.best_epoch = epoch;
            res.best_metric = rec.val_metric;
            since_best = 0;
            snapshot();
            if (!out_dir.empty())
                save_checkpoint(model, out_dir / "best",
                                {{"epoch", epoch}, {"val_metric", rec.val_metric}, {"train", cfg}});
        } else {
            ++since_best;
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.history.push_back(rec);
        res.epochs_run = epoch + 1;
        if (!out_dir.empty()) write_history_csv(res.history, out_dir / "history.csv");
        if (hooks.on_epoch) hooks.on_epoch(rec);
        if (since_best >= cfg.patience) {
            res.stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].mutable_values();
        const auto src = best_values[i].values();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    for (std::size_t i = 0; i < model.layers().size(); ++i) model.layers()[i].state = best_states[i];
    return res;
}

}  // namespace dram
