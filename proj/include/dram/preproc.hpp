#pragma once

// Raw HU volume + lung mask -> fixed-extent network input and LAA-950 label.

#include <algorithm>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dram/resample.hpp"
#include "dram/volio.hpp"

namespace dram {

inline constexpr double kHuLow = -1150.0;
inline constexpr double kHuHigh = -300.0;
inline constexpr int kLaaThreshold = -950;

inline constexpr Dims3 kDeskExtents{32, 56, 72};
inline constexpr Dims3 kFullExtents{128, 224, 288};

struct PreprocessedCase {
    RealField image;  // [0,1], zero outside the lung
    Mask lung_mask;
    Mask laa_label;   // subset of lung_mask

    Dims3 extents() const { return image.dims; }
};

inline double clamp_rescale(double hu) { return (std::clamp(hu, kHuLow, kHuHigh) - kHuLow) / (kHuHigh - kHuLow); }

inline RealField clamp_rescale(const Volume& v) {
    v.validate();
    RealField out(v.dims, v.spacing);
    for (std::size_t i = 0; i < v.values.size(); ++i) out.values[i] = clamp_rescale(static_cast<double>(v.values[i]));
    return out;
}

// Strictly below -950 HU and inside the lung.
inline Mask laa950(const Volume& v, const Mask& m) {
    v.validate();
    m.validate();
    require_aligned(v.dims, m.dims, "laa950");
    require_binary(m);
    Mask out(v.dims, v.spacing);
    for (std::size_t i = 0; i < v.values.size(); ++i)
        out.values[i] = (m.values[i] != 0 && v.values[i] < kLaaThreshold) ? 1 : 0;
    return out;
}

struct BoundingBox {
    Dims3 lo;  // inclusive
    Dims3 hi;  // exclusive
    Dims3 extents() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
    bool operator==(const BoundingBox&) const = default;
};

inline BoundingBox bounding_box(const Mask& m) {
    m.validate();
    BoundingBox b{{m.dims[0], m.dims[1], m.dims[2]}, {0, 0, 0}};
    bool any = false;
    for (std::int64_t z = 0; z < m.dims[0]; ++z)
        for (std::int64_t y = 0; y < m.dims[1]; ++y)
            for (std::int64_t x = 0; x < m.dims[2]; ++x) {
                if (!m.at(z, y, x)) continue;
                any = true;
                const std::array<std::int64_t, 3> p{z, y, x};
                for (int a = 0; a < 3; ++a) {
                    b.lo[a] = std::min(b.lo[a], p[a]);
                    b.hi[a] = std::max(b.hi[a], p[a] + 1);
                }
            }
    if (!any) throw std::invalid_argument("crop_to_mask: mask is empty (no lung voxels)");
    return b;
}

template <typename T>
Grid<T> crop(const Grid<T>& g, const BoundingBox& b) {
    g.validate();
    for (int a = 0; a < 3; ++a)
        if (b.lo[a] < 0 || b.hi[a] > g.dims[a] || b.lo[a] >= b.hi[a])
            throw std::out_of_range("crop: bounding box outside field");
    Grid<T> out(b.extents(), g.spacing);
    for (std::int64_t z = 0; z < out.dims[0]; ++z)
        for (std::int64_t y = 0; y < out.dims[1]; ++y)
            for (std::int64_t x = 0; x < out.dims[2]; ++x) out.at(z, y, x) = g.at(z + b.lo[0], y + b.lo[1], x + b.lo[2]);
    return out;
}

template <typename T>
std::pair<Grid<T>, Mask> crop_to_mask(const Grid<T>& field, const Mask& mask) {
    require_aligned(field.dims, mask.dims, "crop_to_mask");
    const auto box = bounding_box(mask);
    return {crop(field, box), crop(mask, box)};
}

// Spacing scales so the physical extent is kept.
inline Spacing3 resized_spacing(const Dims3& from, const Spacing3& s, const Dims3& to) {
    Spacing3 out;
    for (int a = 0; a < 3; ++a) out[a] = s[a] * static_cast<double>(from[a]) / static_cast<double>(to[a]);
    return out;
}

inline RealField resize(const RealField& f, const Dims3& to) {
    f.validate();
    RealField out;
    out.dims = to;
    out.spacing = resized_spacing(f.dims, f.spacing, to);
    out.values = resample::trilinear(f.values, 1, f.dims[0], f.dims[1], f.dims[2], to[0], to[1], to[2]);
    return out;
}

// Trilinear resize of a binary field, then threshold at 0.5.
inline Mask resize_binary(const Mask& m, const Dims3& to) {
    RealField f(m.dims, m.spacing);
    for (std::size_t i = 0; i < m.values.size(); ++i) f.values[i] = m.values[i];
    const auto r = resize(f, to);
    Mask out(to, r.spacing);
    for (std::size_t i = 0; i < r.values.size(); ++i) out.values[i] = r.values[i] >= 0.5 ? 1 : 0;
    return out;
}

// Post-rescale half of the pipeline: crop, resize, mask.
inline PreprocessedCase to_network_input(const RealField& rescaled, const Mask& mask, const Mask& laa,
                                         const Dims3& extents = kDeskExtents) {
    for (auto e : extents)
        if (e <= 0) throw std::invalid_argument("to_network_input: extents must be positive");
    require_aligned(rescaled.dims, mask.dims, "to_network_input");
    require_aligned(laa.dims, mask.dims, "to_network_input");
    require_binary(mask);
    require_binary(laa);
    const auto box = bounding_box(mask);
    PreprocessedCase pc;
    pc.image = resize(crop(rescaled, box), extents);
    pc.lung_mask = resize_binary(crop(mask, box), extents);
    pc.laa_label = resize_binary(crop(laa, box), extents);
    for (std::size_t i = 0; i < pc.image.values.size(); ++i) {
        if (!pc.lung_mask.values[i]) {
            pc.image.values[i] = 0.0;
            pc.laa_label.values[i] = 0;
        }
        pc.image.values[i] = std::clamp(pc.image.values[i], 0.0, 1.0);
    }
    return pc;
}

inline PreprocessedCase to_network_input(const Volume& v, const Mask& mask, const Dims3& extents = kDeskExtents) {
    require_aligned(v.dims, mask.dims, "to_network_input");
    return to_network_input(clamp_rescale(v), mask, laa950(v, mask), extents);
}

inline double laa_fraction(const Mask& laa, const Mask& lung) {
    require_aligned(laa.dims, lung.dims, "laa_fraction");
    std::int64_t a = 0, l = 0;
    for (std::size_t i = 0; i < lung.values.size(); ++i) {
        l += lung.values[i];
        a += lung.values[i] && laa.values[i];
    }
    if (l == 0) throw std::invalid_argument("laa_fraction: empty lung mask");
    return static_cast<double>(a) / static_cast<double>(l);
}

// Persistence as three grids: <stem>_image (float64), <stem>_mask, <stem>_laa.
inline void write_preprocessed(const PreprocessedCase& c, const fs::path& stem) {
    write_grid(c.image, stem.string() + "_image");
    write_mask(c.lung_mask, stem.string() + "_mask");
    write_mask(c.laa_label, stem.string() + "_laa");
}

inline PreprocessedCase read_preprocessed(const fs::path& image, const fs::path& mask, const fs::path& laa) {
    PreprocessedCase c;
    c.image = read_grid<double>(image);
    c.lung_mask = read_mask(mask);
    c.laa_label = read_mask(laa);
    require_aligned(c.image.dims, c.lung_mask.dims, "read_preprocessed");
    require_aligned(c.laa_label.dims, c.lung_mask.dims, "read_preprocessed");
    return c;
}

}  // namespace dram
