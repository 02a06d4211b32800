#pragma once

// Synthetic pseudo-CT cases with exactly known emphysema involvement.
//
// Two ellipsoidal lungs of noisy parenchyma. Centrilobular lesions are balls
// kept deeper than the subpleural band; paraseptal lesions are shell patches
// inside that band. Both are filled with emphysema-density voxels, so the two
// regions are disjoint by construction.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dram/mapping.hpp"
#include "dram/rng.hpp"
#include "dram/volio.hpp"

namespace dram {

struct Ellipsoid {
    std::array<double, 3> center;  // fractions of the extents
    std::array<double, 3> radii;   // fractions of the extents
};

struct PhantomSpec {
    Dims3 extents{36, 60, 80};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::array<Ellipsoid, 2> lungs{{{{0.5, 0.5, 0.27}, {0.44, 0.42, 0.22}}, {{0.5, 0.5, 0.73}, {0.44, 0.42, 0.22}}}};
    double parenchyma_mean = -850, parenchyma_sd = 30;
    double emphysema_mean = -980, emphysema_sd = 15;
    double tissue_mean = 40, tissue_sd = 20;

    // Centrilobular balls: either `blob_count` balls (>= 0) or packing up to
    // `target_cle` of the lung voxels.
    int blob_count = -1;
    double target_cle = 0.0;
    double blob_radius_min = 1.5, blob_radius_max = 3.5;

    // Paraseptal shells: subpleural patches `shell_thickness` voxels deep.
    int shell_count = -1;
    double target_pse = 0.0;
    int shell_thickness = 2;
    double patch_radius_min = 3.0, patch_radius_max = 7.0;
    double max_arc_fraction = 0.6;  // share of the subpleural band shells may cover

    std::uint64_t seed = 0;

    void validate() const {
        for (auto e : extents)
            if (e < 3) throw std::invalid_argument("phantom: extents must be >= 3");
        for (auto s : spacing)
            if (!(s > 0)) throw std::invalid_argument("phantom: spacing must be positive");
        if (!(emphysema_mean < -950 && -950 < parenchyma_mean))
            throw std::invalid_argument("phantom: need emphysema mean < -950 < parenchyma mean");
        if (parenchyma_sd < 0 || emphysema_sd < 0 || tissue_sd < 0)
            throw std::invalid_argument("phantom: noise sd must be non-negative");
        if (target_cle < 0 || target_pse < 0 || target_cle + target_pse > 1)
            throw std::invalid_argument("phantom: target fractions must be non-negative and sum to <= 1");
        if (!(blob_radius_min > 0 && blob_radius_min <= blob_radius_max))
            throw std::invalid_argument("phantom: bad blob radius range");
        if (!(patch_radius_min > 0 && patch_radius_min <= patch_radius_max))
            throw std::invalid_argument("phantom: bad patch radius range");
        if (shell_thickness < 1 || shell_thickness > 2)
            throw std::invalid_argument("phantom: shell thickness must be 1 or 2 voxels");
        if (!(max_arc_fraction > 0 && max_arc_fraction <= 1))
            throw std::invalid_argument("phantom: arc fraction must lie in (0,1]");
        for (const auto& l : lungs)
            for (int a = 0; a < 3; ++a)
                if (!(l.radii[a] > 0)) throw std::invalid_argument("phantom: lung radii must be positive");
    }
};

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
    nlohmann::json lungs = nlohmann::json::array();
    for (const auto& l : s.lungs) lungs.push_back({{"center", l.center}, {"radii", l.radii}});
    j = {{"extents", s.extents},
         {"spacing", s.spacing},
         {"lungs", lungs},
         {"parenchyma_hu", {s.parenchyma_mean, s.parenchyma_sd}},
         {"emphysema_hu", {s.emphysema_mean, s.emphysema_sd}},
         {"tissue_hu", {s.tissue_mean, s.tissue_sd}},
         {"blob_count", s.blob_count},
         {"target_cle", s.target_cle},
         {"blob_radius", {s.blob_radius_min, s.blob_radius_max}},
         {"shell_count", s.shell_count},
         {"target_pse", s.target_pse},
         {"shell_thickness", s.shell_thickness},
         {"patch_radius", {s.patch_radius_min, s.patch_radius_max}},
         {"max_arc_fraction", s.max_arc_fraction},
         {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
    s = PhantomSpec{};
    auto pair = [&](const char* key, double& a, double& b) {
        if (j.contains(key)) {
            a = j.at(key).at(0).get<double>();
            b = j.at(key).at(1).get<double>();
        }
    };
    if (j.contains("extents")) s.extents = j.at("extents").get<Dims3>();
    if (j.contains("spacing")) s.spacing = j.at("spacing").get<Spacing3>();
    if (j.contains("lungs")) {
        const auto& l = j.at("lungs");
        if (l.size() != 2) throw std::invalid_argument("phantom spec: expected two lungs");
        for (std::size_t i = 0; i < 2; ++i) {
            s.lungs[i].center = l[i].at("center").get<std::array<double, 3>>();
            s.lungs[i].radii = l[i].at("radii").get<std::array<double, 3>>();
        }
    }
    pair("parenchyma_hu", s.parenchyma_mean, s.parenchyma_sd);
    pair("emphysema_hu", s.emphysema_mean, s.emphysema_sd);
    pair("tissue_hu", s.tissue_mean, s.tissue_sd);
    pair("blob_radius", s.blob_radius_min, s.blob_radius_max);
    pair("patch_radius", s.patch_radius_min, s.patch_radius_max);
    s.blob_count = j.value("blob_count", s.blob_count);
    s.target_cle = j.value("target_cle", s.target_cle);
    s.shell_count = j.value("shell_count", s.shell_count);
    s.target_pse = j.value("target_pse", s.target_pse);
    s.shell_thickness = j.value("shell_thickness", s.shell_thickness);
    s.max_arc_fraction = j.value("max_arc_fraction", s.max_arc_fraction);
    s.seed = j.value("seed", s.seed);
}

class PackingError : public std::runtime_error {
   public:
    PackingError(const std::string& what, double requested, double achieved)
        : std::runtime_error(what), requested_(requested), achieved_(achieved) {}
    double requested() const { return requested_; }
    double achieved() const { return achieved_; }

   private:
    double requested_;
    double achieved_;
};

struct PhantomTruth {
    std::int64_t lung_voxels = 0;
    std::int64_t cle_voxels = 0;
    std::int64_t pse_voxels = 0;
    double cle_fraction = 0;
    double pse_fraction = 0;
    int cle_score = 0;
    int pse_score = 0;
};

struct PhantomCase {
    Volume volume;
    Mask mask;
    Mask cle_region;
    Mask pse_region;
    PhantomTruth truth;
};

namespace detail {

// 6-connected distance (in voxels) from each lung voxel to the nearest
// non-lung voxel; the outside of the grid counts as non-lung. 0 outside.
inline std::vector<int> lung_depth(const Mask& m) {
    const auto [D, H, W] = m.dims;
    std::vector<int> depth(m.values.size(), 0);
    std::deque<std::size_t> q;
    const std::array<std::array<int, 3>, 6> nb{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const auto i = m.index(z, y, x);
                if (!m.values[i]) continue;
                bool surface = false;
                for (const auto& d : nb) {
                    const auto zz = z + d[0], yy = y + d[1], xx = x + d[2];
                    if (zz < 0 || yy < 0 || xx < 0 || zz >= D || yy >= H || xx >= W || !m.at(zz, yy, xx)) {
                        surface = true;
                        break;
                    }
                }
                if (surface) {
                    depth[i] = 1;
                    q.push_back(i);
                }
            }
    while (!q.empty()) {
        const auto i = q.front();
        q.pop_front();
        const auto z = static_cast<std::int64_t>(i) / (H * W), y = (static_cast<std::int64_t>(i) / W) % H,
                   x = static_cast<std::int64_t>(i) % W;
        for (const auto& d : nb) {
            const auto zz = z + d[0], yy = y + d[1], xx = x + d[2];
            if (zz < 0 || yy < 0 || xx < 0 || zz >= D || yy >= H || xx >= W) continue;
            const auto j = m.index(zz, yy, xx);
            if (m.values[j] && depth[j] == 0) {
                depth[j] = depth[i] + 1;
                q.push_back(j);
            }
        }
    }
    return depth;
}

// Grows lesions around random seeds drawn from not-yet-filled pool voxels.
// Each lesion takes eligible voxels within `radius` of its seed, nearest
// first; the final lesion is truncated so exactly `target` voxels are filled
// (or `count` lesions are placed when count >= 0).
template <typename Eligible>
std::int64_t pack(const Mask& lung, std::vector<std::uint8_t>& filled, const std::vector<std::size_t>& seeds_pool,
                  Eligible eligible, std::int64_t target, int count, double rmin, double rmax, std::mt19937_64& rng) {
    const auto [D, H, W] = lung.dims;
    std::uniform_real_distribution<double> radius(rmin, rmax);
    std::int64_t placed = 0;
    int lesions = 0;
    std::vector<std::size_t> open;
    auto refresh = [&] {
        open.clear();
        for (auto i : seeds_pool)
            if (!filled[i]) open.push_back(i);
    };
    refresh();
    while ((count >= 0 ? lesions < count : placed < target) && !open.empty()) {
        const auto seed = open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
        const double r = radius(rng);
        const auto cz = static_cast<std::int64_t>(seed) / (H * W), cy = (static_cast<std::int64_t>(seed) / W) % H,
                   cx = static_cast<std::int64_t>(seed) % W;
        const auto ri = static_cast<std::int64_t>(std::ceil(r));
        std::vector<std::pair<double, std::size_t>> ball;
        for (auto z = std::max<std::int64_t>(0, cz - ri); z <= std::min(D - 1, cz + ri); ++z)
            for (auto y = std::max<std::int64_t>(0, cy - ri); y <= std::min(H - 1, cy + ri); ++y)
                for (auto x = std::max<std::int64_t>(0, cx - ri); x <= std::min(W - 1, cx + ri); ++x) {
                    const double d2 = static_cast<double>((z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx));
                    const auto i = lung.index(z, y, x);
                    if (d2 <= r * r && !filled[i] && eligible(i)) ball.emplace_back(d2, i);
                }
        std::sort(ball.begin(), ball.end());
        for (const auto& [d2, i] : ball) {
            if (count < 0 && placed >= target) break;
            filled[i] = 1;
            ++placed;
        }
        ++lesions;
        refresh();
    }
    return placed;
}

}  // namespace detail

inline PhantomCase generate(const PhantomSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(derive_seed(spec.seed, 0));
    const auto [D, H, W] = spec.extents;
    PhantomCase pc;
    pc.mask = Mask(spec.extents, spec.spacing);
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const std::array<double, 3> p{(static_cast<double>(z) + 0.5) / static_cast<double>(D),
                                              (static_cast<double>(y) + 0.5) / static_cast<double>(H),
                                              (static_cast<double>(x) + 0.5) / static_cast<double>(W)};
                for (const auto& l : spec.lungs) {
                    double s = 0;
                    for (int a = 0; a < 3; ++a) s += std::pow((p[a] - l.center[a]) / l.radii[a], 2);
                    if (s <= 1.0) pc.mask.at(z, y, x) = 1;
                }
            }
    const auto depth = detail::lung_depth(pc.mask);
    const int band = spec.shell_thickness;  // subpleural band: depth <= 2 voxels at most

    std::vector<std::size_t> lung, interior, surface;
    std::int64_t band_voxels = 0;
    for (std::size_t i = 0; i < depth.size(); ++i) {
        if (!depth[i]) continue;
        lung.push_back(i);
        if (depth[i] > 2) interior.push_back(i);
        if (depth[i] == 1) surface.push_back(i);
        if (depth[i] <= band) ++band_voxels;
    }
    const auto L = static_cast<std::int64_t>(lung.size());
    if (L == 0) throw std::invalid_argument("phantom: lung geometry contains no voxels");

    std::vector<std::uint8_t> cle(pc.mask.values.size(), 0), pse(pc.mask.values.size(), 0);

    const auto cle_target = static_cast<std::int64_t>(std::llround(spec.target_cle * static_cast<double>(L)));
    if (spec.blob_count < 0 && cle_target > static_cast<std::int64_t>(interior.size()))
        throw PackingError("phantom: centrilobular fraction " + std::to_string(spec.target_cle) +
                               " unreachable; interior capacity is " +
                               std::to_string(static_cast<double>(interior.size()) / static_cast<double>(L)),
                           spec.target_cle, static_cast<double>(interior.size()) / static_cast<double>(L));
    const auto nc = detail::pack(
        pc.mask, cle, interior, [&](std::size_t i) { return depth[i] > 2; }, cle_target, spec.blob_count,
        spec.blob_radius_min, spec.blob_radius_max, rng);

    const auto pse_cap = static_cast<std::int64_t>(std::floor(spec.max_arc_fraction * static_cast<double>(band_voxels)));
    const auto pse_target = static_cast<std::int64_t>(std::llround(spec.target_pse * static_cast<double>(L)));
    if (spec.shell_count < 0 && pse_target > pse_cap)
        throw PackingError("phantom: paraseptal fraction " + std::to_string(spec.target_pse) +
                               " unreachable; subpleural capacity is " +
                               std::to_string(static_cast<double>(pse_cap) / static_cast<double>(L)),
                           spec.target_pse, static_cast<double>(pse_cap) / static_cast<double>(L));
    const auto ns = detail::pack(
        pc.mask, pse, surface, [&](std::size_t i) { return depth[i] >= 1 && depth[i] <= band; }, pse_target,
        spec.shell_count, spec.patch_radius_min, spec.patch_radius_max, rng);
    if (spec.blob_count < 0 && nc != cle_target)
        throw PackingError("phantom: centrilobular packing stalled", spec.target_cle,
                           static_cast<double>(nc) / static_cast<double>(L));
    if (spec.shell_count < 0 && ns != pse_target)
        throw PackingError("phantom: paraseptal packing stalled", spec.target_pse,
                           static_cast<double>(ns) / static_cast<double>(L));

    pc.volume = Volume(spec.extents, spec.spacing);
    pc.cle_region = Mask(spec.extents, spec.spacing);
    pc.pse_region = Mask(spec.extents, spec.spacing);
    std::normal_distribution<double> noise(0.0, 1.0);
    auto hu = [](double v) { return static_cast<std::int16_t>(std::clamp(std::lround(v), -32768L, 32767L)); };
    for (std::size_t i = 0; i < pc.volume.values.size(); ++i) {
        const double e = noise(rng);
        if (cle[i] || pse[i]) {
            pc.volume.values[i] = hu(spec.emphysema_mean + spec.emphysema_sd * e);
        } else if (pc.mask.values[i]) {
            pc.volume.values[i] = hu(spec.parenchyma_mean + spec.parenchyma_sd * e);
        } else {
            pc.volume.values[i] = hu(spec.tissue_mean + spec.tissue_sd * e);
        }
        pc.cle_region.values[i] = cle[i];
        pc.pse_region.values[i] = pse[i];
    }

    auto& t = pc.truth;
    t.lung_voxels = L;
    t.cle_voxels = nc;
    t.pse_voxels = ns;
    t.cle_fraction = static_cast<double>(nc) / static_cast<double>(L);
    t.pse_fraction = static_cast<double>(ns) / static_cast<double>(L);
    t.cle_score = ScoreScale::centrilobular().percentage_to_score(t.cle_fraction);
    t.pse_score = ScoreScale::paraseptal().percentage_to_score(t.pse_fraction);
    return pc;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetSpec {
    PhantomSpec base;
    double geometry_jitter = 0.06;  // relative jitter of lung radii and centres
    // Per-score sampling ranges for the target fraction. The open top
    // intervals are capped at what the geometry can hold.
    double cle_cap = 0.45;
    double pse_cap = 0.12;
    double interval_core = 0.6;  // targets drawn from the central share of each interval
    std::array<double, 3> split_fractions{0.6, 0.1, 0.3};
    std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const DatasetSpec& d) {
    j = {{"base", d.base},
         {"geometry_jitter", d.geometry_jitter},
         {"cle_cap", d.cle_cap},
         {"pse_cap", d.pse_cap},
         {"interval_core", d.interval_core},
         {"split_fractions", d.split_fractions},
         {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& d) {
    d = DatasetSpec{};
    if (j.contains("base")) d.base = j.at("base").get<PhantomSpec>();
    d.geometry_jitter = j.value("geometry_jitter", d.geometry_jitter);
    d.cle_cap = j.value("cle_cap", d.cle_cap);
    d.pse_cap = j.value("pse_cap", d.pse_cap);
    d.interval_core = j.value("interval_core", d.interval_core);
    if (j.contains("split_fractions")) d.split_fractions = j.at("split_fractions").get<std::array<double, 3>>();
    d.seed = j.value("seed", d.seed);
}

struct CaseRecord {
    std::string id;
    Split split;
    PhantomTruth truth;
};

struct DatasetReport {
    Manifest manifest;
    std::vector<CaseRecord> cases;
    // [split][score] counts
    std::array<std::array<int, 6>, 3> cle_counts{};
    std::array<std::array<int, 3>, 3> pse_counts{};
};

// Exact per-split counts by largest remainder.
inline std::array<int, 3> split_counts(int n, const std::array<double, 3>& f) {
    const double total = f[0] + f[1] + f[2];
    if (!(total > 0) || f[0] < 0 || f[1] < 0 || f[2] < 0) throw std::invalid_argument("split fractions invalid");
    std::array<int, 3> c{};
    std::array<double, 3> rem{};
    int used = 0;
    for (int s = 0; s < 3; ++s) {
        const double exact = n * f[s] / total;
        c[s] = static_cast<int>(std::floor(exact));
        rem[s] = exact - c[s];
        used += c[s];
    }
    while (used < n) {
        const auto s = static_cast<int>(std::max_element(rem.begin(), rem.end()) - rem.begin());
        ++c[s];
        rem[s] = -1;
        ++used;
    }
    return c;
}

// Interleaves split labels so every prefix stays close to the requested
// proportions; applied to stratum-sorted cases this stratifies the splits.
inline std::vector<Split> interleaved_splits(const std::array<int, 3>& counts) {
    const int n = counts[0] + counts[1] + counts[2];
    std::vector<Split> out;
    std::array<int, 3> used{};
    for (int i = 0; i < n; ++i) {
        int best = -1;
        double best_deficit = -1e300;
        for (int s = 0; s < 3; ++s) {
            if (used[s] >= counts[s]) continue;
            const double deficit = static_cast<double>(counts[s]) * (i + 1) / n - used[s];
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = s;
            }
        }
        ++used[best];
        out.push_back(static_cast<Split>(best));
    }
    return out;
}

inline double sample_fraction(const ScoreScale& scale, int score, double cap, double core, std::mt19937_64& rng) {
    const auto iv = scale.score_to_interval(score);
    const double hi = std::min(iv.upper, cap);
    const double w = hi - iv.lower;
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return iv.lower + w * ((1.0 - core) / 2 + core * u);
}

inline std::string case_id(int i) {
    std::ostringstream s;
    s << "case" << std::setw(4) << std::setfill('0') << i;
    return s.str();
}

// Writes <out>/cases/<id>{,_mask}.{json,raw}, manifest.csv, truth.csv,
// phantom_spec.json and score_distribution.json.
inline DatasetReport generate_dataset(int n, const DatasetSpec& ds, const fs::path& out) {
    if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
    const auto& cs = ScoreScale::centrilobular();
    const auto& ps = ScoreScale::paraseptal();

    // Balanced score plan: CLE and PSE scores cycle through their scales in
    // independently shuffled orders.
    std::mt19937_64 plan_rng(derive_seed(ds.seed, 0xdada));
    std::vector<int> cle_scores(n), pse_scores(n);
    for (int i = 0; i < n; ++i) {
        cle_scores[i] = i % cs.size();
        pse_scores[i] = i % ps.size();
    }
    std::shuffle(cle_scores.begin(), cle_scores.end(), plan_rng);
    std::shuffle(pse_scores.begin(), pse_scores.end(), plan_rng);

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), plan_rng);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return std::pair(cle_scores[a], pse_scores[a]) < std::pair(cle_scores[b], pse_scores[b]);
    });
    const auto labels = interleaved_splits(split_counts(n, ds.split_fractions));
    std::vector<Split> split(n);
    for (int k = 0; k < n; ++k) split[order[k]] = labels[k];

    fs::create_directories(out / "cases");
    DatasetReport rep;
    for (int i = 0; i < n; ++i) {
        const auto cs_seed = derive_seed(ds.seed, static_cast<std::uint64_t>(i) + 1);
        std::mt19937_64 rng(cs_seed);
        PhantomSpec spec = ds.base;
        spec.seed = cs_seed;
        std::uniform_real_distribution<double> jit(-ds.geometry_jitter, ds.geometry_jitter);
        for (auto& l : spec.lungs)
            for (int a = 0; a < 3; ++a) {
                l.radii[a] *= 1.0 + jit(rng);
                l.center[a] += 0.25 * jit(rng) * l.radii[a];
            }
        spec.blob_count = spec.shell_count = -1;
        spec.target_cle = sample_fraction(cs, cle_scores[i], ds.cle_cap, ds.interval_core, rng);
        spec.target_pse = sample_fraction(ps, pse_scores[i], ds.pse_cap, ds.interval_core, rng);
        const auto pc = generate(spec);

        const auto id = case_id(i);
        write_volume(pc.volume, out / "cases" / id);
        write_mask(pc.mask, out / "cases" / (id + "_mask"));
        rep.manifest.rows.push_back({id, out / "cases" / id, out / "cases" / (id + "_mask"), {}, pc.truth.cle_score,
                                     pc.truth.pse_score, split[i]});
        rep.cases.push_back({id, split[i], pc.truth});
        ++rep.cle_counts[static_cast<int>(split[i])][pc.truth.cle_score];
        ++rep.pse_counts[static_cast<int>(split[i])][pc.truth.pse_score];
    }
    write_manifest(rep.manifest, out / "manifest.csv");

    std::ofstream truth(out / "truth.csv");
    truth << "id,split,lung_voxels,cle_voxels,pse_voxels,cle_fraction,pse_fraction,cle_score,pse_score\n";
    truth << std::setprecision(17);
    for (const auto& c : rep.cases)
        truth << c.id << ',' << to_string(c.split) << ',' << c.truth.lung_voxels << ',' << c.truth.cle_voxels << ','
              << c.truth.pse_voxels << ',' << c.truth.cle_fraction << ',' << c.truth.pse_fraction << ','
              << c.truth.cle_score << ',' << c.truth.pse_score << '\n';

    std::ofstream(out / "phantom_spec.json") << nlohmann::json{{"n", n}, {"dataset", ds}}.dump(2) << '\n';
    nlohmann::json dist;
    for (int s = 0; s < 3; ++s) {
        dist[to_string(static_cast<Split>(s))] = {{"centrilobular", rep.cle_counts[s]},
                                                  {"paraseptal", rep.pse_counts[s]}};
    }
    std::ofstream(out / "score_distribution.json") << dist.dump(2) << '\n';
    return rep;
}

// Reads truth.csv written by generate_dataset, keyed by case id.
inline std::map<std::string, PhantomTruth> read_truth(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::map<std::string, PhantomTruth> out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = detail::split_csv(line);
        if (c.size() != 9) throw std::runtime_error(path.string() + ": malformed row");
        PhantomTruth t;
        t.lung_voxels = std::stoll(c[2]);
        t.cle_voxels = std::stoll(c[3]);
        t.pse_voxels = std::stoll(c[4]);
        t.cle_fraction = std::stod(c[5]);
        t.pse_fraction = std::stod(c[6]);
        t.cle_score = std::stoi(c[7]);
        t.pse_score = std::stoi(c[8]);
        out[c[0]] = t;
    }
    return out;
}

}  // namespace dram
