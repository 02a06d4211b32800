#pragma once

// File-level pipeline steps shared by the command-line tool and the
// acceptance harness: preprocessing a raw manifest, loading labelled
// splits, prediction CSVs and the evaluation report.

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dram/metrics.hpp"
#include "dram/phantom.hpp"
#include "dram/preproc.hpp"
#include "dram/trainer.hpp"
#include "dram/volio.hpp"

namespace dram {

// DRAM_THREADS: unset or empty means 1. Execution is single-threaded
// either way; the value is validated and recorded.
inline int requested_threads() {
    const char* v = std::getenv("DRAM_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) throw std::invalid_argument(std::string("DRAM_THREADS must be a positive integer, got '") + v + "'");
    return static_cast<int>(n);
}

inline Dims3 parse_extents(const std::string& s) {
    Dims3 e{};
    std::stringstream ss(s);
    std::string cell;
    int k = 0;
    while (std::getline(ss, cell, ',')) {
        if (k == 3) throw std::invalid_argument("extents: expected D,H,W, got '" + s + "'");
        std::size_t used = 0;
        long long v = 0;
        try {
            v = std::stoll(cell, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != cell.size() || cell.empty() || v < 1)
            throw std::invalid_argument("extents: bad component '" + cell + "' in '" + s + "'");
        e[k++] = v;
    }
    if (k != 3) throw std::invalid_argument("extents: expected D,H,W, got '" + s + "'");
    return e;
}

// ---------------------------------------------------------------------------
// preprocess

struct SkippedCase {
    std::string id;
    std::string reason;
};

struct PreprocessSummary {
    Manifest manifest;  // preprocessed rows
    std::vector<SkippedCase> skipped;
};

inline nlohmann::json to_json(const PreprocessSummary& s, const Dims3& extents) {
    nlohmann::json sk = nlohmann::json::array();
    for (const auto& c : s.skipped) sk.push_back({{"id", c.id}, {"reason", c.reason}});
    return {{"extents", extents}, {"processed", s.manifest.rows.size()}, {"skipped", sk}};
}

// Writes <out>/cases/<id>_{image,mask,laa} and <out>/manifest.csv.
// Cases with an empty lung mask are skipped and reported.
template <typename Log>
PreprocessSummary preprocess_manifest(const fs::path& raw_manifest, const fs::path& out, const Dims3& extents, Log&& log) {
    const auto raw = read_manifest(raw_manifest);
    if (raw.preprocessed) throw VolioError(raw_manifest.string() + " is already a preprocessed manifest");
    PreprocessSummary s;
    s.manifest.preprocessed = true;
    for (const auto& r : raw.rows) {
        const auto v = read_volume(r.volume);
        const auto m = read_mask(r.mask);
        std::int64_t lung = 0;
        for (auto x : m.values) lung += x;
        if (lung == 0) {
            s.skipped.push_back({r.id, "empty lung mask"});
            log("skip " + r.id + ": empty lung mask");
            continue;
        }
        const auto pc = to_network_input(v, m, extents);
        const auto stem = out / "cases" / r.id;
        write_preprocessed(pc, stem);
        ManifestRow row = r;
        row.volume = stem.string() + "_image";
        row.mask = stem.string() + "_mask";
        row.laa = stem.string() + "_laa";
        s.manifest.rows.push_back(row);
    }
    write_manifest(s.manifest, out / "manifest.csv");
    return s;
}

// ---------------------------------------------------------------------------
// loading

inline std::vector<LabeledCase> load_cases(const Manifest& m, std::optional<Split> split = std::nullopt) {
    if (!m.preprocessed) throw VolioError("expected a preprocessed manifest (run preprocess first)");
    std::vector<LabeledCase> out;
    for (const auto& r : m.rows) {
        if (split && r.split != *split) continue;
        LabeledCase c;
        c.id = r.id;
        c.data = std::make_shared<PreprocessedCase>(read_preprocessed(r.volume, r.mask, r.laa));
        c.cle_score = r.cle_score;
        c.pse_score = r.pse_score;
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// predictions

inline void write_predictions_csv(const std::vector<Prediction>& preds, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "id,head,p_cle,p_pse,cle_score,pse_score";
    for (int k = 0; k < 6; ++k) out << ",prob_cle_" << k;
    for (int k = 0; k < 3; ++k) out << ",prob_pse_" << k;
    out << '\n';
    for (const auto& p : preds) {
        const bool reg = p.head == HeadKind::regression;
        out << p.id << ',' << to_string(p.head) << ',' << (reg ? format_double(p.p_cle) : "") << ','
            << (reg ? format_double(p.p_pse) : "") << ',' << p.cle_score << ',' << p.pse_score;
        for (int k = 0; k < 6; ++k) out << ',' << (reg ? "" : format_double(p.probs_cle.at(static_cast<std::size_t>(k))));
        for (int k = 0; k < 3; ++k) out << ',' << (reg ? "" : format_double(p.probs_pse.at(static_cast<std::size_t>(k))));
        out << '\n';
    }
}

inline std::vector<Prediction> read_predictions_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open predictions " + path.string());
    std::string line;
    std::getline(in, line);
    std::vector<Prediction> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = detail::split_csv(line);
        if (f.size() != 15) throw ManifestError(lineno, "predictions: expected 15 fields, got " + std::to_string(f.size()));
        try {
            Prediction p;
            p.id = f[0];
            p.head = parse_head(f[1]);
            p.cle_score = std::stoi(f[4]);
            p.pse_score = std::stoi(f[5]);
            if (p.head == HeadKind::regression) {
                p.p_cle = std::stod(f[2]);
                p.p_pse = std::stod(f[3]);
            } else {
                for (int k = 0; k < 6; ++k) p.probs_cle.push_back(std::stod(f[static_cast<std::size_t>(6 + k)]));
                for (int k = 0; k < 3; ++k) p.probs_pse.push_back(std::stod(f[static_cast<std::size_t>(12 + k)]));
            }
            out.push_back(std::move(p));
        } catch (const std::logic_error& e) {
            throw ManifestError(lineno, std::string("predictions: ") + e.what());
        }
    }
    return out;
}

// Writes the dense maps of one case as float64 grids plus PGM montages of
// evenly spaced slices.
inline void export_case_maps(const std::string& id, HeadKind head, const std::vector<RealField>& maps, const fs::path& dir) {
    std::vector<std::string> names;
    if (head == HeadKind::regression) {
        names = {"map_cle", "map_pse"};
    } else {
        for (int k = 0; k < 6; ++k) names.push_back("cam_cle_" + std::to_string(k));
        for (int k = 0; k < 3; ++k) names.push_back("cam_pse_" + std::to_string(k));
    }
    if (names.size() != maps.size()) throw std::logic_error("export_case_maps: map count mismatch");
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto stem = dir / (id + "_" + names[i]);
        write_grid(maps[i], stem);
        const auto d = maps[i].dims[0];
        std::vector<std::int64_t> slices;
        for (int t = 1; t <= 4; ++t) slices.push_back(std::min<std::int64_t>(d - 1, t * d / 5));
        slices.erase(std::unique(slices.begin(), slices.end()), slices.end());
        RealField shown = maps[i];
        if (head == HeadKind::classification) {
            // class activation maps are unbounded; rescale per map
            const auto [lo, hi] = std::minmax_element(shown.values.begin(), shown.values.end());
            const double a = *lo, span = *hi - *lo;
            for (auto& v : shown.values) v = span > 0 ? (v - a) / span : 0.0;
        }
        export_montage(shown, slices, stem.string() + ".pgm");
    }
}

// ---------------------------------------------------------------------------
// evaluation

struct Evaluation {
    SubtypeReport cle{"centrilobular", ConfusionMatrix(6), std::nullopt};
    SubtypeReport pse{"paraseptal", ConfusionMatrix(3), std::nullopt};
    std::optional<double> mae_cle, mae_pse;  // against phantom truth, regression only
    std::size_t n = 0;
};

struct EvaluateOptions {
    int bootstrap = 0;  // resamples; 0 disables the CI
    std::uint64_t seed = 0;
    const std::map<std::string, PhantomTruth>* truth = nullptr;
};

// Joins predictions to labelled rows by id. Every row must have a
// prediction; unknown prediction ids are an error as well.
inline Evaluation evaluate(const std::vector<Prediction>& preds, const std::vector<ManifestRow>& rows,
                           const EvaluateOptions& opt = {}) {
    std::map<std::string, const Prediction*> by_id;
    for (const auto& p : preds)
        if (!by_id.emplace(p.id, &p).second) throw std::runtime_error("evaluate: duplicate prediction for " + p.id);
    std::vector<std::string> missing;
    std::set<std::string> wanted;
    for (const auto& r : rows) {
        wanted.insert(r.id);
        if (!by_id.count(r.id)) missing.push_back(r.id);
    }
    std::vector<std::string> unknown;
    for (const auto& [id, p] : by_id)
        if (!wanted.count(id)) unknown.push_back(id);
    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
        return s;
    };
    if (!missing.empty()) throw std::runtime_error("evaluate: no prediction for case(s): " + join(missing));
    if (!unknown.empty()) throw std::runtime_error("evaluate: predictions for unlisted case(s): " + join(unknown));
    if (rows.empty()) throw std::runtime_error("evaluate: no cases selected");

    std::vector<int> pc, vc, ps, vs;
    double ec = 0, es = 0;
    bool have_truth = opt.truth != nullptr;
    for (const auto& r : rows) {
        const auto& p = *by_id.at(r.id);
        pc.push_back(p.cle_score);
        vc.push_back(r.cle_score);
        ps.push_back(p.pse_score);
        vs.push_back(r.pse_score);
        if (have_truth && p.head == HeadKind::regression) {
            const auto it = opt.truth->find(r.id);
            if (it == opt.truth->end()) throw std::runtime_error("evaluate: no truth for " + r.id);
            ec += std::abs(p.p_cle - it->second.cle_fraction);
            es += std::abs(p.p_pse - it->second.pse_fraction);
        } else {
            have_truth = false;
        }
    }
    Evaluation e;
    e.n = rows.size();
    e.cle.matrix = ConfusionMatrix::from_pairs(6, pc, vc);
    e.pse.matrix = ConfusionMatrix::from_pairs(3, ps, vs);
    if (opt.bootstrap > 0) {
        BootstrapOptions b;
        b.resamples = opt.bootstrap;
        b.seed = opt.seed;
        e.cle.ci = kappa_ci(pc, vc, 6, b);
        b.seed = derive_seed(opt.seed, 1);
        e.pse.ci = kappa_ci(ps, vs, 3, b);
    }
    if (have_truth) {
        e.mae_cle = ec / static_cast<double>(rows.size());
        e.mae_pse = es / static_cast<double>(rows.size());
    }
    return e;
}

inline nlohmann::json to_json(const Evaluation& e) {
    nlohmann::json j{{"n", e.n}, {"centrilobular", metrics_json(e.cle)}, {"paraseptal", metrics_json(e.pse)}};
    if (e.mae_cle) {
        j["centrilobular"]["percentage_mae"] = *e.mae_cle;
        j["paraseptal"]["percentage_mae"] = *e.mae_pse;
    }
    return j;
}

}  // namespace dram
