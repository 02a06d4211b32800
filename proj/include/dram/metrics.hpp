#pragma once

// Agreement statistics between predicted and visual ordinal scores.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dram/rng.hpp"

namespace dram {

// k x k counts; rows are predicted scores, columns visual scores.
class ConfusionMatrix {
   public:
    explicit ConfusionMatrix(int k) : k_(k), counts_(static_cast<std::size_t>(k) * k, 0) {
        if (k < 2) throw std::invalid_argument("confusion matrix needs k >= 2");
    }

    ConfusionMatrix(int k, std::vector<std::int64_t> row_major) : k_(k), counts_(std::move(row_major)) {
        if (k < 2) throw std::invalid_argument("confusion matrix needs k >= 2");
        if (counts_.size() != static_cast<std::size_t>(k) * k)
            throw std::invalid_argument("confusion matrix: expected " + std::to_string(k * k) + " counts");
        for (auto c : counts_)
            if (c < 0) throw std::invalid_argument("confusion matrix counts must be non-negative");
    }

    static ConfusionMatrix from_pairs(int k, const std::vector<int>& predicted, const std::vector<int>& visual) {
        if (predicted.size() != visual.size())
            throw std::invalid_argument("confusion matrix: prediction/label length mismatch");
        ConfusionMatrix cm(k);
        for (std::size_t i = 0; i < predicted.size(); ++i) cm.add(predicted[i], visual[i]);
        return cm;
    }

    void add(int predicted, int visual, std::int64_t n = 1) {
        if (predicted < 0 || predicted >= k_ || visual < 0 || visual >= k_)
            throw std::out_of_range("confusion matrix: score out of range");
        counts_[static_cast<std::size_t>(predicted * k_ + visual)] += n;
    }

    int k() const { return k_; }
    std::int64_t at(int predicted, int visual) const { return counts_[static_cast<std::size_t>(predicted * k_ + visual)]; }
    const std::vector<std::int64_t>& counts() const { return counts_; }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }
    std::int64_t row_sum(int i) const {
        std::int64_t t = 0;
        for (int j = 0; j < k_; ++j) t += at(i, j);
        return t;
    }
    std::int64_t col_sum(int j) const {
        std::int64_t t = 0;
        for (int i = 0; i < k_; ++i) t += at(i, j);
        return t;
    }
    std::int64_t trace() const {
        std::int64_t t = 0;
        for (int i = 0; i < k_; ++i) t += at(i, i);
        return t;
    }

    ConfusionMatrix transposed() const {
        ConfusionMatrix t(k_);
        for (int i = 0; i < k_; ++i)
            for (int j = 0; j < k_; ++j) t.counts_[static_cast<std::size_t>(j * k_ + i)] = at(i, j);
        return t;
    }

    // Expands the counts back into (predicted, visual) pairs.
    void to_pairs(std::vector<int>& predicted, std::vector<int>& visual) const {
        predicted.clear();
        visual.clear();
        for (int i = 0; i < k_; ++i)
            for (int j = 0; j < k_; ++j)
                for (std::int64_t c = 0; c < at(i, j); ++c) {
                    predicted.push_back(i);
                    visual.push_back(j);
                }
    }

   private:
    int k_;
    std::vector<std::int64_t> counts_;
};

namespace detail {
inline void require_nonempty(const ConfusionMatrix& cm) {
    if (cm.total() <= 0) throw std::invalid_argument("confusion matrix is empty");
}
}  // namespace detail

inline double accuracy(const ConfusionMatrix& cm) {
    detail::require_nonempty(cm);
    return static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
}

struct ClassPR {
    double precision = 0;
    double recall = 0;
    bool precision_defined = true;  // false when nothing was predicted as this class
    bool recall_defined = true;     // false when no visual score of this class exists
};

inline std::vector<ClassPR> per_class_pr(const ConfusionMatrix& cm) {
    detail::require_nonempty(cm);
    std::vector<ClassPR> out(static_cast<std::size_t>(cm.k()));
    for (int c = 0; c < cm.k(); ++c) {
        const auto row = cm.row_sum(c), col = cm.col_sum(c);
        auto& pr = out[static_cast<std::size_t>(c)];
        pr.precision_defined = row > 0;
        pr.recall_defined = col > 0;
        pr.precision = row > 0 ? static_cast<double>(cm.at(c, c)) / static_cast<double>(row) : 0.0;
        pr.recall = col > 0 ? static_cast<double>(cm.at(c, c)) / static_cast<double>(col) : 0.0;
    }
    return out;
}

// Unweighted mean of per-class F1; a class with P + R = 0 contributes 0.
inline double macro_f1(const ConfusionMatrix& cm) {
    double total = 0;
    for (const auto& pr : per_class_pr(cm))
        total += (pr.precision + pr.recall) > 0 ? 2 * pr.precision * pr.recall / (pr.precision + pr.recall) : 0.0;
    return total / cm.k();
}

// Linear weighted kappa with weights 1 - |i-j|/(k-1). Returns nullopt when
// the chance-agreement term leaves no room (1 - Pe == 0) without perfect
// observed agreement.
inline std::optional<double> linear_weighted_kappa(const ConfusionMatrix& cm) {
    detail::require_nonempty(cm);
    const int k = cm.k();
    const double n = static_cast<double>(cm.total());
    std::vector<double> rows(k), cols(k);
    for (int i = 0; i < k; ++i) {
        rows[i] = static_cast<double>(cm.row_sum(i)) / n;
        cols[i] = static_cast<double>(cm.col_sum(i)) / n;
    }
    double po = 0, pe = 0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            const double w = 1.0 - std::abs(i - j) / static_cast<double>(k - 1);
            po += w * static_cast<double>(cm.at(i, j)) / n;
            pe += w * rows[i] * cols[j];
        }
    const double denom = 1.0 - pe;
    if (std::abs(denom) < 1e-15) {
        if (std::abs(1.0 - po) < 1e-15) return 1.0;
        return std::nullopt;
    }
    return (po - pe) / denom;
}

struct KappaInterval {
    double low;
    double high;
};

struct BootstrapOptions {
    double level = 0.95;
    int resamples = 2000;
    std::uint64_t seed = 0;
};

// Percentile bootstrap over subjects. Resample r draws from its own stream
// derived from (seed, r), so resamples are order-independent.
inline KappaInterval kappa_ci(const std::vector<int>& predicted, const std::vector<int>& visual, int k,
                              BootstrapOptions opts = {}) {
    if (predicted.size() != visual.size()) throw std::invalid_argument("kappa_ci: length mismatch");
    if (predicted.size() < 2) throw std::invalid_argument("kappa_ci: need at least two subjects");
    if (!(opts.level > 0 && opts.level < 1) || opts.resamples < 1)
        throw std::invalid_argument("kappa_ci: invalid level or resample count");
    const std::size_t n = predicted.size();
    std::vector<double> stats;
    stats.reserve(static_cast<std::size_t>(opts.resamples));
    for (int r = 0; r < opts.resamples; ++r) {
        std::mt19937_64 rng(derive_seed(opts.seed, static_cast<std::uint64_t>(r)));
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        ConfusionMatrix cm(k);
        for (std::size_t i = 0; i < n; ++i) {
            const auto s = pick(rng);
            cm.add(predicted[s], visual[s]);
        }
        if (auto kap = linear_weighted_kappa(cm)) stats.push_back(*kap);
    }
    if (stats.empty()) throw std::runtime_error("kappa_ci: kappa undefined on every resample");
    std::sort(stats.begin(), stats.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(stats.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, stats.size() - 1);
        return stats[lo] + (pos - static_cast<double>(lo)) * (stats[hi] - stats[lo]);
    };
    const double alpha = 1.0 - opts.level;
    return {quantile(alpha / 2), quantile(1 - alpha / 2)};
}

enum class AgreementBand { slight, fair, moderate, good, excellent };

inline const char* to_string(AgreementBand b) {
    switch (b) {
        case AgreementBand::slight: return "slight";
        case AgreementBand::fair: return "fair";
        case AgreementBand::moderate: return "moderate";
        case AgreementBand::good: return "good";
        case AgreementBand::excellent: return "excellent";
    }
    return "?";
}

// Cut points 0.20 / 0.40 / 0.60 / 0.80; each upper edge is inclusive.
inline AgreementBand agreement_band(double kappa) {
    if (kappa <= 0.20) return AgreementBand::slight;
    if (kappa <= 0.40) return AgreementBand::fair;
    if (kappa <= 0.60) return AgreementBand::moderate;
    if (kappa <= 0.80) return AgreementBand::good;
    return AgreementBand::excellent;
}

// Reads a k x k matrix from CSV: one row per predicted score, optional
// header line starting with a non-digit.
inline ConfusionMatrix read_confusion_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open confusion matrix file " + path);
    std::vector<std::vector<std::int64_t>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (!std::isdigit(static_cast<unsigned char>(line[0]))) continue;
        std::vector<std::int64_t> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stoll(cell));
        rows.push_back(std::move(row));
    }
    const int k = static_cast<int>(rows.size());
    std::vector<std::int64_t> flat;
    for (const auto& r : rows) {
        if (static_cast<int>(r.size()) != k) throw std::runtime_error(path + ": matrix is not square");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return ConfusionMatrix(k, std::move(flat));
}

struct SubtypeReport {
    std::string subtype;
    ConfusionMatrix matrix;
    std::optional<KappaInterval> ci;
};

inline nlohmann::json metrics_json(const SubtypeReport& r) {
    using nlohmann::json;
    const auto& cm = r.matrix;
    json rows = json::array();
    for (int i = 0; i < cm.k(); ++i) {
        json row = json::array();
        for (int j = 0; j < cm.k(); ++j) row.push_back(cm.at(i, j));
        rows.push_back(row);
    }
    json pr = json::array();
    for (const auto& c : per_class_pr(cm))
        pr.push_back({{"precision", c.precision},
                      {"recall", c.recall},
                      {"precision_defined", c.precision_defined},
                      {"recall_defined", c.recall_defined}});
    json out{{"subtype", r.subtype},
             {"n", cm.total()},
             {"confusion_matrix", rows},
             {"orientation", "rows=predicted, columns=visual"},
             {"per_class", pr},
             {"accuracy", accuracy(cm)},
             {"macro_f1", macro_f1(cm)}};
    if (auto kap = linear_weighted_kappa(cm)) {
        out["kappa"] = *kap;
        out["agreement"] = to_string(agreement_band(*kap));
    } else {
        out["kappa"] = nullptr;
        out["agreement"] = nullptr;
    }
    if (r.ci) out["kappa_ci"] = {r.ci->low, r.ci->high};
    return out;
}

}  // namespace dram
