#pragma once

// Ordinal severity scores <-> per-lung involvement fractions.

#include <nlohmann/json.hpp>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace dram {

enum class Subtype { centrilobular, paraseptal };

inline const char* to_string(Subtype s) { return s == Subtype::centrilobular ? "centrilobular" : "paraseptal"; }

struct Interval {
    double lower;
    double upper;

    double midpoint() const { return 0.5 * (lower + upper); }
    bool operator==(const Interval&) const = default;
};

class ScoreScale {
   public:
    ScoreScale(std::string name, std::vector<Interval> intervals)
        : name_(std::move(name)), intervals_(std::move(intervals)) {
        if (intervals_.size() < 2) throw std::invalid_argument("score scale needs at least two scores");
        if (intervals_.front().lower != 0.0 || intervals_.back().upper != 1.0)
            throw std::invalid_argument("score scale '" + name_ + "' must cover [0,1]");
        for (std::size_t i = 0; i < intervals_.size(); ++i) {
            if (!(intervals_[i].lower < intervals_[i].upper))
                throw std::invalid_argument("score scale '" + name_ + "': empty interval for score " +
                                            std::to_string(i));
            if (i > 0 && intervals_[i].lower != intervals_[i - 1].upper)
                throw std::invalid_argument("score scale '" + name_ + "': intervals not contiguous at score " +
                                            std::to_string(i));
        }
    }

    // Fleischner centrilobular grades: absent, trace, mild, moderate,
    // confluent, advanced destructive.
    static const ScoreScale& centrilobular() {
        static const ScoreScale s("centrilobular",
                                  {{0.00, 0.01}, {0.01, 0.05}, {0.05, 0.10}, {0.10, 0.20}, {0.20, 0.30}, {0.30, 1.00}});
        return s;
    }

    // Paraseptal grades: absent, mild, substantial.
    static const ScoreScale& paraseptal() {
        static const ScoreScale s("paraseptal", {{0.00, 0.01}, {0.01, 0.05}, {0.05, 1.00}});
        return s;
    }

    static const ScoreScale& of(Subtype s) { return s == Subtype::centrilobular ? centrilobular() : paraseptal(); }

    const std::string& name() const { return name_; }
    int size() const { return static_cast<int>(intervals_.size()); }
    const std::vector<Interval>& intervals() const { return intervals_; }
    bool valid_score(int score) const { return score >= 0 && score < size(); }

    Interval score_to_interval(int score) const {
        if (!valid_score(score))
            throw std::out_of_range("score " + std::to_string(score) + " outside " + name_ + " scale 0.." +
                                    std::to_string(size() - 1));
        return intervals_[static_cast<std::size_t>(score)];
    }

    // Half-open [lower, upper): a shared edge belongs to the higher score;
    // p = 1 maps to the last score.
    int percentage_to_score(double p) const {
        if (!(p >= 0.0 && p <= 1.0))
            throw std::out_of_range("percentage " + std::to_string(p) + " outside [0,1]");
        for (int s = size() - 1; s > 0; --s)
            if (p >= intervals_[static_cast<std::size_t>(s)].lower) return s;
        return 0;
    }

   private:
    std::string name_;
    std::vector<Interval> intervals_;
};

inline void to_json(nlohmann::json& j, const ScoreScale& s) {
    j = nlohmann::json{{"name", s.name()}, {"intervals", nlohmann::json::array()}};
    for (const auto& iv : s.intervals()) j["intervals"].push_back({iv.lower, iv.upper});
}

inline ScoreScale scale_from_json(const nlohmann::json& j) {
    std::vector<Interval> iv;
    for (const auto& e : j.at("intervals")) iv.push_back({e.at(0).get<double>(), e.at(1).get<double>()});
    return ScoreScale(j.at("name").get<std::string>(), std::move(iv));
}

}  // namespace dram
