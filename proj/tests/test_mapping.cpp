#include <gtest/gtest.h>

#include "dram/mapping.hpp"

using namespace dram;

TEST(Mapping, ScoreToIntervalFixtures) {
    const auto& cle = ScoreScale::centrilobular();
    EXPECT_EQ(cle.score_to_interval(2), (Interval{0.05, 0.10}));
    EXPECT_EQ(cle.score_to_interval(0), (Interval{0.00, 0.01}));
    EXPECT_EQ(ScoreScale::paraseptal().score_to_interval(2), (Interval{0.05, 1.00}));
    EXPECT_THROW(cle.score_to_interval(6), std::out_of_range);
    EXPECT_THROW(cle.score_to_interval(-1), std::out_of_range);
}

TEST(Mapping, PercentageToScoreFixtures) {
    const auto& cle = ScoreScale::centrilobular();
    EXPECT_EQ(cle.percentage_to_score(0.07), 2);
    EXPECT_EQ(cle.percentage_to_score(0.0), 0);
    EXPECT_EQ(cle.percentage_to_score(0.05), 2);  // shared edge belongs to the higher score
    EXPECT_EQ(cle.percentage_to_score(0.30), 5);
    EXPECT_EQ(cle.percentage_to_score(1.0), 5);
    EXPECT_THROW(cle.percentage_to_score(1.0001), std::out_of_range);
    EXPECT_THROW(cle.percentage_to_score(-0.01), std::out_of_range);
}

TEST(Mapping, ScaleSizes) {
    EXPECT_EQ(ScoreScale::centrilobular().size(), 6);
    EXPECT_EQ(ScoreScale::paraseptal().size(), 3);
}

TEST(Mapping, IntervalsAreContiguousAndCoverUnitRange) {
    for (const auto* s : {&ScoreScale::centrilobular(), &ScoreScale::paraseptal()}) {
        const auto& iv = s->intervals();
        EXPECT_EQ(iv.front().lower, 0.0);
        EXPECT_EQ(iv.back().upper, 1.0);
        for (std::size_t i = 1; i < iv.size(); ++i) EXPECT_EQ(iv[i].lower, iv[i - 1].upper);
    }
}

TEST(Mapping, DenseSweepRoundTripAndMonotone) {
    for (const auto* s : {&ScoreScale::centrilobular(), &ScoreScale::paraseptal()}) {
        int prev = 0;
        for (int i = 0; i <= 10000; ++i) {
            const double p = i * 1e-4;
            const int score = s->percentage_to_score(p);
            EXPECT_GE(score, prev);
            prev = score;
            const auto iv = s->score_to_interval(score);
            EXPECT_TRUE((p >= iv.lower && p < iv.upper) || (p == 1.0 && score == s->size() - 1));
        }
        for (int score = 0; score < s->size(); ++score) {
            const auto iv = s->score_to_interval(score);
            for (double p = iv.lower + 1e-4; p < iv.upper - 1e-12; p += 1e-4)
                ASSERT_EQ(s->percentage_to_score(p), score) << s->name() << " p=" << p;
        }
    }
}

TEST(Mapping, RejectsGappedScale) {
    EXPECT_THROW(ScoreScale("bad", {{0.0, 0.1}, {0.2, 1.0}}), std::invalid_argument);
    EXPECT_THROW(ScoreScale("bad", {{0.0, 0.5}, {0.5, 0.9}}), std::invalid_argument);
}

TEST(Mapping, JsonRoundTrip) {
    nlohmann::json j = ScoreScale::centrilobular();
    auto back = scale_from_json(j);
    EXPECT_EQ(back.intervals(), ScoreScale::centrilobular().intervals());
    EXPECT_EQ(back.name(), "centrilobular");
}
