#include <gtest/gtest.h>

#include <random>

#include "dram/metrics.hpp"

using namespace dram;

namespace {

ConfusionMatrix fixture(const std::string& name) {
    return read_confusion_csv(std::string(DRAM_FIXTURE_DIR) + "/" + name + ".csv");
}

ConfusionMatrix random_matrix(int k, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> count(0, 40);
    ConfusionMatrix cm(k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) cm.add(i, j, count(rng));
    cm.add(0, 0);
    return cm;
}

}  // namespace

TEST(Metrics, AccuracyOnPublishedMatrices) {
    EXPECT_NEAR(accuracy(fixture("table3a")), 3731.0 / 7143.0, 1e-15);
    EXPECT_NEAR(100 * accuracy(fixture("table3a")), 52.23, 0.01);
    EXPECT_NEAR(100 * accuracy(fixture("table3d")), 64.62, 0.01);
    EXPECT_NEAR(accuracy(fixture("table3d")), 4616.0 / 7143.0, 1e-15);
}

TEST(Metrics, IdentityMatrixIsPerfect) {
    ConfusionMatrix cm(4);
    for (int i = 0; i < 4; ++i) cm.add(i, i, 10 + i);
    EXPECT_EQ(accuracy(cm), 1.0);
    EXPECT_EQ(macro_f1(cm), 1.0);
    EXPECT_EQ(*linear_weighted_kappa(cm), 1.0);
    for (const auto& pr : per_class_pr(cm)) {
        EXPECT_EQ(pr.precision, 1.0);
        EXPECT_EQ(pr.recall, 1.0);
    }
}

TEST(Metrics, PerClassPrecisionRecallFixtures) {
    auto a = per_class_pr(fixture("table3a"));
    EXPECT_NEAR(100 * a[0].precision, 66.68, 0.005);
    EXPECT_NEAR(100 * a[0].recall, 64.87, 0.005);
    auto b = per_class_pr(fixture("table3b"));
    EXPECT_NEAR(100 * b[2].precision, 66.58, 0.005);
    EXPECT_NEAR(100 * b[2].recall, 54.40, 0.005);
}

TEST(Metrics, EmptyDenominatorsAreFlagged) {
    ConfusionMatrix cm(3);
    cm.add(0, 0, 5);
    cm.add(0, 1, 2);
    auto pr = per_class_pr(cm);
    EXPECT_FALSE(pr[1].precision_defined);
    EXPECT_EQ(pr[1].precision, 0.0);
    EXPECT_FALSE(pr[2].recall_defined);
    EXPECT_EQ(pr[2].recall, 0.0);
}

TEST(Metrics, EmptyMatrixRejected) {
    ConfusionMatrix cm(3);
    EXPECT_THROW(accuracy(cm), std::invalid_argument);
    EXPECT_THROW(linear_weighted_kappa(cm), std::invalid_argument);
}

TEST(Metrics, MacroF1Fixtures) {
    EXPECT_NEAR(macro_f1(fixture("table3a")), 0.5100, 0.0005);
    EXPECT_NEAR(macro_f1(fixture("table3c")), 0.4961, 0.0005);
}

TEST(Metrics, KappaFixtures) {
    EXPECT_NEAR(*linear_weighted_kappa(fixture("table3a")), 0.6429, 0.005);
    ConfusionMatrix flat(4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) flat.add(i, j, 7);
    EXPECT_NEAR(*linear_weighted_kappa(flat), 0.0, 1e-12);
}

TEST(Metrics, KappaSingleCellDegenerate) {
    ConfusionMatrix cm(3);
    cm.add(1, 1, 9);
    EXPECT_EQ(*linear_weighted_kappa(cm), 1.0);
}

TEST(Metrics, KappaHandComputedTwoByTwo) {
    // k=2 linear weights reduce to Cohen's kappa: po=0.7, pe=0.5*0.6+0.5*0.4=0.5.
    ConfusionMatrix cm(2, {40, 20, 10, 30});
    EXPECT_NEAR(*linear_weighted_kappa(cm), (0.7 - 0.5) / 0.5, 1e-12);
}

TEST(Metrics, PropertyInvariants) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 2 + trial % 5;
        auto cm = random_matrix(k, rng);
        const double acc = accuracy(cm), f1 = macro_f1(cm);
        const double kap = *linear_weighted_kappa(cm);
        EXPECT_GE(acc, 0.0);
        EXPECT_LE(acc, 1.0);
        EXPECT_GE(f1, 0.0);
        EXPECT_LE(f1, 1.0);
        EXPECT_GE(kap, -1.0);
        EXPECT_LE(kap, 1.0);
        EXPECT_NEAR(*linear_weighted_kappa(cm.transposed()), kap, 1e-12);

        // Same permutation on both axes keeps accuracy and macro-F1.
        std::vector<int> perm(k);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        ConfusionMatrix p(k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) p.add(perm[i], perm[j], cm.at(i, j));
        EXPECT_NEAR(accuracy(p), acc, 1e-12);
        EXPECT_NEAR(macro_f1(p), f1, 1e-12);
    }
}

TEST(Metrics, KappaCiPerfectAgreement) {
    std::vector<int> a{0, 1, 2, 3, 4, 5, 0, 1, 2, 3};
    auto ci = kappa_ci(a, a, 6, {.resamples = 200, .seed = 3});
    EXPECT_NEAR(ci.low, 1.0, 1e-12);
    EXPECT_NEAR(ci.high, 1.0, 1e-12);
}

TEST(Metrics, KappaCiContainsPointEstimateAndIsSeeded) {
    std::vector<int> pred, vis;
    fixture("table3b").to_pairs(pred, vis);
    const double point = *linear_weighted_kappa(ConfusionMatrix::from_pairs(3, pred, vis));
    auto ci = kappa_ci(pred, vis, 3, {.resamples = 300, .seed = 11});
    EXPECT_LT(ci.low, point);
    EXPECT_GT(ci.high, point);
    auto again = kappa_ci(pred, vis, 3, {.resamples = 300, .seed = 11});
    EXPECT_EQ(ci.low, again.low);
    EXPECT_EQ(ci.high, again.high);
}

TEST(Metrics, KappaCiRejectsLengthMismatch) {
    EXPECT_THROW(kappa_ci({0, 1}, {0}, 2), std::invalid_argument);
}

TEST(Metrics, AgreementBands) {
    EXPECT_EQ(agreement_band(0.6429), AgreementBand::good);
    EXPECT_EQ(agreement_band(0.5206), AgreementBand::moderate);
    EXPECT_EQ(agreement_band(0.20), AgreementBand::slight);
    EXPECT_EQ(agreement_band(0.21), AgreementBand::fair);
    EXPECT_EQ(agreement_band(0.81), AgreementBand::excellent);
    EXPECT_EQ(agreement_band(-0.3), AgreementBand::slight);
}

TEST(Metrics, ReportJsonCarriesAllFields) {
    SubtypeReport r{"centrilobular", fixture("table3a"), KappaInterval{0.63, 0.65}};
    auto j = metrics_json(r);
    EXPECT_EQ(j["n"], 7143);
    EXPECT_EQ(j["agreement"], "good");
    EXPECT_EQ(j["per_class"].size(), 6u);
    EXPECT_EQ(j["kappa_ci"][0], 0.63);
}
