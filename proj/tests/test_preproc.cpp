#include <gtest/gtest.h>

#include <random>

#include "dram/preproc.hpp"

using namespace dram;

TEST(ClampRescale, Endpoints) {
    EXPECT_DOUBLE_EQ(clamp_rescale(-1150.0), 0.0);
    EXPECT_DOUBLE_EQ(clamp_rescale(-2000.0), 0.0);
    EXPECT_DOUBLE_EQ(clamp_rescale(-300.0), 1.0);
    EXPECT_DOUBLE_EQ(clamp_rescale(50.0), 1.0);
    EXPECT_NEAR(clamp_rescale(-950.0), 200.0 / 850.0, 1e-15);
    EXPECT_NEAR(clamp_rescale(-950.0), 0.235294, 1e-6);
}

TEST(ClampRescale, MonotoneOverInt16) {
    double prev = -1;
    for (int hu = -32768; hu <= 32767; ++hu) {
        const double v = clamp_rescale(static_cast<double>(hu));
        ASSERT_GE(v, prev);
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        prev = v;
    }
}

TEST(Laa950, ThresholdAndGating) {
    Volume v({1, 1, 4}, {1, 1, 1}, std::vector<std::int16_t>{-960, -940, -960, -950});
    Mask m({1, 1, 4}, {1, 1, 1}, std::vector<std::uint8_t>{1, 1, 0, 1});
    const auto l = laa950(v, m);
    EXPECT_EQ(l.values, (std::vector<std::uint8_t>{1, 0, 0, 0}));
    EXPECT_THROW(laa950(v, Mask({1, 2, 2}, {1, 1, 1})), std::invalid_argument);
}

TEST(CropToMask, FullExtentIsIdentity) {
    RealField f({3, 4, 5}, {1, 1, 1});
    for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = static_cast<double>(i);
    Mask m({3, 4, 5}, {1, 1, 1}, std::uint8_t{0});
    m.at(0, 0, 0) = m.at(2, 3, 4) = 1;
    const auto [cf, cm] = crop_to_mask(f, m);
    EXPECT_EQ(cf, f);
    EXPECT_EQ(cm, m);
}

TEST(CropToMask, SingleVoxel) {
    RealField f({4, 5, 6}, {1, 1, 1});
    for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = static_cast<double>(i);
    Mask m({4, 5, 6}, {1, 1, 1});
    m.at(2, 3, 4) = 1;
    const auto [cf, cm] = crop_to_mask(f, m);
    EXPECT_EQ(cf.dims, (Dims3{1, 1, 1}));
    EXPECT_EQ(cf.values[0], f.at(2, 3, 4));
    EXPECT_EQ(cm.values[0], 1);
}

TEST(CropToMask, EmptyMaskRejected) {
    RealField f({2, 2, 2}, {1, 1, 1});
    EXPECT_THROW(crop_to_mask(f, Mask({2, 2, 2}, {1, 1, 1})), std::invalid_argument);
}

TEST(CropToMask, RandomBlobsExhaustiveScan) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        std::uniform_int_distribution<int> ext(1, 10);
        Mask m({ext(rng), ext(rng), ext(rng)}, {1, 1, 1});
        std::bernoulli_distribution on(0.05);
        for (auto& v : m.values) v = on(rng);
        m.values[std::uniform_int_distribution<std::size_t>(0, m.values.size() - 1)(rng)] = 1;
        const auto b = bounding_box(m);
        std::int64_t inside = 0, total = 0;
        std::array<std::array<bool, 2>, 3> touched{};
        for (std::int64_t z = 0; z < m.dims[0]; ++z)
            for (std::int64_t y = 0; y < m.dims[1]; ++y)
                for (std::int64_t x = 0; x < m.dims[2]; ++x) {
                    if (!m.at(z, y, x)) continue;
                    ++total;
                    const std::array<std::int64_t, 3> p{z, y, x};
                    bool in = true;
                    for (int a = 0; a < 3; ++a) {
                        in = in && p[a] >= b.lo[a] && p[a] < b.hi[a];
                        if (p[a] == b.lo[a]) touched[a][0] = true;
                        if (p[a] == b.hi[a] - 1) touched[a][1] = true;
                    }
                    inside += in;
                }
        ASSERT_EQ(inside, total);
        for (int a = 0; a < 3; ++a) ASSERT_TRUE(touched[a][0] && touched[a][1]) << "trial " << trial;
        const auto cm = crop(m, b);
        std::int64_t kept = 0;
        for (auto v : cm.values) kept += v;
        ASSERT_EQ(kept, total);
    }
}

TEST(ToNetworkInput, LunglessRejected) {
    Volume v({4, 4, 4}, {1, 1, 1}, std::int16_t{-900});
    EXPECT_THROW(to_network_input(v, Mask({4, 4, 4}, {1, 1, 1}), Dims3{4, 4, 4}), std::invalid_argument);
}

TEST(ToNetworkInput, ConstantLung) {
    Volume v({10, 12, 14}, {1, 1, 1}, std::int16_t{-1000});
    Mask m({10, 12, 14}, {1, 1, 1});
    for (std::int64_t z = 2; z < 8; ++z)
        for (std::int64_t y = 3; y < 10; ++y)
            for (std::int64_t x = 1; x < 12; ++x) m.at(z, y, x) = (z + y + x) % 7 != 0;
    const auto pc = to_network_input(v, m, Dims3{8, 14, 18});
    EXPECT_EQ(pc.extents(), (Dims3{8, 14, 18}));
    std::int64_t lung = 0;
    for (std::size_t i = 0; i < pc.image.values.size(); ++i) {
        if (pc.lung_mask.values[i]) {
            ++lung;
            EXPECT_NEAR(pc.image.values[i], 150.0 / 850.0, 1e-12);
        } else {
            EXPECT_EQ(pc.image.values[i], 0.0);
        }
        EXPECT_EQ(pc.laa_label.values[i], pc.lung_mask.values[i]);  // -1000 < -950
    }
    EXPECT_GT(lung, 0);
}

TEST(ToNetworkInput, InvariantsOnRandomCases) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> hu(-1100, -200);
    for (int trial = 0; trial < 20; ++trial) {
        Volume v({12, 16, 20}, {0.7, 0.6, 0.6});
        for (auto& x : v.values) x = static_cast<std::int16_t>(hu(rng));
        Mask m({12, 16, 20}, {0.7, 0.6, 0.6});
        for (std::int64_t z = 1; z < 11; ++z)
            for (std::int64_t y = 2; y < 14; ++y)
                for (std::int64_t x = 2; x < 18; ++x) {
                    const double dz = (z - 5.5) / 5, dy = (y - 7.5) / 6, dx = (x - 9.5) / 8;
                    m.at(z, y, x) = dz * dz + dy * dy + dx * dx <= 1.0;
                }
        const auto pc = to_network_input(v, m, Dims3{6, 9, 11});
        EXPECT_EQ(pc.lung_mask.dims, pc.image.dims);
        EXPECT_EQ(pc.laa_label.dims, pc.image.dims);
        for (std::size_t i = 0; i < pc.image.values.size(); ++i) {
            EXPECT_GE(pc.image.values[i], 0.0);
            EXPECT_LE(pc.image.values[i], 1.0);
            if (!pc.lung_mask.values[i]) {
                EXPECT_EQ(pc.image.values[i], 0.0);
                EXPECT_EQ(pc.laa_label.values[i], 0);
            }
        }
    }
}

TEST(ToNetworkInput, LaaFractionMatchesAtNativeExtents) {
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> hu(-1000, -900);
    Volume v({6, 7, 8}, {1, 1, 1});
    for (auto& x : v.values) x = static_cast<std::int16_t>(hu(rng));
    Mask m({6, 7, 8}, {1, 1, 1}, std::uint8_t{1});
    std::int64_t below = 0;
    for (auto x : v.values) below += x < -950;
    const auto pc = to_network_input(v, m, Dims3{6, 7, 8});
    EXPECT_DOUBLE_EQ(laa_fraction(pc.laa_label, pc.lung_mask), static_cast<double>(below) / 336.0);
}

TEST(ToNetworkInput, IdempotentOnPreprocessedCase) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> hu(-1200, 0);
    Volume v({16, 20, 24}, {1, 1, 1});
    for (auto& x : v.values) x = static_cast<std::int16_t>(hu(rng));
    Mask m({16, 20, 24}, {1, 1, 1}, std::uint8_t{1});
    const auto first = to_network_input(v, m, Dims3{8, 14, 18});
    Mask full(first.image.dims, first.image.spacing, std::uint8_t{1});
    const auto second = to_network_input(first.image, full, first.laa_label, first.extents());
    ASSERT_EQ(second.image.dims, first.image.dims);
    for (std::size_t i = 0; i < first.image.values.size(); ++i)
        EXPECT_NEAR(second.image.values[i], first.image.values[i], 1e-6);
    EXPECT_EQ(second.laa_label, first.laa_label);
}

TEST(ToNetworkInput, SpacingTracksPhysicalExtent) {
    Volume v({10, 10, 10}, {1.0, 0.5, 2.0}, std::int16_t{-900});
    Mask m({10, 10, 10}, {1.0, 0.5, 2.0}, std::uint8_t{1});
    const auto pc = to_network_input(v, m, Dims3{5, 20, 10});
    EXPECT_DOUBLE_EQ(pc.image.spacing[0], 2.0);
    EXPECT_DOUBLE_EQ(pc.image.spacing[1], 0.25);
    EXPECT_DOUBLE_EQ(pc.image.spacing[2], 2.0);
}

TEST(Preprocessed, PersistenceRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "dram_preproc_rt";
    std::filesystem::remove_all(dir);
    Volume v({6, 6, 6}, {1, 1, 1}, std::int16_t{-970});
    Mask m({6, 6, 6}, {1, 1, 1}, std::uint8_t{1});
    const auto pc = to_network_input(v, m, Dims3{4, 5, 6});
    write_preprocessed(pc, dir / "c");
    const auto back = read_preprocessed(dir / "c_image", dir / "c_mask", dir / "c_laa");
    EXPECT_EQ(back.image, pc.image);
    EXPECT_EQ(back.lung_mask, pc.lung_mask);
    EXPECT_EQ(back.laa_label, pc.laa_label);
    std::filesystem::remove_all(dir);
}
