#include "hypolab/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace hypolab::rng;

TEST(Philox, KnownAnswerVectors) {
  EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}), (Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (Counter{0xd16cfe09u, 0x94fdcceb, 0x5001e420u, 0x24126ea1u}));
}

TEST(UnitInterval, OpenBounds) {
  EXPECT_GT(to_unit(0, 0), 0.0);
  EXPECT_LT(to_unit(0xffffffffu, 0xffffffffu), 1.0);
}

TEST(NormalStreamTest, DeterministicAndKeyed) {
  NormalStream a(42, 7), b(42, 7), c(43, 7), e(42, 8);
  for (std::uint64_t i = 0; i < 100; ++i) {
    EXPECT_EQ(a(i), b(i));
    EXPECT_NE(a(i), c(i));
    EXPECT_NE(a(i), e(i));
  }
  std::vector<double> buf(9);
  a.fill(4, buf.size(), buf.data());
  for (std::size_t i = 0; i < buf.size(); ++i) EXPECT_EQ(buf[i], a(4 + i));
}

TEST(NormalStreamTest, Moments) {
  NormalStream s(2024, 0);
  const int n = 200000;
  double m1 = 0, m2 = 0, m4 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = s(static_cast<std::uint64_t>(i));
    m1 += z;
    m2 += z * z;
    m4 += z * z * z * z;
  }
  m1 /= n;
  m2 /= n;
  m4 /= n;
  EXPECT_LT(std::abs(m1), 4.0 / std::sqrt(n));
  EXPECT_LT(std::abs(m2 - 1.0), 4.0 * std::sqrt(2.0 / n));
  EXPECT_LT(std::abs(m4 - 3.0), 4.0 * std::sqrt(96.0 / n));
}

TEST(UniformStreamTest, RangeAndMean) {
  UniformStream u(9, 3);
  double mean = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = u(static_cast<std::uint64_t>(i));
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
    mean += v;
  }
  EXPECT_NEAR(mean / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
}
