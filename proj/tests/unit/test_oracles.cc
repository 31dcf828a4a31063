#include <gtest/gtest.h>

#include <cmath>

#include "oracles/oracles.h"
#include "sparseattn/rng.h"

using oracles::Tensor;

TEST(OracleDense, SingleTokenReturnsV) {
  const Tensor q = Tensor::from_rows({{0.3, -1.0}});
  const Tensor v = Tensor::from_rows({{2.0, 5.0}});
  EXPECT_EQ(oracles::dense_attention(q, q, v), v);
}

TEST(OracleDense, ZeroQueryGivesColumnMean) {
  sparseattn::Rng rng(1);
  const Tensor k = rng.normal_tensor(4, 3);
  const Tensor v = rng.normal_tensor(4, 2);
  const Tensor o = oracles::dense_attention(Tensor::zeros(4, 3), k, v);
  for (std::size_t c = 0; c < 2; ++c) {
    const double mean = (v(0, c) + v(1, c) + v(2, c) + v(3, c)) / 4.0;
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(o(i, c), mean, 1e-15);
  }
}

TEST(OracleMasked, AllOnesEqualsDense) {
  sparseattn::Rng rng(2);
  const Tensor q = rng.normal_tensor(5, 3), k = rng.normal_tensor(5, 3), v = rng.normal_tensor(5, 3);
  EXPECT_EQ(oracles::masked_attention(q, k, v, Tensor::filled(5, 5, 1.0)), oracles::dense_attention(q, k, v));
}

TEST(OracleMasked, SingleOneSelectsThatRow) {
  sparseattn::Rng rng(3);
  const Tensor q = rng.normal_tensor(3, 2), k = rng.normal_tensor(3, 2), v = rng.normal_tensor(3, 4);
  Tensor m = Tensor::zeros(3, 3);
  m(0, 2) = m(1, 0) = m(2, 1) = 1.0;
  const Tensor o = oracles::masked_attention(q, k, v, m);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(o(0, c), v(2, c));
    EXPECT_EQ(o(1, c), v(0, c));
    EXPECT_EQ(o(2, c), v(1, c));
  }
  EXPECT_THROW(oracles::masked_attention(q, k, v, Tensor::zeros(3, 3)), std::invalid_argument);
}

TEST(OracleFd, QuadraticLossGivesTheta) {
  const std::vector<double> x = {0.5, -1.5, 2.0};
  const auto g = oracles::fd_grad(
      [](const std::vector<double>& t) {
        double s = 0.0;
        for (double v : t) s += 0.5 * v * v;
        return s;
      },
      x, 1e-4);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], x[i], 1e-8);
}

TEST(OracleFd, LinearLossIsExactForAnyStep) {
  const std::vector<double> a = {1.0, -2.0, 0.25};
  for (double h : {1e-6, 1e-2, 1.0}) {
    const auto g = oracles::fd_grad(
        [&](const std::vector<double>& t) { return a[0] * t[0] + a[1] * t[1] + a[2] * t[2]; }, {0.0, 0.0, 0.0}, h);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(g[i], a[i], 1e-12);
  }
}

TEST(OracleTopCount, TiesGoToLowerIndex) {
  EXPECT_EQ(oracles::top_count({0.1, 0.1, 0.1, 0.1}, 2), (std::vector<int>{1, 1, 0, 0}));
  EXPECT_EQ(oracles::top_count({0.1, 0.4, 0.1, 0.4}, 2), (std::vector<int>{0, 1, 0, 1}));
}

TEST(OracleMinSubset, HandCases) {
  EXPECT_EQ(oracles::min_subset_size_reaching({0.4, 0.3, 0.2, 0.1}, 0.65, 0.0), 2u);
  EXPECT_EQ(oracles::min_subset_size_reaching({0.6, 0.2, 0.1, 0.1}, 0.6, 0.0), 1u);
  EXPECT_EQ(oracles::min_subset_size_reaching({0.25, 0.25, 0.25, 0.25}, 1.0, 1e-12), 4u);
  EXPECT_EQ(oracles::min_subset_size_reaching({0.5, 0.5}, 0.0, 0.0), 1u);
}
