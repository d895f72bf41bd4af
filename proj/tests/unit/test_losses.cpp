#include <cmath>

#include <gtest/gtest.h>

#include "gvsl/errors.hpp"
#include "gvsl/gradcheck.hpp"
#include "gvsl/graph.hpp"
#include "gvsl/losses.hpp"
#include "gvsl/ops.hpp"
#include "test_util.hpp"

namespace gvsl::losses {
namespace {

// Two-pass windowed correlation over clipped windows, one voxel at a time.
double oracle_ncc(const Tensor& a, const Tensor& b, int window, double eps) {
  const std::int64_t Z = a.dim(1), Y = a.dim(2), X = a.dim(3);
  const int r = window / 2;
  double total = 0.0;
  std::size_t count = 0;
  for (std::int64_t c = 0; c < a.dim(0); ++c) {
    auto at = [&](const Tensor& t, std::int64_t z, std::int64_t y, std::int64_t x) {
      return t[static_cast<std::size_t>(((c * Z + z) * Y + y) * X + x)];
    };
    for (std::int64_t z = 0; z < Z; ++z)
      for (std::int64_t y = 0; y < Y; ++y)
        for (std::int64_t x = 0; x < X; ++x) {
          double ma = 0.0, mb = 0.0;
          int n = 0;
          for (std::int64_t k = std::max<std::int64_t>(0, z - r); k <= std::min(Z - 1, z + r); ++k)
            for (std::int64_t j = std::max<std::int64_t>(0, y - r); j <= std::min(Y - 1, y + r); ++j)
              for (std::int64_t i = std::max<std::int64_t>(0, x - r); i <= std::min(X - 1, x + r); ++i) {
                ma += at(a, k, j, i);
                mb += at(b, k, j, i);
                ++n;
              }
          ma /= n;
          mb /= n;
          double cross = 0.0, va = 0.0, vb = 0.0;
          for (std::int64_t k = std::max<std::int64_t>(0, z - r); k <= std::min(Z - 1, z + r); ++k)
            for (std::int64_t j = std::max<std::int64_t>(0, y - r); j <= std::min(Y - 1, y + r); ++j)
              for (std::int64_t i = std::max<std::int64_t>(0, x - r); i <= std::min(X - 1, x + r); ++i) {
                const double da = at(a, k, j, i) - ma, db = at(b, k, j, i) - mb;
                cross += da * db;
                va += da * da;
                vb += db * db;
              }
          total += cross * cross / (va * vb + eps);
          ++count;
        }
  }
  return -total / static_cast<double>(count);
}

double oracle_smooth(const geometry::Dvf& d) {
  const auto g = d.grid();
  double total = 0.0;
  for (int c = 0; c < 3; ++c)
    for (std::int64_t z = 0; z < g.z; ++z)
      for (std::int64_t y = 0; y < g.y; ++y)
        for (std::int64_t x = 0; x < g.x; ++x) {
          const double u = d.at(x, y, z)[static_cast<std::size_t>(c)];
          if (x + 1 < g.x) total += std::pow(d.at(x + 1, y, z)[static_cast<std::size_t>(c)] - u, 2);
          if (y + 1 < g.y) total += std::pow(d.at(x, y + 1, z)[static_cast<std::size_t>(c)] - u, 2);
          if (z + 1 < g.z) total += std::pow(d.at(x, y, z + 1)[static_cast<std::size_t>(c)] - u, 2);
        }
  return total / static_cast<double>(g.voxels());
}

// Smooth field with a large enough range that every window's variance dwarfs eps.
Tensor smooth_volume(std::int64_t n) {
  Tensor t({1, n, n, n});
  std::size_t i = 0;
  for (std::int64_t z = 0; z < n; ++z)
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x, ++i)
        t[i] = x + 0.7 * y + 0.5 * z + 0.8 * std::sin(0.4 * x) * std::cos(0.3 * y + 0.2 * z);
  return t;
}

TEST(Ncc, SelfIsMinusOne) {
  Tensor v = smooth_volume(10);
  EXPECT_NEAR(local_ncc(v, v, {}), -1.0, 1e-6);
}

TEST(Ncc, ConstantOffsetIsMinusOne) {
  Tensor v = smooth_volume(10);
  Tensor w = v;
  for (auto& x : w.data()) x += 3.25;
  EXPECT_NEAR(local_ncc(w, v, {}), -1.0, 1e-6);
}

TEST(Ncc, AffineIntensityInvariance) {
  Tensor v = smooth_volume(10);
  const double self = local_ncc(v, v, {});
  for (auto [a, b] : {std::pair{2.0, 0.3}, std::pair{0.5, -1.0}, std::pair{7.0, 4.0}}) {
    Tensor w = v;
    for (auto& x : w.data()) x = a * x + b;
    EXPECT_NEAR(local_ncc(w, v, {}), self, 1e-6) << a << " " << b;
  }
}

TEST(Ncc, IndependentNoiseIsSmall) {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Tensor a = test::random_tensor({1, 16, 16, 16}, 100 + s, 0.0, 1.0);
    Tensor b = test::random_tensor({1, 16, 16, 16}, 200 + s, 0.0, 1.0);
    worst = std::max(worst, std::abs(local_ncc(a, b, {})));
  }
  EXPECT_LT(worst, 0.15);
}

TEST(Ncc, Symmetric) {
  Tensor a = test::random_tensor({1, 8, 8, 8}, 1, 0.0, 1.0);
  Tensor b = test::random_tensor({1, 8, 8, 8}, 2, 0.0, 1.0);
  EXPECT_NEAR(local_ncc(a, b, {}), local_ncc(b, a, {}), 1e-12);
}

TEST(Ncc, ConstantWindowsStayFinite) {
  Tensor a({1, 8, 8, 8}, 0.5);
  Tensor b = test::random_tensor({1, 8, 8, 8}, 3, 0.0, 1.0);
  for (const auto& [x, y] : {std::pair{a, a}, std::pair{a, b}}) {
    const double l = local_ncc(x, y, {});
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_LE(l, 0.0);
    EXPECT_GE(l, -1.0);
  }
}

TEST(Ncc, MatchesDirectOracle) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    Tensor a = test::random_tensor({1, 8, 8, 8}, 10 + s, 0.0, 1.0);
    Tensor b = test::random_tensor({1, 8, 8, 8}, 20 + s, 0.0, 1.0);
    for (int w : {3, 5, 7}) {
      LossConfig cfg;
      cfg.ncc_window = w;
      EXPECT_NEAR(local_ncc(a, b, cfg), oracle_ncc(a, b, w, cfg.ncc_eps), 1e-10) << "window " << w;
    }
  }
}

TEST(Ncc, Errors) {
  LossConfig cfg;
  cfg.ncc_window = 9;
  EXPECT_THROW(local_ncc(Tensor({1, 8, 8, 8}), Tensor({1, 8, 8, 8}), cfg), ConfigError);
  cfg.ncc_window = 4;
  EXPECT_THROW(local_ncc(Tensor({1, 8, 8, 8}), Tensor({1, 8, 8, 8}), cfg), ConfigError);
  EXPECT_THROW(local_ncc(Tensor({1, 8, 8, 8}), Tensor({1, 8, 8, 9}), {}), ShapeError);
}

TEST(Smoothness, ZeroAndConstantFields) {
  geometry::VolumeGrid g{6, 6, 6};
  EXPECT_EQ(smoothness(geometry::Dvf(g)), 0.0);
  geometry::Dvf c(Tensor({3, 6, 6, 6}, 5.0));
  EXPECT_EQ(smoothness(c), 0.0);
}

TEST(Smoothness, RampMatchesSummation) {
  geometry::Dvf d(geometry::VolumeGrid{8, 8, 8});
  for (std::int64_t z = 0; z < 8; ++z)
    for (std::int64_t y = 0; y < 8; ++y)
      for (std::int64_t x = 0; x < 8; ++x) d.field[static_cast<std::size_t>((z * 8 + y) * 8 + x)] = 0.1 * x;
  EXPECT_NEAR(smoothness(d), oracle_smooth(d), 1e-15);
  EXPECT_NEAR(smoothness(d), 7.0 * 64.0 * 0.01 / 512.0, 1e-15);
}

TEST(Smoothness, RandomMatchesSummationAndIsPositive) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    geometry::Dvf d(test::random_tensor({3, 8, 8, 8}, 30 + s));
    const double v = smoothness(d);
    EXPECT_GT(v, 0.0);
    EXPECT_NEAR(v, oracle_smooth(d), 1e-10);
  }
}

TEST(Mse, Examples) {
  Tensor a = test::random_tensor({1, 1, 4, 4, 4}, 5);
  EXPECT_EQ(mse(a, a), 0.0);
  Tensor b = a;
  for (auto& v : b.data()) v += 0.5;
  EXPECT_NEAR(mse(b, a), 0.25, 1e-15);
}

TEST(Mse, RandomMatchesSummation) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    Tensor a = test::random_tensor({1, 1, 8, 8, 8}, 40 + s);
    Tensor b = test::random_tensor({1, 1, 8, 8, 8}, 50 + s);
    double ref = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) ref += (a[i] - b[i]) * (a[i] - b[i]);
    EXPECT_NEAR(mse(a, b), ref / static_cast<double>(a.numel()), 1e-10);
  }
  EXPECT_THROW(mse(Tensor({2}), Tensor({3})), ShapeError);
}

double total_of(double ncc, double smooth, double weight) {
  ad::Graph g;
  LossConfig cfg;
  cfg.smooth_weight = weight;
  ad::Var n = g.constant(Tensor::scalar(ncc));
  ad::Var s = g.constant(Tensor::scalar(smooth));
  g.mark_output("t", gvsl_total(g, n, s, cfg));
  return g.evaluate({}).at("t").item();
}

TEST(Total, Examples) {
  EXPECT_EQ(total_of(-1.0, 0.0, 1.0), -1.0);
  EXPECT_NEAR(total_of(-0.5, 0.2, 1.0), -0.3, 1e-15);
  EXPECT_EQ(total_of(-0.37, 0.9, 0.0), -0.37);
}

TEST(LossGradients, PassFiniteDifferenceChecks) {
  LossConfig cfg;
  cfg.ncc_window = 3;
  for (std::uint64_t s = 1; s <= 3; ++s) {
    auto ncc = ad::check_gradients(
        [&](ad::Graph& g, std::span<const ad::Var> v) { return local_ncc_loss(g, v[0], v[1], cfg); },
        {test::random_tensor({1, 1, 5, 5, 5}, s, 0.0, 1.0), test::random_tensor({1, 1, 5, 5, 5}, s + 10, 0.0, 1.0)},
        1e-5, 1e-4, s);
    EXPECT_TRUE(ncc.pass) << "ncc " << ncc.max_rel_err << " " << ncc.worst;
    auto sm = ad::check_gradients([](ad::Graph& g, std::span<const ad::Var> v) { return smoothness_loss(g, v[0]); },
                                  {test::random_tensor({1, 3, 4, 4, 4}, s + 20)}, 1e-5, 1e-4, s);
    EXPECT_TRUE(sm.pass) << "smooth " << sm.max_rel_err;
    auto ms = ad::check_gradients(
        [](ad::Graph& g, std::span<const ad::Var> v) { return restoration_mse(g, v[0], v[1]); },
        {test::random_tensor({1, 1, 4, 4, 4}, s + 30), test::random_tensor({1, 1, 4, 4, 4}, s + 40)}, 1e-5, 1e-4, s);
    EXPECT_TRUE(ms.pass) << "mse " << ms.max_rel_err;
  }
}

}  // namespace
}  // namespace gvsl::losses
