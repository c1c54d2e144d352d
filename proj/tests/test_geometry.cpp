#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"

using namespace ddmc;
using ddmc::testing::interior;
using ddmc::testing::random_tensor;

namespace {

// Smooth test pattern that decays to zero near the border.
Tensor<double> blob(std::size_t n) {
  Tensor<double> t({n, n});
  const double c = (n - 1) / 2.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t q = 0; q < n; ++q) {
      const double y = (r - c) / n, x = (q - c) / n;
      t[r * n + q] = std::exp(-18 * (x * x + y * y)) * (1 + 0.5 * std::sin(7 * x + 3 * y));
    }
  return t;
}

Var<double> params_var(const RigidParams& p) { return Var<double>::constant(Tensor<double>({1, 3}, {p.tx, p.ty, p.theta})); }

}  // namespace

TEST(Rigid, IdentityIsExact) {
  Rng rng(1);
  auto x = random_tensor({12, 10}, rng);
  EXPECT_EQ(apply_rigid(x, RigidParams{}), x);
}

TEST(Rigid, IntegerShift) {
  Rng rng(2);
  const std::size_t n = 9;
  auto x = random_tensor({n, n}, rng);
  auto y = apply_rigid(x, {1.0, 0.0, 0.0});
  auto z = apply_rigid(x, {0.0, 2.0, 0.0});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      EXPECT_NEAR(y[r * n + c], c >= 1 ? x[r * n + c - 1] : 0.0, 1e-12);
      EXPECT_NEAR(z[r * n + c], r >= 2 ? x[(r - 2) * n + c] : 0.0, 1e-12);
    }
}

TEST(Rigid, QuarterTurnPermutesPixels) {
  Rng rng(3);
  const std::size_t n = 11;
  auto x = random_tensor({n, n}, rng);
  auto y = apply_rigid(x, {0.0, 0.0, std::numbers::pi / 2});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c)
      if (interior(r, c, n)) EXPECT_NEAR(y[r * n + c], x[(n - 1 - c) * n + r], 1e-9) << r << "," << c;
}

TEST(Rigid, InvertAndCompose) {
  const RigidParams p{2.5, -1.25, 0.3};
  auto q = compose(p, invert(p));
  EXPECT_NEAR(q.tx, 0, 1e-12);
  EXPECT_NEAR(q.ty, 0, 1e-12);
  EXPECT_NEAR(q.theta, 0, 1e-12);
  auto q2 = compose(invert(p), p);
  EXPECT_NEAR(q2.tx, 0, 1e-12);
  EXPECT_NEAR(q2.ty, 0, 1e-12);
  // Composition matches warping twice.
  const std::size_t n = 48;
  auto x = blob(n);
  const RigidParams a{1.5, 0.5, 0.1}, b{-2.0, 1.0, -0.25};
  auto twice = apply_rigid(apply_rigid(x, a), b);
  auto once = apply_rigid(x, compose(a, b));
  double worst = 0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c)
      if (interior(r, c, n)) worst = std::max(worst, std::abs(twice[r * n + c] - once[r * n + c]));
  EXPECT_LT(worst, 0.02);
}

TEST(Rigid, RotationAnglesAdd) {
  const RigidParams a{0, 0, 0.2}, b{0, 0, -0.7};
  EXPECT_DOUBLE_EQ(compose(a, b).theta, 0.2 - 0.7);
  EXPECT_NEAR(compose(a, b).tx, 0, 1e-15);
}

TEST(Rigid, RoundTripInterior) {
  const std::size_t n = 64;
  auto x = blob(n);
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    const RigidParams p{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-0.17, 0.17)};
    auto back = apply_rigid(apply_rigid(x, p), invert(p));
    double se = 0;
    std::size_t cnt = 0;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c)
        if (interior(r, c, n)) {
          se += std::pow(back[r * n + c] - x[r * n + c], 2);
          ++cnt;
        }
    EXPECT_LT(se / cnt, 1e-3);
  }
}

TEST(Rigid, ZeroImageStaysZero) {
  Tensor<double> z({16, 16});
  EXPECT_EQ(apply_rigid(z, {3.3, -2.2, 0.4}), z);
}

TEST(Rigid, NonFiniteParamsRejected) {
  Tensor<double> z({8, 8});
  EXPECT_THROW(apply_rigid(z, {NAN, 0, 0}), ValueError);
  auto img = Var<double>::constant(Tensor<double>({1, 1, 8, 8}));
  EXPECT_THROW(warp_rigid(img, params_var({0, INFINITY, 0})), ValueError);
  EXPECT_THROW(warp_rigid(img, Var<double>::constant(Tensor<double>({2, 3}))), ShapeError);
}

TEST(Rigid, ComplexPlanesWarpedTogether) {
  const std::size_t n = 16;
  auto x = blob(n);
  auto x2 = x;
  for (auto& v : x2.values()) v *= 2;
  ComplexImage<double> c(x, x2);
  auto y = apply_rigid(c, {1.3, 0.2, 0.1});
  auto yr = apply_rigid(x, {1.3, 0.2, 0.1});
  EXPECT_LT(max_abs_diff(y.real, yr), 1e-15);
  for (std::size_t i = 0; i < n * n; ++i) EXPECT_NEAR(y.imag[i], 2 * yr[i], 1e-12);
}

TEST(Rigid, VarMatchesPlainWarp) {
  const std::size_t n = 16;
  auto x = blob(n);
  const RigidParams p{0.7, -1.1, 0.2};
  auto out = warp_rigid(Var<double>::constant(x.reshaped({1, 1, n, n})), params_var(p));
  EXPECT_LT(max_abs_diff(out.value().reshaped({n, n}), apply_rigid(x, p)), 1e-15);
}

TEST(Rigid, ParameterGradients) {
  // Finite differences at non-integer sample positions where bilinear
  // interpolation is differentiable.
  const std::size_t n = 16;
  auto img = blob(n).reshaped({1, 1, n, n});
  Rng rng(5);
  auto target = random_tensor({1, 1, n, n}, rng, 0, 0.2);
  const double pts[5][3] = {{0.31, -0.17, 0.05}, {1.23, 0.41, -0.12}, {-0.77, 0.63, 0.21},
                            {2.11, -1.37, 0.09}, {0.13, 0.29, -0.31}};
  for (const auto& p : pts) {
    std::function<Var<double>(const std::vector<Var<double>>&)> f = [&](const auto& v) {
      return mse(warp_rigid(v[0], v[1]), Var<double>::constant(target));
    };
    EXPECT_LT(grad_check(f, {img, Tensor<double>({1, 3}, {p[0], p[1], p[2]})}, 1e-6), 1e-4);
  }
}
