#include <gtest/gtest.h>

#include <complex>

#include "test_util.hpp"

using namespace ddmc;
using ddmc::testing::random_image;
using cd = std::complex<double>;

namespace {

// Brute-force centered orthonormal DFT: bins and pixels are indexed relative
// to (H/2, W/2).
ComplexImage<double> dft_oracle(const ComplexImage<double>& x, bool inverse) {
  const std::size_t h = x.height(), w = x.width();
  ComplexImage<double> out(h, w);
  const double sign = inverse ? 1.0 : -1.0;
  const double norm = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (std::size_t ku = 0; ku < h; ++ku)
    for (std::size_t kv = 0; kv < w; ++kv) {
      cd acc = 0;
      const double u = static_cast<double>(ku) - static_cast<double>(h / 2);
      const double v = static_cast<double>(kv) - static_cast<double>(w / 2);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          const double y = static_cast<double>(r) - static_cast<double>(h / 2);
          const double xx = static_cast<double>(c) - static_cast<double>(w / 2);
          const double ph = sign * 2 * std::numbers::pi * (u * y / h + v * xx / w);
          acc += cd(x.real[r * w + c], x.imag[r * w + c]) * cd(std::cos(ph), std::sin(ph));
        }
      out.real[ku * w + kv] = acc.real() * norm;
      out.imag[ku * w + kv] = acc.imag() * norm;
    }
  return out;
}

double max_diff(const ComplexImage<double>& a, const ComplexImage<double>& b) {
  return std::max(max_abs_diff(a.real, b.real), max_abs_diff(a.imag, b.imag));
}

double norm2(const Tensor<double>& re, const Tensor<double>& im) {
  double s = 0;
  for (std::size_t i = 0; i < re.size(); ++i) s += re[i] * re[i] + im[i] * im[i];
  return std::sqrt(s);
}

}  // namespace

TEST(Fourier, SinglePoint) {
  ComplexImage<double> x(Tensor<double>({1, 1}, {3.5}), Tensor<double>({1, 1}, {-1.0}));
  auto k = fft2c(x);
  EXPECT_DOUBLE_EQ(k.real[0], 3.5);
  EXPECT_DOUBLE_EQ(k.imag[0], -1.0);
  EXPECT_TRUE(k.centered);
}

TEST(Fourier, ConstantImageIsDcOnly) {
  const std::size_t n = 8;
  auto x = ComplexImage<double>::from_real(Tensor<double>({n, n}, 0.75));
  auto k = fft2c(x);
  for (std::size_t i = 0; i < n * n; ++i) {
    const double want = i == (n / 2) * n + n / 2 ? 0.75 * n : 0.0;
    EXPECT_NEAR(k.real[i], want, 1e-12);
    EXPECT_NEAR(k.imag[i], 0.0, 1e-12);
  }
}

TEST(Fourier, CenterImpulseInvertsToConstant) {
  const std::size_t n = 6;
  KSpaceGrid<double> k(n, n);
  k.real[(n / 2) * n + n / 2] = 1.0;
  auto x = ifft2c(k);
  for (std::size_t i = 0; i < n * n; ++i) {
    EXPECT_NEAR(x.real[i], 1.0 / n, 1e-12);
    EXPECT_NEAR(x.imag[i], 0.0, 1e-12);
  }
}

TEST(Fourier, MatchesDftOracle) {
  Rng rng(1);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {6, 10}, {12, 9}}) {
    auto x = random_image(h, w, rng);
    auto k = fft2c(x);
    auto want = dft_oracle(x, false);
    EXPECT_LT(std::max(max_abs_diff(k.real, want.real), max_abs_diff(k.imag, want.imag)), 1e-10) << h << "x" << w;
    KSpaceGrid<double> kk(x.real, x.imag);
    auto back = ifft2c(kk);
    EXPECT_LT(max_diff(back, dft_oracle(x, true)), 1e-10);
  }
}

TEST(Fourier, RoundTripFloat64x64) {
  Rng rng(2);
  auto x = random_image<float>(64, 64, rng);
  auto back = ifft2c(fft2c(x));
  EXPECT_LT(std::max(max_abs_diff(back.real, x.real), max_abs_diff(back.imag, x.imag)), 1e-6f);
}

TEST(Fourier, Parseval) {
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    auto x = random_image(16, 16, rng);
    auto k = fft2c(x);
    const double a = norm2(x.real, x.imag), b = norm2(k.real, k.imag);
    EXPECT_LT(std::abs(a - b) / a, 1e-6);
  }
}

TEST(Fourier, Linearity) {
  Rng rng(4);
  auto x = random_image(8, 8, rng), z = random_image(8, 8, rng);
  const double a = 1.3, b = -0.4;
  ComplexImage<double> mix(8, 8);
  for (std::size_t i = 0; i < 64; ++i) {
    mix.real[i] = a * x.real[i] + b * z.real[i];
    mix.imag[i] = a * x.imag[i] + b * z.imag[i];
  }
  auto km = fft2c(mix), kx = fft2c(x), kz = fft2c(z);
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_NEAR(km.real[i], a * kx.real[i] + b * kz.real[i], 1e-12);
    EXPECT_NEAR(km.imag[i], a * kx.imag[i] + b * kz.imag[i], 1e-12);
  }
}

TEST(Fourier, BatchedVarMatchesPlanes) {
  Rng rng(5);
  auto x = random_image(8, 8, rng);
  auto t = pack_complex<double>(x);
  auto k = fft2c(Var<double>::constant(t)).value();
  auto ref = fft2c(x);
  auto got = unpack_complex<KSpaceGrid<double>>(k, 0);
  EXPECT_LT(std::max(max_abs_diff(got.real, ref.real), max_abs_diff(got.imag, ref.imag)), 1e-14);
}

TEST(Fourier, GradientThroughRoundTrip) {
  Rng rng(6);
  for (int t = 0; t < 5; ++t) {
    auto x = ddmc::testing::random_tensor({1, 2, 6, 6}, rng);
    auto target = ddmc::testing::random_tensor({1, 2, 6, 6}, rng);
    std::function<Var<double>(const std::vector<Var<double>>&)> f = [&](const auto& v) {
      return mse(magnitude(ifft2c(fft2c(v[0]))), magnitude(Var<double>::constant(target)));
    };
    EXPECT_LT(grad_check(f, {x}), 1e-5);
  }
}
