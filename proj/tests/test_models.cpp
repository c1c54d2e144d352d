#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ddmc;
using ddmc::testing::random_tensor;

namespace {

UNetConfig small_unet(std::size_t in = 2) { return {2, 4, in, 2}; }

RegNetConfig small_reg(std::size_t n = 16) {
  RegNetConfig c;
  c.height = c.width = n;
  return c;
}

SamplingMask small_mask(std::size_t h) {
  MaskParams p;
  p.height = h;
  p.acceleration = 2;
  p.seed = 3;
  return make_mask(p);
}

}  // namespace

TEST(UNet, ShapesAndChannels) {
  UNet<double> net(small_unet(4), 1);
  Rng rng(1);
  auto x = Var<double>::constant(random_tensor({2, 4, 16, 16}, rng));
  auto y = net.forward(x, true);
  EXPECT_EQ(y.shape(), (Shape{2, 2, 16, 16}));
  EXPECT_THROW(net.forward(Var<double>::constant(random_tensor({1, 2, 16, 16}, rng)), true), ModeError);
  EXPECT_THROW(net.forward(Var<double>::constant(random_tensor({1, 4, 10, 10}, rng)), true), ShapeError);
}

TEST(UNet, ZeroOutputLayer) {
  UNet<double> net(small_unet(), 2);
  net.zero_output_layer();
  Rng rng(2);
  auto y = net.forward(Var<double>::constant(random_tensor({1, 2, 8, 8}, rng)), false);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(UNet, SeedDeterminesWeights) {
  UNet<double> a(small_unet(), 5), b(small_unet(), 5), c(small_unet(), 6);
  EXPECT_EQ(a.params().hash(), b.params().hash());
  EXPECT_NE(a.params().hash(), c.params().hash());
}

TEST(UNet, GradientsReachAllTrainableParams) {
  UNet<double> net(small_unet(), 3);
  Rng rng(3);
  auto x = Var<double>::constant(random_tensor({2, 2, 8, 8}, rng));
  auto t = Var<double>::constant(random_tensor({2, 2, 8, 8}, rng));
  backward(mse(net.forward(x, true), t));
  for (auto& e : net.params().entries())
    if (e.trainable) EXPECT_TRUE(e.var.has_grad()) << e.name;
}

TEST(RegNet, FlatSizeAndZeroInit) {
  RegNetConfig c;
  EXPECT_EQ(c.flat_size(), 8u * 4 * 4);
  RegNet<double> net(small_reg(32), 4);
  Rng rng(4);
  auto m = Var<double>::constant(random_tensor({3, 2, 32, 32}, rng));
  auto f = Var<double>::constant(random_tensor({3, 2, 32, 32}, rng));
  auto r = net.forward(m, f, false);
  EXPECT_EQ(r.params.shape(), (Shape{3, 3}));
  // The last layer starts at zero, so the initial warp is the identity.
  for (double v : r.params.value().values()) EXPECT_EQ(v, 0.0);
  EXPECT_LT(max_abs_diff(r.warped.value(), m.value()), 1e-15);
}

TEST(RegNet, RejectsBadExtents) {
  EXPECT_THROW(RegNet<double>(small_reg(24), 0), ShapeError);
  RegNet<double> net(small_reg(16), 0);
  Rng rng(5);
  auto a = Var<double>::constant(random_tensor({1, 2, 32, 32}, rng));
  EXPECT_THROW(net.forward(a, a, false), ShapeError);
}

TEST(RegNet, OutputScaling) {
  RegNet<double> net(small_reg(16), 6);
  net.params().get("fc2.bias").mutable_value() = Tensor<double>({3}, {1.0, -0.5, 0.25});
  Rng rng(6);
  auto a = Var<double>::constant(random_tensor({1, 2, 16, 16}, rng));
  auto r = net.forward(a, a, false);
  EXPECT_NEAR(r.params.value()[0], 8.0, 1e-12);
  EXPECT_NEAR(r.params.value()[1], -4.0, 1e-12);
  EXPECT_NEAR(r.params.value()[2], 0.25 * std::numbers::pi / 18, 1e-12);
}

TEST(RegNet, SharedBindingAccumulatesBothBranches) {
  RegNet<double> gi(small_reg(), 7), gk(small_reg(), 8);
  EXPECT_NE(gi.params().hash(), gk.params().hash());
  auto shared = shared_registration_binding(gi, gk);
  EXPECT_EQ(&gi.params(), &gk.params());
  EXPECT_EQ(shared.get(), &gi.params());

  Rng rng(7);
  auto mov = Var<double>::constant(random_tensor({1, 2, 16, 16}, rng));
  auto fix = Var<double>::constant(random_tensor({1, 2, 16, 16}, rng));
  auto ymov = Var<double>::constant(fft2c(mov).value());
  auto yfix = Var<double>::constant(fft2c(fix).value());

  // Gradient from both branches equals the sum of each branch alone.
  auto grad_of = [&](bool img, bool ks) {
    shared->zero_grad();
    Var<double> loss = Var<double>::constant(Tensor<double>({1}, 0.0));
    if (img) loss = add(loss, mse(gi.forward(mov, fix, true).warped, fix));
    if (ks) loss = add(loss, mse(reg_forward_kspace(gk, ymov, yfix, true).warped, yfix));
    backward(sum(loss));
    return shared->get("fc2.weight").grad();
  };
  auto both = grad_of(true, true);
  auto a = grad_of(true, false);
  auto b = grad_of(false, true);
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], a[i] + b[i], 1e-10);
  EXPECT_THROW(gi.bind(std::make_shared<ParamSet<double>>()), IntegrityError);
}

TEST(RegNet, KspaceWiringMatchesImagePath) {
  RegNet<double> g(small_reg(), 9);
  g.params().get("fc2.bias").mutable_value() = Tensor<double>({3}, {0.1, 0.2, 0.3});
  Rng rng(8);
  auto mov = random_tensor({1, 2, 16, 16}, rng), fix = random_tensor({1, 2, 16, 16}, rng);
  auto ri = g.forward(Var<double>::constant(mov), Var<double>::constant(fix), false);
  auto rk = reg_forward_kspace(g, fft2c(Var<double>::constant(mov)), fft2c(Var<double>::constant(fix)), false);
  EXPECT_LT(max_abs_diff(ri.params.value(), rk.params.value()), 1e-12);
  EXPECT_LT(max_abs_diff(fft2c(ri.warped).value(), rk.warped.value()), 1e-12);
}

TEST(ReconNet, ModeChannelChecks) {
  ReconNetConfig c{2, 4, ContrastMode::single, true};
  EXPECT_EQ(c.in_channels(), 2u);
  c.contrast = ContrastMode::concat;
  EXPECT_EQ(c.in_channels(), 4u);
  ReconNet<double> net({2, 4, ContrastMode::single, true}, 1);
  Rng rng(9);
  auto in = Var<double>::constant(random_tensor({1, 4, 16, 16}, rng));
  EXPECT_THROW(net.forward(in, Tensor<double>({1, 2, 16, 16}), small_mask(16), Domain::kspace, false), ModeError);
}

TEST(ReconNet, KspaceBranchKeepsMeasuredRows) {
  ReconNet<double> net({2, 4, ContrastMode::fused, true}, 2);
  Rng rng(10);
  auto mask = small_mask(16);
  auto y = random_tensor({1, 2, 16, 16}, rng);
  Tensor<double> yu = y;
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t r = 0; r < 16; ++r)
      if (!mask.sampled[r])
        for (std::size_t c = 0; c < 16; ++c) yu[(p * 16 + r) * 16 + c] = 0;
  auto ref = random_tensor({1, 2, 16, 16}, rng);
  auto in = concat_channels(Var<double>::constant(ref), Var<double>::constant(yu));
  auto out = net.forward(in, yu, mask, Domain::kspace, true).value();
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t r = 0; r < 16; ++r)
      if (mask.sampled[r])
        for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(out[(p * 16 + r) * 16 + c], yu[(p * 16 + r) * 16 + c]);
}

TEST(ReconNet, ImageBranchIsDataConsistent) {
  ReconNet<double> net({2, 4, ContrastMode::single, true}, 3);
  Rng rng(11);
  auto mask = small_mask(16);
  auto x = random_tensor({1, 2, 16, 16}, rng);
  auto yfull = fft2c(Var<double>::constant(x)).value();
  Tensor<double> yu = yfull;
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t r = 0; r < 16; ++r)
      if (!mask.sampled[r])
        for (std::size_t c = 0; c < 16; ++c) yu[(p * 16 + r) * 16 + c] = 0;
  auto zf = ifft2c(Var<double>::constant(yu));
  auto out = net.forward(zf, yu, mask, Domain::image, false);
  auto k = fft2c(out).value();
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t r = 0; r < 16; ++r)
      if (mask.sampled[r])
        for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(k[(p * 16 + r) * 16 + c], yu[(p * 16 + r) * 16 + c], 1e-12);
}

TEST(ReconNet, ZeroCorrectionReturnsMeasuredInput) {
  // With a zeroed output layer and DC off, the output equals the measured channels.
  ReconNet<double> net({2, 4, ContrastMode::concat, false}, 4);
  net.unet().zero_output_layer();
  Rng rng(12);
  auto in = random_tensor({1, 4, 16, 16}, rng);
  auto out = net.forward(Var<double>::constant(in), Tensor<double>({1, 2, 16, 16}), small_mask(16), Domain::image, false);
  auto meas = slice_channels(Var<double>::constant(in), 2, 2).value();
  EXPECT_EQ(out.value(), meas);
}
