#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ddmc;
using ddmc::testing::random_tensor;

namespace {

StageLossReport report_of(double li, double lk, double lik, double lki) {
  StageLossReport r;
  r.mode = DomainMode::dual;
  r.components = {{"L_i", li}, {"L_k", lk}, {"L_ik", lik}, {"L_ki", lki}};
  return r;
}

struct Case {
  StageOutputs<double> out;
  GroundTruth<double> gt;
};

Case random_case(Rng& rng, std::size_t n = 2, std::size_t h = 8) {
  auto xi = random_tensor({n, 2, h, h}, rng), yk = random_tensor({n, 2, h, h}, rng);
  auto gx = random_tensor({n, 2, h, h}, rng);
  auto c = Var<double>::constant(gx);
  return {{Var<double>::constant(xi), Var<double>::constant(yk)}, {c, fft2c(c)}};
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace

TEST(StageTotal, SubstitutionExample) {
  EXPECT_NEAR(stage_total(report_of(1, 2, 3, 4), {0.01, 0.7}), 3.148, 1e-12);
}

TEST(StageTotal, BetaZeroDropsCrossTerms) {
  EXPECT_DOUBLE_EQ(stage_total(report_of(1.5, 2.5, 9, 9), {0.01, 0.0}), 1.5 + 0.01 * 2.5);
}

TEST(StageTotal, SingleDomainModes) {
  auto r = report_of(1, 2, 3, 4);
  r.mode = DomainMode::image;
  EXPECT_EQ(stage_total(r, {}), 1.0);
  r.mode = DomainMode::kspace;
  EXPECT_EQ(stage_total(r, {}), 2.0);
}

TEST(StageTotal, MonotoneInEachComponent) {
  const LossWeights w{0.05, 0.3};
  const double base = stage_total(report_of(1, 1, 1, 1), w);
  EXPECT_GT(stage_total(report_of(1.1, 1, 1, 1), w), base);
  EXPECT_GT(stage_total(report_of(1, 1.1, 1, 1), w), base);
  EXPECT_GT(stage_total(report_of(1, 1, 1.1, 1), w), base);
  EXPECT_GT(stage_total(report_of(1, 1, 1, 1.1), w), base);
}

TEST(StageLoss, ReportMatchesComponentsAndTotal) {
  Rng rng(1);
  auto c = random_case(rng);
  const LossWeights w{0.01, 0.7};
  auto l = stage_loss(Stage::synthesis, c.out, c.gt, w, DomainMode::dual);
  EXPECT_NEAR(l.report.total, stage_total(l.report, w), 1e-12);
  EXPECT_NEAR(l.total.item(), l.report.total, 1e-15);
  // L_i by hand.
  double s = 0;
  const auto& a = c.out.image.value();
  const auto& b = c.gt.image.value();
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_NEAR(*l.report.component("L_i"), s / a.size(), 1e-14);
  for (const char* n : kComponentNames) EXPECT_GE(*l.report.component(n), 0.0);
}

TEST(StageLoss, SingleDomainComponentsAbsent) {
  Rng rng(2);
  auto c = random_case(rng);
  auto li = stage_loss(Stage::registration, {c.out.image, {}}, c.gt, {}, DomainMode::image).report;
  EXPECT_TRUE(li.component("L_i").has_value());
  EXPECT_FALSE(li.component("L_k").has_value());
  EXPECT_FALSE(li.component("L_ik").has_value());
  auto lk = stage_loss(Stage::registration, {{}, c.out.kspace}, c.gt, {}, DomainMode::kspace).report;
  EXPECT_FALSE(lk.component("L_i").has_value());
  EXPECT_EQ(lk.total, *lk.component("L_k"));
}

TEST(StageLoss, MissingOutputsRejected) {
  Rng rng(3);
  auto c = random_case(rng);
  EXPECT_THROW(stage_loss(Stage::reconstruction, {c.out.image, {}}, c.gt, {}, DomainMode::dual), ValueError);
  EXPECT_THROW(stage_loss(Stage::reconstruction, {{}, c.out.kspace}, c.gt, {}, DomainMode::image), ValueError);
  EXPECT_THROW(stage_loss(Stage::reconstruction, c.out, c.gt, {0.0, 0.7}, DomainMode::dual), ValueError);
}

TEST(StageLoss, PerfectOutputsGiveZero) {
  Rng rng(4);
  auto c = random_case(rng);
  auto l = stage_loss(Stage::reconstruction, {c.gt.image, c.gt.kspace}, c.gt, {}, DomainMode::dual).report;
  for (const char* n : kComponentNames) EXPECT_NEAR(*l.component(n), 0.0, 1e-28);
  EXPECT_NEAR(l.total, 0.0, 1e-28);
}

TEST(ParsevalCollapse, GapsVanishUnderComplexLoss) {
  Rng rng(5);
  for (int t = 0; t < 5; ++t) {
    auto c = random_case(rng, 2, 16);
    auto [gk, gi] = parseval_collapse_check(c.out, c.gt);
    auto r = stage_loss(Stage::synthesis, c.out, c.gt, {}, DomainMode::dual).report;
    EXPECT_LT(gk / *r.component("L_k"), 1e-5);
    EXPECT_LT(gi / *r.component("L_i"), 1e-5);
  }
}

TEST(ParsevalCollapse, TotalReducesToTwoTerms) {
  Rng rng(6);
  for (auto w : {LossWeights{0.01, 0.7}, LossWeights{0.5, 0.0}, LossWeights{2.0, 3.0}}) {
    auto c = random_case(rng);
    auto r = stage_loss(Stage::reconstruction, c.out, c.gt, w, DomainMode::dual).report;
    const double want = (1 + w.alpha * w.beta) * *r.component("L_i") + (w.alpha + w.beta) * *r.component("L_k");
    EXPECT_LT(rel(r.total, want), 1e-5);
  }
}

TEST(ParsevalCollapse, MagnitudeModeBreaksIt) {
  Rng rng(7);
  auto c = random_case(rng);
  auto [gk, gi] = parseval_collapse_check(c.out, c.gt, ImageLoss::magnitude);
  EXPECT_GT(gk, 1e-3);
  EXPECT_GT(gi, 1e-3);
}

TEST(ParsevalCollapse, ZeroCaseExact) {
  Tensor<double> z({1, 2, 8, 8});
  auto v = Var<double>::constant(z);
  auto [gk, gi] = parseval_collapse_check<double>({v, v}, {v, v});
  EXPECT_EQ(gk, 0.0);
  EXPECT_EQ(gi, 0.0);
}

TEST(StageLoss, GradientsPassFiniteDifferences) {
  Rng rng(8);
  for (auto mode : {DomainMode::dual, DomainMode::image, DomainMode::kspace})
    for (auto il : {ImageLoss::complex, ImageLoss::magnitude})
      for (int t = 0; t < 2; ++t) {
        auto gx = random_tensor({1, 2, 6, 6}, rng);
        auto gvar = Var<double>::constant(gx);
        GroundTruth<double> gt{gvar, fft2c(gvar)};
        std::function<Var<double>(const std::vector<Var<double>>&)> f = [&](const auto& v) {
          return stage_loss(Stage::synthesis, {v[0], v[1]}, gt, {0.3, 0.7}, mode, il).total;
        };
        EXPECT_LT(grad_check(f, {random_tensor({1, 2, 6, 6}, rng), random_tensor({1, 2, 6, 6}, rng)}), 1e-4);
      }
}
