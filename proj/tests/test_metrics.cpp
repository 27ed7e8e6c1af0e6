#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "modsynth/metrics.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace modsynth;
using modsynth::testing::MetricOracle;
using modsynth::testing::random_tensor;

namespace {

Tensor<double> image(std::vector<double> values) {
  Tensor<double> t(1, 1, 1, static_cast<int>(values.size()));
  t.vec() = std::move(values);
  return t;
}

}  // namespace

TEST(Psnr, HandCases) {
  EXPECT_NEAR(psnr(image({0, 1}), image({0, 0})), 3.0103, 1e-4);
  Tensor<double> real(1, 1, 2, 2, 0.5), synth(1, 1, 2, 2, 0.25);
  EXPECT_NEAR(psnr(real, synth), 6.0206, 1e-4);
  EXPECT_TRUE(std::isinf(psnr(real, real)));
}

TEST(Psnr, DecreasesWithError) {
  Tensor<double> real(1, 1, 4, 4, 0.5);
  real[0] = 1.0;
  double prev = std::numeric_limits<double>::infinity();
  for (double e = 0.01; e < 0.5; e += 0.05) {
    Tensor<double> synth = real;
    for (auto& v : synth.vec()) v += e;
    const double p = psnr(real, synth);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Ssim, HandCases) {
  EXPECT_NEAR(ssim(image({0, 1}), image({1, 0})), -0.9964, 1e-4);
  EXPECT_DOUBLE_EQ(ssim(image({0.2, 0.7, 0.1}), image({0.2, 0.7, 0.1})), 1.0);
  EXPECT_DOUBLE_EQ(ssim(image({0.4, 0.4}), image({0.4, 0.4})), 1.0);
}

TEST(Ssim, Symmetric) {
  Rng rng(2);
  auto a = random_tensor(rng, {1, 1, 16, 16}, 0, 1), b = random_tensor(rng, {1, 1, 16, 16}, 0, 1);
  EXPECT_EQ(ssim(a, b), ssim(b, a));
  EXPECT_EQ(ssim(a, b, {1.0, true}), ssim(b, a, {1.0, true}));
  EXPECT_NEAR(ssim(a, a, {1.0, true}), 1.0, 1e-12);
}

TEST(Nrmse, HandCases) {
  EXPECT_NEAR(nrmse(image({3, 4}), image({3, 0})), 0.8, 1e-12);
  EXPECT_EQ(nrmse(image({3, 4}), image({3, 4})), 0.0);
  EXPECT_DOUBLE_EQ(nrmse(image({0.3, -2, 5}), image({0, 0, 0})), 1.0);
  EXPECT_THROW(nrmse(image({0, 0}), image({1, 0})), ContractError);
}

TEST(Metrics, ShapeMismatchRejected) {
  EXPECT_THROW(psnr(image({0, 1}), image({0, 1, 2})), ContractError);
  EXPECT_THROW(ssim(image({0, 1}), image({0, 1, 2})), ContractError);
}

TEST(Metrics, MatchDirectFormulasOnRandomPairs) {
  Rng rng(8);
  for (int k = 0; k < 50; ++k) {
    auto y = random_tensor(rng, {1, 1, 32, 32}, 0, 1);
    auto yp = random_tensor(rng, {1, 1, 32, 32}, 0, 1);
    EXPECT_NEAR(psnr(y, yp), MetricOracle::psnr(y.vec(), yp.vec()), 1e-9);
    EXPECT_NEAR(ssim(y, yp), MetricOracle::ssim(y.vec(), yp.vec()), 1e-9);
    EXPECT_NEAR(nrmse(y, yp), MetricOracle::nrmse(y.vec(), yp.vec()), 1e-9);
  }
}

TEST(MeanStd, SampleStandardDeviation) {
  auto m = mean_std({2, 4, 4, 4, 5, 5, 7, 9});
  EXPECT_DOUBLE_EQ(m.mean, 5.0);
  EXPECT_NEAR(m.std, std::sqrt(32.0 / 7.0), 1e-12);
  EXPECT_EQ(mean_std({3.0}).std, 0.0);
}

TEST(PairedTTest, ReferenceExample) {
  std::vector<double> b = {1, 2, 3, 4, 5};
  std::vector<double> a = {1.5, 2.7, 3.3, 4.6, 5.4};
  auto r = paired_t_test(a, b);
  auto ref = modsynth::testing::reference_paired_t(a, b);
  EXPECT_NEAR(r.t, ref.t, 1e-6);
  EXPECT_NEAR(r.p, ref.p, 1e-6);
  EXPECT_EQ(r.df, 4u);
}

TEST(PairedTTest, RandomizedAgainstReference) {
  Rng rng(10);
  for (int k = 0; k < 20; ++k) {
    const int n = 2 + static_cast<int>(rng.below(60));
    std::vector<double> a(n), b(n);
    const double shift = rng.uniform(-1, 1);
    for (int i = 0; i < n; ++i) {
      b[i] = rng.uniform(20, 30);
      a[i] = b[i] + shift + rng.normal();
    }
    auto r = paired_t_test(a, b);
    auto ref = modsynth::testing::reference_paired_t(a, b);
    EXPECT_NEAR(r.t, ref.t, 1e-6 * std::max(1.0, std::abs(ref.t)));
    EXPECT_NEAR(r.p, ref.p, 1e-6);
  }
}

TEST(PairedTTest, DegenerateConventions) {
  std::vector<double> a = {1, 2, 3};
  auto same = paired_t_test(a, a);
  EXPECT_EQ(same.p, 1.0);
  auto constant = paired_t_test({2, 3, 4, 5}, {1, 2, 3, 4});
  EXPECT_EQ(constant.p, 0.0);
  EXPECT_TRUE(std::isinf(constant.t));
  EXPECT_THROW(paired_t_test({1}, {2}), ContractError);
  EXPECT_THROW(paired_t_test({1, 2}, {2}), ContractError);
}

TEST(IncompleteBeta, KnownValues) {
  EXPECT_NEAR(regularized_incomplete_beta(1, 1, 0.3), 0.3, 1e-12);
  EXPECT_NEAR(regularized_incomplete_beta(2, 3, 0.4), 0.5248, 1e-12);
  EXPECT_EQ(regularized_incomplete_beta(2, 3, 0.0), 0.0);
  EXPECT_EQ(regularized_incomplete_beta(2, 3, 1.0), 1.0);
}

TEST(MetricReport, AggregatesAndCsv) {
  MetricReport report;
  report.slices.push_back({"s1", 0, 20.0, 0.8, 0.2});
  report.slices.push_back({"s1", 1, 22.0, 0.9, 0.1});
  report.slices.push_back({"s2", 0, std::numeric_limits<double>::infinity(), 1.0, 0.0});
  auto a = report.aggregate();
  EXPECT_EQ(a.sample_count, 3u);
  EXPECT_EQ(a.infinite_psnr, 1u);
  EXPECT_DOUBLE_EQ(a.psnr.mean, 21.0);
  EXPECT_NEAR(a.psnr.std, std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(a.ssim.mean, 0.9, 1e-12);
  std::ostringstream os;
  write_metric_csv(os, report);
  const std::string csv = os.str();
  EXPECT_EQ(csv.rfind("subject_id,slice_index,psnr,ssim,nrmse\n", 0), 0u);
  EXPECT_NE(csv.find("s2,0,inf,1,0\n"), std::string::npos);
  EXPECT_NE(csv.find("aggregate,3,21.0000 ± 1.4142,0.9000 ± 0.1000,0.1000 ± 0.1000\n"), std::string::npos);
}

TEST(MetricReport, AllExactMatchesGiveInfinitePsnr) {
  MetricReport report;
  report.slices.push_back({"s1", 0, std::numeric_limits<double>::infinity(), 1.0, 0.0});
  report.slices.push_back({"s1", 1, std::numeric_limits<double>::infinity(), 1.0, 0.0});
  const auto a = report.aggregate();
  EXPECT_TRUE(std::isinf(a.psnr.mean));
  EXPECT_EQ(a.psnr.count, 0u);
  EXPECT_EQ(format_mean_std(a.psnr), "inf ± 0.0000");
}
