#include <gtest/gtest.h>

#include <chrono>

#include "modsynth/losses.hpp"
#include "modsynth/networks.hpp"
#include "gradient_oracle.hpp"
#include "test_support.hpp"

using namespace modsynth;
using modsynth::testing::random_tensor;

namespace {

GeneratorConfig desk(int m, int size = 64) {
  GeneratorConfig c;
  c.modality_count = m;
  c.image_size = size;
  c.width_scale = 0.25;
  c.laf_block_size = size / 2;
  return c;
}

}  // namespace

TEST(SharedEncoder, DeskScaleShape) {
  Generator<float> g(desk(1), 1);
  auto f = g.encode_shared(0, Var<float>(Tensor<float>(1, 1, 64, 64)));
  EXPECT_EQ(f.shape(), (Shape{1, 64, 16, 16}));
}

TEST(SharedEncoder, WrongResolutionRejected) {
  Generator<float> g(desk(1), 1);
  EXPECT_THROW(g.encode_shared(0, Var<float>(Tensor<float>(1, 1, 63, 63))), ContractError);
  GeneratorConfig bad;
  bad.image_size = 255;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(SpecificEncoder, StyleWidthsAndFiniteOnZeroInput) {
  Generator<float> g(desk(2), 2);
  NoGradGuard guard;
  Var<float> zero(Tensor<float>(1, 1, 64, 64));
  EXPECT_EQ(g.style_code(zero).shape().c, 8);
  auto st = g.encode_style(zero);
  EXPECT_EQ(st.mean.shape(), (Shape{1, 64, 1, 1}));
  EXPECT_EQ(st.std.shape(), (Shape{1, 64, 1, 1}));
  EXPECT_TRUE(st.mean.value().all_finite());
  EXPECT_TRUE(st.std.value().all_finite());
}

TEST(Generator, OutputsForOneTwoThreeModalities) {
  for (int m : {1, 2, 3}) {
    Generator<float> g(desk(m), 3);
    Rng rng(m);
    std::vector<Tensor<float>> inputs;
    for (int k = 0; k < m; ++k) inputs.push_back(random_tensor(rng, {1, 1, 64, 64}).cast<float>());
    auto [synth, pseudo] = generator_forward(g, inputs);
    EXPECT_EQ(synth.shape(), (Shape{1, 1, 64, 64}));
    EXPECT_EQ(pseudo.shape(), (Shape{1, 1, 64, 64}));
    for (float v : synth.vec()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Generator, ModalityCountMismatchRejected) {
  Generator<float> g(desk(2), 3);
  EXPECT_THROW(generator_forward<float>(g, {Tensor<float>(1, 1, 64, 64)}), ContractError);
}

TEST(Generator, ShareEncoderCountMatchesModalities) {
  Generator<float> g(desk(3), 3);
  EXPECT_EQ(g.shared_encoder_parameters(2).size(), g.shared_encoder_parameters(0).size());
  EXPECT_THROW(g.shared_encoder_parameters(3), std::out_of_range);
}

TEST(Generator, DeterministicUnderSeed) {
  Rng rng(4);
  std::vector<Tensor<float>> in{random_tensor(rng, {1, 1, 64, 64}).cast<float>(),
                                random_tensor(rng, {1, 1, 64, 64}).cast<float>()};
  Generator<float> a(desk(2), 9), b(desk(2), 9);
  EXPECT_TRUE(bit_equal(generator_forward(a, in).first, generator_forward(b, in).first));
  EXPECT_TRUE(bit_equal(generator_forward(a, in).first, generator_forward(a, in).first));
}

TEST(Generator, EncodersDoNotShareParameters) {
  Generator<double> g(desk(2, 32), 5);
  Tensor<double> same(1, 2, 32, 32);
  Rng rng(5);
  auto slice = random_tensor(rng, {1, 1, 32, 32});
  for (int k = 0; k < 2; ++k) std::copy_n(slice.data(), slice.size(), same.plane(0, k));
  NoGradGuard guard;
  auto before = g.forward(Var<double>(same));
  for (auto& p : g.shared_encoder_parameters(1))
    for (auto& v : p.var.mutable_value().vec()) v += 0.01;
  auto after = g.forward(Var<double>(same));
  EXPECT_TRUE(bit_equal(before.shared[0].value(), after.shared[0].value()));
  EXPECT_GT(max_abs_diff(before.shared[1].value(), after.shared[1].value()), 0.0);
  // Identical inputs but separately initialized encoders.
  EXPECT_GT(max_abs_diff(before.shared[0].value(), before.shared[1].value()), 0.0);
}

TEST(Generator, PerLayerStyleVariant) {
  auto cfg = desk(2);
  cfg.per_layer_style = true;
  Generator<float> g(cfg, 1);
  NoGradGuard guard;
  auto out = g.forward(Var<float>(Tensor<float>(1, 2, 64, 64)));
  EXPECT_EQ(out.style.mean.shape().c, 4 * 64);
  EXPECT_EQ(out.synthesized.shape(), (Shape{1, 1, 64, 64}));
}

TEST(Generator, ReflectionPaddingVariant) {
  auto cfg = desk(1);
  cfg.residual_padding = PadMode::Reflect;
  Generator<float> g(cfg, 1);
  Rng rng(2);
  auto out = generator_forward<float>(g, {random_tensor(rng, {1, 1, 64, 64}).cast<float>()});
  EXPECT_TRUE(out.first.all_finite());
}

TEST(Discriminator, WidthsAndRange) {
  Discriminator<float> d(desk(2), 1);
  EXPECT_EQ(d.block_count(), 5);
  EXPECT_EQ(d.block_width(0), 16);  // 64 at full width
  for (int i = 1; i < 5; ++i) EXPECT_EQ(d.block_width(i), 2 * d.block_width(i - 1));
  Rng rng(1);
  NoGradGuard guard;
  auto p = d.forward(Var<float>(random_tensor(rng, {3, 2, 64, 64}).cast<float>()),
                     Var<float>(random_tensor(rng, {3, 1, 64, 64}).cast<float>()));
  EXPECT_EQ(p.shape(), (Shape{3, 1, 1, 1}));
  for (float v : p.value().vec()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Discriminator, ZeroProjectionGivesOneHalf) {
  Discriminator<double> d(desk(2), 1);
  d.projection().weight.mutable_value().fill(0.0);
  d.projection().bias.mutable_value().fill(0.0);
  Rng rng(1);
  NoGradGuard guard;
  auto p = d.forward(Var<double>(random_tensor(rng, {2, 2, 64, 64})), Var<double>(random_tensor(rng, {2, 1, 64, 64})));
  for (double v : p.value().vec()) EXPECT_EQ(v, 0.5);
}

TEST(Discriminator, InputMismatchRejected) {
  Discriminator<float> d(desk(2), 1);
  EXPECT_THROW(d.forward(Var<float>(Tensor<float>(1, 3, 64, 64)), Var<float>(Tensor<float>(1, 1, 64, 64))),
               ContractError);
  EXPECT_THROW(d.forward(Var<float>(Tensor<float>(1, 2, 64, 64)), Var<float>(Tensor<float>(1, 1, 32, 32))),
               ContractError);
}

TEST(FullScale, PaperShapesAndTiming) {
  GeneratorConfig cfg;  // 256x256, 64/256 channels, block 128
  for (int m : {1, 2, 3}) {
    cfg.modality_count = m;
    Generator<float> g(cfg, 1);
    auto t0 = std::chrono::steady_clock::now();
    NoGradGuard guard;
    auto out = g.forward(Var<float>(Tensor<float>(1, m, 256, 256, 0.1f)));
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_EQ(out.synthesized.shape(), (Shape{1, 1, 256, 256}));
    EXPECT_EQ(out.shared.front().shape(), (Shape{1, 256, 64, 64}));
    std::printf("M=%d forward %.2fs\n", m, s);
  }
}

TEST(EndToEnd, GeneratorLossGradientMatchesFiniteDifferences) {
  GeneratorConfig cfg = desk(2, 32);
  cfg.laf_block_size = 16;
  Generator<double> g(cfg, 21);
  Discriminator<double> d(cfg, 21);
  Rng rng(22);
  Tensor<double> src = random_tensor(rng, {1, 2, 32, 32});
  Tensor<double> real = random_tensor(rng, {1, 1, 32, 32});
  const auto t0 = std::chrono::steady_clock::now();
  auto r = modsynth::testing::check_generator_gradient(g, d, src, real, LossWeights{}, rng);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("sampled %zu of %zu params in %.1fs, rel err %.3g\n", r.sampled, r.total, s, r.relative_error);
  EXPECT_LT(r.relative_error, 1e-3);
}
