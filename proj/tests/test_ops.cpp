#include <gtest/gtest.h>

#include "modsynth/ops.hpp"
#include "test_support.hpp"

using namespace modsynth;
using modsynth::testing::central_differences;
using modsynth::testing::project;
using modsynth::testing::random_tensor;
using modsynth::testing::relative_error;

namespace {

// Direct-loop references, independent of im2col/GEMM.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                          int pad, PadMode mode) {
  const int k = w.h();
  const int ho = (x.h() + 2 * pad - k) / stride + 1, wo = (x.w() + 2 * pad - k) / stride + 1;
  Tensor<double> y(x.n(), w.n(), ho, wo);
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < w.n(); ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = b.empty() ? 0.0 : b[o];
          for (int c = 0; c < x.c(); ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (mode == PadMode::Reflect) {
                  iy = iy < 0 ? -iy : (iy >= x.h() ? 2 * x.h() - 2 - iy : iy);
                  ix = ix < 0 ? -ix : (ix >= x.w() ? 2 * x.w() - 2 - ix : ix);
                } else if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) {
                  continue;
                }
                acc += w.at(o, c, ky, kx) * x.at(n, c, iy, ix);
              }
          y.at(n, o, oy, ox) = acc;
        }
  return y;
}

Tensor<double> naive_conv_transpose(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                    int stride, int pad) {
  const int k = w.h();
  const int ho = (x.h() - 1) * stride - 2 * pad + k, wo = (x.w() - 1) * stride - 2 * pad + k;
  Tensor<double> y(x.n(), w.c(), ho, wo);
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < w.c(); ++o)
      for (int yy = 0; yy < ho; ++yy)
        for (int xx = 0; xx < wo; ++xx) y.at(n, o, yy, xx) = b.empty() ? 0.0 : b[o];
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int iy = 0; iy < x.h(); ++iy)
        for (int ix = 0; ix < x.w(); ++ix)
          for (int o = 0; o < w.c(); ++o)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int oy = iy * stride - pad + ky, ox = ix * stride - pad + kx;
                if (oy < 0 || oy >= ho || ox < 0 || ox >= wo) continue;
                y.at(n, o, oy, ox) += x.at(n, c, iy, ix) * w.at(c, o, ky, kx);
              }
  return y;
}

struct ConvCase {
  int k, stride, pad;
  PadMode mode;
};

}  // namespace

TEST(Gemm, MatchesTripleLoopForAllTransposes) {
  Rng rng(5);
  struct Case {
    int m, n, k;
    double beta;
  };
  for (Case cs : {Case{32, 256, 256, 1.0}, Case{16, 1024, 144, 0.0}, Case{7, 5, 3, 0.5}, Case{64, 64, 512, 1.0}}) {
    for (int ta = 0; ta < 2; ++ta)
      for (int tb = 0; tb < 2; ++tb) {
        auto a = random_tensor(rng, {1, 1, cs.m, cs.k});
        auto b = random_tensor(rng, {1, 1, cs.k, cs.n});
        auto c = random_tensor(rng, {1, 1, cs.m, cs.n});
        // Stored operands are the transposes when the flag is set.
        Tensor<double> as(1, 1, ta ? cs.k : cs.m, ta ? cs.m : cs.k), bs(1, 1, tb ? cs.n : cs.k, tb ? cs.k : cs.n);
        for (int i = 0; i < cs.m; ++i)
          for (int p = 0; p < cs.k; ++p) (ta ? as.at(0, 0, p, i) : as.at(0, 0, i, p)) = a.at(0, 0, i, p);
        for (int p = 0; p < cs.k; ++p)
          for (int j = 0; j < cs.n; ++j) (tb ? bs.at(0, 0, j, p) : bs.at(0, 0, p, j)) = b.at(0, 0, p, j);
        Tensor<double> out = c;
        detail::gemm<double>(ta, tb, cs.m, cs.n, cs.k, 2.0, as.data(), as.w(), bs.data(), bs.w(), cs.beta,
                             out.data(), cs.n);
        double err = 0;
        for (int i = 0; i < cs.m; ++i)
          for (int j = 0; j < cs.n; ++j) {
            double s = cs.beta * c.at(0, 0, i, j);
            for (int p = 0; p < cs.k; ++p) s += 2.0 * a.at(0, 0, i, p) * b.at(0, 0, p, j);
            err = std::max(err, std::abs(s - out.at(0, 0, i, j)));
          }
        EXPECT_LT(err, 1e-10) << cs.m << "x" << cs.n << "x" << cs.k << " ta=" << ta << " tb=" << tb;
      }
  }
}

TEST(ConvTranspose2d, InputGradientAtDecoderScale) {
  // Shapes where a faulty BLAS kernel was once observed.
  Rng rng(9);
  auto x = random_tensor(rng, {1, 32, 16, 16});
  auto w = random_tensor(rng, {32, 16, 4, 4});
  auto xv = Var<double>::parameter(x);
  auto y = conv_transpose2d(xv, Var<double>(w), Var<double>(), {2, 1});
  auto r = random_tensor(rng, y.shape());
  backward(y, &r);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < x.size(); i += 41) idx.push_back(i);
  auto numeric = central_differences(x, idx, [&] {
    NoGradGuard g;
    return project(conv_transpose2d(Var<double>(x), Var<double>(w), Var<double>(), {2, 1}).value(), r);
  });
  std::vector<double> analytic;
  for (std::size_t i : idx) analytic.push_back(xv.grad()[i]);
  EXPECT_LT(relative_error(analytic, numeric), 1e-6);
}

TEST(Conv2d, MatchesDirectLoops) {
  Rng rng(7);
  for (ConvCase cc : {ConvCase{3, 1, 1, PadMode::Zero}, ConvCase{3, 1, 1, PadMode::Reflect},
                      ConvCase{4, 2, 1, PadMode::Zero}, ConvCase{7, 1, 3, PadMode::Zero}, ConvCase{1, 1, 0, PadMode::Zero}}) {
    auto x = random_tensor(rng, {2, 3, 9, 8});
    auto w = random_tensor(rng, {4, 3, cc.k, cc.k});
    auto b = random_tensor(rng, {4, 1, 1, 1});
    auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(b), {cc.stride, cc.pad, cc.mode}).value();
    EXPECT_LT(max_abs_diff(y, naive_conv(x, w, b, cc.stride, cc.pad, cc.mode)), 1e-12);
  }
}

TEST(ConvTranspose2d, MatchesScatterLoops) {
  Rng rng(8);
  for (ConvCase cc : {ConvCase{4, 2, 1, PadMode::Zero}, ConvCase{7, 1, 3, PadMode::Zero}, ConvCase{3, 1, 1, PadMode::Zero}}) {
    auto x = random_tensor(rng, {2, 3, 5, 6});
    auto w = random_tensor(rng, {3, 2, cc.k, cc.k});
    auto b = random_tensor(rng, {2, 1, 1, 1});
    auto y = conv_transpose2d(Var<double>(x), Var<double>(w), Var<double>(b), {cc.stride, cc.pad}).value();
    EXPECT_LT(max_abs_diff(y, naive_conv_transpose(x, w, b, cc.stride, cc.pad)), 1e-12);
  }
}

TEST(Conv2d, StrideTwoHalvesResolution) {
  Tensor<double> x(1, 1, 256, 256);
  Tensor<double> w(2, 1, 4, 4);
  auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(), {2, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 128, 128}));
}

TEST(Conv2d, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d(Var<double>(Tensor<double>(1, 2, 8, 8)), Var<double>(Tensor<double>(1, 3, 3, 3)),
                      Var<double>(), {1, 1}),
               ContractError);
}

// Gradient checks of each differentiable op against central differences.
class OpGradient : public ::testing::Test {
 protected:
  Rng rng{11};

  /// Compares analytic gradients of sum(r * f(inputs)) for every input.
  void check(std::vector<Tensor<double>> inputs, const std::function<Var<double>(std::vector<Var<double>>&)>& f,
             double tol = 1e-6) {
    std::vector<Var<double>> vars;
    for (auto& t : inputs) vars.push_back(Var<double>::parameter(t));
    auto y = f(vars);
    auto r = random_tensor(rng, y.shape());
    backward(y, &r);
    for (std::size_t k = 0; k < vars.size(); ++k) {
      std::vector<double> analytic = vars[k].grad().vec();
      auto numeric = central_differences(inputs[k], modsynth::testing::all_indices(inputs[k]), [&] {
        NoGradGuard g;
        std::vector<Var<double>> vs;
        for (auto& t : inputs) vs.emplace_back(t);
        return project(f(vs).value(), r);
      });
      EXPECT_LT(relative_error(analytic, numeric), tol) << "input " << k;
    }
  }
};

TEST_F(OpGradient, Conv2dZeroAndReflect) {
  for (PadMode mode : {PadMode::Zero, PadMode::Reflect}) {
    check({random_tensor(rng, {2, 2, 6, 6}), random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {3, 1, 1, 1})},
          [mode](auto& v) { return conv2d(v[0], v[1], v[2], {1, 1, mode}); });
  }
  check({random_tensor(rng, {1, 2, 8, 8}), random_tensor(rng, {3, 2, 4, 4}), random_tensor(rng, {3, 1, 1, 1})},
        [](auto& v) { return conv2d(v[0], v[1], v[2], {2, 1}); });
}

TEST_F(OpGradient, ConvTranspose) {
  check({random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {3, 2, 4, 4}), random_tensor(rng, {2, 1, 1, 1})},
        [](auto& v) { return conv_transpose2d(v[0], v[1], v[2], {2, 1}); });
}

TEST_F(OpGradient, BatchNormTraining) {
  BatchNormStats<double> stats{Tensor<double>(3, 1, 1, 1), Tensor<double>(3, 1, 1, 1, 1.0), 0.1};
  check({random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {3, 1, 1, 1}), random_tensor(rng, {3, 1, 1, 1})},
        [&stats](auto& v) { return batch_norm(v[0], v[1], v[2], stats, true, false); });
}

TEST_F(OpGradient, ElementwiseAndReductions) {
  check({random_tensor(rng, {2, 3, 4, 4})}, [](auto& v) { return sigmoid(v[0]); });
  check({random_tensor(rng, {2, 3, 4, 4})}, [](auto& v) { return tanh(v[0]); });
  check({random_tensor(rng, {2, 3, 4, 4})}, [](auto& v) { return global_avg_pool(v[0]); });
  check({random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 2, 4, 4})},
        [](auto& v) { return slice_channels(concat_channels<double>({v[0], v[1]}), 1, 3); });
  check({random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 3, 1, 1}), random_tensor(rng, {2, 3, 1, 1})},
        [](auto& v) { return channel_affine(v[0], v[1], v[2]); });
}

TEST(BatchNorm, RunningStatsOnlyUpdateWhenAsked) {
  BatchNormStats<double> stats{Tensor<double>(1, 1, 1, 1), Tensor<double>(1, 1, 1, 1, 1.0), 0.1};
  Rng rng(3);
  Var<double> x(random_tensor(rng, {4, 1, 3, 3}, 2.0, 4.0));
  Var<double> g(Tensor<double>(1, 1, 1, 1, 1.0)), b(Tensor<double>(1, 1, 1, 1));
  batch_norm(x, g, b, stats, true, false);
  EXPECT_EQ(stats.running_mean[0], 0.0);
  batch_norm(x, g, b, stats, true, true);
  EXPECT_GT(stats.running_mean[0], 0.2);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  auto w = Var<double>::parameter(Tensor<double>(1, 1, 1, 1, 2.0));
  NoGradGuard guard;
  auto y = scale(w, 3.0);
  EXPECT_FALSE(y.requires_grad());
}
