#include "ganformer/tensor.hpp"

#include <cmath>
#include <functional>
#include <type_traits>
#include <vector>

#include <gtest/gtest.h>

#include "support/gradcheck.hpp"

namespace ganformer {
namespace {

using testing::check_gradients;
using testing::GradCheckOptions;
using testing::probe;
using testing::random_tensors;

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t p,
                                 std::size_t q, std::size_t r) {
  std::vector<double> c(p * r, 0.0);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < q; ++k) c[i * r + j] += a[i * q + k] * b[k * r + j];
  return c;
}

std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3), O = w.extent(0);
  const long K = static_cast<long>(w.extent(2)), pad = K / 2;
  std::vector<double> out(N * O * H * W, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (long y = 0; y < static_cast<long>(H); ++y)
        for (long xx = 0; xx < static_cast<long>(W); ++xx) {
          double s = b.defined() ? b[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (long ky = 0; ky < K; ++ky)
              for (long kx = 0; kx < K; ++kx) {
                const long sy = y + ky - pad, sx = xx + kx - pad;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
                s += x.at({n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)}) *
                     w.at({o, c, static_cast<std::size_t>(ky), static_cast<std::size_t>(kx)});
              }
          out[((n * O + o) * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(xx)] = s;
        }
  return out;
}

// --- matmul -----------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor<float> eye({2, 2}, {1, 0, 0, 1});
  Tensor<float> m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m).values(), m.values());
}

TEST(Matmul, ZeroRowSelection) {
  Tensor<float> a({1, 2}, {1, 0});
  Tensor<float> b({2, 1}, {0, 5});
  EXPECT_EQ(matmul(a, b).values(), std::vector<float>{0});
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t p = 1 + rng.below(6), q = 1 + rng.below(6), r = 1 + rng.below(6);
    auto in = random_tensors({{p, q}, {q, r}}, rng);
    const auto expected = naive_matmul(in[0].values(), in[1].values(), p, q, r);
    const auto got = matmul(cast<float>(in[0]), cast<float>(in[1]));
    ASSERT_EQ(got.shape(), (Shape{p, r}));
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-5);
  }
}

TEST(Matmul, BatchedAndTransposedForms) {
  Rng rng(4);
  auto in = random_tensors({{3, 2, 4}, {3, 5, 4}}, rng);
  const auto got = matmul(in[0], in[1], /*transpose_b=*/true);
  ASSERT_EQ(got.shape(), (Shape{3, 2, 5}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += in[0].at({b, i, k}) * in[1].at({b, j, k});
        EXPECT_NEAR(got.at({b, i, j}), s, 1e-12);
      }
}

TEST(Matmul, ShapeMismatchReportsBothShapes) {
  Tensor<float> a({2, 3});
  Tensor<float> b({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,2]"), std::string::npos);
  }
}

// --- softmax ----------------------------------------------------------------

TEST(Softmax, UniformOnEqualInputs) {
  const auto y = softmax(Tensor<double>({3}, {0, 0, 0}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, NoOverflowOnLargeLogits) {
  const auto y = softmax(Tensor<double>({2}, {1000, 0}));
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(Softmax, MatchesDirectFormula) {
  const auto y = softmax(Tensor<double>({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(y[1], std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(y[2], std::exp(3.0) / z, 1e-15);
}

TEST(Softmax, RowsSumToOneAlongAnyAxis) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const Shape s{1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4)};
    const auto x = cast<float>(random_tensors({s}, rng, 20.0)[0]);
    for (int axis = 0; axis < 3; ++axis) {
      const auto y = softmax(x, axis);
      const std::size_t len = s[axis];
      std::size_t inner = 1;
      for (int k = axis + 1; k < 3; ++k) inner *= s[k];
      for (std::size_t o = 0; o < y.size() / (len * inner); ++o)
        for (std::size_t j = 0; j < inner; ++j) {
          double t = 0;
          for (std::size_t k = 0; k < len; ++k) {
            const float v = y[o * len * inner + k * inner + j];
            EXPECT_GE(v, 0.0f);
            t += v;
          }
          EXPECT_NEAR(t, 1.0, 1e-5);
        }
    }
  }
}

TEST(Softmax, InvalidAxisThrows) {
  EXPECT_THROW(softmax(Tensor<float>({2, 2}), 2), UsageError);
}

// --- conv2d -----------------------------------------------------------------

TEST(Conv2d, CenterDeltaKernelIsIdentity) {
  Rng rng(6);
  const auto x = cast<float>(random_tensors({{2, 3, 5, 4}}, rng)[0]);
  std::vector<float> w(3 * 3 * 9, 0.0f);
  for (std::size_t c = 0; c < 3; ++c) w[(c * 3 + c) * 9 + 4] = 1.0f;
  const auto y = conv2d(x, Tensor<float>({3, 3, 3, 3}, w), Tensor<float>::zeros({3}));
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, OnesKernelSumsWindow) {
  const auto y = conv2d(Tensor<float>::ones({1, 1, 5, 5}), Tensor<float>::ones({1, 1, 3, 3}), Tensor<float>::zeros({1}));
  EXPECT_EQ(y.at({0, 0, 2, 2}), 9.0f);
  EXPECT_EQ(y.at({0, 0, 0, 0}), 4.0f);  // corner sees a 2x2 window
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
  Rng rng(7);
  auto in = random_tensors({{1, 2, 5, 5}, {3, 2, 3, 3}, {3}}, rng);
  const auto expected = naive_conv(in[0], in[1], in[2]);
  const auto got = conv2d(cast<float>(in[0]), cast<float>(in[1]), cast<float>(in[2]));
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-5);
}

TEST(Conv2d, RandomExtentsMatchOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t N = 1 + rng.below(3), C = 1 + rng.below(4), O = 1 + rng.below(4);
    const std::size_t H = 1 + rng.below(6), W = 1 + rng.below(6), K = rng.below(2) ? 3 : 1;
    auto in = random_tensors({{N, C, H, W}, {O, C, K, K}, {O}}, rng);
    const auto expected = naive_conv(in[0], in[1], in[2]);
    const auto got = conv2d(cast<float>(in[0]), cast<float>(in[1]), cast<float>(in[2]));
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-5);
  }
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(conv2d(Tensor<float>({1, 2, 4, 4}), Tensor<float>({1, 3, 3, 3}), Tensor<float>({1})), DimensionError);
}

// --- resize_bilinear ----------------------------------------------------------

TEST(ResizeBilinear, ConstantImageStaysConstant) {
  const Tensor<float> x({1, 2, 4, 4}, 0.37f);
  for (const auto f : {Resize::kUp2, Resize::kDown2}) {
    for (const float v : resize_bilinear(x, f).values()) EXPECT_FLOAT_EQ(v, 0.37f);
  }
  const auto rt = resize_bilinear(resize_bilinear(x, Resize::kUp2), Resize::kDown2);
  EXPECT_EQ(rt.shape(), x.shape());
  for (const float v : rt.values()) EXPECT_FLOAT_EQ(v, 0.37f);
}

TEST(ResizeBilinear, UpsampleMatchesHalfPixelOracle) {
  const Tensor<double> x({1, 1, 2, 2}, {0, 2, 4, 6});
  const auto y = resize_bilinear(x, Resize::kUp2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  // Output pixel i samples source coordinate (i + 0.5) / 2 - 0.5, clamped to
  // [0, 1]; the input is the plane f(r, c) = 4r + 2c, which bilinear
  // interpolation reproduces exactly.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double r = std::clamp((i + 0.5) / 2.0 - 0.5, 0.0, 1.0);
      const double c = std::clamp((j + 0.5) / 2.0 - 0.5, 0.0, 1.0);
      EXPECT_NEAR(y.at({0, 0, i, j}), 4 * r + 2 * c, 1e-12);
    }
  EXPECT_NEAR(y.at({0, 0, 1, 1}), 1.5, 1e-12);
}

TEST(ResizeBilinear, DownsampleAveragesPairs) {
  const Tensor<double> x({1, 1, 2, 4}, {1, 3, 5, 7, 9, 11, 13, 15});
  const auto y = resize_bilinear(x, Resize::kDown2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_NEAR(y[0], (1 + 3 + 9 + 11) / 4.0, 1e-12);
  EXPECT_NEAR(y[1], (5 + 7 + 13 + 15) / 4.0, 1e-12);
}

TEST(ResizeBilinear, OddExtentsRejectedOnDownsample) {
  EXPECT_THROW(resize_bilinear(Tensor<float>({1, 1, 3, 4}), Resize::kDown2), DimensionError);
}

// --- leaky_relu / channel_norm -------------------------------------------------

TEST(LeakyRelu, Examples) {
  const auto y = leaky_relu(Tensor<float>({3}, {3, -1, 0}), 0.2f);
  EXPECT_FLOAT_EQ(y[0], 3.0f);
  EXPECT_FLOAT_EQ(y[1], -0.2f);
  EXPECT_FLOAT_EQ(y[2], 0.0f);
}

TEST(LeakyRelu, SlopeAtZeroIsAlpha) {
  auto x = Tensor<double>::parameter({1}, {0.0});
  const auto g = backward(sum(leaky_relu(x, 0.2)));
  EXPECT_DOUBLE_EQ(g.get(x)[0], 0.2);
}

TEST(ChannelNorm, ConstantChannelsGoToZero) {
  for (const float v : channel_norm(Tensor<float>({2, 4}, 5.0f)).values()) EXPECT_EQ(v, 0.0f);
}

TEST(ChannelNorm, ThreePointCase) {
  const auto y = channel_norm(Tensor<float>({3}, {1, 2, 3}));
  EXPECT_NEAR(y[0], -1.2247, 1e-3);
  EXPECT_NEAR(y[1], 0.0, 1e-3);
  EXPECT_NEAR(y[2], 1.2247, 1e-3);
}

TEST(ChannelNorm, MomentsOnRandomInputs) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 + rng.below(30);
    const auto y = channel_norm(cast<float>(random_tensors({{d}}, rng, 3.0)[0]));
    double mu = 0, var = 0;
    for (const float v : y.values()) mu += v;
    mu /= d;
    for (const float v : y.values()) var += (v - mu) * (v - mu);
    EXPECT_LT(std::abs(mu), 1e-6);
    EXPECT_NEAR(std::sqrt(var / d), 1.0, 1e-4);
  }
}

// --- backward -----------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  auto w = Tensor<float>::parameter({2, 3}, std::vector<float>(6, 0.5f));
  const auto g = backward(sum(w)).get(w);
  EXPECT_EQ(g.shape(), w.shape());
  for (const float v : g.values()) EXPECT_EQ(v, 1.0f);
}

TEST(Backward, QuadraticForm) {
  auto w = Tensor<double>::parameter({2}, {1, -2});
  const auto g = backward(scale(sum(mul(w, w)), 0.5)).get(w);
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], -2.0);
}

TEST(Backward, NonScalarLossIsUsageError) {
  auto w = Tensor<float>::parameter({2}, {1, 2});
  EXPECT_THROW(backward(mul(w, w)), UsageError);
}

TEST(Backward, FrozenInputsAreNotParents) {
  auto w = Tensor<float>::parameter({2}, {1, 2});
  const Tensor<float> c({2}, {3, 4});
  const auto y = mul(w, c);
  ASSERT_EQ(y.node()->parents.size(), 1u);
  const auto g = backward(sum(y));
  EXPECT_TRUE(g.contains(w));
  EXPECT_FALSE(g.contains(c));
}

TEST(Backward, NoGradGuardSkipsRecording) {
  auto w = Tensor<float>::parameter({2}, {1, 2});
  NoGradGuard guard;
  EXPECT_FALSE(mul(w, w).requires_grad());
}

TEST(Backward, NonFiniteForwardIsError) {
  EXPECT_THROW(scale(Tensor<float>({1}, {std::numeric_limits<float>::max()}), 10.0f), NumericalError);
}

TEST(Backward, DeterministicAcrossRuns) {
  Rng rng(10);
  auto in = random_tensors({{2, 3, 6, 6}, {4, 3, 3, 3}, {4}}, rng);
  auto run = [&] {
    auto p = testing::as_parameters<float>(in);
    auto y = leaky_relu(conv2d(p[0], p[1], p[2]), 0.2f);
    auto loss = probe(channel_norm(resize_bilinear(y, Resize::kUp2)));
    auto g = backward(loss);
    std::vector<float> all = loss.values();
    for (auto& t : p) {
      const auto gv = g.get(t).values();
      all.insert(all.end(), gv.begin(), gv.end());
    }
    return all;
  };
  const auto first = run();
  const auto second = run();
  ASSERT_EQ(first.size(), second.size());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i], second[i]) << "index " << i;
}

// --- frozen leaky_relu slopes ---------------------------------------------------

TEST(SlopePattern, ReplayKeepsRecordedSlopes) {
  const Tensor<float> x({4}, std::vector<float>{-1.0f, 2.0f, -3.0f, 4.0f});
  SlopePattern pattern;
  {
    SlopePatternGuard guard(pattern, SlopePatternGuard::Mode::kRecord);
    leaky_relu(x, 0.2f);
  }
  ASSERT_EQ(pattern.masks.size(), 1u);
  // Every sign flipped: the replayed pass still applies the recorded slopes.
  Tensor<float> flipped({4}, std::vector<float>{1.0f, -2.0f, 3.0f, -4.0f});
  flipped.set_requires_grad(true);
  SlopePatternGuard guard(pattern, SlopePatternGuard::Mode::kReplay);
  const auto y = leaky_relu(flipped, 0.2f);
  const std::vector<float> expected{0.2f * 1.0f, -2.0f, 0.2f * 3.0f, -4.0f};
  EXPECT_EQ(y.values(), expected);
  const auto g = backward(sum(y)).get(flipped).values();
  EXPECT_EQ(g, (std::vector<float>{0.2f, 1.0f, 0.2f, 1.0f}));
}

TEST(SlopePattern, ReplayMismatchIsStateError) {
  SlopePattern pattern;
  {
    SlopePatternGuard guard(pattern, SlopePatternGuard::Mode::kRecord);
    leaky_relu(Tensor<float>({3}, 1.0f), 0.2f);
  }
  SlopePatternGuard guard(pattern, SlopePatternGuard::Mode::kReplay);
  EXPECT_THROW(leaky_relu(Tensor<float>({5}, 1.0f), 0.2f), StateError);
}

TEST(SlopePattern, ReplayPastRecordedCallsIsStateError) {
  SlopePattern pattern;
  {
    SlopePatternGuard guard(pattern, SlopePatternGuard::Mode::kRecord);
    leaky_relu(Tensor<float>({2}, 1.0f), 0.2f);
  }
  SlopePatternGuard guard(pattern, SlopePatternGuard::Mode::kReplay);
  leaky_relu(Tensor<float>({2}, -1.0f), 0.2f);
  EXPECT_THROW(leaky_relu(Tensor<float>({2}, 1.0f), 0.2f), StateError);
}

}  // namespace
}  // namespace ganformer
