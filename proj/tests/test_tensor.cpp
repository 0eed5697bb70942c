// tensor-autodiff: ops, tape, RNG, grad_check and the FENP checkpoint.
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "focalerrornet/checkpoint.hpp"
#include "focalerrornet/gradcheck.hpp"
#include "focalerrornet/ops.hpp"
#include "test_util.hpp"

using namespace fen;
using fen::testing::max_rel_diff;
using fen::testing::naive_conv3d;
using fen::testing::random_tensor;

namespace {

Tensor<double> ones(Shape s, bool rg = false) { return Tensor<double>::full(std::move(s), 1.0, rg); }

}  // namespace

// ---------------------------------------------------------------- Rng

TEST(Rng, IdenticalStreamsAgree) {
  Rng a(42, 3), b(42, 3);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u32(), b.next_u32());
}

TEST(Rng, DifferentStreamsDiffer) {
  Rng a(42, 3), b(42, 4);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u32() == b.next_u32();
  EXPECT_LT(same, 3);
}

TEST(Rng, SplitIsDeterministicAndIndependentOfParentPosition) {
  Rng a(7, 1);
  const Rng b(7, 1);
  a.next_u64();
  Rng sa = a.split(5), sb = b.split(5);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(sa.next_u32(), sb.next_u32());
}

TEST(Rng, PhiloxKnownAnswer) {
  // Random123 known-answer vector for Philox4x32-10, zero counter and key.
  const auto out = Rng::philox({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(out[0], 0x6627e8d5u);
  EXPECT_EQ(out[1], 0xe169c58du);
  EXPECT_EQ(out[2], 0xbc57ac4cu);
  EXPECT_EQ(out[3], 0x9b00dbd8u);
}

TEST(Rng, UniformIntStaysInRange) {
  Rng r(1, 1);
  for (int i = 0; i < 10000; ++i) {
    const auto v = r.uniform_int(-10, 10);
    ASSERT_GE(v, -10);
    ASSERT_LE(v, 10);
  }
}

// ---------------------------------------------------------------- conv3d

TEST(Conv3d, ZeroKernelGivesZeros) {
  Tape<double> tape;
  auto y = ops::conv3d(tape, ones({1, 1, 3, 3, 3}), Tensor<double>::zeros({1, 1, 3, 3, 3}),
                       Tensor<double>::zeros({1}), {1, 1, 1});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv3d, ImpulseReproducesKernelFootprint) {
  auto x = Tensor<double>::zeros({1, 1, 5, 5, 5});
  x.mutable_data()[(2 * 5 + 2) * 5 + 2] = 1.0;
  Tape<double> tape;
  auto y = ops::conv3d(tape, x, ones({1, 1, 3, 3, 3}), Tensor<double>::zeros({1}), {1, 1, 1});
  for (int z = 0; z < 5; ++z)
    for (int yy = 0; yy < 5; ++yy)
      for (int xx = 0; xx < 5; ++xx) {
        const bool near = std::abs(z - 2) <= 1 && std::abs(yy - 2) <= 1 && std::abs(xx - 2) <= 1;
        EXPECT_EQ(y[(z * 5 + yy) * 5 + xx], near ? 1.0 : 0.0);
      }
}

struct ConvCase {
  std::size_t n, cin, cout, size, k, stride, pad, groups;
};

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracle, MatchesNaiveLoops) {
  const auto c = GetParam();
  const Shape xs{c.n, c.cin, c.size, c.size + 1, c.size + 2};
  const Shape ws{c.cout, c.cin / c.groups, c.k, c.k, c.k};
  {
    // 64-bit: elementwise relative agreement.
    auto x = random_tensor<double>(xs, 1), w = random_tensor<double>(ws, 2),
         b = random_tensor<double>({c.cout}, 3);
    Tape<double> tape;
    auto y = ops::conv3d(tape, x, w, b, {c.stride, c.pad, c.groups});
    const auto ref = naive_conv3d(x, w, b, c.stride, c.pad, c.groups);
    ASSERT_EQ(y.numel(), ref.size());
    EXPECT_LE(max_rel_diff(y.data(), ref, 1e-8), 1e-5);
  }
  {
    // 32-bit storage: agreement relative to the output scale (elementwise
    // relative error is meaningless for outputs that cancel to ~0).
    auto x = random_tensor<float>(xs, 1), w = random_tensor<float>(ws, 2),
         b = random_tensor<float>({c.cout}, 3);
    Tape<float> tape;
    auto y = ops::conv3d(tape, x, w, b, {c.stride, c.pad, c.groups});
    const auto ref = naive_conv3d(x, w, b, c.stride, c.pad, c.groups);
    double scale = 0.0, err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      scale = std::max(scale, std::abs(ref[i]));
      err = std::max(err, std::abs(ref[i] - y[i]));
    }
    EXPECT_LE(err / scale, 1e-5);
  }
}

INSTANTIATE_TEST_SUITE_P(
    Shapes, ConvOracle,
    ::testing::Values(ConvCase{2, 3, 3, 6, 3, 1, 1, 3},   // depth-wise k3
                      ConvCase{1, 4, 4, 7, 5, 1, 2, 4},   // depth-wise k5 "same"
                      ConvCase{1, 3, 3, 7, 3, 2, 1, 3},   // depth-wise strided
                      ConvCase{1, 2, 5, 6, 3, 1, 1, 1},   // standard
                      ConvCase{2, 3, 4, 9, 3, 2, 1, 1},   // standard strided
                      ConvCase{1, 6, 4, 5, 1, 1, 0, 1},   // pointwise
                      ConvCase{1, 4, 6, 5, 3, 1, 0, 2},   // grouped, no padding
                      ConvCase{1, 2, 8, 9, 5, 4, 2, 1})); // stem-like k5 s4

TEST(Conv3d, OutputExtentFormula) {
  Tape<float> tape;
  auto y = ops::conv3d(tape, random_tensor<float>({1, 1, 33, 33, 33}, 1),
                       random_tensor<float>({2, 1, 5, 5, 5}, 2), Tensor<float>(), {4, 2, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 9, 9, 9}));  // floor((33 + 4 - 5) / 4) + 1
}

TEST(Conv3d, Linearity) {
  auto x1 = random_tensor<double>({1, 2, 5, 5, 5}, 4), x2 = random_tensor<double>({1, 2, 5, 5, 5}, 5);
  auto w = random_tensor<double>({3, 2, 3, 3, 3}, 6), b = random_tensor<double>({3}, 7);
  const double alpha = 0.7, beta = -1.3;
  std::vector<double> mix(x1.numel());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * x1[i] + beta * x2[i];
  Tape<double> tape;
  auto ymix = ops::conv3d(tape, Tensor<double>(x1.shape(), mix), w, b, {1, 1, 1});
  auto y1 = ops::conv3d(tape, x1, w, b, {1, 1, 1});
  auto y2 = ops::conv3d(tape, x2, w, b, {1, 1, 1});
  const std::size_t per = ymix.numel() / 3;
  for (std::size_t i = 0; i < ymix.numel(); ++i) {
    const double expect = alpha * y1[i] + beta * y2[i] - (alpha + beta - 1.0) * b[i / per];
    EXPECT_NEAR(ymix[i], expect, 1e-5);
  }
}

TEST(Conv3d, ShapeMismatchIsDimensionError) {
  Tape<float> tape;
  try {
    ops::conv3d(tape, random_tensor<float>({1, 3, 5, 5, 5}, 1),
                random_tensor<float>({2, 2, 3, 3, 3}, 2), Tensor<float>(), {});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
}

TEST(Conv3d, NonFiniteOutputIsNumericError) {
  auto x = Tensor<float>::full({1, 1, 3, 3, 3}, 3e38f);
  Tape<float> tape;
  try {
    ops::conv3d(tape, x, Tensor<float>::full({1, 1, 3, 3, 3}, 10.0f), Tensor<float>(), {1, 1, 1});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

// ---------------------------------------------------------------- linear

TEST(Linear, Identity) {
  Tape<double> tape;
  auto y = ops::linear(tape, Tensor<double>({1, 2}, {1, 2}), Tensor<double>({2, 2}, {1, 0, 0, 1}),
                       Tensor<double>({2}, {0, 0}));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 2.0);
}

TEST(Linear, HandSum) {
  Tape<double> tape;
  auto y = ops::linear(tape, Tensor<double>({1, 2}, {1, 1}), Tensor<double>({2, 1}, {1, 1}),
                       Tensor<double>({1}, {-2}));
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y.item(), 0.0);
}

TEST(Linear, MatchesNaiveLoops) {
  auto x = random_tensor<float>({4, 8}, 1), w = random_tensor<float>({8, 3}, 2),
       b = random_tensor<float>({3}, 3);
  Tape<float> tape;
  auto y = ops::linear(tape, x, w, b);
  std::vector<double> ref(12);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = b[j];
      for (int k = 0; k < 8; ++k) acc += static_cast<double>(x[i * 8 + k]) * w[k * 3 + j];
      ref[i * 3 + j] = acc;
    }
  EXPECT_LE(max_rel_diff(y.data(), ref, 1e-3), 1e-6);
}

TEST(Linear, InnerMismatchIsDimensionError) {
  Tape<float> tape;
  EXPECT_THROW(ops::linear(tape, random_tensor<float>({2, 3}, 1), random_tensor<float>({4, 1}, 2),
                           random_tensor<float>({1}, 3)),
               Error);
}

// ---------------------------------------------------------------- activations

TEST(Activation, FixedPointAtOrigin) {
  Tape<double> tape;
  auto z = Tensor<double>({1}, {0.0});
  EXPECT_EQ(ops::gelu(tape, z).item(), 0.0);
  EXPECT_EQ(ops::relu(tape, z).item(), 0.0);
}

TEST(Activation, ReluDefinition) {
  Tape<double> tape;
  auto y = ops::activation(tape, Tensor<double>({2}, {-3.5, 2.25}), ops::Activation::relu);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 2.25);
}

TEST(Activation, GeluIsExactGaussianCdf) {
  Tape<double> tape;
  EXPECT_NEAR(ops::gelu(tape, Tensor<double>({1}, {1.0})).item(), 0.8413447, 1e-6);
  for (double x : {-3.0, -0.75, 0.3, 2.0}) {
    const double ref = x * 0.5 * std::erfc(-x / std::sqrt(2.0));
    EXPECT_NEAR(ops::gelu(tape, Tensor<double>({1}, {x})).item(), ref, 1e-12);
  }
}

// ---------------------------------------------------------------- elementwise

TEST(Elementwise, Identities) {
  auto a = random_tensor<double>({2, 3, 4, 4, 4}, 9);
  Tape<double> tape;
  auto m = ops::mul(tape, a, ones(a.shape()));
  auto s = ops::add(tape, a, Tensor<double>::zeros(a.shape()));
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_EQ(m[i], a[i]);
    EXPECT_EQ(s[i], a[i]);
  }
}

TEST(Elementwise, MulThenSumIsDotProduct) {
  auto a = random_tensor<double>({1, 4, 3, 3, 3}, 1), b = random_tensor<double>({1, 4, 3, 3, 3}, 2);
  Tape<double> tape;
  const double got = ops::sum(tape, ops::mul(tape, a, b)).item();
  double ref = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) ref += a[i] * b[i];
  EXPECT_NEAR(got, ref, 1e-6 * std::max(1.0, std::abs(ref)));
}

TEST(Elementwise, ModulatorBroadcast) {
  auto x = random_tensor<double>({2, 3, 2, 2, 2}, 1), m = random_tensor<double>({2, 3, 1, 1, 1}, 2);
  Tape<double> tape;
  auto y = ops::mul(tape, x, m);
  auto z = ops::add(tape, m, x);  // broadcast on either side
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_DOUBLE_EQ(y[i], x[i] * m[i / 8]);
    EXPECT_DOUBLE_EQ(z[i], x[i] + m[i / 8]);
  }
}

TEST(Elementwise, IncompatibleShapesAreDimensionErrors) {
  Tape<double> tape;
  EXPECT_THROW(ops::add(tape, ones({1, 3, 2, 2, 2}), ones({1, 2, 2, 2, 2})), Error);
  EXPECT_THROW(ops::mul(tape, ones({1, 3, 2, 2}), ones({1, 3, 2, 2, 2})), Error);
}

// ---------------------------------------------------------------- pooling

TEST(GlobalAvgPool, ConstantAndArithmeticMean) {
  Tape<double> tape;
  auto c = ops::global_avg_pool3d(tape, Tensor<double>::full({1, 2, 3, 4, 5}, 2.5));
  EXPECT_EQ(c.shape(), (Shape{1, 2, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(c[0], 2.5);
  EXPECT_DOUBLE_EQ(c[1], 2.5);
  std::vector<double> ramp(8);
  std::iota(ramp.begin(), ramp.end(), 0.0);
  EXPECT_DOUBLE_EQ(ops::global_avg_pool3d(tape, Tensor<double>({1, 1, 2, 2, 2}, ramp)).item(), 3.5);
}

TEST(GlobalAvgPool, MatchesLoopOracle) {
  auto x = random_tensor<float>({2, 3, 5, 6, 7}, 3);
  Tape<float> tape;
  auto y = ops::global_avg_pool3d(tape, x);
  for (std::size_t nc = 0; nc < 6; ++nc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 210; ++i) acc += x[nc * 210 + i];
    EXPECT_NEAR(y[nc], acc / 210.0, 1e-6);
  }
}

TEST(MaxPool, PicksBlockMaxima) {
  std::vector<double> v(64);
  std::iota(v.begin(), v.end(), 0.0);
  Tape<double> tape;
  auto y = ops::max_pool3d(tape, Tensor<double>({1, 1, 4, 4, 4}, v));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2, 2}));
  EXPECT_EQ(y[0], 21.0);  // (1,1,1)
  EXPECT_EQ(y[7], 63.0);
}

// ---------------------------------------------------------------- dropout

TEST(Dropout, ZeroProbabilityIsBitIdentity) {
  auto x = random_tensor<float>({1000}, 1);
  Tape<float> tape;
  Rng rng(1, 1);
  auto y = ops::dropout(tape, x, 0.0, rng, true);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Dropout, InactiveIsIdentity) {
  auto x = random_tensor<float>({1000}, 1);
  Tape<float> tape;
  Rng rng(1, 1);
  auto y = ops::dropout(tape, x, 0.5, rng, false);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Dropout, LawOfLargeNumbers) {
  auto x = Tensor<double>::full({100000}, 1.0);
  Tape<double> tape;
  Rng rng(3, 3);
  auto y = ops::dropout(tape, x, 0.5, rng, true);
  double mean = 0.0;
  std::size_t zeros = 0;
  for (double v : y.data()) {
    mean += v;
    zeros += v == 0.0;
  }
  mean /= 1e5;
  EXPECT_GE(mean, 0.99);
  EXPECT_LE(mean, 1.01);
  EXPECT_GE(zeros / 1e5, 0.49);
  EXPECT_LE(zeros / 1e5, 0.51);
}

TEST(Dropout, ProbabilityOneIsValueError) {
  Tape<float> tape;
  Rng rng(1, 1);
  try {
    ops::dropout(tape, random_tensor<float>({4}, 1), 1.0, rng, true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::value);
  }
}

// ---------------------------------------------------------------- loss / backward

TEST(MseLoss, Examples) {
  Tape<double> tape;
  auto p = random_tensor<double>({5, 1}, 1);
  EXPECT_EQ(ops::mse_loss(tape, p, p).item(), 0.0);
  EXPECT_EQ(ops::mse_loss(tape, Tensor<double>({1, 1}, {2.0}), Tensor<double>({1, 1}, {0.0})).item(),
            4.0);
  auto t = random_tensor<double>({5, 1}, 2);
  double ref = 0.0;
  for (int i = 0; i < 5; ++i) ref += (p[i] - t[i]) * (p[i] - t[i]);
  EXPECT_NEAR(ops::mse_loss(tape, p, t).item(), ref / 5.0, 1e-7);
  EXPECT_THROW(ops::mse_loss(tape, p, random_tensor<double>({4, 1}, 3)), Error);
}

TEST(Backward, SumGivesOnes) {
  auto x = random_tensor<double>({2, 3, 4}, 1, -1, 1, true);
  Tape<double> tape;
  tape.backward(ops::sum(tape, x));
  ASSERT_TRUE(x.has_grad());
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareDerivative) {
  auto w = Tensor<double>({1, 1}, {3.0}, true);
  Tape<double> tape;
  tape.backward(ops::mse_loss(tape, w, Tensor<double>({1, 1}, {0.0})));
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

TEST(Backward, FanOutAccumulates) {
  auto x = Tensor<double>({1}, {2.0}, true);
  Tape<double> tape;
  auto y = ops::add(tape, ops::mul(tape, x, x), x);  // x^2 + x
  tape.backward(ops::sum(tape, y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(Backward, ConstantLeafGetsNoGrad) {
  auto x = random_tensor<double>({3}, 1, -1, 1, true);
  auto c = random_tensor<double>({3}, 2);
  Tape<double> tape;
  tape.backward(ops::sum(tape, ops::mul(tape, x, c)));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(c.has_grad());
}

TEST(Backward, NonScalarLossIsRejected) {
  auto x = random_tensor<double>({3}, 1, -1, 1, true);
  Tape<double> tape;
  auto y = ops::affine(tape, x, 2.0, 0.0);
  EXPECT_THROW(tape.backward(y), Error);
}

TEST(Backward, ForeignTensorIsRejected) {
  auto x = random_tensor<double>({3}, 1, -1, 1, true);
  Tape<double> a, b;
  auto loss = ops::sum(a, x);
  EXPECT_THROW(b.backward(loss), Error);
}

// ---------------------------------------------------------------- grad_check

TEST(GradCheck, LinearGraph) {
  GraphFn g = [](Tape<double>& t, std::span<const Tensor<double>> in) {
    return ops::sum(t, ops::linear(t, in[0], in[1], in[2]));
  };
  auto r = grad_check(g, {random_tensor<double>({3, 4}, 1), random_tensor<double>({4, 2}, 2),
                          random_tensor<double>({2}, 3)});
  EXPECT_LE(r.max_relative_error, 1e-6);
}

TEST(GradCheck, DepthwiseConvGraph) {
  auto r_fixed = random_tensor<double>({1, 3, 5, 5, 5}, 9);
  GraphFn g = [&](Tape<double>& t, std::span<const Tensor<double>> in) {
    return ops::sum(t, ops::mul(t, ops::conv3d(t, in[0], in[1], in[2], {1, 1, 3}), r_fixed));
  };
  auto r = grad_check(g, {random_tensor<double>({1, 3, 5, 5, 5}, 1),
                          random_tensor<double>({3, 1, 3, 3, 3}, 2), random_tensor<double>({3}, 3)});
  EXPECT_LE(r.max_relative_error, 1e-5);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // relu at a kink: the one-sided analytic value disagrees with the
  // symmetric difference, so the checker must report a large error.
  GraphFn g = [](Tape<double>& t, std::span<const Tensor<double>> in) {
    return ops::sum(t, ops::relu(t, in[0]));
  };
  auto r = grad_check(g, {Tensor<double>({1}, {0.0})});
  EXPECT_GT(r.max_relative_error, 0.1);
}

class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, TenSeedsWithinTolerance) {
  const std::uint64_t s = static_cast<std::uint64_t>(GetParam());
  auto r5 = random_tensor<double>({1, 2, 5, 5, 5}, 100 + s);
  const std::vector<std::pair<const char*, std::function<GradCheckResult()>>> cases = {
      {"conv3d", [&] {
         GraphFn g = [&](Tape<double>& t, std::span<const Tensor<double>> in) {
           return ops::sum(t, ops::mul(t, ops::conv3d(t, in[0], in[1], in[2], {1, 1, 1}), r5));
         };
         return grad_check(g, {random_tensor<double>({1, 3, 5, 5, 5}, s),
                               random_tensor<double>({2, 3, 3, 3, 3}, s + 1),
                               random_tensor<double>({2}, s + 2)});
       }},
      {"linear_gelu", [&] {
         GraphFn g = [&](Tape<double>& t, std::span<const Tensor<double>> in) {
           auto y = ops::gelu(t, ops::linear(t, in[0], in[1], in[2]));
           return ops::sum(t, ops::mul(t, y, y));
         };
         return grad_check(g, {random_tensor<double>({2, 4}, s), random_tensor<double>({4, 3}, s + 1),
                               random_tensor<double>({3}, s + 2)});
       }},
      {"gap_broadcast", [&] {
         GraphFn g = [&](Tape<double>& t, std::span<const Tensor<double>> in) {
           auto m = ops::global_avg_pool3d(t, in[0]);
           return ops::sum(t, ops::mul(t, ops::mul(t, in[0], m), r5));
         };
         return grad_check(g, {random_tensor<double>({1, 2, 5, 5, 5}, s)});
       }},
      {"mse", [&] {
         GraphFn g = [&](Tape<double>& t, std::span<const Tensor<double>> in) {
           return ops::mse_loss(t, in[0], Tensor<double>({4, 1}, {0.1, -0.2, 0.3, 0.0}));
         };
         return grad_check(g, {random_tensor<double>({4, 1}, s)});
       }},
  };
  for (const auto& [name, run] : cases) {
    EXPECT_LE(run().max_relative_error, 1e-4) << name << " seed " << s;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range(1, 11));

// ---------------------------------------------------------------- determinism

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  auto x = random_tensor<float>({1, 3, 7, 7, 7}, 1);
  auto w = random_tensor<float>({3, 1, 5, 5, 5}, 2);
  Tape<float> t1, t2;
  auto a = ops::conv3d(t1, x, w, Tensor<float>(), {1, 2, 3});
  auto b = ops::conv3d(t2, x, w, Tensor<float>(), {1, 2, 3});
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]);
}

// ---------------------------------------------------------------- checkpoint

TEST(Checkpoint, BitExactRoundTrip) {
  std::vector<NamedTensor> ts = {{"a.weight", random_tensor<float>({2, 3, 1, 1, 1}, 1)},
                                 {"b", random_tensor<float>({7}, 2)},
                                 {"scalar", Tensor<float>({1}, {-0.0f})}};
  const auto dir = fen::testing::scratch_dir("ckpt");
  save_checkpoint(dir / "m.fenp", ts);
  auto back = load_checkpoint(dir / "m.fenp");
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back[i].name, ts[i].name);
    EXPECT_EQ(back[i].tensor.shape(), ts[i].tensor.shape());
    for (std::size_t j = 0; j < ts[i].tensor.numel(); ++j) {
      EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i].tensor[j]),
                std::bit_cast<std::uint32_t>(ts[i].tensor[j]));
    }
  }
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ts));
}

TEST(Checkpoint, LayoutAndCorruption) {
  std::vector<NamedTensor> ts = {{"w", Tensor<float>({2}, {1.0f, 2.0f})}};
  auto bytes = encode_checkpoint(ts);
  // "FENP" + version + count + (len + "w") + rank + dim + 2 floats
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 1 + 4 + 4 + 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FENP");
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), Error);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  try {
    decode_checkpoint(truncated);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
}
