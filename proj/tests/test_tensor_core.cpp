#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "dmcl/adam.hpp"
#include "dmcl/gradcheck.hpp"
#include "dmcl/layers.hpp"
#include "dmcl/random.hpp"

using namespace dmcl;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

double weighted_sum(const Tensor<double>& t, const std::vector<double>& w) {
  return std::inner_product(t.values().begin(), t.values().end(), w.begin(), 0.0);
}

std::vector<std::size_t> all_coordinates(std::size_t n) {
  std::vector<std::size_t> c(n);
  std::iota(c.begin(), c.end(), 0);
  return c;
}

}  // namespace

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  Rng rng(1);
  Tensor<double> input({1, 3, 3});
  Tensor<double> kernels = random_tensor({4, 1, 3, 3}, rng);
  Tensor<double> bias({4}, 0.0);
  auto out = conv2d(input, kernels, bias, 1, 1);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  Rng rng(2);
  Tensor<double> input = random_tensor({1, 5, 4}, rng);
  Tensor<double> kernel({1, 1, 3, 3}, 0.0);
  kernel.at({0, 0, 1, 1}) = 1.0;
  auto out = conv2d(input, kernel, Tensor<double>({1}, 0.0), 1, 1);
  ASSERT_EQ(out.shape(), input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) EXPECT_EQ(out[i], input[i]);
}

TEST(Conv2d, AllOnesKernelSumsValidWindow) {
  // 1+2+...+9 = 45 by direct summation
  Tensor<double> input({1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<double> kernel({1, 1, 3, 3}, 1.0);
  auto out = conv2d(input, kernel, Tensor<double>({1}, 0.0), 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(out[0], 45.0);
}

TEST(Conv2d, OutputExtentFollowsStrideAndPadding) {
  Tensor<float> input({2, 8, 9});
  Tensor<float> kernel({3, 2, 3, 3}, 1.0f);
  auto out = conv2d(input, kernel, Tensor<float>({3}), 2, 1);
  EXPECT_EQ(out.shape(), (Shape{3, 4, 5}));
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  Tensor<double> input({2, 4, 4});
  Tensor<double> kernel({1, 3, 3, 3});
  try {
    conv2d(input, kernel, Tensor<double>({1}), 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x3x3x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x4x4]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, IsLinearInInput) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> x = random_tensor({2, 7, 7}, rng), y = random_tensor({2, 7, 7}, rng);
    Tensor<double> k = random_tensor({3, 2, 3, 3}, rng);
    Tensor<double> zero({3}, 0.0);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    Tensor<double> mix(x.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
    const std::size_t stride = 1 + trial % 2;
    auto lhs = conv2d(mix, k, zero, stride, 1);
    auto cx = conv2d(x, k, zero, stride, 1), cy = conv2d(y, k, zero, stride, 1);
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * cx[i] + b * cy[i], 1e-6);
  }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  for (std::size_t stride : {1u, 2u}) {
    const ConvGeometry g{2, 3, 3, stride, 1};
    Tensor<double> x = random_tensor({2, 2, 6, 5}, rng);
    std::vector<double> w = random_vector(g.weight_count(), rng);
    std::vector<double> b = random_vector(3, rng);
    auto out = conv2d_forward<double>(x, w, b, g);
    const auto r = random_vector(out.size(), rng);
    Tensor<double> gout(out.shape(), r);
    std::vector<double> gw(w.size(), 0.0), gb(3, 0.0);
    auto gx = conv2d_backward<double>(x, w, gout, g, gw, gb);

    auto res_w = finite_diff_check([&](std::span<double> p) {
      return weighted_sum(conv2d_forward<double>(x, p, b, g), r);
    }, std::span<double>(w), gw, all_coordinates(w.size()));
    EXPECT_LT(res_w.max_relative_error, 1e-4);

    auto res_b = finite_diff_check([&](std::span<double> p) {
      return weighted_sum(conv2d_forward<double>(x, w, p, g), r);
    }, std::span<double>(b), gb, all_coordinates(b.size()));
    EXPECT_LT(res_b.max_relative_error, 1e-4);

    auto res_x = finite_diff_check([&](std::span<double> p) {
      Tensor<double> xx(x.shape(), std::vector<double>(p.begin(), p.end()));
      return weighted_sum(conv2d_forward<double>(xx, w, b, g), r);
    }, x.values(), gx.values(), all_coordinates(x.size()));
    EXPECT_LT(res_x.max_relative_error, 1e-4);
  }
}

// ---------------------------------------------------------------- norm_layer

struct NormFixture {
  std::vector<double> scale, shift, mean, var;
  explicit NormFixture(std::size_t c) : scale(c, 1.0), shift(c, 0.0), mean(c, 0.0), var(c, 1.0) {}
  NormView<double> view() { return {scale, shift, mean, var}; }
};

TEST(NormLayer, ConstantChannelMapsToZeroInTrainMode) {
  NormFixture f(2);
  Tensor<double> x({3, 2, 2, 2});
  Rng rng(5);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) {
      x.at({n, 0, i / 2, i % 2}) = 0.7;
      x.at({n, 1, i / 2, i % 2}) = rng.normal();
    }
  auto y = norm_forward<double>(x, f.view(), NormMode::train, {});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.at({n, 0, i / 2, i % 2}), 0.0, 1e-9);
  EXPECT_TRUE(y.all_finite());
}

TEST(NormLayer, TwoSampleBatchNormalizesToPlusMinusOne) {
  NormFixture f(1);
  Tensor<double> x({2, 1, 1, 1}, std::vector<double>{0.0, 2.0});
  auto y = norm_forward<double>(x, f.view(), NormMode::train, {0.1, 1e-5});
  // (x - 1) / sqrt(1 + 1e-5)
  EXPECT_NEAR(y[0], -1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
  EXPECT_NEAR(y[1], 1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
  EXPECT_NEAR(y[0], -1.0, 1e-5);
  // running stats moved by momentum 0.1 toward mean 1, var 1
  EXPECT_NEAR(f.mean[0], 0.1, 1e-12);
  EXPECT_NEAR(f.var[0], 1.0, 1e-12);
}

TEST(NormLayer, FrozenAndEvalNeverTouchRunningStatistics) {
  NormFixture f(3);
  Rng rng(6);
  for (double& v : f.mean) v = rng.normal();
  for (double& v : f.var) v = 0.5 + rng.uniform();
  const auto mean0 = f.mean, var0 = f.var;
  Tensor<double> x = random_tensor({4, 3, 3, 3}, rng);
  const auto first = norm_forward<double>(x, f.view(), NormMode::frozen, {});
  for (int i = 0; i < 50; ++i) {
    auto y = norm_forward<double>(random_tensor({4, 3, 3, 3}, rng), f.view(), i % 2 ? NormMode::frozen : NormMode::eval, {});
    (void)y;
  }
  EXPECT_EQ(f.mean, mean0);
  EXPECT_EQ(f.var, var0);
  EXPECT_EQ(norm_forward<double>(x, f.view(), NormMode::frozen, {}), first);
}

TEST(NormLayer, FrozenModeBlocksScaleAndShiftGradients) {
  NormFixture f(2);
  Rng rng(7);
  Tensor<double> x = random_tensor({2, 2, 2, 2}, rng);
  NormCache<double> cache;
  norm_forward<double>(x, f.view(), NormMode::frozen, {}, &cache);
  std::vector<double> gs(2, 0.0), gb(2, 0.0);
  auto gx = norm_backward<double>(random_tensor(x.shape(), rng), cache, f.scale, gs, gb);
  EXPECT_EQ(gs, std::vector<double>(2, 0.0));
  EXPECT_EQ(gb, std::vector<double>(2, 0.0));
  EXPECT_TRUE(gx.all_finite());
}

TEST(NormLayer, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  for (NormMode mode : {NormMode::train, NormMode::eval}) {
    NormFixture f(3);
    for (double& v : f.scale) v = 0.5 + rng.uniform();
    for (double& v : f.shift) v = rng.normal();
    for (double& v : f.mean) v = 0.1 * rng.normal();
    for (double& v : f.var) v = 0.5 + rng.uniform();
    Tensor<double> x = random_tensor({3, 3, 2, 3}, rng);
    const auto r = random_vector(x.size(), rng);
    // forward on scratch copies of the running stats so the check is pure
    auto loss_at = [&](const Tensor<double>& xx, std::span<const double> scale, std::span<const double> shift) {
      auto m = f.mean, v = f.var;
      return weighted_sum(norm_forward<double>(xx, {scale, shift, m, v}, mode, {}), r);
    };
    NormCache<double> cache;
    auto m = f.mean, v = f.var;
    norm_forward<double>(x, {f.scale, f.shift, m, v}, mode, {}, &cache);
    std::vector<double> gs(3, 0.0), gb(3, 0.0);
    auto gx = norm_backward<double>(Tensor<double>(x.shape(), r), cache, f.scale, gs, gb);

    auto rx = finite_diff_check([&](std::span<double> p) {
      return loss_at(Tensor<double>(x.shape(), std::vector<double>(p.begin(), p.end())), f.scale, f.shift);
    }, x.values(), gx.values(), all_coordinates(x.size()));
    EXPECT_LT(rx.max_relative_error, 1e-4) << to_string(mode);
    auto rs = finite_diff_check([&](std::span<double> p) { return loss_at(x, p, f.shift); },
                                std::span<double>(f.scale), gs, all_coordinates(3));
    EXPECT_LT(rs.max_relative_error, 1e-4);
    auto rb = finite_diff_check([&](std::span<double> p) { return loss_at(x, f.scale, p); },
                                std::span<double>(f.shift), gb, all_coordinates(3));
    EXPECT_LT(rb.max_relative_error, 1e-4);
  }
}

// ---------------------------------------------------------------- dense, pool, relu

TEST(Dense, FiniteDifferenceErrorIsTinyForLinearLayer) {
  Rng rng(9);
  Tensor<double> x = random_tensor({4, 5}, rng);
  std::vector<double> w = random_vector(15, rng), b = random_vector(3, rng);
  auto out = dense_forward<double>(x, w, b);
  const auto r = random_vector(out.size(), rng);
  std::vector<double> gw(15, 0.0), gb(3, 0.0);
  auto gx = dense_backward<double>(x, w, Tensor<double>(out.shape(), r), gw, gb);
  auto res = finite_diff_check([&](std::span<double> p) { return weighted_sum(dense_forward<double>(x, p, b), r); },
                               std::span<double>(w), gw, all_coordinates(15));
  EXPECT_LT(res.max_relative_error, 1e-7);
  auto resx = finite_diff_check([&](std::span<double> p) {
    return weighted_sum(dense_forward<double>(Tensor<double>(x.shape(), std::vector<double>(p.begin(), p.end())), w, b), r);
  }, x.values(), gx.values(), all_coordinates(x.size()));
  EXPECT_LT(resx.max_relative_error, 1e-7);
}

TEST(FiniteDiffCheck, CorruptedGradientIsDetected) {
  Rng rng(10);
  Tensor<double> x = random_tensor({2, 4}, rng);
  std::vector<double> w = random_vector(8, rng), b = random_vector(2, rng);
  auto out = dense_forward<double>(x, w, b);
  const auto r = random_vector(out.size(), rng);
  std::vector<double> gw(8, 0.0), gb(2, 0.0);
  dense_backward<double>(x, w, Tensor<double>(out.shape(), r), gw, gb);
  gw[3] += 0.1;
  auto res = finite_diff_check([&](std::span<double> p) { return weighted_sum(dense_forward<double>(x, p, b), r); },
                               std::span<double>(w), gw, all_coordinates(8));
  EXPECT_FALSE(res.within(1e-4));
  EXPECT_EQ(res.worst_coordinate, 3u);
}

TEST(PoolAndRelu, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  Tensor<double> x = random_tensor({2, 3, 3, 2}, rng);
  const auto r = random_vector(6, rng);
  auto f = [&](std::span<double> p) {
    Tensor<double> xx(x.shape(), std::vector<double>(p.begin(), p.end()));
    return weighted_sum(global_avg_pool_forward(relu_forward(xx)), r);
  };
  auto act = relu_forward(x);
  auto g = global_avg_pool_backward(Tensor<double>({2, 3}, r), x.shape());
  g = relu_backward(std::move(g), act);
  auto res = finite_diff_check(f, x.values(), g.values(), all_coordinates(x.size()));
  EXPECT_LT(res.max_relative_error, 1e-6);
}

// ---------------------------------------------------------------- bce

TEST(BceLoss, SymmetricPoint) {
  auto r = bce_loss(0.0, 1);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(r.loss, 0.693147, 1e-6);
  EXPECT_DOUBLE_EQ(r.grad, -0.5);
}

TEST(BceLoss, SaturatedCorrectPrediction) {
  auto r = bce_loss(50.0, 1);
  EXPECT_NEAR(r.loss, 0.0, 1e-20);
  EXPECT_NEAR(r.grad, 0.0, 1e-20);
}

TEST(BceLoss, PositiveLogitNegativeLabel) {
  // -log(1 - sigmoid(1)) = log(1 + e)
  auto r = bce_loss(1.0, 0);
  EXPECT_NEAR(r.loss, std::log(1.0 + std::exp(1.0)), 1e-12);
  EXPECT_NEAR(r.loss, 1.313262, 1e-6);
  EXPECT_NEAR(r.grad, 0.731059, 1e-6);
}

TEST(BceLoss, StableAndNonNegativeForHugeLogits) {
  for (double z : {-1e4, -700.0, -30.0, -1.0, 0.0, 1.0, 30.0, 700.0, 1e4})
    for (int y : {0, 1}) {
      auto r = bce_loss(z, y);
      EXPECT_TRUE(std::isfinite(r.loss) && std::isfinite(r.grad)) << z;
      EXPECT_GE(r.loss, 0.0);
      EXPECT_GE(r.grad, -1.0);
      EXPECT_LE(r.grad, 1.0);
    }
  EXPECT_NEAR(bce_loss(-1e4, 1).loss, 1e4, 1e-6);
  EXPECT_NEAR(bce_loss(1e4, 0).loss, 1e4, 1e-6);
}

TEST(BceLoss, GradientMatchesFiniteDifference) {
  for (double z : {-3.0, -0.2, 0.4, 2.5})
    for (int y : {0, 1}) {
      const double h = 1e-5;
      const double num = (bce_loss(z + h, y).loss - bce_loss(z - h, y).loss) / (2 * h);
      EXPECT_LT(relative_error(bce_loss(z, y).grad, num), 1e-7);
    }
}

// ---------------------------------------------------------------- adam

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<double> p{0.5, -1.25, 3.0};
  const auto before = p;
  std::vector<double> g(3, 0.0);
  AdamState<double> st(3, {});
  adam_step<double>(p, g, st);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // m_hat = v_hat = 1 after one step with g = 1, so theta = -lr / (1 + eps)
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamState<double> st(1, {1e-3, 0.9, 0.999, 1e-8});
  adam_step<double>(p, g, st);
  EXPECT_NEAR(p[0], -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p[0], -0.001, 1e-10);
}

TEST(Adam, RepeatedPositiveGradientMovesMonotonically) {
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamState<double> st(1, {1e-3, 0.9, 0.999, 1e-8});
  adam_step<double>(p, g, st);
  const double after_one = p[0];
  adam_step<double>(p, g, st);
  EXPECT_LT(after_one, 0.0);
  EXPECT_LT(p[0], after_one);
  EXPECT_EQ(st.step_count, 2u);
  EXPECT_GE(st.second_moment[0], 0.0);
}

TEST(Adam, FrozenCoordinatesAreSkipped) {
  std::vector<double> p{1.0, 2.0};
  std::vector<double> g{1.0, 1.0};
  std::vector<std::uint8_t> frozen{0, 1};
  AdamState<double> st(2, {});
  for (int i = 0; i < 5; ++i) adam_step<double>(p, g, st, frozen);
  EXPECT_LT(p[0], 1.0);
  EXPECT_EQ(p[1], 2.0);
  EXPECT_EQ(st.first_moment[1], 0.0);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<double> p(3), g(2);
  AdamState<double> st(3, {});
  EXPECT_THROW(adam_step<double>(p, g, st), ShapeError);
}
