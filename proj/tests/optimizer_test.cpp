#include "stochnorm/optimizer.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "stochnorm/network.hpp"
#include "stochnorm/normalization.hpp"
#include "testutil.hpp"

using namespace stochnorm;
using test::random_tensor;

TEST(SgdNesterov, QuadraticBowlWithoutMomentumContractsByOneMinusLr) {
  // f(x) = 0.5 ||x||^2, grad = x: one step maps x to (1 - lr) x.
  Tensor x = Tensor::from({1, 3}, {1.0, -2.0, 4.0}, true);
  OptimizerConfig cfg;
  cfg.lr0 = 0.25;
  cfg.momentum = 0.0;
  Optimizer opt(cfg, {{x, false, "x"}});
  std::vector<double> expect(x.data(), x.data() + 3);
  for (int t = 0; t < 5; ++t) {
    for (int i = 0; i < 3; ++i) x.grad()[i] = x.at(i);
    opt.step(0);
    for (auto& e : expect) e *= 0.75;
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(x.at(i), expect[i], 1e-14);
  }
}

TEST(SgdNesterov, LearningRateSchedule) {
  OptimizerConfig cfg;
  cfg.lr0 = 0.3;
  cfg.gamma = gamma_for_epochs_to_tenth(600);
  Tensor x = Tensor::zeros({1, 1}, true);
  Optimizer opt(cfg, {{x, false, "x"}});
  EXPECT_NEAR(opt.learning_rate(600), 0.03, 1e-12);
  EXPECT_NEAR(opt.learning_rate(1200), 0.003, 1e-12);
  EXPECT_DOUBLE_EQ(opt.learning_rate(0), 0.3);
}

TEST(Projection, KeepsUnitNormPerOutputChannel) {
  Rng rng(7);
  Tensor w = random_tensor({3, 8}, rng, -1, 1, true);
  OptimizerConfig cfg;
  cfg.lr0 = 0.05;
  Optimizer opt(cfg, {{w, true, "w"}});
  opt.project_params();
  for (int t = 0; t < 50; ++t) {
    for (int64_t i = 0; i < w.size(); ++i) w.grad()[i] = rng.uniform(-1, 1);
    opt.step(t / 10);
    for (int r = 0; r < 3; ++r) {
      double n2 = 0.0;
      for (int j = 0; j < 8; ++j) n2 += w.at(r * 8 + j) * w.at(r * 8 + j);
      EXPECT_LT(std::fabs(std::sqrt(n2) - 1.0), 1e-7);
    }
  }
}

TEST(Projection, NormGrowsMonotonicallyWithoutIt) {
  // Weight-normalized toy regression; gradients are orthogonal to w, so
  // each step can only increase the norm.
  Rng rng(11);
  Tensor w = random_tensor({1, 6}, rng, -0.5, 0.5, true);
  Tensor x = random_tensor({32, 6}, rng, -1, 1, false);
  std::vector<double> weights(32);
  for (auto& v : weights) v = rng.uniform(-1, 1);

  OptimizerConfig cfg;
  cfg.lr0 = 0.1;
  cfg.momentum = 0.0;
  Optimizer opt(cfg, {{w, false, "w"}});
  double prev = 0.0;
  for (int t = 0; t < 50; ++t) {
    double n2 = 0.0;
    for (int j = 0; j < 6; ++j) n2 += w.at(j) * w.at(j);
    if (t > 0) EXPECT_GE(n2, prev - 1e-15);
    prev = n2;

    NormalizedLayer l;
    l.linear = NormalizedLayer::LinearKind::Dense;
    l.kind = NormKind::WeightNorm;
    l.w = w;
    l.s = Tensor::filled({1}, 1.0);
    l.b = Tensor::zeros({1});
    Tape tape;
    NormalizedLayer view = l;
    view.w = tape.watch(w);
    Tensor y = normalized_forward(view, x, weight_norm_stats(view.w));
    tape.backward(sum_all(mul(y, Tensor::from(y.shape(), weights))));
    opt.step(0);
  }
}

TEST(Optimizer, IdenticalSeedsGiveBitIdenticalTrajectories) {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor w = init_weights({4, 6}, rng);
    OptimizerConfig cfg;
    cfg.lr0 = 0.05;
    Optimizer opt(cfg, {{w, false, "w"}});
    Rng grad_rng(seed + 1);
    for (int t = 0; t < 100; ++t) {
      for (int64_t i = 0; i < w.size(); ++i) w.grad()[i] = grad_rng.normal() + w.at(i);
      opt.step(t / 20);
    }
    return std::vector<double>(w.data(), w.data() + w.size());
  };
  auto a = run(42), b = run(42), c = run(43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Optimizer, NonFiniteGradientHalts) {
  Tensor x = Tensor::zeros({1, 2}, true);
  Optimizer opt(OptimizerConfig{}, {{x, false, "x"}});
  x.grad()[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(opt.step(0), DivergenceError);
  x.zero_grad();
  x.grad()[1] = std::nan("");
  EXPECT_THROW(opt.step(0), DivergenceError);
}

TEST(Adam, ConvergesOnQuadratic) {
  Tensor x = Tensor::from({1, 2}, {4.0, -3.0}, true);
  OptimizerConfig cfg;
  cfg.kind = OptKind::Adam;
  cfg.lr0 = 0.1;
  Optimizer opt(cfg, {{x, false, "x"}});
  for (int t = 0; t < 300; ++t) {
    for (int i = 0; i < 2; ++i) x.grad()[i] = x.at(i);
    opt.step(0);
  }
  EXPECT_LT(std::fabs(x.at(0)), 1e-2);
  EXPECT_LT(std::fabs(x.at(1)), 1e-2);
}

TEST(Adam, FirstStepSizeIsBoundedByLr) {
  Tensor x = Tensor::from({1, 1}, {1.0}, true);
  OptimizerConfig cfg;
  cfg.kind = OptKind::Adam;
  cfg.lr0 = 0.01;
  Optimizer opt(cfg, {{x, false, "x"}});
  x.grad()[0] = 0.37;
  opt.step(0);
  // Bias-corrected first step is lr * g/|g| up to eps.
  EXPECT_NEAR(x.at(0), 1.0 - 0.01, 1e-6);
}

TEST(InitWeights, UniformRangeAndVariance) {
  Rng rng(13);
  // c = 4 inputs per output: range [-1/2, 1/2], variance (1/sqrt(c))^2/3.
  Tensor w = init_weights({25000, 4}, rng);
  double mx = 0.0, var = 0.0;
  for (int64_t i = 0; i < w.size(); ++i) {
    mx = std::max(mx, std::fabs(w.at(i)));
    var += w.at(i) * w.at(i);
  }
  var /= static_cast<double>(w.size());
  EXPECT_LE(mx, 0.5);
  const double expect = (0.5 * 0.5) / 3.0;
  EXPECT_NEAR(var, expect, 0.05 * expect);

  Rng r1(99), r2(99);
  Tensor a = init_weights({3, 3, 2, 2}, r1);
  Tensor b = init_weights({3, 3, 2, 2}, r2);
  for (int64_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(a.at(i), b.at(i));
}

TEST(LrSearch, FindsOptimumOnConvexQuadratic) {
  // Five plain gradient steps on f(x) = 0.5 x^2 from x0 = 1: the loss after
  // five epochs is minimized by lr = 1 (exact jump to the optimum).
  auto train_fn = [](double lr) {
    double x = 1.0;
    for (int t = 0; t < 5; ++t) x -= lr * x;
    return 0.5 * x * x;
  };
  const std::vector<double> grid{0.03, 0.1, 0.3, 0.6, 1.0, 1.3};
  EXPECT_DOUBLE_EQ(lr_search(train_fn, grid), 1.0);
}

TEST(LrSearch, SingleCandidateGridReturnsIt) {
  EXPECT_DOUBLE_EQ(lr_search([](double) { return 1.0; }, {0.07}), 0.07);
}

TEST(LrSearch, AllCandidatesDivergingIsAnError) {
  auto nan_fn = [](double) { return std::nan(""); };
  EXPECT_THROW(lr_search(nan_fn, {0.1, 0.2}), DivergenceError);
}
