#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "erasenet/nn.hpp"
#include "erasenet/optim.hpp"

using namespace erasenet;

namespace {

NamedParams<double> one_param(double w) { return {{"w", Tensor<double>({1, 1, 1, 1}, {w}, true)}}; }

// uniform gradient g on every element: mean((w - t)^2) with t = w - g n / 2
void set_grad(Tensor<double>& p, double g) {
  p.zero_grad();
  std::vector<double> t(p.data().begin(), p.data().end());
  for (auto& v : t) v -= g * static_cast<double>(t.size()) / 2;
  mse_loss(p, Tensor<double>(p.shape(), t)).backward();
}

}  // namespace

TEST(Adam, ZeroGradientIsNoOp) {
  NamedParams<double> params{{"a", Tensor<double>({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true)}};
  auto before = std::vector<double>(params[0].second.data().begin(), params[0].second.data().end());
  set_grad(params[0].second, 0.0);
  AdamState<double> s;
  s.init(params);
  adam_step(params, s);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(params[0].second.data()[i], before[i]);
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, MissingGradientCountsAsZero) {
  auto params = one_param(0.25);
  AdamState<double> s;
  adam_step(params, s);
  EXPECT_EQ(params[0].second.item(), 0.25);
}

TEST(Adam, FirstStepByHand) {
  auto params = one_param(0.0);
  set_grad(params[0].second, 1.0);
  AdamState<double> s;
  s.lr = 1e-4;
  s.epsilon = 1e-7;
  adam_step(params, s);
  // m = 0.1, v = 0.001; bias corrected both are 1
  EXPECT_NEAR(params[0].second.item(), -1e-4 / (1.0 + 1e-7), 1e-18);
  EXPECT_NEAR(s.m[0][0], 0.1, 1e-15);
  EXPECT_NEAR(s.v[0][0], 0.001, 1e-15);
}

TEST(Adam, DefaultsMatchStatedConstants) {
  AdamState<float> s;
  EXPECT_EQ(s.lr, 1e-4);
  EXPECT_EQ(s.beta1, 0.9);
  EXPECT_EQ(s.beta2, 0.999);
  EXPECT_EQ(s.epsilon, 1e-7);
}

TEST(Adam, ConstantGradientApproachesLrTimesSign) {
  for (double g : {3.0, -0.02}) {
    auto params = one_param(0.0);
    AdamState<double> s;
    double prev = 0.0, update = 0.0;
    for (int k = 0; k < 200; ++k) {
      set_grad(params[0].second, g);
      adam_step(params, s);
      update = params[0].second.item() - prev;
      prev = params[0].second.item();
    }
    EXPECT_NEAR(update, -1e-4 * (g > 0 ? 1 : -1), 1e-4 * 1e-4) << g;
  }
}

TEST(Adam, NonFiniteGradientAborts) {
  NamedParams<double> params{{"a", Tensor<double>({1, 1, 1, 2}, {1.0, 2.0}, true)},
                             {"b", Tensor<double>({1, 1, 1, 1}, {3.0}, true)}};
  set_grad(params[0].second, 1.0);
  set_grad(params[1].second, std::numeric_limits<double>::quiet_NaN());
  AdamState<double> s;
  s.init(params);
  EXPECT_THROW(adam_step(params, s), NumericalError);
  EXPECT_EQ(params[0].second.data()[0], 1.0);
  EXPECT_EQ(s.t, 0u);
}

TEST(Plateau, DecreasingLossKeepsLr) {
  PlateauState p;
  double lr = 1e-4;
  for (int e = 0; e < 20; ++e) lr = plateau_update(p, 1.0 - 0.01 * e, lr);
  EXPECT_EQ(lr, 1e-4);
  EXPECT_EQ(p.counter, 0u);
}

TEST(Plateau, FlatLossReducesAfterExactlyTenEpochs) {
  PlateauState p;
  double lr = plateau_update(p, 0.5, 1e-4);  // baseline epoch
  for (int e = 1; e <= 9; ++e) {
    lr = plateau_update(p, 0.5, lr);
    ASSERT_EQ(lr, 1e-4) << e;
  }
  lr = plateau_update(p, 0.5, lr);
  EXPECT_DOUBLE_EQ(lr, 1e-5);
  for (int e = 1; e <= 9; ++e) {
    lr = plateau_update(p, 0.5, lr);
    ASSERT_DOUBLE_EQ(lr, 1e-5) << e;
  }
  lr = plateau_update(p, 0.5, lr);
  EXPECT_DOUBLE_EQ(lr, 1e-6);
}

TEST(Plateau, TinyImprovementsDoNotCount) {
  PlateauState p;
  double lr = plateau_update(p, 1.0, 1e-4);
  for (int e = 0; e < 10; ++e) lr = plateau_update(p, 1.0 - 0.5e-4, lr);  // under the 1e-4 relative threshold
  EXPECT_DOUBLE_EQ(lr, 1e-5);
}

TEST(Plateau, FloorAndMonotone) {
  PlateauState p;
  double lr = 1e-4, prev = lr;
  for (int e = 0; e < 200; ++e) {
    lr = plateau_update(p, 0.3, lr);
    EXPECT_LE(lr, prev);
    EXPECT_GE(lr, p.min_lr);
    EXPECT_LE(p.counter, p.patience);
    prev = lr;
  }
  EXPECT_DOUBLE_EQ(lr, 1e-7);
}

TEST(Plateau, NonFiniteRejected) {
  PlateauState p;
  EXPECT_THROW(plateau_update(p, std::nan(""), 1e-4), NumericalError);
}
