#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "mor/errors.hpp"
#include "mor/routing/routing.hpp"
#include "mor/tensor/ops.hpp"

namespace r = mor::routing;
namespace t = mor::tensor;
using r::Fraction;
using t::Tensor;

TEST(CapacitySchedule, LinearFractions) {
  EXPECT_EQ(r::capacity_schedule(3), (std::vector<Fraction>{Fraction(1), Fraction(2, 3), Fraction(1, 3)}));
  EXPECT_EQ(r::capacity_schedule(1), (std::vector<Fraction>{Fraction(1)}));
  EXPECT_EQ(r::capacity_schedule(4),
            (std::vector<Fraction>{Fraction(1), Fraction(3, 4), Fraction(1, 2), Fraction(1, 4)}));
  EXPECT_THROW(r::capacity_schedule(0), mor::ConfigError);
}

TEST(CapacitySchedule, CountFloorsExactly) {
  EXPECT_EQ(r::capacity_count(Fraction(2, 3), 2048), 1365u);
  EXPECT_EQ(r::capacity_count(Fraction(1, 3), 2048), 682u);
  EXPECT_EQ(r::capacity_count(Fraction(1), 7), 7u);
}

TEST(ExpertChoiceSelect, TopTwoByValue) {
  std::vector<double> s{0.9, 0.1, 0.8, 0.2};
  std::vector<std::size_t> live{0, 1, 2, 3};
  auto out = r::expert_choice_select(s, live, Fraction(1, 2), 4);
  EXPECT_EQ(out.selected, (std::vector<std::size_t>{0, 2}));
  EXPECT_FALSE(out.shortfall);
}

TEST(ExpertChoiceSelect, TiesFavorLowerIndex) {
  std::vector<double> s{0.5, 0.5, 0.5};
  std::vector<std::size_t> live{0, 1, 2};
  auto out = r::expert_choice_select(s, live, Fraction(2, 3), 3);
  EXPECT_EQ(out.selected, (std::vector<std::size_t>{0, 1}));
}

TEST(ExpertChoiceSelect, TieBreakMatchesStableSortOracle) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> level(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng() % 24;
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < T; ++i)
      if (rng() % 3 != 0) live.push_back(i);
    std::vector<double> s(live.size());
    for (auto& x : s) x = 0.25 * level(rng);
    const Fraction cap(1 + static_cast<std::int64_t>(rng() % 4), 4);
    auto out = r::expert_choice_select(s, live, cap, T);

    std::vector<std::pair<double, std::size_t>> oracle;
    for (std::size_t i = 0; i < live.size(); ++i) oracle.emplace_back(-s[i], live[i]);
    std::stable_sort(oracle.begin(), oracle.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    const std::size_t k = std::min(r::capacity_count(cap, T), live.size());
    std::vector<std::size_t> expect;
    for (std::size_t i = 0; i < k; ++i) expect.push_back(oracle[i].second);
    std::sort(expect.begin(), expect.end());
    EXPECT_EQ(out.selected, expect);
  }
}

TEST(ExpertChoiceSelect, NeverSelectsDeadTokensAndFlagsShortfall) {
  std::vector<double> s{0.1, 0.2};
  std::vector<std::size_t> live{1, 3};  // tokens 0 and 2 dropped at an earlier depth
  auto out = r::expert_choice_select(s, live, Fraction(3, 4), 4);
  EXPECT_EQ(out.selected, (std::vector<std::size_t>{1, 3}));
  EXPECT_TRUE(out.shortfall);
}

TEST(ExpertChoiceUpdate, EmptySelectionPassesThrough) {
  std::mt19937_64 rng(1);
  auto h = mor::testing::random_tensor(rng, {4, 3}, false);
  std::vector<std::size_t> none;
  auto out = r::expert_choice_update(h, Tensor::zeros({0, 3}), Tensor::zeros({0}), none);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(out.data()[i], h.data()[i]);
}

TEST(ExpertChoiceUpdate, ZeroGateLeavesRow) {
  std::mt19937_64 rng(2);
  auto h = mor::testing::random_tensor(rng, {3, 2}, false);
  auto f = mor::testing::random_tensor(rng, {1, 2}, false);
  std::vector<std::size_t> sel{1};
  auto out = r::expert_choice_update(h, f, Tensor::zeros({1}), sel);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out.data()[i], h.data()[i]);
}

TEST(ExpertChoiceUpdate, MatchesPerRowOracle) {
  std::mt19937_64 rng(3);
  auto h = mor::testing::random_tensor(rng, {6, 4}, false);
  auto f = mor::testing::random_tensor(rng, {3, 4}, false);
  auto g = mor::testing::random_tensor(rng, {3}, false, 0, 1);
  std::vector<std::size_t> sel{0, 2, 5};
  auto out = r::expert_choice_update(h, f, g, sel);
  for (std::size_t row = 0; row < 6; ++row) {
    const auto it = std::find(sel.begin(), sel.end(), row);
    for (std::size_t c = 0; c < 4; ++c) {
      double expect = h.at(row, c);
      if (it != sel.end()) {
        const std::size_t i = static_cast<std::size_t>(it - sel.begin());
        expect = g.data()[i] * f.at(i, c) + h.at(row, c);
      }
      EXPECT_DOUBLE_EQ(out.at(row, c), expect);
    }
  }
}

TEST(TokenChoiceAssign, ArgmaxAndBiasDominance) {
  std::vector<double> g{0.2, 0.7, 0.1};
  EXPECT_EQ(r::token_choice_assign(g, 3, {}).depth[0], 2u);
  std::vector<double> bias{10.0, 0.0, 0.0};
  EXPECT_EQ(r::token_choice_assign(g, 3, bias).depth[0], 1u);
}

TEST(TokenChoiceAssign, SoftmaxShiftInvariance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    auto logits = mor::testing::random_tensor(rng, {8, 3}, false, -4, 4);
    const double c = std::uniform_real_distribution<double>(-50, 50)(rng);
    auto a = r::token_choice_assign(t::softmax_rows(logits).data(), 3, {});
    auto b = r::token_choice_assign(t::softmax_rows(t::add_scalar(logits, c)).data(), 3, {});
    EXPECT_EQ(a.depth, b.depth);
  }
}

TEST(AuxLoss, SeparatedAndUninformative) {
  std::vector<unsigned char> sel{1, 0, 1, 0};
  EXPECT_NEAR(r::aux_loss(Tensor::from({4}, {1, 0, 1, 0}), sel).item(), 0.0, 1e-10);
  EXPECT_NEAR(r::aux_loss(Tensor::full({4}, 0.5), sel).item(), std::log(2.0), 1e-15);
}

TEST(AuxLoss, MatchesDirectBce) {
  std::mt19937_64 rng(5);
  auto p = mor::testing::random_tensor(rng, {9}, false, 0.01, 0.99);
  std::vector<unsigned char> sel(9);
  for (auto& s : sel) s = rng() % 2;
  double expect = 0.0;
  for (std::size_t i = 0; i < 9; ++i) expect -= sel[i] ? std::log(p.data()[i]) : std::log(1 - p.data()[i]);
  EXPECT_NEAR(r::aux_loss(p, sel).item(), expect / 9.0, 1e-10);
  EXPECT_NEAR(r::aux_router_loss(p, sel).item(), expect / 9.0, 1e-10);
}

TEST(AuxRouterLoss, PerfectPredictionIsZero) {
  std::vector<unsigned char> sel{0, 1, 1};
  EXPECT_NEAR(r::aux_router_loss(Tensor::from({3}, {0, 1, 1}), sel).item(), 0.0, 1e-10);
}

TEST(BalancingLoss, HandEvaluations) {
  const std::size_t n_r = 3, T = 6;
  std::vector<std::size_t> balanced{0, 1, 2, 0, 1, 2};
  auto uniform = Tensor::full({T, n_r}, 1.0 / 3.0);
  EXPECT_NEAR(r::balancing_loss(balanced, uniform, 0.1).item(), 0.1, 1e-15);

  std::vector<std::size_t> all_one(T, 1);
  std::vector<double> onehot(T * n_r, 0.0);
  for (std::size_t i = 0; i < T; ++i) onehot[i * n_r + 1] = 1.0;
  EXPECT_NEAR(r::balancing_loss(all_one, Tensor::from({T, n_r}, onehot), 0.1).item(), 0.1 * 3, 1e-15);
  EXPECT_EQ(r::balancing_loss(balanced, uniform, 0.0).item(), 0.0);
}

TEST(LossFreeBias, UpdateRule) {
  std::vector<double> zero(3, 0.0);
  std::vector<double> balanced{8, 8, 8};
  EXPECT_EQ(r::lossfree_bias_update(balanced, zero, 0.01), zero);
  std::vector<double> skewed{12, 8, 4};
  auto b = r::lossfree_bias_update(skewed, zero, 0.01);
  EXPECT_DOUBLE_EQ(b[0], -0.01);
  EXPECT_DOUBLE_EQ(b[1], 0.0);
  EXPECT_DOUBLE_EQ(b[2], 0.01);
}

TEST(LossFreeBias, ClosedLoopShrinksOverloadedShare) {
  std::mt19937_64 rng(6);
  const std::size_t T = 300, n_r = 3;
  std::vector<double> logits(T * n_r);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < n_r; ++j) logits[i * n_r + j] = noise(rng) + (j == 0 ? 1.0 : 0.0);
  auto g = t::softmax_rows(Tensor::from({T, n_r}, logits));

  std::vector<double> bias(n_r, 0.0);
  double prev_share = 1.0;
  bool crossed = false;
  for (int step = 0; step < 200 && !crossed; ++step) {
    auto a = r::token_choice_assign(g.data(), n_r, bias);
    std::vector<double> counts(n_r, 0.0);
    for (auto d : a.depth) counts[d - 1] += 1.0;
    const double share = counts[0] / T;
    EXPECT_LE(share, prev_share) << "step " << step;
    prev_share = share;
    crossed = counts[0] <= static_cast<double>(T) / n_r;
    bias = r::lossfree_bias_update(counts, bias, 0.01);
  }
  EXPECT_TRUE(crossed);
}

TEST(ZLoss, HandAndDirectEvaluations) {
  EXPECT_NEAR(r::z_loss(Tensor::zeros({1, 3})).item(), std::pow(std::log(3.0), 2), 1e-15);
  EXPECT_EQ(r::z_loss(Tensor::zeros({1})).item(), 0.0);
  std::mt19937_64 rng(7);
  auto x = mor::testing::random_tensor(rng, {5, 4}, false, -3, 3);
  long double acc = 0.0L;
  for (std::size_t i = 0; i < 5; ++i) {
    long double s = 0.0L;
    for (std::size_t j = 0; j < 4; ++j) s += std::exp(static_cast<long double>(x.at(i, j)));
    acc += std::log(s) * std::log(s);
  }
  EXPECT_NEAR(r::z_loss(x).item(), static_cast<double>(acc / 5), 1e-12);
}

TEST(RouterConfig, RejectsMismatchedActivation) {
  auto c = r::expert_choice_defaults();
  c.activation = r::Activation::Softmax;
  EXPECT_THROW(r::validate(c), mor::ConfigError);
  auto tc = r::token_choice_defaults();
  tc.balance_coeff = -1;
  EXPECT_THROW(r::validate(tc), mor::ConfigError);
}
