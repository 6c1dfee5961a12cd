#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mor/errors.hpp"
#include "mor/kernels/kernels.hpp"
#include "mor/tensor/ops.hpp"
#include "op_cases.hpp"

namespace t = mor::tensor;
using mor::testing::check_gradients;
using mor::testing::random_tensor;
using t::Tensor;

TEST(Matmul, IdentityAndHandArithmetic) {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = t::matmul(eye, x);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);

  auto c = t::matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}));
  EXPECT_EQ(c.shape(), (t::Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c.data()[0], 3.0);
  EXPECT_DOUBLE_EQ(c.data()[1], 7.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(t::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), mor::DimensionError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto r = check_gradients([](auto& in) { return t::sum(t::matmul(in[0], in[1])); },
                           {random_tensor(rng, {3, 3}), random_tensor(rng, {3, 3})});
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(CrossEntropy, UniformAndConfidentLogits) {
  std::vector<int> tg{2};
  EXPECT_NEAR(t::softmax_cross_entropy(Tensor::zeros({1, 4}), tg).item(), std::log(4.0), 1e-12);
  std::vector<int> t0{0};
  EXPECT_NEAR(t::softmax_cross_entropy(Tensor::from({1, 4}, {20, 0, 0, 0}), t0).item(), 0.0, 1e-8);
}

TEST(CrossEntropy, MatchesDirectLogSumExp) {
  std::mt19937_64 rng(5);
  auto logits = random_tensor(rng, {5, 7}, false, -3.0, 3.0);
  std::vector<int> tg{0, 6, 3, 3, 1};
  long double total = 0.0L;
  for (std::size_t r = 0; r < 5; ++r) {
    long double z = 0.0L;
    for (std::size_t j = 0; j < 7; ++j) z += std::exp(static_cast<long double>(logits.at(r, j)));
    total += std::log(z) - logits.at(r, tg[r]);
  }
  EXPECT_NEAR(t::softmax_cross_entropy(logits, tg).item(), static_cast<double>(total / 5.0L), 1e-10);
}

TEST(CrossEntropy, OutOfRangeTargetThrows) {
  std::vector<int> tg{4};
  EXPECT_THROW(t::softmax_cross_entropy(Tensor::zeros({1, 4}), tg), mor::IndexError);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(3);
  auto y = t::softmax_rows(random_tensor(rng, {6, 9}, false, -10, 10));
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) s += y.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Attention, SingleKeyReturnsItsValue) {
  std::mt19937_64 rng(4);
  auto q = random_tensor(rng, {1, 4}, false);
  auto k = random_tensor(rng, {1, 2}, false);
  auto v = random_tensor(rng, {1, 2}, false);
  std::vector<int> p{0};
  auto o = t::attention(q, k, v, p, p, {2, 1, 2});
  EXPECT_NEAR(o.data()[0], v.data()[0], 1e-15);
  EXPECT_NEAR(o.data()[1], v.data()[1], 1e-15);
  EXPECT_NEAR(o.data()[2], v.data()[0], 1e-15);
  EXPECT_NEAR(o.data()[3], v.data()[1], 1e-15);
}

TEST(Attention, PermittedRowsSumToOne) {
  // With all-ones values, each output element is the probability mass on permitted keys.
  std::mt19937_64 rng(6);
  auto q = random_tensor(rng, {5, 6}, false, -4, 4);
  auto k = random_tensor(rng, {5, 6}, false, -4, 4);
  auto v = Tensor::full({5, 6}, 1.0);
  std::vector<int> p{0, 1, 2, 3, 4};
  auto o = t::attention(q, k, v, p, p, {3, 3, 2});
  for (double x : o.data()) EXPECT_NEAR(x, 1.0, 1e-6);
}

TEST(Attention, CausalCutIgnoresFutureKeys) {
  std::mt19937_64 rng(8);
  auto q = random_tensor(rng, {1, 4}, false);
  auto k = random_tensor(rng, {3, 4}, false);
  auto v = random_tensor(rng, {3, 4}, false);
  std::vector<int> qp{1}, kp{0, 1, 2};
  auto full = t::attention(q, k, v, qp, kp, {1, 1, 4});
  auto k2 = t::slice_rows(k, 0, 2), v2 = t::slice_rows(v, 0, 2);
  std::vector<int> kp2{0, 1};
  auto cut = t::attention(q, k2, v2, qp, kp2, {1, 1, 4});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(full.data()[i], cut.data()[i], 1e-15);
}

TEST(Autograd, ThreeOpChainMatchesManualChainRule) {
  // L = sum(sigmoid(x * w)^2); dL/dx = 2 s * s(1-s) * w
  std::mt19937_64 rng(9);
  auto x = random_tensor(rng, {2, 3});
  auto w = random_tensor(rng, {2, 3}, false);
  auto loss = t::sum(t::square(t::sigmoid(t::mul(x, w))));
  loss.backward();
  for (std::size_t i = 0; i < 6; ++i) {
    const double z = x.data()[i] * w.data()[i];
    const double s = 1.0 / (1.0 + std::exp(-z));
    EXPECT_NEAR(x.grad()[i], 2.0 * s * s * (1.0 - s) * w.data()[i], 1e-14);
  }
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  auto x = Tensor::from({1}, {3.0}, true);
  auto y = t::mul(x, x);  // x used twice
  t::sum(t::add(y, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  auto x = Tensor::from({1}, {2.0}, true);
  t::NoGradGuard guard;
  auto y = t::square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, NonFiniteResultThrows) {
  auto x = Tensor::from({1}, {1e300});
  EXPECT_THROW(t::square(x), mor::NonFiniteError);
}

TEST(Ops, ScatterRejectsDuplicates) {
  std::vector<std::size_t> rows{1, 1};
  EXPECT_THROW(t::scatter_rows(Tensor::zeros({3, 2}), rows, Tensor::zeros({2, 2})), mor::IndexError);
}

TEST(Ops, EmbeddingRejectsUnknownIds) {
  std::vector<int> ids{5};
  EXPECT_THROW(t::embedding(Tensor::zeros({5, 2}), ids), mor::IndexError);
}

TEST(Ops, RopeAtPositionZeroIsIdentity) {
  std::mt19937_64 rng(12);
  auto x = random_tensor(rng, {1, 8}, false);
  std::vector<int> p{0};
  auto y = t::rope(x, p, 2, 4);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto cases = mor::testing::differentiable_op_cases();
  const auto& c = cases.at(GetParam());
  for (auto backend : {mor::kernels::Backend::Scalar, mor::kernels::Backend::Avx2}) {
    if (!mor::kernels::backend_supported(backend)) continue;
    const auto saved = mor::kernels::active_backend();
    mor::kernels::set_backend(backend);
    std::mt19937_64 rng(100 + GetParam());
    auto r = check_gradients(c.loss, c.inputs(rng));
    mor::kernels::set_backend(saved);
    EXPECT_LT(r.max_rel_err, 1e-6) << c.name << " on " << mor::kernels::backend_name(backend);
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Range<std::size_t>(0, mor::testing::differentiable_op_cases().size()),
                         [](const auto& info) {
                           return mor::testing::differentiable_op_cases()[info.param].name;
                         });
