#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mor/tensor/ops.hpp"
#include "mor/tensor/tensor.hpp"

namespace mor::testing {

using tensor::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, tensor::Shape shape, bool requires_grad = true,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(tensor::numel_of(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Collapses any tensor to a scalar through a fixed random projection so that
// every output element contributes to the checked gradient.
inline Tensor project(const Tensor& y, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  Tensor r = random_tensor(rng, y.shape(), false);
  return tensor::sum(tensor::mul(y, r));
}

struct GradCheck {
  double max_rel_err = 0.0;  // ||analytic - numeric|| / (||analytic|| + ||numeric||), worst input
};

// Compares reverse-mode gradients of f against central differences for every
// input flagged requires_grad.
inline GradCheck check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, double step = 1e-5) {
  for (auto& t : inputs) {
    if (t.requires_grad()) t.zero_grad();
  }
  Tensor loss = f(inputs);
  loss.backward();
  GradCheck out;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) {
      auto g = t.grad();
      analytic.assign(g.begin(), g.end());
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double plus, minus;
      {
        tensor::NoGradGuard ng;
        data[i] = saved + step;
        plus = f(inputs).item();
        data[i] = saved - step;
        minus = f(inputs).item();
      }
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    const double rel = denom > 0.0 ? std::sqrt(diff2) / denom : std::sqrt(diff2);
    out.max_rel_err = std::max(out.max_rel_err, rel);
  }
  return out;
}

}  // namespace mor::testing
