#include "mor/tensor/init.hpp"

namespace mor::tensor {

Tensor trunc_normal(Shape shape, double std, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) {
    double z;
    do {
      z = dist(rng);
    } while (z < -2.0 || z > 2.0);
    x = static_cast<double>(static_cast<float>(z * std));
  }
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

void round_to_f32(std::span<double> values) {
  for (auto& x : values) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace mor::tensor
