#pragma once

#include <random>
#include <span>

#include "mor/tensor/tensor.hpp"

namespace mor::tensor {

// Every initializer and sampler takes this generator explicitly.
using Rng = std::mt19937_64;

// Normal(0, std) truncated to [-2 std, 2 std] by resampling; values are
// rounded to the nearest single-precision float.
Tensor trunc_normal(Shape shape, double std, Rng& rng, bool requires_grad = true);

// Rounds in place to the nearest single-precision value.
void round_to_f32(std::span<double> values);

}  // namespace mor::tensor
