#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace mor::testing {

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> loss;
};

// One entry per differentiable op; each loss reduces the op output to a
// scalar with a fixed random projection.
inline std::vector<OpCase> differentiable_op_cases() {
  namespace t = mor::tensor;
  auto mat = [](std::size_t m, std::size_t n) {
    return [m, n](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {m, n})}; };
  };
  auto two = [](t::Shape a, t::Shape b) {
    return [a, b](std::mt19937_64& rng) {
      return std::vector<Tensor>{random_tensor(rng, a), random_tensor(rng, b)};
    };
  };
  static const std::vector<int> ids{3, 0, 3, 1, 4};
  static const std::vector<int> pos5{0, 1, 2, 3, 4};
  static const std::vector<int> qpos{2, 3, 5};
  static const std::vector<int> kpos{0, 1, 2, 3, 4, 5};
  static const std::vector<std::size_t> rows{4, 1, 1, 0};
  static const std::vector<std::size_t> srows{3, 0};
  static const std::vector<int> targets{2, 0, 6, 1, 5};
  static const std::vector<double> bce_t{1, 0, 0, 1, 1, 0};
  static const std::vector<unsigned char> allowed{1, 0, 1, 1, 0, 1, 0, 1, 1, 1, 0, 0};
  const t::AttentionShape gqa{4, 2, 3};

  return {
      {"matmul", two({3, 4}, {4, 2}), [](auto& in) { return project(t::matmul(in[0], in[1])); }},
      {"matmul_transposed", two({3, 4}, {5, 4}),
       [](auto& in) { return project(t::matmul_transposed(in[0], in[1])); }},
      {"add", two({3, 4}, {3, 4}), [](auto& in) { return project(t::add(in[0], in[1])); }},
      {"sub", two({3, 4}, {3, 4}), [](auto& in) { return project(t::sub(in[0], in[1])); }},
      {"mul", two({3, 4}, {3, 4}), [](auto& in) { return project(t::mul(in[0], in[1])); }},
      {"scale", mat(3, 4), [](auto& in) { return project(t::scale(in[0], -1.7)); }},
      {"add_scalar", mat(3, 4), [](auto& in) { return project(t::add_scalar(in[0], 0.3)); }},
      {"square", mat(3, 4), [](auto& in) { return project(t::square(in[0])); }},
      {"mul_row", two({3, 4}, {4}), [](auto& in) { return project(t::mul_row(in[0], in[1])); }},
      {"scale_rows", two({3, 4}, {3}), [](auto& in) { return project(t::scale_rows(in[0], in[1])); }},
      {"sigmoid", mat(3, 4), [](auto& in) { return project(t::sigmoid(in[0])); }},
      {"tanh", mat(3, 4), [](auto& in) { return project(t::tanh(in[0])); }},
      {"silu", mat(3, 4), [](auto& in) { return project(t::silu(in[0])); }},
      {"gelu", mat(3, 4), [](auto& in) { return project(t::gelu(in[0])); }},
      {"softmax_rows", mat(3, 5), [](auto& in) { return project(t::softmax_rows(in[0])); }},
      {"logsumexp_rows", mat(3, 5), [](auto& in) { return project(t::logsumexp_rows(in[0])); }},
      {"sum", mat(3, 4), [](auto& in) { return t::sum(t::square(in[0])); }},
      {"mean", mat(3, 4), [](auto& in) { return t::mean(t::square(in[0])); }},
      {"mean_rows", mat(3, 4), [](auto& in) { return project(t::mean_rows(in[0])); }},
      {"column", mat(3, 4), [](auto& in) { return project(t::column(in[0], 2)); }},
      {"reshape", mat(3, 4), [](auto& in) { return project(t::reshape(in[0], {2, 6})); }},
      {"rms_norm", two({3, 6}, {6}),
       [](auto& in) { return project(t::rms_norm(in[0], in[1], 1e-5)); }},
      {"embedding", mat(5, 3), [](auto& in) { return project(t::embedding(in[0], ids)); }},
      {"rope", mat(5, 8), [](auto& in) { return project(t::rope(in[0], pos5, 2, 4, 10000.0)); }},
      {"attention_causal",
       [](std::mt19937_64& rng) {
         return std::vector<Tensor>{random_tensor(rng, {3, 12}), random_tensor(rng, {6, 6}),
                                    random_tensor(rng, {6, 6})};
       },
       [gqa](auto& in) { return project(t::attention(in[0], in[1], in[2], qpos, kpos, gqa)); }},
      {"attention_masked",
       [](std::mt19937_64& rng) {
         return std::vector<Tensor>{random_tensor(rng, {3, 12}), random_tensor(rng, {4, 6}),
                                    random_tensor(rng, {4, 6})};
       },
       [gqa](auto& in) { return project(t::attention_masked(in[0], in[1], in[2], allowed, gqa)); }},
      {"concat_rows", two({2, 3}, {4, 3}), [](auto& in) { return project(t::concat_rows({in[0], in[1]})); }},
      {"slice_rows", mat(5, 3), [](auto& in) { return project(t::slice_rows(in[0], 1, 4)); }},
      {"gather_rows", mat(5, 3), [](auto& in) { return project(t::gather_rows(in[0], rows)); }},
      {"scatter_rows", two({4, 3}, {2, 3}),
       [](auto& in) { return project(t::scatter_rows(in[0], srows, in[1])); }},
      {"softmax_cross_entropy", mat(5, 7),
       [](auto& in) { return t::softmax_cross_entropy(in[0], targets); }},
      {"binary_cross_entropy", mat(2, 3),
       [](auto& in) { return t::binary_cross_entropy(t::sigmoid(in[0]), bce_t); }},
  };
}

}  // namespace mor::testing
