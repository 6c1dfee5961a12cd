#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mor/tensor/tensor.hpp"

namespace mor::tensor {

// Linear algebra. All matrices are rank-2 row-major.
Tensor matmul(const Tensor& a, const Tensor& b);             // [m,k]x[k,n]
Tensor matmul_transposed(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);

// Broadcasting over rows of a [m,n] matrix.
Tensor mul_row(const Tensor& a, const Tensor& w);     // a[i,j] * w[j]
Tensor scale_rows(const Tensor& a, const Tensor& s);  // a[i,j] * s[i], s has m elements

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor softmax_rows(const Tensor& a);
Tensor logsumexp_rows(const Tensor& a);  // [m,n] -> [m]

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // [m,n] -> [n], average over rows
Tensor column(const Tensor& a, std::size_t j);  // [m,n] -> [m]
Tensor reshape(const Tensor& a, Shape shape);

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps);
Tensor embedding(const Tensor& table, std::span<const int> ids);
// Rotary position encoding on [T, heads*d_head]; pairs (2i, 2i+1) rotate by
// position * base^(-2i/d_head).
Tensor rope(const Tensor& x, std::span<const int> positions, std::size_t n_heads,
            std::size_t d_head, double base = 10000.0);

// Grouped-query scaled dot-product attention. Query row i may attend key
// row j iff key_pos[j] <= query_pos[i].
struct AttentionShape {
  std::size_t n_heads;
  std::size_t n_kv_heads;
  std::size_t d_head;
};
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const int> query_pos,
                 std::span<const int> key_pos, const AttentionShape& shape);
// Same with an explicit [Tq, Tk] permission mask (non-zero = allowed).
Tensor attention_masked(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const unsigned char> allowed, const AttentionShape& shape);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// Copy of base with rows[i] replaced by values row i.
Tensor scatter_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& values);

// Mean over rows of -log softmax(logits)[t, target_t].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);
// Mean binary cross-entropy of probabilities against {0,1} targets; probs are
// clamped to [eps, 1-eps] inside the log.
Tensor binary_cross_entropy(const Tensor& probs, std::span<const double> targets,
                            double eps = 1e-12);

}  // namespace mor::tensor
