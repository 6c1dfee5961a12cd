#include "mor/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mor/errors.hpp"
#include "mor/kernels/kernels.hpp"

namespace mor::tensor {

using detail::make_result;
namespace k = mor::kernels;

namespace {

// Gradient buffer of parent i, or nullptr if it does not need one.
double* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

const std::vector<double>& value_of(Node& self, std::size_t i) { return self.parents[i]->value; }

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv, const char* op) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return make_result(
      a.shape(), std::move(out), {a},
      [deriv](Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const auto& x = value_of(self, 0);
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * deriv(x[i], self.value[i]);
      },
      op);
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
  if (b.dim(0) != kk) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  k::gemm_nn(m, kk, n, a.data(), b.data(), out);
  return make_result(
      {m, n}, std::move(out), {a, b},
      [m, kk, n](Node& self) {
        if (double* ga = grad_of(self, 0)) {
          k::active().gemm_nt(m, n, kk, self.grad.data(), value_of(self, 1).data(), ga, true);
        }
        if (double* gb = grad_of(self, 1)) {
          k::active().gemm_tn(kk, m, n, value_of(self, 0).data(), self.grad.data(), gb, true);
        }
      },
      "matmul");
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_transposed");
  require_matrix(b, "matmul_transposed");
  const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(0);
  if (b.dim(1) != kk) {
    throw DimensionError("matmul_transposed: inner extents differ " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  k::gemm_nt(m, kk, n, a.data(), b.data(), out);
  return make_result(
      {m, n}, std::move(out), {a, b},
      [m, kk, n](Node& self) {
        if (double* ga = grad_of(self, 0)) {
          k::active().gemm_nn(m, n, kk, self.grad.data(), value_of(self, 1).data(), ga, true);
        }
        if (double* gb = grad_of(self, 1)) {
          k::active().gemm_tn(n, m, kk, self.grad.data(), value_of(self, 0).data(), gb, true);
        }
      },
      "matmul_transposed");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
          if (double* g = grad_of(self, p)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
          }
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        if (double* g = grad_of(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = grad_of(self, 1)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        const auto& x = value_of(self, 0);
        const auto& y = value_of(self, 1);
        if (double* g = grad_of(self, 0)) {
          for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * y[i];
        }
        if (double* g = grad_of(self, 1)) {
          for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * x[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; }, "scale");
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; }, "add_scalar");
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; },
               "square");
}

Tensor mul_row(const Tensor& a, const Tensor& w) {
  require_matrix(a, "mul_row");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (w.numel() != n) throw DimensionError("mul_row: weight length must equal column count");
  const auto x = a.data();
  const auto wv = w.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * wv[j];
  return make_result(
      {m, n}, std::move(out), {a, w},
      [m, n](Node& self) {
        const auto& x = value_of(self, 0);
        const auto& wv = value_of(self, 1);
        if (double* g = grad_of(self, 0)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * wv[j];
        }
        if (double* g = grad_of(self, 1)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * x[i * n + j];
        }
      },
      "mul_row");
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  require_matrix(a, "scale_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (s.numel() != m) throw DimensionError("scale_rows: scale length must equal row count");
  const auto x = a.data();
  const auto sv = s.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * sv[i];
  return make_result(
      {m, n}, std::move(out), {a, s},
      [m, n](Node& self) {
        const auto& x = value_of(self, 0);
        const auto& sv = value_of(self, 1);
        if (double* g = grad_of(self, 0)) {
          for (std::size_t i = 0; i < m; ++i) k::active().axpy(sv[i], self.grad.data() + i * n, g + i * n, n);
        }
        if (double* g = grad_of(self, 1)) {
          for (std::size_t i = 0; i < m; ++i) g[i] += k::active().dot(self.grad.data() + i * n, x.data() + i * n, n);
        }
      },
      "scale_rows");
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; },
               "tanh");
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s + x * s * (1.0 - s);
      },
      "silu");
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt_2pi](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      },
      "gelu");
}

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_result(
      {m, n}, std::move(out), {a},
      [m, n](Node& self) {
        double* g = grad_of(self, 0);
        if (!g) return;
        for (std::size_t i = 0; i < m; ++i) {
          const double* y = self.value.data() + i * n;
          const double* dy = self.grad.data() + i * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += dy[j] * y[j];
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - s);
        }
      },
      "softmax_rows");
}

Tensor logsumexp_rows(const Tensor& a) {
  require_matrix(a, "logsumexp_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    out[i] = mx + std::log(z);
  }
  return make_result(
      {m}, std::move(out), {a},
      [m, n](Node& self) {
        double* g = grad_of(self, 0);
        if (!g) return;
        const auto& x = value_of(self, 0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            g[i * n + j] += self.grad[i] * std::exp(x[i * n + j] - self.value[i]);
          }
        }
      },
      "logsumexp_rows");
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result(
      {}, {s}, {a},
      [](Node& self) {
        if (double* g = grad_of(self, 0)) {
          const std::size_t n = self.parents[0]->value.size();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
      },
      "sum");
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (m == 0) throw DimensionError("mean_rows of empty matrix");
  const auto x = a.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (double& v : out) v /= static_cast<double>(m);
  return make_result(
      {n}, std::move(out), {a},
      [m, n](Node& self) {
        if (double* g = grad_of(self, 0)) {
          const double inv = 1.0 / static_cast<double>(m);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
        }
      },
      "mean_rows");
}

Tensor column(const Tensor& a, std::size_t j) {
  require_matrix(a, "column");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (j >= n) throw IndexError("column: index out of range");
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = a.data()[i * n + j];
  return make_result(
      {m}, std::move(out), {a},
      [m, n, j](Node& self) {
        if (double* g = grad_of(self, 0)) {
          for (std::size_t i = 0; i < m; ++i) g[i * n + j] += self.grad[i];
        }
      },
      "column");
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(
      std::move(shape), std::move(out), {a},
      [](Node& self) {
        if (double* g = grad_of(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      },
      "reshape");
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  require_matrix(x, "rms_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (weight.numel() != n) throw DimensionError("rms_norm: weight length must equal width");
  const auto xv = x.data();
  const auto w = weight.data();
  std::vector<double> inv_rms(m);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    const double ms = k::active().dot(row, row, n) / static_cast<double>(n);
    inv_rms[i] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] * inv_rms[i] * w[j];
  }
  return make_result(
      {m, n}, std::move(out), {x, weight},
      [m, n, inv_rms = std::move(inv_rms)](Node& self) {
        const auto& xv = value_of(self, 0);
        const auto& w = value_of(self, 1);
        double* gx = grad_of(self, 0);
        double* gw = grad_of(self, 1);
        std::vector<double> dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          const double r = inv_rms[i];
          const double* row = xv.data() + i * n;
          const double* dy = self.grad.data() + i * n;
          if (gw) {
            for (std::size_t j = 0; j < n; ++j) gw[j] += dy[j] * row[j] * r;
          }
          if (gx) {
            double proj = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = dy[j] * w[j];
              proj += dxhat[j] * row[j] * r;
            }
            proj /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += r * (dxhat[j] - row[j] * r * proj);
          }
        }
      },
      "rms_norm");
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[t]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result(
      {ids.size(), d}, std::move(out), {table},
      [d, idv = std::move(idv)](Node& self) {
        if (double* g = grad_of(self, 0)) {
          for (std::size_t t = 0; t < idv.size(); ++t) {
            k::active().axpy(1.0, self.grad.data() + t * d, g + static_cast<std::size_t>(idv[t]) * d, d);
          }
        }
      },
      "embedding");
}

Tensor rope(const Tensor& x, std::span<const int> positions, std::size_t n_heads,
            std::size_t d_head, double base) {
  require_matrix(x, "rope");
  const std::size_t t_len = x.dim(0), width = x.dim(1);
  if (width != n_heads * d_head || d_head % 2 != 0) {
    throw DimensionError("rope: width must be n_heads * even d_head");
  }
  if (positions.size() != t_len) throw DimensionError("rope: one position per row required");
  const std::size_t half = d_head / 2;
  std::vector<double> cs(t_len * half), sn(t_len * half);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
      const double angle = static_cast<double>(positions[t]) * freq;
      cs[t * half + i] = std::cos(angle);
      sn[t * half + i] = std::sin(angle);
    }
  }
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t o = t * width + h * d_head + 2 * i;
        const double c = cs[t * half + i], s = sn[t * half + i];
        out[o] = xv[o] * c - xv[o + 1] * s;
        out[o + 1] = xv[o] * s + xv[o + 1] * c;
      }
  return make_result(
      x.shape(), std::move(out), {x},
      [t_len, width, n_heads, d_head, half, cs = std::move(cs), sn = std::move(sn)](Node& self) {
        double* g = grad_of(self, 0);
        if (!g) return;
        for (std::size_t t = 0; t < t_len; ++t)
          for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t i = 0; i < half; ++i) {
              const std::size_t o = t * width + h * d_head + 2 * i;
              const double c = cs[t * half + i], s = sn[t * half + i];
              g[o] += self.grad[o] * c + self.grad[o + 1] * s;
              g[o + 1] += -self.grad[o] * s + self.grad[o + 1] * c;
            }
      },
      "rope");
}

namespace {

void copy_head(const double* src, std::size_t rows, std::size_t width, std::size_t offset,
               std::size_t d_head, double* dst) {
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * width + offset, d_head, dst + r * d_head);
}

void add_head(const double* src, std::size_t rows, std::size_t width, std::size_t offset,
              std::size_t d_head, double* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d_head; ++c) dst[r * width + offset + c] += src[r * d_head + c];
}

Tensor attention_impl(const Tensor& q, const Tensor& kt, const Tensor& v,
                      std::vector<unsigned char> allowed, const AttentionShape& shape) {
  require_matrix(q, "attention");
  require_matrix(kt, "attention");
  require_matrix(v, "attention");
  const std::size_t tq = q.dim(0), tk = kt.dim(0), dh = shape.d_head;
  const std::size_t hq = shape.n_heads, hkv = shape.n_kv_heads;
  if (hkv == 0 || hq % hkv != 0) throw DimensionError("attention: n_heads must be a multiple of n_kv_heads");
  if (q.dim(1) != hq * dh) throw DimensionError("attention: query width mismatch");
  if (kt.dim(1) != hkv * dh || v.dim(1) != hkv * dh) throw DimensionError("attention: key/value width mismatch");
  if (v.dim(0) != tk) throw DimensionError("attention: key/value length mismatch");
  if (allowed.size() != tq * tk) throw DimensionError("attention: mask size mismatch");

  const std::size_t group = hq / hkv;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool keep = recording({&q, &kt, &v});
  std::vector<double> probs(keep ? hq * tq * tk : 0);
  std::vector<double> out(tq * hq * dh, 0.0);
  std::vector<double> qh(tq * dh), kh(tk * dh), vh(tk * dh), p(tq * tk), oh(tq * dh);

  for (std::size_t h = 0; h < hq; ++h) {
    const std::size_t g = h / group;
    copy_head(q.data().data(), tq, hq * dh, h * dh, dh, qh.data());
    copy_head(kt.data().data(), tk, hkv * dh, g * dh, dh, kh.data());
    copy_head(v.data().data(), tk, hkv * dh, g * dh, dh, vh.data());
    k::active().gemm_nt(tq, dh, tk, qh.data(), kh.data(), p.data(), false);
    for (std::size_t i = 0; i < tq; ++i) {
      double* row = p.data() + i * tk;
      const unsigned char* ok = allowed.data() + i * tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < tk; ++j) {
        if (ok[j]) mx = std::max(mx, row[j] * inv_sqrt);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        row[j] = ok[j] ? std::exp(row[j] * inv_sqrt - mx) : 0.0;
        z += row[j];
      }
      if (z > 0.0) {
        for (std::size_t j = 0; j < tk; ++j) row[j] /= z;
      }
    }
    k::active().gemm_nn(tq, tk, dh, p.data(), vh.data(), oh.data(), false);
    add_head(oh.data(), tq, hq * dh, h * dh, dh, out.data());
    if (keep) std::copy(p.begin(), p.end(), probs.begin() + h * tq * tk);
  }

  return make_result(
      {tq, hq * dh}, std::move(out), {q, kt, v},
      [tq, tk, dh, hq, hkv, group, inv_sqrt, probs = std::move(probs)](Node& self) {
        const auto& qv = value_of(self, 0);
        const auto& kv = value_of(self, 1);
        const auto& vv = value_of(self, 2);
        double* gq = grad_of(self, 0);
        double* gk = grad_of(self, 1);
        double* gv = grad_of(self, 2);
        std::vector<double> qh(tq * dh), kh(tk * dh), vh(tk * dh), doh(tq * dh);
        std::vector<double> dp(tq * tk), tmp_k(tk * dh), tmp_q(tq * dh);
        for (std::size_t h = 0; h < hq; ++h) {
          const std::size_t g = h / group;
          const double* p = probs.data() + h * tq * tk;
          copy_head(self.grad.data(), tq, hq * dh, h * dh, dh, doh.data());
          copy_head(kv.data(), tk, hkv * dh, g * dh, dh, kh.data());
          copy_head(vv.data(), tk, hkv * dh, g * dh, dh, vh.data());
          copy_head(qv.data(), tq, hq * dh, h * dh, dh, qh.data());
          if (gv) {
            k::active().gemm_tn(tk, tq, dh, p, doh.data(), tmp_k.data(), false);
            add_head(tmp_k.data(), tk, hkv * dh, g * dh, dh, gv);
          }
          if (!gq && !gk) continue;
          k::active().gemm_nt(tq, dh, tk, doh.data(), vh.data(), dp.data(), false);
          for (std::size_t i = 0; i < tq; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < tk; ++j) s += dp[i * tk + j] * p[i * tk + j];
            for (std::size_t j = 0; j < tk; ++j) {
              dp[i * tk + j] = p[i * tk + j] * (dp[i * tk + j] - s) * inv_sqrt;
            }
          }
          if (gq) {
            k::active().gemm_nn(tq, tk, dh, dp.data(), kh.data(), tmp_q.data(), false);
            add_head(tmp_q.data(), tq, hq * dh, h * dh, dh, gq);
          }
          if (gk) {
            k::active().gemm_tn(tk, tq, dh, dp.data(), qh.data(), tmp_k.data(), false);
            add_head(tmp_k.data(), tk, hkv * dh, g * dh, dh, gk);
          }
        }
      },
      "attention");
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k_in, const Tensor& v, std::span<const int> query_pos,
                 std::span<const int> key_pos, const AttentionShape& shape) {
  if (query_pos.size() != q.rows() || key_pos.size() != k_in.rows()) {
    throw DimensionError("attention: one position per query/key row required");
  }
  std::vector<unsigned char> allowed(query_pos.size() * key_pos.size());
  for (std::size_t i = 0; i < query_pos.size(); ++i)
    for (std::size_t j = 0; j < key_pos.size(); ++j)
      allowed[i * key_pos.size() + j] = key_pos[j] <= query_pos[i] ? 1 : 0;
  return attention_impl(q, k_in, v, std::move(allowed), shape);
}

Tensor attention_masked(const Tensor& q, const Tensor& k_in, const Tensor& v,
                        std::span<const unsigned char> allowed, const AttentionShape& shape) {
  return attention_impl(q, k_in, v, std::vector<unsigned char>(allowed.begin(), allowed.end()), shape);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column count mismatch");
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result(
      {m, n}, std::move(out), parts,
      [offsets = std::move(offsets)](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          if (double* g = grad_of(self, i)) {
            const std::size_t len = self.parents[i]->value.size();
            for (std::size_t e = 0; e < len; ++e) g[e] += self.grad[offsets[i] + e];
          }
        }
      },
      "concat_rows");
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_rows");
  if (begin > end || end > a.rows()) throw IndexError("slice_rows: range out of bounds");
  const std::size_t n = a.cols();
  std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + end * n);
  return make_result(
      {end - begin, n}, std::move(out), {a},
      [begin, n](Node& self) {
        if (double* g = grad_of(self, 0)) {
          for (std::size_t e = 0; e < self.grad.size(); ++e) g[begin * n + e] += self.grad[e];
        }
      },
      "slice_rows");
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_matrix(a, "gather_rows");
  const std::size_t n = a.cols();
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows()) throw IndexError("gather_rows: row index out of range");
    std::copy_n(a.data().data() + rows[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(
      {rows.size(), n}, std::move(out), {a},
      [n, idx = std::move(idx)](Node& self) {
        if (double* g = grad_of(self, 0)) {
          for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < n; ++c) g[idx[i] * n + c] += self.grad[i * n + c];
        }
      },
      "gather_rows");
}

Tensor scatter_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& values) {
  require_matrix(base, "scatter_rows");
  require_matrix(values, "scatter_rows");
  const std::size_t n = base.cols();
  if (values.cols() != n || values.rows() != rows.size()) {
    throw DimensionError("scatter_rows: values must be [rows.size(), base.cols()]");
  }
  std::vector<unsigned char> replaced(base.rows(), 0);
  std::vector<double> out(base.data().begin(), base.data().end());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= base.rows()) throw IndexError("scatter_rows: row index out of range");
    if (replaced[rows[i]]) throw IndexError("scatter_rows: duplicate row index");
    replaced[rows[i]] = 1;
    std::copy_n(values.data().data() + i * n, n, out.data() + rows[i] * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(
      base.shape(), std::move(out), {base, values},
      [n, idx = std::move(idx), replaced = std::move(replaced)](Node& self) {
        if (double* g = grad_of(self, 0)) {
          for (std::size_t r = 0; r < replaced.size(); ++r) {
            if (!replaced[r]) {
              for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[r * n + c];
            }
          }
        }
        if (double* g = grad_of(self, 1)) {
          for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < n; ++c) g[i * n + c] += self.grad[idx[i] * n + c];
        }
      },
      "scatter_rows");
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "softmax_cross_entropy");
  const std::size_t t_len = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != t_len) throw DimensionError("softmax_cross_entropy: one target per row");
  if (t_len == 0) throw DimensionError("softmax_cross_entropy: empty batch");
  const auto x = logits.data();
  std::vector<double> lse(t_len);
  double loss = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[t]) +
                       " outside [0, " + std::to_string(vocab) + ")");
    }
    const double* row = x.data() + t * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    lse[t] = mx + std::log(z);
    loss += lse[t] - row[targets[t]];
  }
  loss /= static_cast<double>(t_len);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result(
      {}, {loss}, {logits},
      [t_len, vocab, lse = std::move(lse), tg = std::move(tg)](Node& self) {
        double* g = grad_of(self, 0);
        if (!g) return;
        const auto& x = value_of(self, 0);
        const double s = self.grad[0] / static_cast<double>(t_len);
        for (std::size_t t = 0; t < t_len; ++t) {
          for (std::size_t j = 0; j < vocab; ++j) g[t * vocab + j] += s * std::exp(x[t * vocab + j] - lse[t]);
          g[t * vocab + static_cast<std::size_t>(tg[t])] -= s;
        }
      },
      "softmax_cross_entropy");
}

Tensor binary_cross_entropy(const Tensor& probs, std::span<const double> targets, double eps) {
  const std::size_t n = probs.numel();
  if (targets.size() != n) throw DimensionError("binary_cross_entropy: one target per probability");
  if (n == 0) throw DimensionError("binary_cross_entropy: empty input");
  const auto p = probs.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::clamp(p[i], eps, 1.0 - eps);
    loss -= targets[i] * std::log(pc) + (1.0 - targets[i]) * std::log(1.0 - pc);
  }
  loss /= static_cast<double>(n);
  std::vector<double> tg(targets.begin(), targets.end());
  return make_result(
      {}, {loss}, {probs},
      [n, eps, tg = std::move(tg)](Node& self) {
        double* g = grad_of(self, 0);
        if (!g) return;
        const auto& p = value_of(self, 0);
        const double s = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          if (p[i] < eps || p[i] > 1.0 - eps) continue;
          g[i] += -s * (tg[i] / p[i] - (1.0 - tg[i]) / (1.0 - p[i]));
        }
      },
      "binary_cross_entropy");
}

}  // namespace mor::tensor
