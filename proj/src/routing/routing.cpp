#include "mor/routing/routing.hpp"

#include <algorithm>
#include <numeric>

#include "mor/errors.hpp"
#include "mor/tensor/ops.hpp"

namespace mor::routing {

std::vector<Fraction> capacity_schedule(std::size_t n_r) {
  if (n_r == 0) throw ConfigError("capacity schedule needs at least one recursion");
  const auto n = static_cast<std::int64_t>(n_r);
  std::vector<Fraction> caps;
  for (std::int64_t r = 0; r < n; ++r) caps.emplace_back(n - r, n);
  return caps;
}

std::size_t capacity_count(const Fraction& capacity, std::size_t total) {
  const std::int64_t num = capacity.numerator() * static_cast<std::int64_t>(total);
  return static_cast<std::size_t>(num / capacity.denominator());
}

SelectionMask::SelectionMask(std::size_t t, std::size_t d)
    : tokens(t), depths(d), selected(t * d, 0), live(t * d, 0), scores(t * d, 0.0),
      probs(t * d, 0.0), shortfall(d, 0) {}

std::size_t SelectionMask::depth_of(std::size_t t) const {
  std::size_t n = 0;
  while (n < depths && is_selected(t, n)) ++n;
  return n;
}

std::size_t SelectionMask::column_count(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < tokens; ++t) n += is_selected(t, r);
  return n;
}

std::vector<std::size_t> SelectionMask::column(std::size_t r) const {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < tokens; ++t) {
    if (is_selected(t, r)) out.push_back(t);
  }
  return out;
}

bool SelectionMask::nested() const {
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t r = 1; r < depths; ++r)
      if (is_selected(t, r) && !is_selected(t, r - 1)) return false;
  return true;
}

std::vector<std::size_t> SelectionMask::depth_histogram() const {
  std::vector<std::size_t> h(depths + 1, 0);
  for (std::size_t t = 0; t < tokens; ++t) ++h[depth_of(t)];
  return h;
}

TopK expert_choice_select(std::span<const double> scores, std::span<const std::size_t> live,
                          const Fraction& capacity, std::size_t total_tokens) {
  if (scores.size() != live.size()) throw DimensionError("expert_choice_select: one score per live token");
  const std::size_t k = capacity_count(capacity, total_tokens);
  TopK out;
  std::vector<std::size_t> order(live.size());
  std::iota(order.begin(), order.end(), 0);
  if (k >= live.size()) {
    out.shortfall = k > live.size();
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return live[a] < live[b];
    });
    order.resize(k);
  }
  for (std::size_t i : order) out.selected.push_back(live[i]);
  std::sort(out.selected.begin(), out.selected.end());
  return out;
}

Tensor expert_choice_update(const Tensor& h_r, const Tensor& f_out, const Tensor& gates,
                            std::span<const std::size_t> selected) {
  if (selected.empty()) return h_r;
  auto base = tensor::gather_rows(h_r, selected);
  auto updated = tensor::add(tensor::scale_rows(f_out, gates), base);
  return tensor::scatter_rows(h_r, selected, updated);
}

TokenChoice token_choice_assign(std::span<const double> gates, std::size_t n_r,
                                std::span<const double> bias) {
  if (n_r == 0 || gates.size() % n_r != 0) throw DimensionError("token_choice_assign: gates must be T x N_r");
  if (!bias.empty() && bias.size() != n_r) throw DimensionError("token_choice_assign: bias length must be N_r");
  TokenChoice out;
  const std::size_t t_len = gates.size() / n_r;
  out.depth.resize(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    std::size_t best = 0;
    double best_v = gates[t * n_r] + (bias.empty() ? 0.0 : bias[0]);
    for (std::size_t j = 1; j < n_r; ++j) {
      const double v = gates[t * n_r + j] + (bias.empty() ? 0.0 : bias[j]);
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    out.depth[t] = best + 1;
  }
  return out;
}

Tensor aux_loss(const Tensor& probs, std::span<const unsigned char> selected) {
  std::vector<double> targets(selected.begin(), selected.end());
  return tensor::binary_cross_entropy(probs, targets);
}

Tensor aux_router_loss(const Tensor& aux_probs, std::span<const unsigned char> selected) {
  std::vector<double> targets(selected.begin(), selected.end());
  return tensor::binary_cross_entropy(aux_probs, targets);
}

Tensor balancing_loss(std::span<const std::size_t> assignments, const Tensor& probs, double alpha) {
  if (probs.rank() != 2) throw DimensionError("balancing_loss: probs must be T x N_r");
  const std::size_t t_len = probs.dim(0), n_r = probs.dim(1);
  if (assignments.size() != t_len) throw DimensionError("balancing_loss: one assignment per token");
  std::vector<double> f(n_r, 0.0);
  for (std::size_t a : assignments) {
    if (a >= n_r) throw IndexError("balancing_loss: assignment out of range");
    f[a] += static_cast<double>(n_r) / static_cast<double>(t_len);
  }
  auto p = tensor::mean_rows(probs);
  auto fw = tensor::Tensor::from({n_r}, std::move(f));
  return tensor::scale(tensor::sum(tensor::mul(fw, p)), alpha);
}

std::vector<double> lossfree_bias_update(std::span<const double> counts, std::span<const double> bias,
                                         double rate) {
  if (counts.size() != bias.size()) throw DimensionError("lossfree_bias_update: counts and bias differ in length");
  if (counts.empty()) return {};
  const double mean = std::accumulate(counts.begin(), counts.end(), 0.0) / static_cast<double>(counts.size());
  std::vector<double> out(bias.begin(), bias.end());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double err = mean - counts[i];
    out[i] += rate * static_cast<double>((err > 0) - (err < 0));
  }
  return out;
}

Tensor z_loss(const Tensor& logits) {
  if (logits.rank() == 1) return tensor::mean(tensor::square(logits));
  return tensor::mean(tensor::square(tensor::logsumexp_rows(logits)));
}

}  // namespace mor::routing
