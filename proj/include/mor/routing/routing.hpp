#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mor/routing/router.hpp"

namespace mor::routing {

// [N_r/N_r, (N_r-1)/N_r, ..., 1/N_r]. Throws ConfigError when n_r is zero.
std::vector<Fraction> capacity_schedule(std::size_t n_r);

// floor(capacity * total).
std::size_t capacity_count(const Fraction& capacity, std::size_t total);

// Per-(token, depth) routing decision. Depths are 0-based in storage.
// selected[t][r+1] implies selected[t][r].
struct SelectionMask {
  std::size_t tokens = 0;
  std::size_t depths = 0;
  std::vector<unsigned char> selected;  // tokens x depths
  std::vector<unsigned char> live;      // candidate at depth r
  std::vector<double> scores;           // activation output, 0 where not live
  std::vector<double> probs;            // sigmoid(logit) for expert choice, 0 where not live
  std::vector<unsigned char> shortfall;  // per depth, fewer live tokens than k

  SelectionMask() = default;
  SelectionMask(std::size_t t, std::size_t d);

  bool is_selected(std::size_t t, std::size_t r) const { return selected[t * depths + r] != 0; }
  bool is_live(std::size_t t, std::size_t r) const { return live[t * depths + r] != 0; }
  double score(std::size_t t, std::size_t r) const { return scores[t * depths + r]; }
  // Number of depths executed by token t.
  std::size_t depth_of(std::size_t t) const;
  std::size_t column_count(std::size_t r) const;
  std::vector<std::size_t> column(std::size_t r) const;  // selected tokens, ascending
  bool nested() const;
  // Histogram of depth_of over tokens; index d counts tokens with depth d.
  std::vector<std::size_t> depth_histogram() const;
};

struct TopK {
  std::vector<std::size_t> selected;  // ascending token indices
  bool shortfall = false;
};

// Chooses k = floor(capacity * total_tokens) of the live tokens by score,
// ties broken toward the lower token index. `live` lists candidate token
// indices and `scores` their scores in the same order. Fewer than k live
// tokens selects all of them and sets shortfall.
TopK expert_choice_select(std::span<const double> scores, std::span<const std::size_t> live,
                          const Fraction& capacity, std::size_t total_tokens);

// H_{r+1}: rows in `selected` become g * f_out + H_r, the rest copy H_r.
// f_out and gates are aligned with `selected`.
Tensor expert_choice_update(const Tensor& h_r, const Tensor& f_out, const Tensor& gates,
                            std::span<const std::size_t> selected);

struct TokenChoice {
  std::vector<std::size_t> depth;  // 1-based assigned depth per token
};

// depth_t = 1 + argmax_j (g[t][j] + bias[j]); bias may be empty. First
// maximum wins.
TokenChoice token_choice_assign(std::span<const double> gates, std::size_t n_r,
                                std::span<const double> bias);

// Mean BCE of probs against selection indicators.
Tensor aux_loss(const Tensor& probs, std::span<const unsigned char> selected);

// BCE of the auxiliary head's probs against the main router's selection.
// The caller feeds the auxiliary head detached inputs, so no gradient
// reaches the main router or the trunk.
Tensor aux_router_loss(const Tensor& aux_probs, std::span<const unsigned char> selected);

// alpha * sum_i f_i P_i with f_i = (N_r/T) * |{t : t -> i}| and
// P_i = mean_t probs[t][i]; assignments are 0-based experts.
Tensor balancing_loss(std::span<const std::size_t> assignments, const Tensor& probs, double alpha);

// b_i += u * sign(mean(c) - c_i).
std::vector<double> lossfree_bias_update(std::span<const double> counts, std::span<const double> bias,
                                         double rate);

// mean_b (logsumexp_j logits[b][j])^2. Accepts [B] (scalar routers) or [B x N].
Tensor z_loss(const Tensor& logits);

}  // namespace mor::routing
