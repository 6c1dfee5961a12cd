#pragma once

#include <cstddef>
#include <vector>

#include <json.hpp>

#include "mor/kv/cache.hpp"
#include "mor/model/config.hpp"
#include "mor/routing/router.hpp"

namespace mor::flops {

// Per-token forward FLOPs. Only matmul work is counted: norms, softmax,
// nonlinearities and the embedding gather are free.
struct FlopsReport {
  std::size_t seq_len = 0;
  double linear = 0.0;     // 2 x parameters of the unrolled layers touched per token
  double attention = 0.0;  // QK^T and AV over the causal key set
  double lm_head = 0.0;
  double router = 0.0;

  double per_token_forward() const { return linear + attention + lm_head + router; }
  double per_token_forward_without_lm_head() const { return linear + attention + router; }
  // Backward costed at twice the forward.
  double per_token_training() const { return 3.0 * per_token_forward(); }

  // Budgets are matched against forward FLOPs only.
  double tokens_for_budget(double budget) const { return budget / per_token_forward(); }
  double budget_for_tokens(double tokens) const { return tokens * per_token_forward(); }

  nlohmann::json to_json() const;
};

// Attention FLOPs of one layer for one query token that sees `keys` keys.
double attention_flops(const model::ModelConfig& cfg, double keys);

FlopsReport forward_flops_per_token(const model::ModelConfig& cfg, std::size_t seq_len);

// `capacities[r]` is the fraction of tokens executing depth r+1. Without a
// router every token runs every depth and `capacities` is ignored; token
// choice also ignores it and assumes perfectly balanced assignment, under
// which the share reaching depth r+1 is (N_r - r)/N_r.
FlopsReport mor_flops_per_token(const model::ModelConfig& cfg, const std::vector<double>& capacities,
                                kv::KvMode kv_mode, const routing::RouterConfig& router, std::size_t seq_len);

}  // namespace mor::flops
