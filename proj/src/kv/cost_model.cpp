#include "mor/kv/cost_model.hpp"

#include "mor/errors.hpp"

namespace mor::kv {

CostRatios cost_model(std::int64_t n_r, std::int64_t k, std::int64_t n_ctx, KvMode mode) {
  if (n_r <= 0 || k <= 0 || n_ctx <= 0) throw DomainError("cost_model: counts must be positive");
  if (k > n_ctx) throw DomainError("cost_model: k exceeds N_ctx");
  const Ratio linear(n_r + 1, 2 * n_r);
  switch (mode) {
    case KvMode::RecursionWise:
      return {linear, linear, Ratio(k * k, n_ctx * n_ctx)};
    case KvMode::RecursiveSharing:
      return {Ratio(1, n_r), Ratio(1), Ratio(k, n_ctx)};
    case KvMode::Hybrid:
      return {linear, Ratio(1), Ratio(k, n_ctx)};
  }
  throw DomainError("cost_model: unknown mode");
}

}  // namespace mor::kv
