#pragma once

#include <cstdint>

#include <boost/rational.hpp>

#include "mor/kv/cache.hpp"

namespace mor::kv {

using Ratio = boost::rational<std::int64_t>;

// KV footprint and attention cost of one recursion block relative to an
// unshared stack of the same depth, under the linear capacity schedule.
struct CostRatios {
  Ratio kv_memory;
  Ratio kv_io;
  Ratio attn_flops;
};

// RecursionWise: memory = io = (N_r+1)/(2 N_r), attention k^2/N_ctx^2.
// RecursiveSharing: memory 1/N_r, io 1, attention k/N_ctx.
// Hybrid: depth 1 stores every token and deeper depths add their selected
// tokens, so memory = (N_r+1)/(2 N_r); every depth reads the full prefix, so
// io = 1 and attention k/N_ctx.
// Throws DomainError when k > n_ctx or any count is zero.
CostRatios cost_model(std::int64_t n_r, std::int64_t k, std::int64_t n_ctx, KvMode mode);

}  // namespace mor::kv
