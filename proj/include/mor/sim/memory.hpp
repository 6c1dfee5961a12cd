#pragma once

#include <cstddef>
#include <cstdint>

#include "mor/kv/cache.hpp"
#include "mor/model/config.hpp"

namespace mor::sim {

struct MemoryModel {
  double vram_bytes = 80e9;    // one 80 GB accelerator
  double bytes_per_value = 2;  // bf16 weights and cache
  std::size_t seq_len = 2048;  // cache length reserved per sequence
};

// Bytes for tied embeddings plus distinct blocks.
double parameter_bytes(const model::ModelConfig& cfg, const MemoryModel& mem);
// Cache bytes of one sequence: unique layers keep every token; recursion
// layers keep the mode's memory fraction of a full per-depth cache.
double kv_bytes_per_sequence(const model::ModelConfig& cfg, kv::KvMode mode, const MemoryModel& mem);

// floor((budget - params) / per_sequence); InfeasibleError when the
// parameters alone exhaust the budget.
std::size_t slots_for(double budget_bytes, double param_bytes, double per_sequence_bytes);
std::size_t max_batch_size(const model::ModelConfig& cfg, kv::KvMode mode, const MemoryModel& mem = {});

// Batch size scaled from `base` slots by the ratio of maximum batch sizes,
// rounded to the nearest slot.
std::size_t relative_batch_size(const model::ModelConfig& cfg, kv::KvMode mode, const model::ModelConfig& reference,
                                std::size_t base = 32, const MemoryModel& mem = {});

}  // namespace mor::sim
