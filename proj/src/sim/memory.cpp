#include "mor/sim/memory.hpp"

#include <cmath>
#include <string>

#include "mor/errors.hpp"
#include "mor/kv/cost_model.hpp"

namespace mor::sim {

double parameter_bytes(const model::ModelConfig& cfg, const MemoryModel& mem) {
  const auto c = model::count_parameters(cfg);
  return static_cast<double>(c.unique_non_embedding + c.embedding) * mem.bytes_per_value;
}

double kv_bytes_per_sequence(const model::ModelConfig& cfg, kv::KvMode mode, const MemoryModel& mem) {
  model::validate(cfg);
  const auto seg = model::segments_of(cfg);
  const double per_layer = 2.0 * static_cast<double>(cfg.kv_width()) * static_cast<double>(mem.seq_len) * mem.bytes_per_value;
  const auto ratio = kv::cost_model(static_cast<std::int64_t>(cfg.recursions), static_cast<std::int64_t>(mem.seq_len),
                                    static_cast<std::int64_t>(mem.seq_len), mode)
                         .kv_memory;
  const double mem_ratio = boost::rational_cast<double>(ratio);
  const double recursion_layers = static_cast<double>(seg.per_depth * cfg.recursions);
  return per_layer * (static_cast<double>(seg.prefix + seg.suffix) + recursion_layers * mem_ratio);
}

std::size_t slots_for(double budget_bytes, double param_bytes, double per_sequence_bytes) {
  if (per_sequence_bytes <= 0.0) throw DomainError("per-sequence cache bytes must be positive");
  if (budget_bytes <= param_bytes) {
    throw InfeasibleError("memory budget " + std::to_string(budget_bytes) + " B does not cover parameters (" +
                          std::to_string(param_bytes) + " B)");
  }
  return static_cast<std::size_t>(std::floor((budget_bytes - param_bytes) / per_sequence_bytes));
}

std::size_t max_batch_size(const model::ModelConfig& cfg, kv::KvMode mode, const MemoryModel& mem) {
  return slots_for(mem.vram_bytes, parameter_bytes(cfg, mem), kv_bytes_per_sequence(cfg, mode, mem));
}

std::size_t relative_batch_size(const model::ModelConfig& cfg, kv::KvMode mode, const model::ModelConfig& reference,
                                std::size_t base, const MemoryModel& mem) {
  const double ref = static_cast<double>(max_batch_size(reference, kv::KvMode::RecursionWise, mem));
  if (ref == 0.0) throw InfeasibleError("reference model fits no sequence");
  return static_cast<std::size_t>(
      std::llround(static_cast<double>(base) * static_cast<double>(max_batch_size(cfg, mode, mem)) / ref));
}

}  // namespace mor::sim
