#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "mor/kv/cache.hpp"

namespace mor::model {

enum class Sharing { None, Cycle, Sequence, MiddleCycle, MiddleSequence };

std::string_view sharing_name(Sharing s);
Sharing parse_sharing(std::string_view name);

struct ModelConfig {
  std::size_t total_layers = 4;  // L, unrolled depth
  std::size_t recursions = 1;    // N_r
  Sharing sharing = Sharing::None;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t d_head = 16;
  std::size_t d_inter = 176;
  std::size_t vocab_size = 258;
  std::size_t ctx_len = 2048;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  kv::KvMode kv_mode = kv::KvMode::RecursionWise;

  std::size_t q_width() const { return n_heads * d_head; }
  std::size_t kv_width() const { return n_kv_heads * d_head; }
};

// Throws ConfigError naming the violated constraint.
void validate(const ModelConfig& cfg);

// Unrolled layer -> parameter block id.
struct LayerSchedule {
  std::vector<int> blocks;
  std::size_t distinct() const;
};

LayerSchedule build_layer_schedule(const ModelConfig& cfg);

// Split of the unrolled stack into unique leading layers, N_r recursion
// steps of `per_depth` layers each, and unique trailing layers.
struct Segments {
  std::size_t prefix = 0;
  std::size_t per_depth = 0;
  std::size_t suffix = 0;

  std::size_t layer_index(std::size_t depth0, std::size_t j) const { return prefix + depth0 * per_depth + j; }
};

Segments segments_of(const ModelConfig& cfg);

struct ParameterCounts {
  std::size_t non_embedding = 0;         // effective: every unrolled layer counted
  std::size_t embedding = 0;             // tied input/output table, counted once
  std::size_t unique_non_embedding = 0;  // distinct blocks only
};

std::size_t block_parameter_count(const ModelConfig& cfg);
ParameterCounts count_parameters(const ModelConfig& cfg);

}  // namespace mor::model
