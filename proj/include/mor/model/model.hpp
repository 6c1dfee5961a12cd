#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mor/kv/cache.hpp"
#include "mor/model/block.hpp"
#include "mor/model/config.hpp"
#include "mor/routing/router.hpp"
#include "mor/routing/routing.hpp"

namespace mor::model {

// How expert-choice depths pick tokens. TopK needs the whole sequence;
// Threshold and AuxPredictor decide per token and are causal. Depths
// whose capacity is 1 take every live token under the causal policies.
enum class SelectionPolicy { TopK, Threshold, AuxPredictor };

std::string_view policy_name(SelectionPolicy p);
SelectionPolicy parse_policy(std::string_view s);

// One cache per unrolled layer position: unique leading/trailing layers
// have a single depth, recursion layers have N_r depths.
struct CacheSet {
  std::vector<kv::KvCache> prefix;
  std::vector<kv::KvCache> segment;
  std::vector<kv::KvCache> suffix;
};

CacheSet make_cache_set(const ModelConfig& cfg);

// Called for every freshly projected K/V: unrolled layer index, 1-based
// depth, absolute positions of the rows, keys (post-rotary) and values.
using KvObserver = std::function<void(std::size_t layer, std::size_t depth, std::span<const int> pos,
                                      const Tensor& k, const Tensor& v)>;

struct ForwardOptions {
  SelectionPolicy policy = SelectionPolicy::TopK;
  std::size_t depth_clamp = 0;  // 0: no clamp
  CacheSet* cache_sink = nullptr;
  KvObserver observer;
};

struct ForwardResult {
  Tensor logits;  // [T, vocab]
  routing::SelectionMask routing;
  // Raw router objective terms (scalars); undefined when not applicable.
  Tensor aux_bce;         // expert choice, sum over depths of mean BCE
  Tensor aux_router_bce;  // expert choice with an auxiliary head
  Tensor balance;         // token choice, sum_i f_i P_i
  Tensor zloss;           // sum over routers of mean squared logsumexp
  std::vector<double> expert_counts;  // token choice, tokens per assigned depth
};

class Model {
 public:
  Model(const ModelConfig& cfg, const routing::RouterConfig& router, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const routing::RouterConfig& router_config() const { return router_cfg_; }
  const std::vector<int>& schedule() const { return schedule_; }
  const Segments& segments() const { return seg_; }

  // Parameters share storage with the model; a copied Model aliases them.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t router_parameter_count() const;

  std::vector<double>& lossfree_bias() { return bias_; }
  const std::vector<double>& lossfree_bias() const { return bias_; }

  // Teacher-forced forward over one sequence at positions 0..T-1.
  ForwardResult forward(std::span<const int> ids, const ForwardOptions& opts = {}) const;

  // Same computation with every unrolled layer given its own deep copy of
  // its block.
  Model untied() const;

  // Core pass over rows at the given absolute positions, with keys drawn
  // from `ctx`. Public for the decoder; prefer forward().
  class KeyContext;
  ForwardResult run(const Tensor& embedded, std::span<const int> positions, KeyContext& ctx,
                    const ForwardOptions& opts) const;

  const Tensor& embedding() const { return embed_; }

 private:
  friend class DecodeSession;
  friend Model load_checkpoint(const std::string& path);
  Model() = default;

  const BlockParams& block_at(std::size_t layer) const { return blocks_[schedule_[layer]]; }
  Tensor run_layer(const Tensor& x, std::size_t layer, std::size_t stage_depth0, int stage,
                   std::size_t j, std::span<const int> pos, KeyContext& ctx, const ForwardOptions& opts) const;

  ModelConfig cfg_;
  routing::RouterConfig router_cfg_;
  std::vector<int> schedule_;
  Segments seg_;
  Tensor embed_;
  std::vector<BlockParams> blocks_;
  Tensor final_norm_;
  std::vector<routing::RouterHead> routers_;      // expert choice: one per depth; token choice: one
  std::vector<routing::RouterHead> aux_routers_;  // expert choice with AuxRouter
  std::vector<double> bias_;                      // token-choice loss-free bias
};

// Supplies the key source for each block invocation of Model::run. Stage 0
// is a unique leading layer, 1 a recursion layer, 2 a unique trailing layer;
// j indexes the layer within its stage and depth0 is the 0-based recursion
// depth (0 for unique layers).
class Model::KeyContext {
 public:
  virtual ~KeyContext() = default;
  virtual std::unique_ptr<KeySource> source(int stage, std::size_t j, std::size_t depth0,
                                            std::size_t layer, std::span<const int> pos) = 0;
};

// Incremental decoding against per-layer KV caches. Expert-choice models
// must use a causal policy.
class DecodeSession {
 public:
  DecodeSession(const Model& model, SelectionPolicy policy);

  // Teacher-forced pass that fills the caches; returns logits [T, vocab].
  Tensor prefill(std::span<const int> ids);
  // Feeds one token at the next position; returns its logits.
  std::vector<double> step(int token);

  std::size_t position() const { return pos_; }
  const CacheSet& caches() const { return caches_; }
  // Number of depths each processed token executed, in position order.
  const std::vector<std::size_t>& depths() const { return depths_; }

 private:
  const Model& model_;
  SelectionPolicy policy_;
  CacheSet caches_;
  std::size_t pos_ = 0;
  std::vector<std::size_t> depths_;
};

std::vector<int> greedy_decode(const Model& model, std::span<const int> prompt, std::size_t new_tokens,
                               SelectionPolicy policy);

}  // namespace mor::model
