#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mor/model/config.hpp"
#include "mor/tensor/init.hpp"
#include "mor/tensor/tensor.hpp"

namespace mor::model {

using tensor::Tensor;

// Pre-norm decoder layer: x + Attn(RMSNorm(x)), then + FFN(RMSNorm(.)).
// Row-vector convention: y = x W. No biases.
struct BlockParams {
  Tensor attn_norm;  // [d]
  Tensor wq;         // [d, H*dh]
  Tensor wk;         // [d, Hkv*dh]
  Tensor wv;         // [d, Hkv*dh]
  Tensor wo;         // [H*dh, d]
  Tensor ffn_norm;   // [d]
  Tensor w_gate;     // [d, d_inter]
  Tensor w_up;       // [d, d_inter]
  Tensor w_down;     // [d_inter, d]

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const;
  BlockParams deep_copy() const;
};

BlockParams make_block(const ModelConfig& cfg, tensor::Rng& rng);

// Keys and values (rotary already applied to keys) visible to a block's
// queries, with the absolute position of each key row.
struct AttnKeys {
  Tensor k;
  Tensor v;
  std::vector<int> pos;
};

// Supplies the attention keys for one block invocation. When projects() is
// true the block computes K/V for its own rows and passes them in;
// otherwise the arguments are undefined tensors.
class KeySource {
 public:
  virtual ~KeySource() = default;
  virtual bool projects() const = 0;
  virtual AttnKeys keys(const Tensor& fresh_k, const Tensor& fresh_v) = 0;
};

// Keys are exactly the block's own rows.
class SelfKeys final : public KeySource {
 public:
  explicit SelfKeys(std::span<const int> positions) : pos_(positions.begin(), positions.end()) {}
  bool projects() const override { return true; }
  AttnKeys keys(const Tensor& k, const Tensor& v) override { return {k, v, pos_}; }

 private:
  std::vector<int> pos_;
};

// Throws RangeError when a position is outside [0, ctx_len).
Tensor block_forward(const Tensor& x, const BlockParams& p, std::span<const int> positions,
                     KeySource& keys, const ModelConfig& cfg);

}  // namespace mor::model
