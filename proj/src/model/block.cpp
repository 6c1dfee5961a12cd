#include "mor/model/block.hpp"

#include <string>

#include "mor/errors.hpp"
#include "mor/tensor/ops.hpp"

namespace mor::model {

namespace t = mor::tensor;

namespace {
constexpr double kInitStd = 0.02;
}

std::vector<std::pair<std::string, Tensor>> BlockParams::named(const std::string& prefix) const {
  return {{prefix + "attn_norm", attn_norm}, {prefix + "wq", wq},         {prefix + "wk", wk},
          {prefix + "wv", wv},               {prefix + "wo", wo},         {prefix + "ffn_norm", ffn_norm},
          {prefix + "w_gate", w_gate},       {prefix + "w_up", w_up},     {prefix + "w_down", w_down}};
}

BlockParams BlockParams::deep_copy() const {
  return {attn_norm.clone(), wq.clone(),     wk.clone(),   wv.clone(),    wo.clone(),
          ffn_norm.clone(),  w_gate.clone(), w_up.clone(), w_down.clone()};
}

BlockParams make_block(const ModelConfig& cfg, t::Rng& rng) {
  const std::size_t d = cfg.d_model;
  BlockParams p;
  p.attn_norm = Tensor::full({d}, 1.0, true);
  p.wq = t::trunc_normal({d, cfg.q_width()}, kInitStd, rng);
  p.wk = t::trunc_normal({d, cfg.kv_width()}, kInitStd, rng);
  p.wv = t::trunc_normal({d, cfg.kv_width()}, kInitStd, rng);
  p.wo = t::trunc_normal({cfg.q_width(), d}, kInitStd, rng);
  p.ffn_norm = Tensor::full({d}, 1.0, true);
  p.w_gate = t::trunc_normal({d, cfg.d_inter}, kInitStd, rng);
  p.w_up = t::trunc_normal({d, cfg.d_inter}, kInitStd, rng);
  p.w_down = t::trunc_normal({cfg.d_inter, d}, kInitStd, rng);
  return p;
}

Tensor block_forward(const Tensor& x, const BlockParams& p, std::span<const int> positions,
                     KeySource& keys, const ModelConfig& cfg) {
  if (x.rank() != 2 || x.dim(1) != cfg.d_model) throw DimensionError("block_forward: x must be [T, d_model]");
  if (positions.size() != x.dim(0)) throw DimensionError("block_forward: one position per row");
  for (int pos : positions) {
    if (pos < 0 || static_cast<std::size_t>(pos) >= cfg.ctx_len) {
      throw RangeError("position " + std::to_string(pos) + " outside context of " +
                       std::to_string(cfg.ctx_len));
    }
  }
  const t::AttentionShape shape{cfg.n_heads, cfg.n_kv_heads, cfg.d_head};

  auto a = t::rms_norm(x, p.attn_norm, cfg.norm_eps);
  auto q = t::rope(t::matmul(a, p.wq), positions, cfg.n_heads, cfg.d_head, cfg.rope_base);
  Tensor k, v;
  if (keys.projects()) {
    k = t::rope(t::matmul(a, p.wk), positions, cfg.n_kv_heads, cfg.d_head, cfg.rope_base);
    v = t::matmul(a, p.wv);
  }
  AttnKeys kv = keys.keys(k, v);
  auto o = t::attention(q, kv.k, kv.v, positions, kv.pos, shape);
  auto h = t::add(x, t::matmul(o, p.wo));

  auto m = t::rms_norm(h, p.ffn_norm, cfg.norm_eps);
  auto ff = t::matmul(t::mul(t::silu(t::matmul(m, p.w_gate)), t::matmul(m, p.w_up)), p.w_down);
  return t::add(h, ff);
}

}  // namespace mor::model
