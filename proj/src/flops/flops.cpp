#include "mor/flops/flops.hpp"

#include <string>

#include "mor/errors.hpp"

namespace mor::flops {

nlohmann::json FlopsReport::to_json() const {
  return {{"seq_len", seq_len},
          {"linear", linear},
          {"attention", attention},
          {"lm_head", lm_head},
          {"router", router},
          {"per_token_forward", per_token_forward()},
          {"per_token_forward_without_lm_head", per_token_forward_without_lm_head()},
          {"per_token_training", per_token_training()}};
}

double attention_flops(const model::ModelConfig& cfg, double keys) {
  // Scores and weighted values: 2 FLOPs per multiply-add, per head dim, per key.
  return 2.0 * 2.0 * static_cast<double>(cfg.n_heads * cfg.d_head) * keys;
}

namespace {

double causal_average(double n) { return (n + 1.0) / 2.0; }

void check_seq_len(const model::ModelConfig& cfg, std::size_t seq_len) {
  if (seq_len == 0 || seq_len > cfg.ctx_len) {
    throw ConfigError("flops: seq_len must lie in [1, ctx_len], got " + std::to_string(seq_len));
  }
}

}  // namespace

FlopsReport forward_flops_per_token(const model::ModelConfig& cfg, std::size_t seq_len) {
  model::validate(cfg);
  check_seq_len(cfg, seq_len);
  const auto counts = model::count_parameters(cfg);
  const double T = static_cast<double>(seq_len);
  FlopsReport r;
  r.seq_len = seq_len;
  // The final norm is elementwise and excluded, so linear work scales with L exactly.
  r.linear = 2.0 * static_cast<double>(counts.non_embedding - cfg.d_model);
  r.attention = static_cast<double>(cfg.total_layers) * attention_flops(cfg, causal_average(T));
  r.lm_head = 2.0 * static_cast<double>(cfg.d_model * cfg.vocab_size);
  return r;
}

FlopsReport mor_flops_per_token(const model::ModelConfig& cfg, const std::vector<double>& capacities,
                                kv::KvMode kv_mode, const routing::RouterConfig& router, std::size_t seq_len) {
  model::validate(cfg);
  check_seq_len(cfg, seq_len);
  const std::size_t nr = cfg.recursions;
  std::vector<double> share(nr, 1.0);
  if (router.family == routing::Family::ExpertChoice) {
    if (capacities.size() != nr) {
      throw ConfigError("flops: expected " + std::to_string(nr) + " capacities, got " +
                        std::to_string(capacities.size()));
    }
    for (double c : capacities) {
      if (!(c > 0.0 && c <= 1.0)) throw ConfigError("flops: capacities must lie in (0, 1]");
    }
    share = capacities;
  } else if (router.family == routing::Family::TokenChoice) {
    for (std::size_t r = 0; r < nr; ++r) share[r] = static_cast<double>(nr - r) / static_cast<double>(nr);
  }

  const auto seg = model::segments_of(cfg);
  const double T = static_cast<double>(seq_len);
  const double d = static_cast<double>(cfg.d_model);
  const double block = 2.0 * static_cast<double>(model::block_parameter_count(cfg));
  const double kv_proj = 2.0 * 2.0 * d * static_cast<double>(cfg.kv_width());
  const double full_attn = attention_flops(cfg, causal_average(T));

  FlopsReport out;
  out.seq_len = seq_len;
  const double unique_layers = static_cast<double>(seg.prefix + seg.suffix);
  out.linear = unique_layers * block;
  out.attention = unique_layers * full_attn;
  for (std::size_t r = 0; r < nr; ++r) {
    const double c = share[r];
    double per_layer = block;
    if (kv_mode == kv::KvMode::RecursiveSharing && r > 0) per_layer -= kv_proj;
    out.linear += static_cast<double>(seg.per_depth) * c * per_layer;
    const double keys = kv_mode == kv::KvMode::RecursionWise ? causal_average(c * T) : causal_average(T);
    out.attention += static_cast<double>(seg.per_depth) * c * attention_flops(cfg, keys);
  }
  out.lm_head = 2.0 * d * static_cast<double>(cfg.vocab_size);

  if (router.family == routing::Family::ExpertChoice) {
    const double head = 2.0 * static_cast<double>(routing::router_head_parameter_count(router.head, cfg.d_model, 1));
    const double heads = router.aux_scheme == routing::AuxScheme::AuxRouter ? 2.0 : 1.0;
    for (std::size_t r = 0; r < nr; ++r) out.router += heads * head * (r == 0 ? 1.0 : share[r - 1]);
  } else if (router.family == routing::Family::TokenChoice) {
    out.router = 2.0 * static_cast<double>(routing::router_head_parameter_count(router.head, cfg.d_model, nr));
  }
  return out;
}

}  // namespace mor::flops
