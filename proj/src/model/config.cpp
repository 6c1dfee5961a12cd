#include "mor/model/config.hpp"

#include <set>
#include <string>

#include "mor/errors.hpp"

namespace mor::model {

std::string_view sharing_name(Sharing s) {
  switch (s) {
    case Sharing::None:
      return "none";
    case Sharing::Cycle:
      return "cycle";
    case Sharing::Sequence:
      return "sequence";
    case Sharing::MiddleCycle:
      return "middle-cycle";
    case Sharing::MiddleSequence:
      return "middle-sequence";
  }
  return "?";
}

Sharing parse_sharing(std::string_view name) {
  for (Sharing s : {Sharing::None, Sharing::Cycle, Sharing::Sequence, Sharing::MiddleCycle,
                    Sharing::MiddleSequence}) {
    if (sharing_name(s) == name) return s;
  }
  throw ConfigError("unknown sharing strategy '" + std::string(name) + "'");
}

namespace {
bool is_middle(Sharing s) { return s == Sharing::MiddleCycle || s == Sharing::MiddleSequence; }
}  // namespace

void validate(const ModelConfig& cfg) {
  const std::size_t L = cfg.total_layers, nr = cfg.recursions;
  if (L == 0) throw ConfigError("total_layers must be positive");
  if (nr == 0) throw ConfigError("recursions must be positive");
  if (cfg.sharing == Sharing::None && nr != 1) {
    throw ConfigError("sharing=none requires recursions=1");
  }
  if ((cfg.sharing == Sharing::Cycle || cfg.sharing == Sharing::Sequence) && L % nr != 0) {
    throw ConfigError("recursions (" + std::to_string(nr) + ") must divide total_layers (" +
                      std::to_string(L) + ")");
  }
  if (is_middle(cfg.sharing) && (L < 3 || (L - 2) % nr != 0)) {
    throw ConfigError("recursions (" + std::to_string(nr) + ") must divide total_layers - 2 (" +
                      std::to_string(L < 2 ? 0 : L - 2) + ") with at least one shared layer");
  }
  if (cfg.d_model == 0 || cfg.n_heads == 0 || cfg.n_kv_heads == 0 || cfg.d_head == 0 ||
      cfg.d_inter == 0 || cfg.vocab_size == 0 || cfg.ctx_len == 0) {
    throw ConfigError("model extents must be positive");
  }
  if (cfg.n_heads % cfg.n_kv_heads != 0) throw ConfigError("n_heads must be a multiple of n_kv_heads");
  if (cfg.d_model != cfg.n_heads * cfg.d_head) throw ConfigError("d_model must equal n_heads * d_head");
  if (cfg.d_head % 2 != 0) throw ConfigError("d_head must be even for rotary encoding");
  if (!(cfg.norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

std::size_t LayerSchedule::distinct() const { return std::set<int>(blocks.begin(), blocks.end()).size(); }

LayerSchedule build_layer_schedule(const ModelConfig& cfg) {
  validate(cfg);
  const std::size_t L = cfg.total_layers, nr = cfg.recursions;
  LayerSchedule s;
  s.blocks.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    std::size_t b = 0;
    switch (cfg.sharing) {
      case Sharing::None:
        b = l;
        break;
      case Sharing::Cycle:
        b = l % (L / nr);
        break;
      case Sharing::Sequence:
        b = l / nr;
        break;
      case Sharing::MiddleCycle:
        b = (l == 0) ? 0 : (l == L - 1) ? (L - 2) / nr + 1 : (l - 1) % ((L - 2) / nr) + 1;
        break;
      case Sharing::MiddleSequence:
        b = (l == 0) ? 0 : (l == L - 1) ? (L - 2) / nr + 1 : (l - 1) / nr + 1;
        break;
    }
    s.blocks[l] = static_cast<int>(b);
  }
  return s;
}

Segments segments_of(const ModelConfig& cfg) {
  validate(cfg);
  Segments seg;
  if (is_middle(cfg.sharing)) {
    seg.prefix = 1;
    seg.suffix = 1;
  }
  seg.per_depth = (cfg.total_layers - seg.prefix - seg.suffix) / cfg.recursions;
  return seg;
}

std::size_t block_parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  const std::size_t attn = d * cfg.q_width() * 2 + d * cfg.kv_width() * 2;
  const std::size_t ffn = 3 * d * cfg.d_inter;
  const std::size_t norms = 2 * d;
  return attn + ffn + norms;
}

ParameterCounts count_parameters(const ModelConfig& cfg) {
  const auto schedule = build_layer_schedule(cfg);
  const std::size_t per_block = block_parameter_count(cfg);
  ParameterCounts c;
  c.embedding = cfg.vocab_size * cfg.d_model;
  c.non_embedding = per_block * cfg.total_layers + cfg.d_model;
  c.unique_non_embedding = per_block * schedule.distinct() + cfg.d_model;
  return c;
}

}  // namespace mor::model
