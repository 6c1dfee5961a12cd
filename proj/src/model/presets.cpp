#include "mor/model/presets.hpp"

#include "mor/errors.hpp"

namespace mor::model {

namespace {

ModelConfig base(std::size_t layers, std::size_t d, std::size_t heads, std::size_t kv_heads, std::size_t inter) {
  ModelConfig c;
  c.total_layers = layers;
  c.recursions = 1;
  c.sharing = Sharing::None;
  c.d_model = d;
  c.n_heads = heads;
  c.n_kv_heads = kv_heads;
  c.d_head = 64;
  c.d_inter = inter;
  c.vocab_size = 49152;
  c.ctx_len = 2048;
  return c;
}

ModelConfig recursive(ModelConfig c, std::size_t nr) {
  c.sharing = Sharing::MiddleCycle;
  c.recursions = nr;
  // Middle-Cycle needs N_r | (L - 2); four recursions on 32 layers round up to 34.
  while ((c.total_layers - 2) % nr != 0) ++c.total_layers;
  return c;
}

ModelConfig toy(std::size_t nr) {
  ModelConfig c;
  c.sharing = nr == 1 ? Sharing::None : Sharing::MiddleCycle;
  c.recursions = nr;
  c.total_layers = nr == 1 ? 4 : nr + 2;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_head = 16;
  c.d_inter = 176;
  c.vocab_size = 258;
  c.ctx_len = 256;
  return c;
}

std::vector<Preset> build() {
  std::vector<Preset> out;
  const routing::RouterConfig none;
  const auto ec = routing::expert_choice_defaults();
  const auto tc = routing::token_choice_defaults();
  out.push_back({"vanilla-135m", "30 layers, d 576", base(30, 576, 9, 3, 1536), none});
  out.push_back({"vanilla-360m", "32 layers, d 960", base(32, 960, 15, 5, 2560), none});
  out.push_back({"vanilla-730m", "26 layers, d 1536", base(26, 1536, 24, 8, 4096), none});
  out.push_back({"vanilla-1.7b", "24 layers, d 2048", base(24, 2048, 32, 32, 8192), none});
  for (std::size_t nr : {2, 3, 4}) {
    const auto n = std::to_string(nr);
    const auto m = recursive(base(32, 960, 15, 5, 2560), nr);
    out.push_back({"recursive-360m-nr" + n, "360m Middle-Cycle, every token runs all depths", m, none});
    out.push_back({"mor-ec-360m-nr" + n, "360m Middle-Cycle, expert-choice routing", m, ec});
    out.push_back({"mor-tc-360m-nr" + n, "360m Middle-Cycle, token-choice routing", m, tc});
  }
  out.push_back({"toy-vanilla", "byte-level 4-layer baseline", toy(1), none});
  for (std::size_t nr : {2, 3}) {
    const auto n = std::to_string(nr);
    out.push_back({"toy-recursive-nr" + n, "byte-level Middle-Cycle without routing", toy(nr), none});
    out.push_back({"toy-mor-ec-nr" + n, "byte-level Middle-Cycle, expert-choice routing", toy(nr), ec});
    out.push_back({"toy-mor-tc-nr" + n, "byte-level Middle-Cycle, token-choice routing", toy(nr), tc});
  }
  return out;
}

}  // namespace

const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = build();
  return all;
}

const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets()) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

}  // namespace mor::model
