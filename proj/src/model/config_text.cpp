#include "mor/model/config_text.hpp"

#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <sstream>

#include "mor/errors.hpp"

namespace mor::model {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

std::pair<std::string, std::string> parse_override(std::string_view kv) {
  const auto eq = kv.find('=');
  if (eq == std::string_view::npos || trim(kv.substr(0, eq)).empty()) {
    throw ConfigError("override '" + std::string(kv) + "' is not key=value");
  }
  return {std::string(trim(kv.substr(0, eq))), std::string(trim(kv.substr(eq + 1)))};
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  std::size_t v = 0;
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  return v;
}

double parse_real(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE) {
    throw ConfigError(key + ": expected a real number, got '" + value + "'");
  }
  return v;
}

bool parse_flag(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

bool apply_model_key(ModelConfig& c, const std::string& key, const std::string& value) {
  auto with_key = [&](auto parse) {
    try {
      return parse();
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.rfind(key, 0) == 0 ? msg : key + ": " + msg);
    }
  };
  if (key == "model.layers") c.total_layers = parse_count(key, value);
  else if (key == "model.recursions") c.recursions = parse_count(key, value);
  else if (key == "model.sharing") c.sharing = with_key([&] { return parse_sharing(value); });
  else if (key == "model.d_model") c.d_model = parse_count(key, value);
  else if (key == "model.n_heads") c.n_heads = parse_count(key, value);
  else if (key == "model.n_kv_heads") c.n_kv_heads = parse_count(key, value);
  else if (key == "model.d_head") c.d_head = parse_count(key, value);
  else if (key == "model.d_inter") c.d_inter = parse_count(key, value);
  else if (key == "model.vocab_size") c.vocab_size = parse_count(key, value);
  else if (key == "model.ctx_len") c.ctx_len = parse_count(key, value);
  else if (key == "model.rope_base") c.rope_base = parse_real(key, value);
  else if (key == "model.norm_eps") c.norm_eps = parse_real(key, value);
  else if (key == "model.kv_mode") c.kv_mode = with_key([&] { return kv::parse_mode(value); });
  else return false;
  return true;
}

bool apply_router_key(routing::RouterConfig& c, const std::string& key, const std::string& value) {
  auto with_key = [&](auto parse) {
    try {
      return parse();
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
  };
  if (key == "router.family") c.family = with_key([&] { return routing::parse_family(value); });
  else if (key == "router.activation") c.activation = with_key([&] { return routing::parse_activation(value); });
  else if (key == "router.head") c.head = with_key([&] { return routing::parse_head(value); });
  else if (key == "router.alpha") c.alpha = parse_real(key, value);
  else if (key == "router.aux_scheme") c.aux_scheme = with_key([&] { return routing::parse_aux_scheme(value); });
  else if (key == "router.aux_coeff") c.aux_coeff = parse_real(key, value);
  else if (key == "router.balance_coeff") c.balance_coeff = parse_real(key, value);
  else if (key == "router.zloss_coeff") c.zloss_coeff = parse_real(key, value);
  else if (key == "router.lossfree") c.lossfree = parse_flag(key, value);
  else if (key == "router.lossfree_rate") c.lossfree_rate = parse_real(key, value);
  else if (key == "router.inference_threshold") c.inference_threshold = parse_real(key, value);
  else return false;
  return true;
}

std::string model_config_text(const ModelConfig& c, const routing::RouterConfig& r) {
  std::ostringstream os;
  os << "model.layers = " << c.total_layers << '\n'
     << "model.recursions = " << c.recursions << '\n'
     << "model.sharing = " << sharing_name(c.sharing) << '\n'
     << "model.d_model = " << c.d_model << '\n'
     << "model.n_heads = " << c.n_heads << '\n'
     << "model.n_kv_heads = " << c.n_kv_heads << '\n'
     << "model.d_head = " << c.d_head << '\n'
     << "model.d_inter = " << c.d_inter << '\n'
     << "model.vocab_size = " << c.vocab_size << '\n'
     << "model.ctx_len = " << c.ctx_len << '\n'
     << "model.rope_base = " << format_real(c.rope_base) << '\n'
     << "model.norm_eps = " << format_real(c.norm_eps) << '\n'
     << "model.kv_mode = " << kv::mode_name(c.kv_mode) << '\n'
     << "router.family = " << routing::family_name(r.family) << '\n'
     << "router.activation = " << routing::activation_name(r.activation) << '\n'
     << "router.head = " << routing::head_name(r.head) << '\n'
     << "router.alpha = " << format_real(r.alpha) << '\n'
     << "router.aux_scheme = " << routing::aux_scheme_name(r.aux_scheme) << '\n'
     << "router.aux_coeff = " << format_real(r.aux_coeff) << '\n'
     << "router.balance_coeff = " << format_real(r.balance_coeff) << '\n'
     << "router.zloss_coeff = " << format_real(r.zloss_coeff) << '\n'
     << "router.lossfree = " << (r.lossfree ? "true" : "false") << '\n'
     << "router.lossfree_rate = " << format_real(r.lossfree_rate) << '\n'
     << "router.inference_threshold = " << format_real(r.inference_threshold) << '\n';
  return os.str();
}

}  // namespace mor::model
