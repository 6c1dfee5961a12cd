#pragma once

// Canonical key = value text shared by config files, overrides and
// checkpoint headers. Blank lines and '#' comments are ignored.

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mor/model/config.hpp"
#include "mor/routing/router.hpp"

namespace mor::model {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Throws ConfigError("line N: ...") on a line without '='.
KeyValues parse_key_values(std::string_view text);
// "key=value" as given on a command line.
std::pair<std::string, std::string> parse_override(std::string_view kv);

// Value parsers; throw ConfigError naming the key on malformed input.
std::size_t parse_count(const std::string& key, const std::string& value);
double parse_real(const std::string& key, const std::string& value);
bool parse_flag(const std::string& key, const std::string& value);
std::string format_real(double v);

// Apply one key; returns false when the key does not belong to the section.
bool apply_model_key(ModelConfig& cfg, const std::string& key, const std::string& value);
bool apply_router_key(routing::RouterConfig& cfg, const std::string& key, const std::string& value);

std::string model_config_text(const ModelConfig& cfg, const routing::RouterConfig& router);

}  // namespace mor::model
