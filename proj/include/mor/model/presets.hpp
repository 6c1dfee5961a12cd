#pragma once

#include <string>
#include <vector>

#include "mor/model/config.hpp"
#include "mor/routing/router.hpp"

namespace mor::model {

struct Preset {
  std::string name;
  std::string summary;
  ModelConfig model;
  routing::RouterConfig router;
};

// Full-size presets are for accounting (FLOPs, parameters, memory); only the
// toy-* presets are sized for CPU training.
const std::vector<Preset>& presets();
const Preset& find_preset(const std::string& name);  // ConfigError if unknown

}  // namespace mor::model
