#pragma once

#include <string>

#include "mor/train/trainer.hpp"

namespace mor::train {

// train.* keys; returns false for keys outside the section.
bool apply_train_key(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string train_config_text(const TrainConfig& cfg);

}  // namespace mor::train
