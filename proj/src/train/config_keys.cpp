#include "mor/train/config_keys.hpp"

#include <sstream>

#include "mor/errors.hpp"
#include "mor/model/config_text.hpp"

namespace mor::train {

using model::format_real;
using model::parse_count;
using model::parse_real;

bool apply_train_key(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "train.steps") c.steps = parse_count(key, value);
  else if (key == "train.batch_size") c.batch_size = parse_count(key, value);
  else if (key == "train.seq_len") c.seq_len = parse_count(key, value);
  else if (key == "train.schedule") {
    try {
      c.schedule = parse_schedule(value);
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
  } else if (key == "train.lr") c.lr = parse_real(key, value);
  else if (key == "train.lr_min") c.lr_min = parse_real(key, value);
  else if (key == "train.warmup_frac") c.warmup_frac = parse_real(key, value);
  else if (key == "train.cooldown_frac") c.cooldown_frac = parse_real(key, value);
  else if (key == "train.beta1") c.adam.beta1 = parse_real(key, value);
  else if (key == "train.beta2") c.adam.beta2 = parse_real(key, value);
  else if (key == "train.eps") c.adam.eps = parse_real(key, value);
  else if (key == "train.weight_decay") c.adam.weight_decay = parse_real(key, value);
  else if (key == "train.grad_clip") c.adam.grad_clip = parse_real(key, value);
  else if (key == "train.seed") c.seed = parse_count(key, value);
  else if (key == "train.log_every") c.log_every = parse_count(key, value);
  else if (key == "train.eval_every") c.eval_every = parse_count(key, value);
  else if (key == "train.eval_windows") c.eval_windows = parse_count(key, value);
  else return false;
  return true;
}

std::string train_config_text(const TrainConfig& c) {
  std::ostringstream os;
  os << "train.steps = " << c.steps << "\n"
     << "train.batch_size = " << c.batch_size << "\n"
     << "train.seq_len = " << c.seq_len << "\n"
     << "train.schedule = " << schedule_name(c.schedule) << "\n"
     << "train.lr = " << format_real(c.lr) << "\n"
     << "train.lr_min = " << format_real(c.lr_min) << "\n"
     << "train.warmup_frac = " << format_real(c.warmup_frac) << "\n"
     << "train.cooldown_frac = " << format_real(c.cooldown_frac) << "\n"
     << "train.beta1 = " << format_real(c.adam.beta1) << "\n"
     << "train.beta2 = " << format_real(c.adam.beta2) << "\n"
     << "train.eps = " << format_real(c.adam.eps) << "\n"
     << "train.weight_decay = " << format_real(c.adam.weight_decay) << "\n"
     << "train.grad_clip = " << format_real(c.adam.grad_clip) << "\n"
     << "train.seed = " << c.seed << "\n"
     << "train.log_every = " << c.log_every << "\n"
     << "train.eval_every = " << c.eval_every << "\n"
     << "train.eval_windows = " << c.eval_windows << "\n";
  return os.str();
}

}  // namespace mor::train
