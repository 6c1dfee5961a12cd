#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mor/tensor/tensor.hpp"

namespace mor::train {

// Warm-up to eta_max over [0, w), hold until p, then linear decay to zero
// over [p, p + d). Requires w <= p and d > 0; t >= p + d is exhausted.
double trapezoid_lr(std::size_t t, std::size_t w, std::size_t p, std::size_t d, double eta_max);
// Linear warm-up over w steps, then cosine from eta_max to eta_min by `steps`.
double cosine_lr(std::size_t t, std::size_t w, std::size_t steps, double eta_max, double eta_min);

enum class ScheduleKind { Trapezoid, Cosine };
std::string_view schedule_name(ScheduleKind k);
ScheduleKind parse_schedule(std::string_view s);

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Trapezoid;
  std::size_t warmup = 0;
  std::size_t plateau_end = 0;  // trapezoid p
  std::size_t cooldown = 1;     // trapezoid d
  std::size_t steps = 1;        // cosine horizon
  double peak = 1e-3;
  double floor = 0.0;           // cosine eta_min

  double rate(std::size_t t) const;
  std::size_t horizon() const;  // first exhausted step
  void validate() const;
};

// Warm-up and cool-down as fractions of the step budget.
LrSchedule trapezoid_for(std::size_t steps, double warmup_frac, double cooldown_frac, double peak);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
};

// Decoupled weight decay on matrices only. Parameters are rounded to f32
// after every update so that checkpoints hold them exactly.
class AdamW {
 public:
  AdamW(std::vector<tensor::Tensor> params, AdamWConfig cfg);

  // Returns the pre-clip global gradient norm.
  double step(double lr);
  void zero_grad();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<tensor::Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mor::train
