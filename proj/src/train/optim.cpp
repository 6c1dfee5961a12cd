#include "mor/train/optim.hpp"

#include <cmath>
#include <numbers>

#include "mor/errors.hpp"
#include "mor/tensor/init.hpp"

namespace mor::train {

double trapezoid_lr(std::size_t t, std::size_t w, std::size_t p, std::size_t d, double eta_max) {
  if (w > p || d == 0 || eta_max < 0.0) throw ConfigError("trapezoid schedule needs w <= p, d > 0, eta_max >= 0");
  if (t >= p + d) {
    throw ScheduleExhausted("step " + std::to_string(t) + " is past the schedule end " + std::to_string(p + d));
  }
  if (t < w) return static_cast<double>(t) / static_cast<double>(w) * eta_max;
  if (t < p) return eta_max;
  return eta_max * (1.0 - static_cast<double>(t - p) / static_cast<double>(d));
}

double cosine_lr(std::size_t t, std::size_t w, std::size_t steps, double eta_max, double eta_min) {
  if (w >= steps || eta_max < eta_min || eta_min < 0.0) throw ConfigError("cosine schedule needs w < steps, eta_max >= eta_min >= 0");
  if (t >= steps) throw ScheduleExhausted("step " + std::to_string(t) + " is past the schedule end " + std::to_string(steps));
  if (t < w) return static_cast<double>(t) / static_cast<double>(w) * eta_max;
  const double x = static_cast<double>(t - w) / static_cast<double>(steps - w);
  return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * x));
}

std::string_view schedule_name(ScheduleKind k) { return k == ScheduleKind::Trapezoid ? "trapezoid" : "cosine"; }

ScheduleKind parse_schedule(std::string_view s) {
  if (s == "trapezoid") return ScheduleKind::Trapezoid;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("unknown schedule '" + std::string(s) + "' (trapezoid, cosine)");
}

double LrSchedule::rate(std::size_t t) const {
  return kind == ScheduleKind::Trapezoid ? trapezoid_lr(t, warmup, plateau_end, cooldown, peak)
                                         : cosine_lr(t, warmup, steps, peak, floor);
}

std::size_t LrSchedule::horizon() const { return kind == ScheduleKind::Trapezoid ? plateau_end + cooldown : steps; }

void LrSchedule::validate() const {
  if (kind == ScheduleKind::Trapezoid) {
    if (warmup > plateau_end || cooldown == 0 || peak < 0.0) throw ConfigError("trapezoid schedule needs w <= p, d > 0, eta_max >= 0");
  } else if (warmup >= steps || peak < floor || floor < 0.0) {
    throw ConfigError("cosine schedule needs w < steps, eta_max >= eta_min >= 0");
  }
}

LrSchedule trapezoid_for(std::size_t steps, double warmup_frac, double cooldown_frac, double peak) {
  if (steps == 0) throw ConfigError("schedule needs at least one step");
  LrSchedule s;
  s.kind = ScheduleKind::Trapezoid;
  s.peak = peak;
  s.cooldown = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cooldown_frac * static_cast<double>(steps))));
  if (s.cooldown > steps) s.cooldown = steps;
  s.plateau_end = steps - s.cooldown;
  s.warmup = std::min(s.plateau_end, static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(steps))));
  s.steps = steps;
  return s;
}

AdamW::AdamW(std::vector<tensor::Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1 || cfg.eps <= 0 || cfg.weight_decay < 0 ||
      cfg.grad_clip < 0) {
    throw ConfigError("AdamW hyperparameters out of range");
  }
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteError("gradient norm is not finite");
  const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto w = p.mutable_data();
    const bool decay = p.rank() == 2;
    auto& m = m_[i];
    auto& v = v_[i];
    const bool has = p.has_grad();
    std::span<const double> g;
    if (has) g = p.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] * clip : 0.0;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      if (decay) w[j] -= lr * cfg_.weight_decay * w[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
    tensor::round_to_f32(w);
  }
  return norm;
}

}  // namespace mor::train
