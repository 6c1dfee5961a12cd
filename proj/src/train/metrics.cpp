#include "mor/train/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include "mor/errors.hpp"

namespace mor::train {

double maxvio(std::span<const double> loads) {
  if (loads.empty()) throw MetricError("maxvio: no experts");
  double total = 0.0, mx = 0.0;
  for (double l : loads) {
    if (l < 0.0) throw MetricError("maxvio: negative load");
    total += l;
    mx = std::max(mx, l);
  }
  const double mean = total / static_cast<double>(loads.size());
  if (mean == 0.0) throw MetricError("maxvio: mean load is zero");
  return (mx - mean) / mean;
}

double selection_entropy(std::span<const double> p) {
  double sum = 0.0, h = 0.0;
  for (double v : p) {
    if (v < 0.0) throw MetricError("entropy: negative probability");
    sum += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  if (std::abs(sum - 1.0) > 1e-6) throw MetricError("entropy: probabilities sum to " + std::to_string(sum));
  return h;
}

std::string_view dead_mode_name(DeadTokenMode m) { return m == DeadTokenMode::PerPosition ? "per-position" : "per-sequence"; }

DeadTokenMode parse_dead_mode(std::string_view s) {
  if (s == "per-position") return DeadTokenMode::PerPosition;
  if (s == "per-sequence") return DeadTokenMode::PerSequence;
  throw ConfigError("unknown dead-token mode '" + std::string(s) + "' (per-position, per-sequence)");
}

double dead_token_ratio(std::span<const routing::SelectionMask> masks, DeadTokenMode mode) {
  if (masks.empty()) throw MetricError("dead-token ratio: empty eval set");
  const std::size_t T = masks[0].tokens, last = masks[0].depths - 1;
  for (const auto& m : masks) {
    if (m.tokens != T || m.depths != last + 1) throw MetricError("dead-token ratio: masks differ in shape");
  }
  if (mode == DeadTokenMode::PerSequence) {
    std::size_t dead = 0;
    for (const auto& m : masks)
      for (std::size_t t = 0; t < T; ++t) dead += !m.is_selected(t, last);
    return static_cast<double>(dead) / static_cast<double>(T * masks.size());
  }
  std::size_t dead = 0;
  for (std::size_t t = 0; t < T; ++t) {
    dead += std::none_of(masks.begin(), masks.end(), [&](const auto& m) { return m.is_selected(t, last); });
  }
  return static_cast<double>(dead) / static_cast<double>(T);
}

namespace {

// Depth r is contested when some live token was left out.
bool contested(const routing::SelectionMask& m, std::size_t r) {
  for (std::size_t t = 0; t < m.tokens; ++t) {
    if (m.is_live(t, r) && !m.is_selected(t, r)) return true;
  }
  return false;
}

}  // namespace

double selection_auc(std::span<const routing::SelectionMask> masks) {
  std::vector<std::pair<double, bool>> pts;
  for (const auto& m : masks) {
    for (std::size_t r = 0; r < m.depths; ++r) {
      if (!contested(m, r)) continue;
      for (std::size_t t = 0; t < m.tokens; ++t) {
        if (m.is_live(t, r)) pts.emplace_back(m.score(t, r), m.is_selected(t, r));
      }
    }
  }
  std::sort(pts.begin(), pts.end());
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < pts.size();) {
    std::size_t j = i;
    while (j < pts.size() && pts[j].first == pts[i].first) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // average 1-based rank of the tie run
    for (std::size_t k = i; k < j; ++k) {
      if (pts[k].second) {
        rank_sum += mid;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) throw MetricError("selection AUC needs both selected and unselected tokens");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

double sampling_accuracy(std::span<const routing::SelectionMask> masks, double threshold) {
  std::size_t hit = 0, total = 0;
  for (const auto& m : masks) {
    for (std::size_t r = 0; r < m.depths; ++r) {
      if (!contested(m, r)) continue;
      for (std::size_t t = 0; t < m.tokens; ++t) {
        if (!m.is_live(t, r)) continue;
        hit += (m.probs[t * m.depths + r] > threshold) == m.is_selected(t, r);
        ++total;
      }
    }
  }
  if (total == 0) throw MetricError("sampling accuracy: no contested depth");
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace mor::train
