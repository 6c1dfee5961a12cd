#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "mor/routing/routing.hpp"

namespace mor::train {

// (max - mean) / mean over per-expert loads. MetricError on zero mean.
double maxvio(std::span<const double> loads);
// -sum p ln p of a mean selection distribution; MetricError unless it sums to 1.
double selection_entropy(std::span<const double> mean_probs);

// Which positions count as dead: a position index never selected at the
// final depth in any sequence, or any single (sequence, position) pair.
enum class DeadTokenMode { PerPosition, PerSequence };
std::string_view dead_mode_name(DeadTokenMode m);
DeadTokenMode parse_dead_mode(std::string_view s);

double dead_token_ratio(std::span<const routing::SelectionMask> masks, DeadTokenMode mode = DeadTokenMode::PerPosition);

// Probability that a random selected token outscores a random unselected
// one (ties count half). Pools live tokens of every depth whose capacity
// is below 1. MetricError if either class is empty.
double selection_auc(std::span<const routing::SelectionMask> masks);

// Agreement between a causal rule (probs > threshold) and the top-k
// membership recorded in the masks, over live tokens at depths whose
// capacity is below 1.
double sampling_accuracy(std::span<const routing::SelectionMask> masks, double threshold);

}  // namespace mor::train
