#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include <json.hpp>

#include "mor/kv/cache.hpp"
#include "mor/model/model.hpp"

namespace mor::sim {

struct WorkloadSpec {
  std::size_t requests = 1000;
  double mean_length = 256.0;
  double stddev_length = 64.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

// Target lengths: rounded normal draws, truncated below at 1. Every request
// arrives at time zero.
std::vector<std::size_t> sample_lengths(const WorkloadSpec& w);

// Recursion depth in [1, N_r] of token `position` of request `request`.
using DepthOracle = std::function<std::size_t(std::size_t request, std::size_t position)>;

// Proxy depths: a token continues past depth r < N_r unless an independent
// uniform draw keyed by (seed, request, position, r) falls below
// `exit_fraction`. Draws do not depend on the fraction, so raising it can
// only make every token shallower.
DepthOracle proxy_depths(std::size_t n_r, double exit_fraction, std::uint64_t seed);

// Depths observed while greedily decoding each request from a separator
// token with a causal policy; one decode per request.
DepthOracle model_depths(const model::Model& model, model::SelectionPolicy policy,
                         const std::vector<std::size_t>& lengths);

struct SimConfig {
  std::size_t slots = 32;            // tokens per shared-block invocation
  std::size_t n_r = 3;
  kv::KvMode kv_mode = kv::KvMode::RecursionWise;
  std::size_t drain_threshold = 0;   // exited tokens gathered before the head stage; 0 means `slots`
  std::size_t max_active = 0;        // requests holding cache at once; 0 means unbounded
  double head_cost = 0.0;            // time of one head-stage pass, in block invocations
  bool record_trace = false;

  void validate() const;
};

struct TraceRow {
  std::size_t step = 0;
  double time = 0.0;
  std::size_t occupied = 0;
  std::size_t ready_waiting = 0;    // after slot filling; occupied == 0 marks a tail drain
  std::size_t requests_waiting = 0;
  std::size_t exit_buffer = 0;      // after exits, before draining
  std::size_t active = 0;
  std::size_t kv_entries = 0;
  std::size_t emitted = 0;          // cumulative
};

struct SimResult {
  std::size_t block_invocations = 0;
  std::size_t head_invocations = 0;
  double time = 0.0;
  std::size_t tokens = 0;
  double tokens_per_step = 0.0;       // tokens / time
  double occupancy = 0.0;             // mean occupied / slots over block invocations
  std::size_t peak_kv_entries = 0;    // token-depth entries held by active requests
  std::size_t peak_kv_entries_all_depths = 0;  // same trace if every token cached N_r depths
  std::size_t peak_active = 0;
  double mean_exit_wait = 0.0;        // time from a token's exit to its head-stage pass
  double max_exit_wait = 0.0;
  bool conserved = false;             // tokens == sum of target lengths
  bool occupancy_invariant = false;   // vacancies only while nothing could fill them
  std::vector<TraceRow> trace;

  nlohmann::json to_json() const;
};

// Continuous depth-wise batching: each invocation advances every occupied
// slot by one recursion step; exited tokens leave at once and their slots
// are refilled, ready next tokens first and then new requests (FIFO).
// Exited tokens wait for the head stage until `drain_threshold` of them
// accumulate, or until nothing else can run.
SimResult simulate_depthwise(const std::vector<std::size_t>& lengths, const DepthOracle& depth, const SimConfig& cfg);

// Continuous sequence-wise batching: each slot holds one request; a decode
// step runs the shared block until the deepest token of the batch exits.
// Finished requests are replaced between steps.
SimResult simulate_sequencewise(const std::vector<std::size_t>& lengths, const DepthOracle& depth, const SimConfig& cfg);

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace);

}  // namespace mor::sim
