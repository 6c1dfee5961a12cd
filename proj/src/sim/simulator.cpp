#include "mor/sim/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>

#include "mor/errors.hpp"
#include "mor/tensor/tensor.hpp"

namespace mor::sim {

void WorkloadSpec::validate() const {
  if (requests == 0) throw ConfigError("workload needs at least one request");
  if (!(mean_length >= 1.0) || !(stddev_length >= 0.0)) throw ConfigError("workload length distribution is invalid");
}

nlohmann::json WorkloadSpec::to_json() const {
  return {{"requests", requests}, {"mean_length", mean_length}, {"stddev_length", stddev_length}, {"seed", seed}};
}

std::vector<std::size_t> sample_lengths(const WorkloadSpec& w) {
  w.validate();
  std::mt19937_64 rng(w.seed);
  std::normal_distribution<double> dist(w.mean_length, w.stddev_length);
  std::vector<std::size_t> out(w.requests);
  for (auto& n : out) n = static_cast<std::size_t>(std::max(1.0, std::round(dist(rng))));
  return out;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double unit_draw(std::uint64_t seed, std::size_t a, std::size_t b, std::size_t c) {
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ a);
  h = splitmix(h ^ b);
  h = splitmix(h ^ c);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace

DepthOracle proxy_depths(std::size_t n_r, double exit_fraction, std::uint64_t seed) {
  if (n_r == 0) throw ConfigError("proxy depths need N_r >= 1");
  if (!(exit_fraction >= 0.0 && exit_fraction <= 1.0)) throw ConfigError("exit fraction must lie in [0, 1]");
  return [=](std::size_t request, std::size_t position) {
    std::size_t d = 1;
    while (d < n_r && !(unit_draw(seed, request, position, d) < exit_fraction)) ++d;
    return d;
  };
}

DepthOracle model_depths(const model::Model& model, model::SelectionPolicy policy, const std::vector<std::size_t>& lengths) {
  auto table = std::make_shared<std::vector<std::vector<std::size_t>>>();
  for (std::size_t len : lengths) {
    if (len > model.config().ctx_len) throw RangeError("request length exceeds the model context");
    model::DecodeSession session(model, policy);
    int token = static_cast<int>(model.config().vocab_size) - 2;  // byte vocabularies put the separator here
    for (std::size_t i = 0; i < len; ++i) {
      const auto logits = session.step(token);
      token = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    table->push_back(session.depths());
  }
  return [table](std::size_t request, std::size_t position) { return table->at(request).at(position); };
}

void SimConfig::validate() const {
  if (slots == 0) throw ConfigError("simulator needs at least one slot");
  if (n_r == 0) throw ConfigError("simulator needs N_r >= 1");
  if (head_cost < 0.0) throw ConfigError("head cost must be non-negative");
  if (max_active != 0 && max_active < 1) throw ConfigError("max_active must be positive or 0");
}

nlohmann::json SimResult::to_json() const {
  return {{"block_invocations", block_invocations},
          {"head_invocations", head_invocations},
          {"time", time},
          {"tokens", tokens},
          {"tokens_per_step", tokens_per_step},
          {"occupancy", occupancy},
          {"peak_kv_entries", peak_kv_entries},
          {"peak_kv_entries_all_depths", peak_kv_entries_all_depths},
          {"peak_active", peak_active},
          {"mean_exit_wait", mean_exit_wait},
          {"max_exit_wait", max_exit_wait},
          {"conserved", conserved},
          {"occupancy_invariant", occupancy_invariant}};
}

namespace {

struct Token {
  std::size_t request = 0;
  std::size_t position = 0;
  std::size_t target = 0;  // depth at which it exits
  std::size_t done = 0;    // depths executed so far
  double exit_time = 0.0;
};

// Entries one token leaves in the recursion caches.
std::size_t kv_entries(kv::KvMode mode, std::size_t depth) { return mode == kv::KvMode::RecursiveSharing ? 1 : depth; }

std::size_t checked_depth(const DepthOracle& oracle, std::size_t n_r, std::size_t request, std::size_t position) {
  const std::size_t d = oracle(request, position);
  if (d < 1 || d > n_r) throw DomainError("depth oracle returned " + std::to_string(d) + " outside [1, N_r]");
  return d;
}

class Ledger {
 public:
  Ledger(const std::vector<std::size_t>& lengths, const SimConfig& cfg)
      : lengths_(lengths), cfg_(cfg), entries_(lengths.size(), 0), all_(lengths.size(), 0) {}

  void emit(const Token& t) {
    entries_[t.request] += kv_entries(cfg_.kv_mode, t.done);
    all_[t.request] += cfg_.n_r;
    kv_ += kv_entries(cfg_.kv_mode, t.done);
    kv_all_ += cfg_.n_r;
    peak_ = std::max(peak_, kv_);
    peak_all_ = std::max(peak_all_, kv_all_);
    ++emitted_;
    if (t.position + 1 == lengths_[t.request]) {
      kv_ -= entries_[t.request];
      kv_all_ -= all_[t.request];
      --active_;
    }
  }
  void admit() { peak_active_ = std::max(peak_active_, ++active_); }

  std::size_t emitted() const { return emitted_; }
  std::size_t active() const { return active_; }
  std::size_t kv() const { return kv_; }

  void finish(SimResult& r) const {
    std::size_t total = 0;
    for (auto n : lengths_) total += n;
    r.tokens = emitted_;
    r.conserved = emitted_ == total && active_ == 0;
    r.peak_kv_entries = peak_;
    r.peak_kv_entries_all_depths = peak_all_;
    r.peak_active = peak_active_;
    r.tokens_per_step = r.time > 0.0 ? static_cast<double>(emitted_) / r.time : 0.0;
  }

 private:
  const std::vector<std::size_t>& lengths_;
  const SimConfig& cfg_;
  std::vector<std::size_t> entries_, all_;
  std::size_t kv_ = 0, kv_all_ = 0, peak_ = 0, peak_all_ = 0;
  std::size_t emitted_ = 0, active_ = 0, peak_active_ = 0;
};

}  // namespace

SimResult simulate_depthwise(const std::vector<std::size_t>& lengths, const DepthOracle& depth, const SimConfig& cfg) {
  cfg.validate();
  if (lengths.empty()) throw ConfigError("workload is empty");
  const std::size_t B = cfg.slots;
  const std::size_t drain_at = cfg.drain_threshold == 0 ? B : cfg.drain_threshold;
  SimResult res;
  res.occupancy_invariant = true;
  Ledger ledger(lengths, cfg);
  std::deque<Token> ready, exited;
  std::size_t next_request = 0;
  std::vector<std::optional<Token>> slots(B);
  double occupancy_sum = 0.0, wait_sum = 0.0;
  std::size_t waits = 0;

  auto can_admit = [&] {
    return next_request < lengths.size() && (cfg.max_active == 0 || ledger.active() < cfg.max_active);
  };
  auto drain = [&] {
    const std::size_t n = std::min(exited.size(), B);
    res.time += cfg.head_cost;
    ++res.head_invocations;
    for (std::size_t i = 0; i < n; ++i) {
      Token t = exited.front();
      exited.pop_front();
      const double w = res.time - t.exit_time;
      wait_sum += w;
      res.max_exit_wait = std::max(res.max_exit_wait, w);
      ++waits;
      ledger.emit(t);
      if (t.position + 1 < lengths[t.request]) {
        ready.push_back({t.request, t.position + 1, checked_depth(depth, cfg.n_r, t.request, t.position + 1), 0, 0.0});
      }
    }
  };

  while (true) {
    std::size_t occupied = 0;
    for (auto& s : slots) {
      if (!s && !ready.empty()) {
        s = ready.front();
        ready.pop_front();
      }
      if (!s && can_admit()) {
        ledger.admit();
        s = Token{next_request, 0, checked_depth(depth, cfg.n_r, next_request, 0), 0, 0.0};
        ++next_request;
      }
      occupied += s.has_value();
    }
    if (occupied < B && (!ready.empty() || can_admit())) res.occupancy_invariant = false;
    const std::size_t ready_after_fill = ready.size(), requests_after_fill = lengths.size() - next_request;
    if (occupied == 0) {
      if (exited.empty()) break;
      const std::size_t buffered = exited.size();
      drain();
      if (cfg.record_trace) {
        res.trace.push_back({res.block_invocations, res.time, 0, ready_after_fill, requests_after_fill, buffered,
                             ledger.active(), ledger.kv(), ledger.emitted()});
      }
      continue;
    }

    ++res.block_invocations;
    res.time += 1.0;
    occupancy_sum += static_cast<double>(occupied) / static_cast<double>(B);
    for (auto& s : slots) {
      if (!s) continue;
      if (++s->done == s->target) {
        s->exit_time = res.time;
        exited.push_back(*s);
        s.reset();
      }
    }
    const std::size_t buffered = exited.size();
    while (exited.size() >= drain_at) drain();
    if (cfg.record_trace) {
      res.trace.push_back({res.block_invocations, res.time, occupied, ready_after_fill, requests_after_fill, buffered, ledger.active(), ledger.kv(), ledger.emitted()});
    }
  }
  res.occupancy = res.block_invocations > 0 ? occupancy_sum / static_cast<double>(res.block_invocations) : 0.0;
  res.mean_exit_wait = waits > 0 ? wait_sum / static_cast<double>(waits) : 0.0;
  ledger.finish(res);
  return res;
}

SimResult simulate_sequencewise(const std::vector<std::size_t>& lengths, const DepthOracle& depth, const SimConfig& cfg) {
  cfg.validate();
  if (lengths.empty()) throw ConfigError("workload is empty");
  const std::size_t B = cfg.slots;
  SimResult res;
  res.occupancy_invariant = true;
  Ledger ledger(lengths, cfg);
  std::vector<std::optional<Token>> slots(B);
  std::size_t next_request = 0, steps = 0;
  double occupancy_sum = 0.0;

  while (true) {
    std::size_t occupied = 0, deepest = 0;
    for (auto& s : slots) {
      if (!s && next_request < lengths.size() && (cfg.max_active == 0 || ledger.active() < cfg.max_active)) {
        ledger.admit();
        s = Token{next_request, 0, 0, 0, 0.0};
        ++next_request;
      }
      if (!s) continue;
      ++occupied;
      s->target = checked_depth(depth, cfg.n_r, s->request, s->position);
      deepest = std::max(deepest, s->target);
    }
    if (occupied < B && next_request < lengths.size()) res.occupancy_invariant = false;
    if (occupied == 0) break;
    ++steps;
    res.block_invocations += deepest;
    res.time += static_cast<double>(deepest) + cfg.head_cost;
    ++res.head_invocations;
    // Shallow tokens idle while the deepest finishes.
    occupancy_sum += static_cast<double>(occupied) / static_cast<double>(B) * static_cast<double>(deepest);
    for (auto& s : slots) {
      if (!s) continue;
      s->done = s->target;
      ledger.emit(*s);
      if (s->position + 1 < lengths[s->request]) {
        ++s->position;
      } else {
        s.reset();
      }
    }
    if (cfg.record_trace) {
      res.trace.push_back({steps, res.time, occupied, 0, lengths.size() - next_request, 0, ledger.active(), ledger.kv(),
                           ledger.emitted()});
    }
  }
  res.occupancy = res.block_invocations > 0 ? occupancy_sum / static_cast<double>(res.block_invocations) : 0.0;
  ledger.finish(res);
  return res;
}

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "step,time,occupied,ready_waiting,requests_waiting,exit_buffer,active,kv_entries,emitted\n";
  for (const auto& r : trace) {
    os << r.step << ',' << r.time << ',' << r.occupied << ',' << r.ready_waiting << ',' << r.requests_waiting << ','
       << r.exit_buffer << ',' << r.active << ',' << r.kv_entries << ',' << r.emitted << '\n';
  }
}

}  // namespace mor::sim
