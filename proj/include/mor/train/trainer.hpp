#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mor/model/model.hpp"
#include "mor/train/data.hpp"
#include "mor/train/metrics.hpp"
#include "mor/train/optim.hpp"

namespace mor::train {

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  ScheduleKind schedule = ScheduleKind::Trapezoid;
  double lr = 3e-3;
  double lr_min = 0.0;          // cosine floor
  double warmup_frac = 0.05;
  double cooldown_frac = 0.2;   // trapezoid only
  AdamWConfig adam;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  std::size_t eval_every = 0;   // 0: evaluate at the start and the end only
  std::size_t eval_windows = 32;

  LrSchedule lr_schedule() const;
  void validate() const;
};

// Loss terms as they enter the objective (coefficients applied), so the
// components sum to `total`.
struct StepLosses {
  double lm = 0.0;
  double aux = 0.0;
  double aux_router = 0.0;
  double balance = 0.0;
  double zloss = 0.0;
  double total = 0.0;
};

struct StepResult {
  std::size_t step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  StepLosses losses;
  std::vector<routing::SelectionMask> masks;  // one per sequence
  std::vector<double> expert_counts;          // token choice, summed over the batch
};

// Objective for one batch, averaged over sequences. Non-finite terms raise
// NonFiniteError naming the component.
struct Objective {
  tensor::Tensor total;
  StepLosses parts;
  std::vector<routing::SelectionMask> masks;
  std::vector<double> expert_counts;
};
Objective batch_objective(const model::Model& model, const Batch& batch,
                          model::SelectionPolicy policy = model::SelectionPolicy::TopK);

// One forward/backward/update. Also moves the loss-free bias when enabled.
StepResult train_step(model::Model& model, const Batch& batch, AdamW& opt, double lr, std::size_t step);

struct EvalOptions {
  model::SelectionPolicy policy = model::SelectionPolicy::TopK;
  DeadTokenMode dead_mode = DeadTokenMode::PerPosition;
  std::size_t depth_clamp = 0;
};

struct KvAnalysis {
  std::vector<std::size_t> layers;  // unrolled layer of each row below
  std::vector<std::size_t> depths;
  std::vector<int> blocks;          // parameter block of each layer
  std::vector<double> key_norm, value_norm;
  std::vector<std::vector<double>> key_cosine, value_cosine;
  // Mean key cosine over layer pairs that share a block, and over pairs
  // that do not; NaN when no such pair exists.
  double within_block_cosine = 0.0;
  double across_block_cosine = 0.0;

  nlohmann::json to_json() const;
};

struct EvalReport {
  double nll = 0.0;
  std::vector<double> per_depth_nll;
  std::vector<std::size_t> depth_histogram;  // index d: tokens that ran d depths
  std::optional<double> dead_ratio, samp_acc, auc;  // expert choice
  std::optional<double> maxvio, entropy;            // token choice
  std::optional<KvAnalysis> kv;

  nlohmann::json to_json() const;
};

double mean_nll(const model::Model& model, const Batch& batch, const EvalOptions& opts = {});
std::vector<double> eval_per_depth(const model::Model& model, const Batch& batch,
                                   model::SelectionPolicy policy = model::SelectionPolicy::TopK);
// Threshold used by the causal rule matching `policy`.
double inference_threshold(const model::Model& model, model::SelectionPolicy policy);
EvalReport evaluate(const model::Model& model, const Batch& batch, const EvalOptions& opts = {},
                    bool with_per_depth = true, bool with_kv = false);

KvAnalysis kv_similarity_report(const model::Model& model, const Batch& probe);

struct AnnotatedToken {
  std::string text;
  std::size_t depth = 0;
};
std::vector<AnnotatedToken> depth_annotation(const model::Model& model, const std::string& text,
                                             model::SelectionPolicy policy = model::SelectionPolicy::TopK);

struct LogRow {
  std::size_t step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  StepLosses losses;
  std::optional<double> eval_nll, dead_ratio, samp_acc, auc, maxvio, entropy;
};

void write_csv_header(std::ostream& os);
void write_csv_row(std::ostream& os, const LogRow& row);

struct TrainResult {
  EvalReport initial;
  EvalReport final;
  std::vector<LogRow> rows;
  double seconds = 0.0;
};

// Full loop: initial eval, `steps` updates, periodic logs and evals, final
// eval. `on_row` sees each log row as it is produced.
TrainResult train(model::Model& model, const Corpus& corpus, const TrainConfig& cfg, const EvalOptions& eval_opts = {},
                  const std::function<void(const LogRow&)>& on_row = {});

}  // namespace mor::train
