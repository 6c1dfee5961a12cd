#include "mor/train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "mor/errors.hpp"
#include "mor/routing/routing.hpp"
#include "mor/tensor/ops.hpp"

namespace mor::train {

namespace t = mor::tensor;
using model::Model;
using model::SelectionPolicy;
using routing::Family;
using t::Tensor;

LrSchedule TrainConfig::lr_schedule() const {
  if (schedule == ScheduleKind::Trapezoid) return trapezoid_for(steps, warmup_frac, cooldown_frac, lr);
  LrSchedule s;
  s.kind = ScheduleKind::Cosine;
  s.steps = steps;
  s.warmup = static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(steps)));
  s.peak = lr;
  s.floor = lr_min;
  return s;
}

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("train.steps must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (seq_len == 0) throw ConfigError("train.seq_len must be positive");
  if (log_every == 0) throw ConfigError("train.log_every must be positive");
  if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0)) throw ConfigError("train.warmup_frac must lie in [0, 1]");
  if (!(cooldown_frac > 0.0 && cooldown_frac <= 1.0)) throw ConfigError("train.cooldown_frac must lie in (0, 1]");
  if (lr < 0.0 || lr_min < 0.0) throw ConfigError("learning rates must be non-negative");
  lr_schedule().validate();
}

namespace {

Tensor accumulate(const Tensor& acc, const Tensor& term) { return acc.defined() ? t::add(acc, term) : term; }

double checked(const Tensor& term, const char* component) {
  const double v = term.item();
  if (!std::isfinite(v)) throw NonFiniteError(std::string("loss component '") + component + "' is not finite");
  return v;
}

void check_batch(const Model& model, const Batch& batch) {
  if (batch.size == 0) throw ConfigError("empty batch");
  if (batch.seq_len > model.config().ctx_len) {
    throw RangeError("sequence length " + std::to_string(batch.seq_len) + " exceeds ctx_len");
  }
}

}  // namespace

Objective batch_objective(const Model& model, const Batch& batch, SelectionPolicy policy) {
  check_batch(model, batch);
  const auto& rc = model.router_config();
  model::ForwardOptions opts;
  opts.policy = policy;
  Tensor lm, aux, aux_router, balance, zloss;
  Objective out;
  for (std::size_t b = 0; b < batch.size; ++b) {
    model::ForwardResult r;
    try {
      r = model.forward(batch.inputs[b], opts);
      lm = accumulate(lm, t::softmax_cross_entropy(r.logits, batch.targets[b]));
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string("loss component 'lm' (forward): ") + e.what());
    }
    if (r.aux_bce.defined()) aux = accumulate(aux, r.aux_bce);
    if (r.aux_router_bce.defined()) aux_router = accumulate(aux_router, r.aux_router_bce);
    if (r.balance.defined()) balance = accumulate(balance, r.balance);
    if (r.zloss.defined()) zloss = accumulate(zloss, r.zloss);
    if (!r.expert_counts.empty()) {
      out.expert_counts.resize(r.expert_counts.size(), 0.0);
      for (std::size_t i = 0; i < r.expert_counts.size(); ++i) out.expert_counts[i] += r.expert_counts[i];
    }
    out.masks.push_back(std::move(r.routing));
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size);
  auto term = [&](const Tensor& sum, double coeff, double& slot, const char* name) {
    if (!sum.defined() || coeff == 0.0) return;
    Tensor w = t::scale(sum, coeff * inv_b);
    slot = checked(w, name);
    out.total = accumulate(out.total, w);
  };
  term(lm, 1.0, out.parts.lm, "lm");
  term(aux, rc.aux_coeff, out.parts.aux, "aux");
  term(aux_router, rc.aux_coeff, out.parts.aux_router, "aux_router");
  term(balance, rc.balance_coeff, out.parts.balance, "balance");
  term(zloss, rc.zloss_coeff, out.parts.zloss, "zloss");
  out.parts.total = checked(out.total, "total");
  return out;
}

StepResult train_step(Model& model, const Batch& batch, AdamW& opt, double lr, std::size_t step) {
  StepResult res;
  res.step = step;
  res.lr = lr;
  try {
    opt.zero_grad();
    Objective obj = batch_objective(model, batch);
    obj.total.backward();
    res.grad_norm = opt.step(lr);
    res.losses = obj.parts;
    res.masks = std::move(obj.masks);
    res.expert_counts = std::move(obj.expert_counts);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError("step " + std::to_string(step) + ": " + e.what());
  }
  const auto& rc = model.router_config();
  if (rc.family == Family::TokenChoice && rc.lossfree) {
    model.lossfree_bias() = routing::lossfree_bias_update(res.expert_counts, model.lossfree_bias(), rc.lossfree_rate);
  }
  return res;
}

double inference_threshold(const Model& model, SelectionPolicy policy) {
  return policy == SelectionPolicy::AuxPredictor ? 0.5 : model.router_config().inference_threshold;
}

namespace {

struct RouterMetrics {
  std::optional<double> dead_ratio, samp_acc, auc, maxvio, entropy;
};

template <class F>
std::optional<double> try_metric(F&& f) {
  try {
    return f();
  } catch (const MetricError&) {
    return std::nullopt;
  }
}

// Expert-choice metrics expect top-k masks whose probs hold the predictor.
RouterMetrics router_metrics(const Model& model, const std::vector<routing::SelectionMask>& masks,
                             const std::vector<double>& counts, DeadTokenMode dead_mode) {
  RouterMetrics m;
  const auto& rc = model.router_config();
  if (rc.family == Family::ExpertChoice) {
    const auto predictor = rc.aux_scheme == routing::AuxScheme::AuxRouter ? SelectionPolicy::AuxPredictor
                                                                          : SelectionPolicy::Threshold;
    m.dead_ratio = try_metric([&] { return dead_token_ratio(masks, dead_mode); });
    m.samp_acc = try_metric([&] { return sampling_accuracy(masks, inference_threshold(model, predictor)); });
    m.auc = try_metric([&] { return selection_auc(masks); });
  } else if (rc.family == Family::TokenChoice) {
    m.maxvio = try_metric([&] { return maxvio(counts); });
    std::vector<double> mean(model.config().recursions, 0.0);
    std::size_t n = 0;
    for (const auto& mask : masks) {
      for (std::size_t tk = 0; tk < mask.tokens; ++tk, ++n)
        for (std::size_t r = 0; r < mask.depths; ++r) mean[r] += mask.probs[tk * mask.depths + r];
    }
    if (n > 0) {
      double s = 0.0;
      for (auto& v : mean) s += (v /= static_cast<double>(n));
      // Sigmoid gates need not sum to one; entropy is reported on the normalized mean.
      if (s > 0.0)
        for (auto& v : mean) v /= s;
      m.entropy = try_metric([&] { return selection_entropy(mean); });
    }
  }
  return m;
}

}  // namespace

double mean_nll(const Model& model, const Batch& batch, const EvalOptions& opts) {
  check_batch(model, batch);
  t::NoGradGuard no_grad;
  model::ForwardOptions fo;
  fo.policy = opts.policy;
  fo.depth_clamp = opts.depth_clamp;
  double sum = 0.0;
  for (std::size_t b = 0; b < batch.size; ++b) {
    sum += t::softmax_cross_entropy(model.forward(batch.inputs[b], fo).logits, batch.targets[b]).item();
  }
  return sum / static_cast<double>(batch.size);
}

std::vector<double> eval_per_depth(const Model& model, const Batch& batch, SelectionPolicy policy) {
  std::vector<double> out;
  for (std::size_t c = 1; c <= model.config().recursions; ++c) {
    EvalOptions o;
    o.policy = policy;
    o.depth_clamp = c;
    out.push_back(mean_nll(model, batch, o));
  }
  return out;
}

EvalReport evaluate(const Model& model, const Batch& batch, const EvalOptions& opts, bool with_per_depth, bool with_kv) {
  check_batch(model, batch);
  t::NoGradGuard no_grad;
  EvalReport rep;
  model::ForwardOptions fo;
  fo.policy = opts.policy;
  fo.depth_clamp = opts.depth_clamp;
  std::vector<routing::SelectionMask> masks;
  std::vector<double> counts;
  double sum = 0.0;
  rep.depth_histogram.assign(model.config().recursions + 1, 0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    auto r = model.forward(batch.inputs[b], fo);
    sum += t::softmax_cross_entropy(r.logits, batch.targets[b]).item();
    const auto h = r.routing.depth_histogram();
    for (std::size_t d = 0; d < h.size() && d < rep.depth_histogram.size(); ++d) rep.depth_histogram[d] += h[d];
    if (!r.expert_counts.empty()) {
      counts.resize(r.expert_counts.size(), 0.0);
      for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += r.expert_counts[i];
    }
    masks.push_back(std::move(r.routing));
  }
  rep.nll = sum / static_cast<double>(batch.size);

  if (model.router_config().family == Family::ExpertChoice && opts.policy != SelectionPolicy::TopK) {
    // Router quality is judged against the teacher-forced top-k choice.
    masks.clear();
    model::ForwardOptions topk;
    for (std::size_t b = 0; b < batch.size; ++b) masks.push_back(model.forward(batch.inputs[b], topk).routing);
  }
  const auto m = router_metrics(model, masks, counts, opts.dead_mode);
  rep.dead_ratio = m.dead_ratio;
  rep.samp_acc = m.samp_acc;
  rep.auc = m.auc;
  rep.maxvio = m.maxvio;
  rep.entropy = m.entropy;
  if (with_per_depth) rep.per_depth_nll = eval_per_depth(model, batch, opts.policy);
  if (with_kv) rep.kv = kv_similarity_report(model, batch);
  return rep;
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
}

}  // namespace

nlohmann::json KvAnalysis::to_json() const {
  auto nan_safe = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  return {{"layers", layers},
          {"depths", depths},
          {"blocks", blocks},
          {"key_norm", key_norm},
          {"value_norm", value_norm},
          {"key_cosine", key_cosine},
          {"value_cosine", value_cosine},
          {"within_block_cosine", nan_safe(within_block_cosine)},
          {"across_block_cosine", nan_safe(across_block_cosine)}};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = {{"nll", nll},
                      {"per_depth_nll", per_depth_nll},
                      {"depth_histogram", depth_histogram},
                      {"dead_ratio", opt_json(dead_ratio)},
                      {"samp_acc", opt_json(samp_acc)},
                      {"auc", opt_json(auc)},
                      {"maxvio", opt_json(maxvio)},
                      {"entropy", opt_json(entropy)}};
  j["kv_analysis"] = kv ? kv->to_json() : nlohmann::json(nullptr);
  return j;
}

KvAnalysis kv_similarity_report(const Model& model, const Batch& probe) {
  check_batch(model, probe);
  struct Acc {
    std::size_t depth = 0;
    std::vector<double> k_sum, v_sum;
    double k_norm = 0.0, v_norm = 0.0;
    std::size_t rows = 0;
  };
  std::map<std::size_t, Acc> acc;
  model::ForwardOptions fo;
  fo.observer = [&acc](std::size_t layer, std::size_t depth, std::span<const int>, const Tensor& k, const Tensor& v) {
    Acc& a = acc[layer];
    a.depth = depth;
    const std::size_t w = k.dim(1);
    a.k_sum.resize(w, 0.0);
    a.v_sum.resize(w, 0.0);
    for (std::size_t i = 0; i < k.dim(0); ++i) {
      double kn = 0.0, vn = 0.0;
      for (std::size_t j = 0; j < w; ++j) {
        const double kv = k.at(i, j), vv = v.at(i, j);
        a.k_sum[j] += kv;
        a.v_sum[j] += vv;
        kn += kv * kv;
        vn += vv * vv;
      }
      a.k_norm += std::sqrt(kn);
      a.v_norm += std::sqrt(vn);
      ++a.rows;
    }
  };
  {
    t::NoGradGuard no_grad;
    for (std::size_t b = 0; b < probe.size; ++b) model.forward(probe.inputs[b], fo);
  }
  KvAnalysis out;
  std::vector<std::vector<double>> kmean, vmean;
  for (auto& [layer, a] : acc) {
    if (a.rows == 0) continue;
    const double n = static_cast<double>(a.rows);
    out.layers.push_back(layer);
    out.depths.push_back(a.depth);
    out.blocks.push_back(model.schedule()[layer]);
    out.key_norm.push_back(a.k_norm / n);
    out.value_norm.push_back(a.v_norm / n);
    for (auto& x : a.k_sum) x /= n;
    for (auto& x : a.v_sum) x /= n;
    kmean.push_back(a.k_sum);
    vmean.push_back(a.v_sum);
  }
  const std::size_t n = out.layers.size();
  out.key_cosine.assign(n, std::vector<double>(n, 0.0));
  out.value_cosine.assign(n, std::vector<double>(n, 0.0));
  double within = 0.0, across = 0.0;
  std::size_t n_within = 0, n_across = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.key_cosine[i][j] = cosine(kmean[i], kmean[j]);
      out.value_cosine[i][j] = cosine(vmean[i], vmean[j]);
      if (j <= i) continue;
      if (out.blocks[i] == out.blocks[j]) {
        within += out.key_cosine[i][j];
        ++n_within;
      } else {
        across += out.key_cosine[i][j];
        ++n_across;
      }
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.within_block_cosine = n_within > 0 ? within / static_cast<double>(n_within) : nan;
  out.across_block_cosine = n_across > 0 ? across / static_cast<double>(n_across) : nan;
  return out;
}

std::vector<AnnotatedToken> depth_annotation(const Model& model, const std::string& text, SelectionPolicy policy) {
  const auto ids = ByteTokenizer::encode(text);
  if (ids.empty()) return {};
  t::NoGradGuard no_grad;
  model::ForwardOptions fo;
  fo.policy = policy;
  const auto r = model.forward(ids, fo);
  std::vector<AnnotatedToken> out;
  for (std::size_t i = 0; i < ids.size(); ++i) out.push_back({ByteTokenizer::token_text(ids[i]), r.routing.depth_of(i)});
  return out;
}

namespace {

void put(std::ostream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << buf;
}

void put(std::ostream& os, const std::optional<double>& v) {
  if (v) put(os, *v);
}

}  // namespace

void write_csv_header(std::ostream& os) {
  os << "step,lr,grad_norm,lm,aux,aux_router,balance,zloss,total,eval_nll,dead_ratio,samp_acc,auc,maxvio,entropy\n";
}

void write_csv_row(std::ostream& os, const LogRow& r) {
  os << r.step << ',';
  put(os, r.lr);
  os << ',';
  put(os, r.grad_norm);
  for (double v : {r.losses.lm, r.losses.aux, r.losses.aux_router, r.losses.balance, r.losses.zloss, r.losses.total}) {
    os << ',';
    put(os, v);
  }
  for (const auto* v : {&r.eval_nll, &r.dead_ratio, &r.samp_acc, &r.auc, &r.maxvio, &r.entropy}) {
    os << ',';
    put(os, *v);
  }
  os << '\n';
}

TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg, const EvalOptions& eval_opts,
                  const std::function<void(const LogRow&)>& on_row) {
  cfg.validate();
  if (corpus.seq_len() != cfg.seq_len) throw ConfigError("corpus windows do not match train.seq_len");
  if (corpus.eval_windows() == 0) throw ConfigError("corpus has no held-out windows");
  const auto start = std::chrono::steady_clock::now();
  const LrSchedule schedule = cfg.lr_schedule();
  Batcher batcher(corpus, cfg.batch_size, cfg.seed);
  const Batch eval_batch = corpus.eval_batch(cfg.eval_windows);
  AdamW opt(model.parameters(), cfg.adam);

  TrainResult out;
  out.initial = evaluate(model, eval_batch, eval_opts, false, false);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Batch batch = batcher.next();
    StepResult s = train_step(model, batch, opt, schedule.rate(step), step);
    const bool last = step + 1 == cfg.steps;
    if (step % cfg.log_every != 0 && !last) continue;
    LogRow row;
    row.step = step;
    row.lr = s.lr;
    row.grad_norm = s.grad_norm;
    row.losses = s.losses;
    const auto m = router_metrics(model, s.masks, s.expert_counts, eval_opts.dead_mode);
    row.dead_ratio = m.dead_ratio;
    row.samp_acc = m.samp_acc;
    row.auc = m.auc;
    row.maxvio = m.maxvio;
    row.entropy = m.entropy;
    if (!last && cfg.eval_every > 0 && step % cfg.eval_every == 0) row.eval_nll = mean_nll(model, eval_batch, eval_opts);
    if (last) {
      out.final = evaluate(model, eval_batch, eval_opts, true, true);
      row.eval_nll = out.final.nll;
    }
    if (on_row) on_row(row);
    out.rows.push_back(std::move(row));
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace mor::train
