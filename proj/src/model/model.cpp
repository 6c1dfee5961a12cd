#include "mor/model/model.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "mor/errors.hpp"
#include "mor/tensor/ops.hpp"

namespace mor::model {

namespace t = mor::tensor;
using routing::Family;

namespace {

constexpr int kPrefix = 0;
constexpr int kSegment = 1;
constexpr int kSuffix = 2;
constexpr double kInitStd = 0.02;

// Number of (query, key) pairs with key position <= query position; both
// position lists ascending.
std::size_t causal_pairs(std::span<const int> queries, std::span<const int> keys) {
  std::size_t total = 0, k = 0;
  for (int q : queries) {
    while (k < keys.size() && keys[k] <= q) ++k;
    total += k;
  }
  return total;
}

void append_rows(kv::KvCache& cache, std::size_t depth, std::span<const int> pos, const Tensor& k,
                 const Tensor& v) {
  const std::size_t w = cache.width();
  for (std::size_t i = 0; i < pos.size(); ++i) {
    cache.append(depth, pos[i], k.data().data() + i * w, v.data().data() + i * w);
  }
}

std::vector<std::size_t> positions_in(std::span<const int> needles, std::span<const int> haystack) {
  std::vector<std::size_t> idx(needles.size());
  for (std::size_t i = 0; i < needles.size(); ++i) {
    auto it = std::lower_bound(haystack.begin(), haystack.end(), needles[i]);
    if (it == haystack.end() || *it != needles[i]) {
      throw CacheConsistencyError("token at position " + std::to_string(needles[i]) +
                                  " has no depth-1 entry");
    }
    idx[i] = static_cast<std::size_t>(it - haystack.begin());
  }
  return idx;
}

routing::RouterHead copy_head(const routing::RouterHead& h) {
  routing::RouterHead c;
  c.arch = h.arch;
  c.w1 = h.w1.clone();
  if (h.w2.defined()) c.w2 = h.w2.clone();
  return c;
}

// Teacher-forced keys: attention runs over the rows of the current pass.
class TfContext final : public Model::KeyContext {
 public:
  struct Depth1 {
    Tensor k, v;
    std::vector<int> pos;
    bool set = false;
  };

  TfContext(const ModelConfig& cfg, const Segments& seg, CacheSet* sink, const KvObserver* observer)
      : cfg_(cfg), sink_(sink), observer_(observer), depth1_(seg.per_depth) {}

  std::unique_ptr<KeySource> source(int stage, std::size_t j, std::size_t depth0, std::size_t layer,
                                    std::span<const int> pos) override {
    kv::KvCache* cache = nullptr;
    if (sink_ != nullptr) {
      cache = stage == kPrefix ? &sink_->prefix[j] : stage == kSuffix ? &sink_->suffix[j] : &sink_->segment[j];
    }
    const std::size_t depth = stage == kSegment ? depth0 + 1 : 1;
    if (stage != kSegment || depth0 == 0 || cfg_.kv_mode == kv::KvMode::RecursionWise) {
      Depth1* record = (stage == kSegment && depth0 == 0) ? &depth1_[j] : nullptr;
      return std::make_unique<Fresh>(*this, pos, depth, layer, cache, record);
    }
    Depth1& d1 = depth1_[j];
    if (!d1.set) throw CacheConsistencyError("shared keys requested before depth 1 ran");
    if (cfg_.kv_mode == kv::KvMode::RecursiveSharing) {
      positions_in(pos, d1.pos);
      return std::make_unique<Shared>(d1, pos, depth, cache);
    }
    return std::make_unique<Hybrid>(*this, d1, pos, depth, layer, cache);
  }

 private:
  class Fresh final : public KeySource {
   public:
    Fresh(TfContext& ctx, std::span<const int> pos, std::size_t depth, std::size_t layer,
          kv::KvCache* cache, Depth1* record)
        : ctx_(ctx), pos_(pos.begin(), pos.end()), depth_(depth), layer_(layer), cache_(cache), record_(record) {}
    bool projects() const override { return true; }
    AttnKeys keys(const Tensor& k, const Tensor& v) override {
      if (record_ != nullptr) *record_ = {k, v, pos_, true};
      if (cache_ != nullptr) {
        append_rows(*cache_, depth_, pos_, k, v);
        cache_->add_reads(depth_, causal_pairs(pos_, pos_));
      }
      if (ctx_.observer_ != nullptr && *ctx_.observer_) (*ctx_.observer_)(layer_, depth_, pos_, k, v);
      return {k, v, pos_};
    }

   private:
    TfContext& ctx_;
    std::vector<int> pos_;
    std::size_t depth_, layer_;
    kv::KvCache* cache_;
    Depth1* record_;
  };

  class Shared final : public KeySource {
   public:
    Shared(const Depth1& d1, std::span<const int> pos, std::size_t depth, kv::KvCache* cache)
        : d1_(d1), pos_(pos.begin(), pos.end()), depth_(depth), cache_(cache) {}
    bool projects() const override { return false; }
    AttnKeys keys(const Tensor&, const Tensor&) override {
      if (cache_ != nullptr) cache_->add_reads(depth_, causal_pairs(pos_, d1_.pos));
      return {d1_.k, d1_.v, d1_.pos};
    }

   private:
    const Depth1& d1_;
    std::vector<int> pos_;
    std::size_t depth_;
    kv::KvCache* cache_;
  };

  class Hybrid final : public KeySource {
   public:
    Hybrid(TfContext& ctx, const Depth1& d1, std::span<const int> pos, std::size_t depth, std::size_t layer,
           kv::KvCache* cache)
        : ctx_(ctx), d1_(d1), pos_(pos.begin(), pos.end()), depth_(depth), layer_(layer), cache_(cache) {}
    bool projects() const override { return true; }
    AttnKeys keys(const Tensor& k, const Tensor& v) override {
      const auto idx = positions_in(pos_, d1_.pos);
      if (cache_ != nullptr) {
        append_rows(*cache_, depth_, pos_, k, v);
        cache_->add_reads(depth_, causal_pairs(pos_, d1_.pos));
      }
      if (ctx_.observer_ != nullptr && *ctx_.observer_) (*ctx_.observer_)(layer_, depth_, pos_, k, v);
      return {t::scatter_rows(d1_.k, idx, k), t::scatter_rows(d1_.v, idx, v), d1_.pos};
    }

   private:
    TfContext& ctx_;
    const Depth1& d1_;
    std::vector<int> pos_;
    std::size_t depth_, layer_;
    kv::KvCache* cache_;
  };

  const ModelConfig& cfg_;
  CacheSet* sink_;
  const KvObserver* observer_;
  std::vector<Depth1> depth1_;
};

// Decode-time keys: fresh projections are appended to the cache first and
// attention reads the cache's view for the single query token.
class CacheContext final : public Model::KeyContext {
 public:
  explicit CacheContext(CacheSet& caches) : caches_(caches) {}

  std::unique_ptr<KeySource> source(int stage, std::size_t j, std::size_t depth0, std::size_t,
                                    std::span<const int> pos) override {
    if (pos.size() != 1) throw DimensionError("cached decoding processes one token at a time");
    kv::KvCache& cache =
        stage == kPrefix ? caches_.prefix[j] : stage == kSuffix ? caches_.suffix[j] : caches_.segment[j];
    return std::make_unique<Cached>(cache, stage == kSegment ? depth0 + 1 : 1, pos[0]);
  }

 private:
  class Cached final : public KeySource {
   public:
    Cached(kv::KvCache& cache, std::size_t depth, int pos) : cache_(cache), depth_(depth), pos_(pos) {}
    bool projects() const override {
      return cache_.mode() != kv::KvMode::RecursiveSharing || depth_ == 1;
    }
    AttnKeys keys(const Tensor& k, const Tensor& v) override {
      if (projects()) cache_.append(depth_, pos_, k.data().data(), v.data().data());
      kv::KvView view = cache_.attend_view(depth_, pos_);
      const std::size_t n = view.tokens.size(), w = cache_.width();
      return {Tensor::from({n, w}, std::move(view.keys)), Tensor::from({n, w}, std::move(view.values)),
              std::move(view.tokens)};
    }

   private:
    kv::KvCache& cache_;
    std::size_t depth_;
    int pos_;
  };

  CacheSet& caches_;
};

}  // namespace

std::string_view policy_name(SelectionPolicy p) {
  switch (p) {
    case SelectionPolicy::TopK:
      return "top-k";
    case SelectionPolicy::Threshold:
      return "threshold";
    case SelectionPolicy::AuxPredictor:
      return "aux-predictor";
  }
  return "?";
}

SelectionPolicy parse_policy(std::string_view s) {
  for (auto p : {SelectionPolicy::TopK, SelectionPolicy::Threshold, SelectionPolicy::AuxPredictor}) {
    if (policy_name(p) == s) return p;
  }
  throw ConfigError("unknown selection policy '" + std::string(s) + "'");
}

CacheSet make_cache_set(const ModelConfig& cfg) {
  const Segments seg = segments_of(cfg);
  CacheSet c;
  for (std::size_t i = 0; i < seg.prefix; ++i) c.prefix.emplace_back(kv::KvMode::RecursionWise, 1, cfg.kv_width());
  for (std::size_t i = 0; i < seg.per_depth; ++i) c.segment.emplace_back(cfg.kv_mode, cfg.recursions, cfg.kv_width());
  for (std::size_t i = 0; i < seg.suffix; ++i) c.suffix.emplace_back(kv::KvMode::RecursionWise, 1, cfg.kv_width());
  return c;
}

Model::Model(const ModelConfig& cfg, const routing::RouterConfig& router, std::uint64_t seed)
    : cfg_(cfg), router_cfg_(router) {
  validate(cfg_);
  routing::validate(router_cfg_);
  schedule_ = build_layer_schedule(cfg_).blocks;
  seg_ = segments_of(cfg_);
  t::Rng rng(seed);
  embed_ = t::trunc_normal({cfg_.vocab_size, cfg_.d_model}, kInitStd, rng);
  const int n_blocks = *std::max_element(schedule_.begin(), schedule_.end()) + 1;
  for (int b = 0; b < n_blocks; ++b) blocks_.push_back(make_block(cfg_, rng));
  final_norm_ = Tensor::full({cfg_.d_model}, 1.0, true);
  const std::size_t nr = cfg_.recursions;
  if (router_cfg_.family == Family::ExpertChoice) {
    for (std::size_t r = 0; r < nr; ++r) routers_.push_back(routing::make_router_head(router_cfg_.head, cfg_.d_model, 1, rng));
    if (router_cfg_.aux_scheme == routing::AuxScheme::AuxRouter) {
      for (std::size_t r = 0; r < nr; ++r) {
        aux_routers_.push_back(routing::make_router_head(router_cfg_.head, cfg_.d_model, 1, rng));
      }
    }
  } else if (router_cfg_.family == Family::TokenChoice) {
    routers_.push_back(routing::make_router_head(router_cfg_.head, cfg_.d_model, nr, rng));
    bias_.assign(nr, 0.0);
  }
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed", embed_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    auto named = blocks_[b].named("blocks." + std::to_string(b) + ".");
    out.insert(out.end(), named.begin(), named.end());
  }
  out.emplace_back("final_norm", final_norm_);
  auto heads = [&out](const std::vector<routing::RouterHead>& hs, const std::string& prefix) {
    for (std::size_t r = 0; r < hs.size(); ++r) {
      const auto ps = hs[r].parameters();
      for (std::size_t i = 0; i < ps.size(); ++i) {
        out.emplace_back(prefix + std::to_string(r) + ".w" + std::to_string(i + 1), ps[i]);
      }
    }
  };
  heads(routers_, "routers.");
  heads(aux_routers_, "aux_routers.");
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

std::size_t Model::router_parameter_count() const {
  std::size_t n = 0;
  for (const auto& h : routers_) n += h.parameter_count();
  for (const auto& h : aux_routers_) n += h.parameter_count();
  return n;
}

Model Model::untied() const {
  Model m;
  m.cfg_ = cfg_;
  m.router_cfg_ = router_cfg_;
  m.seg_ = seg_;
  m.schedule_.resize(schedule_.size());
  std::iota(m.schedule_.begin(), m.schedule_.end(), 0);
  m.embed_ = embed_.clone();
  for (int b : schedule_) m.blocks_.push_back(blocks_[b].deep_copy());
  m.final_norm_ = final_norm_.clone();
  for (const auto& h : routers_) m.routers_.push_back(copy_head(h));
  for (const auto& h : aux_routers_) m.aux_routers_.push_back(copy_head(h));
  m.bias_ = bias_;
  return m;
}

Tensor Model::run_layer(const Tensor& x, std::size_t layer, std::size_t depth0, int stage, std::size_t j,
                        std::span<const int> pos, KeyContext& ctx, const ForwardOptions&) const {
  auto src = ctx.source(stage, j, depth0, layer, pos);
  return block_forward(x, block_at(layer), pos, *src, cfg_);
}

ForwardResult Model::forward(std::span<const int> ids, const ForwardOptions& opts) const {
  if (ids.empty()) throw DimensionError("forward: empty sequence");
  if (ids.size() > cfg_.ctx_len) {
    throw RangeError("sequence of " + std::to_string(ids.size()) + " exceeds context of " +
                     std::to_string(cfg_.ctx_len));
  }
  std::vector<int> pos(ids.size());
  std::iota(pos.begin(), pos.end(), 0);
  TfContext ctx(cfg_, seg_, opts.cache_sink, &opts.observer);
  return run(t::embedding(embed_, ids), pos, ctx, opts);
}

ForwardResult Model::run(const Tensor& embedded, std::span<const int> pos, KeyContext& ctx,
                         const ForwardOptions& opts) const {
  const std::size_t T = embedded.dim(0), nr = cfg_.recursions;
  const std::size_t max_depth = opts.depth_clamp == 0 ? nr : std::min(opts.depth_clamp, nr);
  ForwardResult res;
  res.routing = routing::SelectionMask(T, nr);
  auto& mask = res.routing;

  Tensor x = embedded;
  for (std::size_t p = 0; p < seg_.prefix; ++p) x = run_layer(x, p, 0, kPrefix, p, pos, ctx, opts);
  const Tensor h1 = x;

  auto segment = [&](const Tensor& rows, const std::vector<std::size_t>& idx, std::size_t depth0) {
    std::vector<int> rpos(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) rpos[i] = pos[idx[i]];
    Tensor y = rows;
    for (std::size_t j = 0; j < seg_.per_depth; ++j) {
      y = run_layer(y, seg_.layer_index(depth0, j), depth0, kSegment, j, rpos, ctx, opts);
    }
    return y;
  };
  auto mark = [&](std::size_t r, const std::vector<std::size_t>& sel) {
    for (std::size_t tk : sel) mask.selected[tk * nr + r] = 1;
  };

  std::vector<std::size_t> all(T);
  std::iota(all.begin(), all.end(), 0);

  switch (router_cfg_.family) {
    case Family::None: {
      for (std::size_t r = 0; r < max_depth; ++r) {
        for (std::size_t tk : all) mask.live[tk * nr + r] = 1;
        x = segment(x, all, r);
        mark(r, all);
      }
      break;
    }

    case Family::ExpertChoice: {
      const auto caps = routing::capacity_schedule(nr);
      const bool sigmoid_act = router_cfg_.activation == routing::Activation::Sigmoid;
      const bool use_aux_head = !aux_routers_.empty();
      std::vector<std::size_t> live = all;
      for (std::size_t r = 0; r < max_depth && !live.empty(); ++r) {
        const std::size_t n = live.size();
        Tensor xl = t::gather_rows(x, live);
        Tensor logit = t::column(routers_[r].logits(xl), 0);
        Tensor score = sigmoid_act ? t::sigmoid(logit) : t::tanh(logit);
        Tensor prob = sigmoid_act ? score : t::sigmoid(logit);
        Tensor aux_prob;
        if (use_aux_head) aux_prob = t::sigmoid(t::column(aux_routers_[r].logits(xl.detach()), 0));
        const Tensor& predictor = use_aux_head ? aux_prob : prob;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t c = live[i] * nr + r;
          mask.live[c] = 1;
          mask.scores[c] = score.data()[i];
          mask.probs[c] = predictor.data()[i];
        }

        std::vector<std::size_t> sel;
        const bool full = caps[r] >= 1;
        switch (opts.policy) {
          case SelectionPolicy::TopK: {
            auto tk = routing::expert_choice_select(score.data(), live, caps[r], T);
            sel = std::move(tk.selected);
            mask.shortfall[r] = tk.shortfall;
            break;
          }
          case SelectionPolicy::Threshold:
          case SelectionPolicy::AuxPredictor: {
            if (opts.policy == SelectionPolicy::AuxPredictor && !use_aux_head) {
              throw ConfigError("aux-predictor selection needs an auxiliary router head");
            }
            const Tensor& p = opts.policy == SelectionPolicy::Threshold ? prob : aux_prob;
            const double thr = opts.policy == SelectionPolicy::Threshold ? router_cfg_.inference_threshold : 0.5;
            for (std::size_t i = 0; i < n; ++i) {
              if (full || p.data()[i] > thr) sel.push_back(live[i]);
            }
            break;
          }
        }

        std::vector<unsigned char> member(n, 0);
        std::vector<std::size_t> at;  // index within live of each selected token
        for (std::size_t i = 0, s = 0; i < n; ++i) {
          if (s < sel.size() && sel[s] == live[i]) {
            member[i] = 1;
            at.push_back(i);
            ++s;
          }
        }
        if (router_cfg_.aux_scheme == routing::AuxScheme::AuxLoss) {
          Tensor a = routing::aux_loss(prob, member);
          res.aux_bce = res.aux_bce.defined() ? t::add(res.aux_bce, a) : a;
        }
        if (use_aux_head) {
          Tensor a = routing::aux_router_loss(aux_prob, member);
          res.aux_router_bce = res.aux_router_bce.defined() ? t::add(res.aux_router_bce, a) : a;
        }
        Tensor z = routing::z_loss(logit);
        res.zloss = res.zloss.defined() ? t::add(res.zloss, z) : z;
        if (sel.empty()) break;

        Tensor gates = t::scale(t::reshape(t::gather_rows(t::reshape(score, {n, 1}), at), {sel.size()}),
                                router_cfg_.alpha);
        Tensor f = segment(t::gather_rows(x, sel), sel, r);
        x = routing::expert_choice_update(x, f, gates, sel);
        mark(r, sel);
        live = std::move(sel);
      }
      break;
    }

    case Family::TokenChoice: {
      Tensor logits = routers_[0].logits(h1);
      Tensor g = router_cfg_.activation == routing::Activation::Softmax ? t::softmax_rows(logits)
                                                                         : t::sigmoid(logits);
      const std::vector<double> no_bias;
      const auto assign = routing::token_choice_assign(g.data(), nr, router_cfg_.lossfree ? bias_ : no_bias);
      std::vector<std::size_t> expert(T);
      res.expert_counts.assign(nr, 0.0);
      for (std::size_t tk = 0; tk < T; ++tk) {
        expert[tk] = assign.depth[tk] - 1;
        res.expert_counts[expert[tk]] += 1.0;
      }
      res.balance = routing::balancing_loss(expert, g, 1.0);
      res.zloss = routing::z_loss(logits);
      Tensor ga = t::scale(g, router_cfg_.alpha);
      for (std::size_t tk = 0; tk < T; ++tk) {
        for (std::size_t r = 0; r < nr; ++r) {
          mask.scores[tk * nr + r] = g.data()[tk * nr + r];
          mask.probs[tk * nr + r] = g.data()[tk * nr + r];
        }
      }
      for (std::size_t r = 0; r < max_depth; ++r) {
        std::vector<std::size_t> active;
        std::vector<double> finish;
        for (std::size_t tk = 0; tk < T; ++tk) {
          const std::size_t d = std::min(assign.depth[tk], max_depth);
          if (d > r) {
            active.push_back(tk);
            finish.push_back(d == r + 1 ? 1.0 : 0.0);
          }
        }
        if (active.empty()) break;
        for (std::size_t tk : active) mask.live[tk * nr + r] = 1;
        Tensor f = segment(t::gather_rows(x, active), active, r);
        Tensor out = t::scale_rows(f, t::column(t::gather_rows(ga, active), r));
        if (std::any_of(finish.begin(), finish.end(), [](double v) { return v != 0.0; })) {
          const std::size_t n = active.size();
          out = t::add(out, t::scale_rows(t::gather_rows(h1, active), Tensor::from({n}, std::move(finish))));
        }
        x = t::scatter_rows(x, active, out);
        mark(r, active);
      }
      break;
    }
  }

  for (std::size_t s = 0; s < seg_.suffix; ++s) {
    const std::size_t layer = cfg_.total_layers - seg_.suffix + s;
    x = run_layer(x, layer, 0, kSuffix, s, pos, ctx, opts);
  }
  res.logits = t::matmul_transposed(t::rms_norm(x, final_norm_, cfg_.norm_eps), embed_);
  return res;
}

DecodeSession::DecodeSession(const Model& model, SelectionPolicy policy)
    : model_(model), policy_(policy), caches_(make_cache_set(model.config())) {
  if (model.router_config().family == Family::ExpertChoice && policy == SelectionPolicy::TopK) {
    throw ConfigError("decoding needs a causal selection policy (threshold or aux-predictor)");
  }
}

Tensor DecodeSession::prefill(std::span<const int> ids) {
  if (pos_ != 0) throw CacheConsistencyError("prefill on a session that already holds tokens");
  t::NoGradGuard no_grad;
  ForwardOptions opts;
  opts.policy = policy_;
  opts.cache_sink = &caches_;
  ForwardResult r = model_.forward(ids, opts);
  for (std::size_t i = 0; i < ids.size(); ++i) depths_.push_back(r.routing.depth_of(i));
  pos_ = ids.size();
  return r.logits;
}

std::vector<double> DecodeSession::step(int token) {
  t::NoGradGuard no_grad;
  if (pos_ >= model_.config().ctx_len) throw RangeError("decode position exceeds context length");
  const int ids[1] = {token};
  const int pos[1] = {static_cast<int>(pos_)};
  CacheContext ctx(caches_);
  ForwardOptions opts;
  opts.policy = policy_;
  ForwardResult r = model_.run(t::embedding(model_.embedding(), ids), pos, ctx, opts);
  depths_.push_back(r.routing.depth_of(0));
  ++pos_;
  return {r.logits.data().begin(), r.logits.data().end()};
}

std::vector<int> greedy_decode(const Model& model, std::span<const int> prompt, std::size_t new_tokens,
                               SelectionPolicy policy) {
  DecodeSession session(model, policy);
  Tensor logits = session.prefill(prompt);
  const std::size_t v = model.config().vocab_size;
  std::vector<double> last(logits.data().end() - static_cast<std::ptrdiff_t>(v), logits.data().end());
  std::vector<int> out;
  for (std::size_t i = 0; i < new_tokens; ++i) {
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    out.push_back(next);
    if (i + 1 < new_tokens) last = session.step(next);
  }
  return out;
}

}  // namespace mor::model
