#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "gradcheck.hpp"
#include "mor/errors.hpp"
#include "mor/model/block.hpp"
#include "mor/model/checkpoint.hpp"
#include "mor/model/config.hpp"
#include "mor/model/config_text.hpp"
#include "mor/model/model.hpp"
#include "mor/tensor/ops.hpp"
#include "tiny_models.hpp"

namespace m = mor::model;
namespace t = mor::tensor;
using m::Sharing;
using t::Tensor;

namespace {

m::ModelConfig smollm_360m() {
  m::ModelConfig c;
  c.total_layers = 32;
  c.recursions = 1;
  c.sharing = Sharing::None;
  c.d_model = 960;
  c.n_heads = 15;
  c.n_kv_heads = 5;
  c.d_head = 64;
  c.d_inter = 2560;
  c.vocab_size = 49152;
  c.ctx_len = 2048;
  return c;
}

std::vector<int> sched(Sharing s, std::size_t L, std::size_t nr) {
  m::ModelConfig c = mor::testing::tiny_config(s, L, nr);
  return m::build_layer_schedule(c).blocks;
}

}  // namespace

TEST(LayerSchedule, CycleAndSequenceNine) {
  EXPECT_EQ(sched(Sharing::Cycle, 9, 3), (std::vector<int>{0, 1, 2, 0, 1, 2, 0, 1, 2}));
  EXPECT_EQ(sched(Sharing::Sequence, 9, 3), (std::vector<int>{0, 0, 0, 1, 1, 1, 2, 2, 2}));
}

TEST(LayerSchedule, MiddleCycleThirtyTwo) {
  auto s = sched(Sharing::MiddleCycle, 32, 3);
  ASSERT_EQ(s.size(), 32u);
  EXPECT_EQ(s.front(), 0);
  EXPECT_EQ(s.back(), 11);
  for (std::size_t l = 1; l < 31; ++l) EXPECT_EQ(s[l], static_cast<int>((l - 1) % 10 + 1));
}

TEST(LayerSchedule, MiddleSequenceLayout) {
  EXPECT_EQ(sched(Sharing::MiddleSequence, 8, 3), (std::vector<int>{0, 1, 1, 1, 2, 2, 2, 3}));
}

TEST(LayerSchedule, DistinctCountsOverSweep) {
  for (std::size_t L = 2; L <= 40; ++L) {
    for (std::size_t nr = 1; nr <= 6; ++nr) {
      for (auto s : {Sharing::Cycle, Sharing::Sequence}) {
        if (L % nr != 0) {
          EXPECT_THROW(sched(s, L, nr), mor::ConfigError);
          continue;
        }
        auto b = sched(s, L, nr);
        EXPECT_EQ(b.size(), L);
        EXPECT_EQ(std::set<int>(b.begin(), b.end()).size(), L / nr);
      }
      for (auto s : {Sharing::MiddleCycle, Sharing::MiddleSequence}) {
        if (L < 3 || (L - 2) % nr != 0) {
          EXPECT_THROW(sched(s, L, nr), mor::ConfigError);
          continue;
        }
        auto b = sched(s, L, nr);
        EXPECT_EQ(b.size(), L);
        EXPECT_EQ(std::set<int>(b.begin(), b.end()).size(), (L - 2) / nr + 2);
        EXPECT_EQ(std::count(b.begin(), b.end(), b.front()), 1);
        EXPECT_EQ(std::count(b.begin(), b.end(), b.back()), 1);
      }
      if (L % nr == 0) {
        auto c = sched(Sharing::Cycle, L, nr), q = sched(Sharing::Sequence, L, nr);
        std::sort(c.begin(), c.end());
        std::sort(q.begin(), q.end());
        EXPECT_EQ(c, q);
      }
    }
  }
}

TEST(ParameterCount, Vanilla360m) {
  auto c = m::count_parameters(smollm_360m());
  EXPECT_NEAR(static_cast<double>(c.non_embedding), 315e6, 0.02 * 315e6);
  EXPECT_EQ(c.non_embedding, c.unique_non_embedding);
  EXPECT_EQ(c.embedding, 49152u * 960u);
}

TEST(ParameterCount, MiddleCycleThreeRecursions) {
  auto cfg = smollm_360m();
  cfg.sharing = Sharing::MiddleCycle;
  cfg.recursions = 3;
  EXPECT_NEAR(static_cast<double>(m::count_parameters(cfg).unique_non_embedding), 118e6, 0.02 * 118e6);
}

TEST(Config, RejectsBadShapes) {
  auto c = mor::testing::tiny_config(Sharing::None, 2, 1);
  c.n_kv_heads = 3;
  EXPECT_THROW(m::validate(c), mor::ConfigError);
  c = mor::testing::tiny_config(Sharing::None, 2, 1);
  c.d_model = 10;
  EXPECT_THROW(m::validate(c), mor::ConfigError);
  c = mor::testing::tiny_config(Sharing::None, 2, 2);
  EXPECT_THROW(m::validate(c), mor::ConfigError);
}

TEST(ConfigText, RoundTripsAndNamesBadKeys) {
  auto c = mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3, mor::kv::KvMode::Hybrid);
  c.norm_eps = 3.25e-6;
  auto r = mor::routing::token_choice_defaults();
  r.lossfree = true;
  const auto text = m::model_config_text(c, r);
  m::ModelConfig c2;
  mor::routing::RouterConfig r2;
  for (auto& [k, v] : m::parse_key_values(text)) {
    ASSERT_TRUE(m::apply_model_key(c2, k, v) || m::apply_router_key(r2, k, v)) << k;
  }
  EXPECT_EQ(m::model_config_text(c2, r2), text);
  try {
    m::apply_model_key(c2, "model.layers", "x");
    FAIL();
  } catch (const mor::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.layers"), std::string::npos);
  }
  EXPECT_THROW(m::parse_key_values("a = 1\nnot a pair\n"), mor::ConfigError);
}

// Straight-line evaluation of one block with plain loops: no autograd,
// no caching, per-head causal softmax.
namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& x) {
  Mat out(x.dim(0), std::vector<double>(x.dim(1)));
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) out[i][j] = x.at(i, j);
  return out;
}

Mat mm(const Mat& a, const Tensor& w) {
  const std::size_t n = w.dim(1);
  Mat out(a.size(), std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k)
      for (std::size_t j = 0; j < n; ++j) out[i][j] += a[i][k] * w.at(k, j);
  return out;
}

Mat rmsnorm(const Mat& x, const Tensor& w, double eps) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double ss = 0.0;
    for (double v : x[i]) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x[i].size()) + eps);
    for (std::size_t j = 0; j < x[i].size(); ++j) out[i][j] = x[i][j] * inv * w.data()[j];
  }
  return out;
}

void rotate(Mat& x, std::size_t heads, std::size_t dh, double base) {
  for (std::size_t tk = 0; tk < x.size(); ++tk)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const double ang = static_cast<double>(tk) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
        double& a = x[tk][h * dh + 2 * i];
        double& b = x[tk][h * dh + 2 * i + 1];
        const double na = a * std::cos(ang) - b * std::sin(ang);
        const double nb = a * std::sin(ang) + b * std::cos(ang);
        a = na;
        b = nb;
      }
}

Mat reference_block(const Mat& x, const m::BlockParams& p, const m::ModelConfig& c) {
  const std::size_t T = x.size(), H = c.n_heads, dh = c.d_head, group = c.n_heads / c.n_kv_heads;
  Mat a = rmsnorm(x, p.attn_norm, c.norm_eps);
  Mat q = mm(a, p.wq), k = mm(a, p.wk), v = mm(a, p.wv);
  rotate(q, H, dh, c.rope_base);
  rotate(k, c.n_kv_heads, dh, c.rope_base);
  Mat o(T, std::vector<double>(H * dh, 0.0));
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t g = h / group;
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double d = 0.0;
        for (std::size_t e = 0; e < dh; ++e) d += q[i][h * dh + e] * k[j][g * dh + e];
        s[j] = d / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      for (auto& sj : s) z += (sj = std::exp(sj - mx));
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t e = 0; e < dh; ++e) o[i][h * dh + e] += s[j] / z * v[j][g * dh + e];
    }
  }
  Mat attn = mm(o, p.wo);
  Mat hmat = x;
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j) hmat[i][j] += attn[i][j];
  Mat mn = rmsnorm(hmat, p.ffn_norm, c.norm_eps);
  Mat gate = mm(mn, p.w_gate), up = mm(mn, p.w_up);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < gate[i].size(); ++j) gate[i][j] = gate[i][j] / (1.0 + std::exp(-gate[i][j])) * up[i][j];
  Mat ff = mm(gate, p.w_down);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j) hmat[i][j] += ff[i][j];
  return hmat;
}

}  // namespace

TEST(BlockForward, ZeroOutputProjectionsAreIdentity) {
  auto c = mor::testing::tiny_config(Sharing::None, 1, 1);
  t::Rng rng(1);
  auto p = m::make_block(c, rng);
  for (auto& v : p.wo.mutable_data()) v = 0.0;
  for (auto& v : p.w_down.mutable_data()) v = 0.0;
  auto x = mor::testing::random_tensor(rng, {5, 8}, false);
  std::vector<int> pos{0, 1, 2, 3, 4};
  m::SelfKeys keys(pos);
  auto y = m::block_forward(x, p, pos, keys, c);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(BlockForward, MatchesStraightLineReference) {
  auto c = mor::testing::tiny_config(Sharing::None, 1, 1);
  t::Rng rng(2);
  auto p = m::make_block(c, rng);
  for (Tensor* w : {&p.wq, &p.wk, &p.wv, &p.wo, &p.w_gate, &p.w_up, &p.w_down, &p.attn_norm, &p.ffn_norm}) {
    std::normal_distribution<double> d(0.0, 0.5);
    for (auto& v : w->mutable_data()) v = d(rng);
  }
  for (std::size_t T : {1u, 4u}) {
    auto x = mor::testing::random_tensor(rng, {T, 8}, false);
    std::vector<int> pos(T);
    std::iota(pos.begin(), pos.end(), 0);
    m::SelfKeys keys(pos);
    auto y = m::block_forward(x, p, pos, keys, c);
    auto ref = reference_block(to_mat(x), p, c);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y.at(i, j), ref[i][j], 1e-8);
  }
}

TEST(BlockForward, PositionOutsideContextThrows) {
  auto c = mor::testing::tiny_config(Sharing::None, 1, 1);
  c.ctx_len = 4;
  t::Rng rng(3);
  auto p = m::make_block(c, rng);
  std::vector<int> pos{4};
  m::SelfKeys keys(pos);
  EXPECT_THROW(m::block_forward(Tensor::zeros({1, 8}), p, pos, keys, c), mor::RangeError);
}

namespace {

struct Variant {
  Sharing sharing;
  std::size_t layers, n_r;
  mor::routing::RouterConfig router;
};

std::vector<Variant> variants() {
  auto none = mor::routing::RouterConfig{};
  auto ec = mor::testing::spread_expert_choice();
  auto ec_aux = ec;
  ec_aux.aux_scheme = mor::routing::AuxScheme::AuxRouter;
  auto tc = mor::routing::token_choice_defaults();
  return {{Sharing::Cycle, 4, 2, none},       {Sharing::Sequence, 6, 3, none},
          {Sharing::MiddleCycle, 5, 3, ec},   {Sharing::MiddleSequence, 8, 3, ec_aux},
          {Sharing::MiddleCycle, 8, 3, tc},   {Sharing::Cycle, 6, 3, tc}};
}

std::vector<int> tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> ids(n);
  for (auto& v : ids) v = static_cast<int>(rng() % 11);
  return ids;
}

}  // namespace

TEST(Model, UntiedCopiesGiveBitwiseIdenticalOutput) {
  for (const auto& v : variants()) {
    for (auto mode : {mor::kv::KvMode::RecursionWise, mor::kv::KvMode::RecursiveSharing, mor::kv::KvMode::Hybrid}) {
      m::Model model(mor::testing::tiny_config(v.sharing, v.layers, v.n_r, mode), v.router, 9);
      auto untied = model.untied();
      EXPECT_GT(untied.parameters().size(), model.parameters().size() - (v.sharing == Sharing::None ? 1 : 0));
      const auto ids = tokens(13, 4);
      auto a = model.forward(ids).logits;
      auto b = untied.forward(ids).logits;
      for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
    }
  }
}

TEST(Model, ExpertChoiceMasksNestAndMeetCapacity) {
  m::Model model(mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3), mor::testing::spread_expert_choice(), 3);
  const auto ids = tokens(30, 5);
  auto r = model.forward(ids);
  EXPECT_TRUE(r.routing.nested());
  EXPECT_EQ(r.routing.column_count(0), 30u);
  EXPECT_EQ(r.routing.column_count(1), 20u);
  EXPECT_EQ(r.routing.column_count(2), 10u);
}

TEST(Model, TokenChoiceHistogramSumsToLength) {
  m::Model model(mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3), mor::routing::token_choice_defaults(), 3);
  auto r = model.forward(tokens(17, 6));
  auto h = r.routing.depth_histogram();
  EXPECT_EQ(h[0], 0u);
  EXPECT_EQ(std::accumulate(h.begin(), h.end(), std::size_t{0}), 17u);
  EXPECT_TRUE(r.routing.nested());
  EXPECT_DOUBLE_EQ(std::accumulate(r.expert_counts.begin(), r.expert_counts.end(), 0.0), 17.0);
}

TEST(Model, LossFreeBiasOnlyMovesAssignment) {
  auto rc = mor::routing::token_choice_defaults();
  rc.lossfree = true;
  m::Model model(mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3), rc, 3);
  const auto ids = tokens(12, 7);
  auto before = model.forward(ids);
  model.lossfree_bias() = {0.0, 0.0, 50.0};
  auto after = model.forward(ids);
  EXPECT_EQ(before.routing.scores, after.routing.scores);
  for (std::size_t tk = 0; tk < 12; ++tk) EXPECT_EQ(after.routing.depth_of(tk), 3u);
}

TEST(Model, DepthClampAtFullDepthIsExact) {
  m::Model model(mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3), mor::testing::spread_expert_choice(), 3);
  const auto ids = tokens(9, 8);
  m::ForwardOptions clamp;
  clamp.depth_clamp = 3;
  auto a = model.forward(ids).logits;
  auto b = model.forward(ids, clamp).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
}

TEST(Model, AuxRouterLossLeavesMainRouterUntouched) {
  auto rc = mor::testing::spread_expert_choice();
  rc.aux_scheme = mor::routing::AuxScheme::AuxRouter;
  m::Model model(mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3), rc, 3);
  auto r = model.forward(tokens(12, 9));
  r.aux_router_bce.backward();
  for (auto& [name, p] : model.named_parameters()) {
    const bool aux = name.rfind("aux_routers.", 0) == 0;
    double norm = 0.0;
    if (p.has_grad())
      for (double g : p.grad()) norm += std::abs(g);
    if (aux) {
      EXPECT_GT(norm, 0.0) << name;
    } else {
      EXPECT_EQ(norm, 0.0) << name;
    }
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto rc = mor::routing::token_choice_defaults();
  rc.lossfree = true;
  m::Model model(mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3, mor::kv::KvMode::Hybrid), rc, 21);
  model.lossfree_bias() = {0.25, -0.5, 0.0};
  const auto path = (std::filesystem::temp_directory_path() / "mor_ckpt_roundtrip.bin").string();
  m::save_checkpoint(model, path);
  auto loaded = m::load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(loaded.lossfree_bias(), model.lossfree_bias());
  const auto ids = tokens(10, 10);
  auto a = model.forward(ids).logits, b = loaded.forward(ids).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
}

TEST(Checkpoint, RejectsForeignFiles) {
  const auto path = (std::filesystem::temp_directory_path() / "mor_not_ckpt.bin").string();
  { std::ofstream(path) << "hello"; }
  EXPECT_THROW(m::load_checkpoint(path), mor::FormatError);
  std::filesystem::remove(path);
}

class DecodeEquivalence : public ::testing::TestWithParam<int> {};

TEST_P(DecodeEquivalence, StepwiseLogitsMatchTeacherForcing) {
  const auto mode = static_cast<mor::kv::KvMode>(GetParam());
  for (const auto& v : variants()) {
    m::Model model(mor::testing::tiny_config(v.sharing, v.layers, v.n_r, mode), v.router, 31);
    mor::testing::widen_routers(model, 60.0);
    const auto policy = v.router.family == mor::routing::Family::ExpertChoice
                            ? (v.router.aux_scheme == mor::routing::AuxScheme::AuxRouter
                                   ? m::SelectionPolicy::AuxPredictor
                                   : m::SelectionPolicy::Threshold)
                            : m::SelectionPolicy::TopK;
    const auto ids = tokens(24, 11);
    m::DecodeSession session(model, policy);
    std::span<const int> all(ids);
    auto pre = session.prefill(all.first(6));
    std::vector<double> got(pre.data().begin(), pre.data().end());
    for (std::size_t i = 6; i < ids.size(); ++i) {
      auto row = session.step(ids[i]);
      got.insert(got.end(), row.begin(), row.end());
    }
    m::ForwardOptions opts;
    opts.policy = policy;
    auto ref = model.forward(ids, opts);
    ASSERT_EQ(got.size(), ref.logits.numel());
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], ref.logits.data()[i], 1e-9);
    for (std::size_t tk = 0; tk < ids.size(); ++tk) EXPECT_EQ(session.depths()[tk], ref.routing.depth_of(tk));
    if (v.router.family != mor::routing::Family::None) {
      auto h = ref.routing.depth_histogram();
      EXPECT_GE(std::count_if(h.begin(), h.end(), [](std::size_t c) { return c > 0; }), 2)
          << "routing should exit tokens at more than one depth";
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, DecodeEquivalence, ::testing::Values(0, 1, 2));

TEST(DecodeSession, TopKExpertChoiceIsRejected) {
  m::Model model(mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3), mor::testing::spread_expert_choice(), 1);
  EXPECT_THROW(m::DecodeSession(model, m::SelectionPolicy::TopK), mor::ConfigError);
}

TEST(DecodeSession, RecursionWiseReadVolumeMatchesRecount) {
  m::Model model(mor::testing::tiny_config(Sharing::MiddleCycle, 5, 3), mor::testing::spread_expert_choice(), 41);
  mor::testing::widen_routers(model, 60.0);
  const auto ids = tokens(32, 12);
  m::DecodeSession session(model, m::SelectionPolicy::Threshold);
  for (int id : ids) session.step(id);
  const auto& cache = session.caches().segment[0];
  m::ForwardOptions opts;
  opts.policy = m::SelectionPolicy::Threshold;
  auto mask = model.forward(ids, opts).routing;
  for (std::size_t r = 0; r < 3; ++r) {
    std::size_t expect = 0;
    for (std::size_t q = 0; q < 32; ++q) {
      if (!mask.is_selected(q, r)) continue;
      for (std::size_t k = 0; k <= q; ++k) expect += mask.is_selected(k, r);
    }
    EXPECT_EQ(cache.reads(r + 1), expect) << "depth " << r + 1;
    EXPECT_EQ(cache.entries(r + 1), mask.column_count(r));
  }
}

TEST(ModelGradient, CrossEntropyMatchesFiniteDifferences) {
  for (const auto& v : variants()) {
    m::Model model(mor::testing::tiny_config(v.sharing, v.layers, v.n_r), v.router, 51);
    mor::testing::widen_routers(model, 20.0);
    const auto ids = tokens(7, 13);
    std::vector<int> next(ids.begin() + 1, ids.end());
    next.push_back(ids.front());
    auto loss = [&](const std::vector<Tensor>&) { return t::softmax_cross_entropy(model.forward(ids).logits, next); };
    // Whole-model differences: 1e-4 balances truncation against roundoff on
    // the weakest gradients (query/key weights under near-uniform attention).
    auto res = mor::testing::check_gradients(loss, model.parameters(), 1e-4);
    EXPECT_LT(res.max_rel_err, 1e-5) << m::sharing_name(v.sharing) << " "
                                     << mor::routing::family_name(v.router.family);
  }
}
