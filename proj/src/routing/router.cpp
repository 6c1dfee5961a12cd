#include "mor/routing/router.hpp"

#include <string>

#include "mor/errors.hpp"
#include "mor/tensor/init.hpp"
#include "mor/tensor/ops.hpp"

namespace mor::routing {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const E (&all)[N], std::string_view (*name)(E), const char* what) {
  for (E e : all) {
    if (name(e) == s) return e;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

constexpr double kInitStd = 0.02;

}  // namespace

std::string_view family_name(Family f) {
  switch (f) {
    case Family::None:
      return "none";
    case Family::ExpertChoice:
      return "expert-choice";
    case Family::TokenChoice:
      return "token-choice";
  }
  return "?";
}

Family parse_family(std::string_view s) {
  static constexpr Family all[] = {Family::None, Family::ExpertChoice, Family::TokenChoice};
  return parse_enum(s, all, family_name, "router family");
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::Sigmoid:
      return "sigmoid";
    case Activation::Tanh:
      return "tanh";
    case Activation::Softmax:
      return "softmax";
  }
  return "?";
}

Activation parse_activation(std::string_view s) {
  static constexpr Activation all[] = {Activation::Sigmoid, Activation::Tanh, Activation::Softmax};
  return parse_enum(s, all, activation_name, "router activation");
}

std::string_view head_name(HeadArch h) {
  switch (h) {
    case HeadArch::Linear:
      return "linear";
    case HeadArch::Mlp:
      return "mlp";
    case HeadArch::WideMlp:
      return "wide-mlp";
  }
  return "?";
}

HeadArch parse_head(std::string_view s) {
  static constexpr HeadArch all[] = {HeadArch::Linear, HeadArch::Mlp, HeadArch::WideMlp};
  return parse_enum(s, all, head_name, "router head");
}

std::string_view aux_scheme_name(AuxScheme a) { return a == AuxScheme::AuxLoss ? "aux-loss" : "aux-router"; }

AuxScheme parse_aux_scheme(std::string_view s) {
  static constexpr AuxScheme all[] = {AuxScheme::AuxLoss, AuxScheme::AuxRouter};
  return parse_enum(s, all, aux_scheme_name, "aux scheme");
}

RouterConfig expert_choice_defaults() {
  RouterConfig c;
  c.family = Family::ExpertChoice;
  c.activation = Activation::Sigmoid;
  c.head = HeadArch::Linear;
  c.alpha = 0.1;
  c.aux_scheme = AuxScheme::AuxLoss;
  c.aux_coeff = 0.001;
  return c;
}

RouterConfig token_choice_defaults() {
  RouterConfig c;
  c.family = Family::TokenChoice;
  c.activation = Activation::Softmax;
  c.head = HeadArch::Linear;
  c.alpha = 1.0;
  c.aux_coeff = 0.0;
  c.balance_coeff = 0.1;
  c.zloss_coeff = 1e-3;
  return c;
}

void validate(const RouterConfig& cfg) {
  if (cfg.family == Family::ExpertChoice && cfg.activation == Activation::Softmax) {
    throw ConfigError("expert-choice routers need a scalar activation (sigmoid or tanh)");
  }
  if (cfg.family == Family::TokenChoice && cfg.activation == Activation::Tanh) {
    throw ConfigError("token-choice routers need softmax or sigmoid");
  }
  if (cfg.aux_coeff < 0 || cfg.balance_coeff < 0 || cfg.zloss_coeff < 0 || cfg.lossfree_rate < 0) {
    throw ConfigError("router coefficients must be non-negative");
  }
}

Tensor RouterHead::logits(const Tensor& x) const {
  if (arch == HeadArch::Linear) return tensor::matmul(x, w1);
  return tensor::matmul(tensor::gelu(tensor::matmul(x, w1)), w2);
}

std::vector<Tensor> RouterHead::parameters() const {
  if (arch == HeadArch::Linear) return {w1};
  return {w1, w2};
}

std::size_t RouterHead::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

std::size_t router_head_parameter_count(HeadArch arch, std::size_t d_in, std::size_t d_out) {
  switch (arch) {
    case HeadArch::Linear:
      return d_in * d_out;
    case HeadArch::Mlp:
      return d_in * d_in + d_in * d_out;
    case HeadArch::WideMlp:
      return d_in * 4 * d_in + 4 * d_in * d_out;
  }
  return 0;
}

RouterHead make_router_head(HeadArch arch, std::size_t d_in, std::size_t d_out, std::mt19937_64& rng) {
  RouterHead h;
  h.arch = arch;
  if (arch == HeadArch::Linear) {
    h.w1 = tensor::trunc_normal({d_in, d_out}, kInitStd, rng);
    return h;
  }
  const std::size_t hidden = arch == HeadArch::Mlp ? d_in : 4 * d_in;
  h.w1 = tensor::trunc_normal({d_in, hidden}, kInitStd, rng);
  h.w2 = tensor::trunc_normal({hidden, d_out}, kInitStd, rng);
  return h;
}

}  // namespace mor::routing
