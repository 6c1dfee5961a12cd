#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <boost/rational.hpp>

#include "mor/tensor/tensor.hpp"

namespace mor::routing {

using Fraction = boost::rational<std::int64_t>;
using tensor::Tensor;

enum class Family { None, ExpertChoice, TokenChoice };
enum class Activation { Sigmoid, Tanh, Softmax };
enum class HeadArch { Linear, Mlp, WideMlp };
enum class AuxScheme { AuxLoss, AuxRouter };

std::string_view family_name(Family f);
Family parse_family(std::string_view s);
std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view s);
std::string_view head_name(HeadArch h);
HeadArch parse_head(std::string_view s);
std::string_view aux_scheme_name(AuxScheme a);
AuxScheme parse_aux_scheme(std::string_view s);

struct RouterConfig {
  Family family = Family::None;
  Activation activation = Activation::Sigmoid;
  HeadArch head = HeadArch::Linear;
  double alpha = 0.1;  // gate = alpha * activation(logit)
  AuxScheme aux_scheme = AuxScheme::AuxLoss;
  double aux_coeff = 0.001;
  double balance_coeff = 0.0;
  double zloss_coeff = 0.0;
  bool lossfree = false;
  double lossfree_rate = 0.001;
  double inference_threshold = 0.5;
};

RouterConfig expert_choice_defaults();
RouterConfig token_choice_defaults();

// Throws ConfigError on an inconsistent family/activation pairing or a
// negative coefficient.
void validate(const RouterConfig& cfg);

// Router network: logits = head(x). Linear is a single projection; Mlp and
// WideMlp add a GELU hidden layer of width d_in and 4*d_in.
struct RouterHead {
  HeadArch arch = HeadArch::Linear;
  Tensor w1;
  Tensor w2;  // undefined for Linear

  Tensor logits(const Tensor& x) const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
};

RouterHead make_router_head(HeadArch arch, std::size_t d_in, std::size_t d_out, std::mt19937_64& rng);
std::size_t router_head_parameter_count(HeadArch arch, std::size_t d_in, std::size_t d_out);

}  // namespace mor::routing
