#include "mor/model/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>

#include "mor/errors.hpp"
#include "mor/model/config_text.hpp"

namespace mor::model {

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'O', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open '" + path + "' for writing");
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <typename U>
  void le(U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, sizeof(U));
  }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void f32(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    le(u);
  }
  void finish(const std::string& path) {
    out_.flush();
    if (!out_) throw FormatError("write to '" + path + "' failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open checkpoint '" + path + "'");
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("checkpoint truncated");
  }
  template <typename U>
  U le() {
    unsigned char b[sizeof(U)];
    bytes(b, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
  }
  std::string str(std::size_t limit) {
    const auto n = le<std::uint32_t>();
    if (n > limit) throw FormatError("checkpoint string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  float f32() {
    const auto u = le<std::uint32_t>();
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }

 private:
  std::ifstream in_;
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  if (model.schedule() != build_layer_schedule(model.config()).blocks) {
    throw FormatError("only models with their configured sharing schedule can be saved");
  }
  auto tensors = model.named_parameters();
  if (!model.lossfree_bias().empty()) {
    const auto& b = model.lossfree_bias();
    tensors.emplace_back("router.bias", tensor::Tensor::from({b.size()}, b));
  }
  Writer w(path);
  w.bytes(kMagic.data(), kMagic.size());
  w.le(kVersion);
  w.str(model_config_text(model.config(), model.router_config()));
  w.le(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.le(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.le(static_cast<std::uint64_t>(e));
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
  w.finish(path);
}

Model load_checkpoint(const std::string& path) {
  Reader r(path);
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kMagic) throw FormatError("'" + path + "' is not a checkpoint");
  if (const auto v = r.le<std::uint32_t>(); v != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  }
  ModelConfig cfg;
  routing::RouterConfig router;
  for (const auto& [k, v] : parse_key_values(r.str(1 << 20))) {
    if (!apply_model_key(cfg, k, v) && !apply_router_key(router, k, v)) {
      throw FormatError("unknown key '" + k + "' in checkpoint header");
    }
  }
  Model model(cfg, router, 0);
  std::map<std::string, tensor::Tensor> slots;
  for (auto& [name, t] : model.named_parameters()) slots.emplace(name, t);
  std::vector<double>* bias = model.lossfree_bias().empty() ? nullptr : &model.lossfree_bias();

  const auto count = r.le<std::uint32_t>();
  std::size_t filled = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(4096);
    const auto rank = r.le<std::uint32_t>();
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank");
    tensor::Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.le<std::uint64_t>());
    std::vector<double> values(tensor::numel_of(shape));
    for (auto& v : values) v = static_cast<double>(r.f32());

    if (name == "router.bias" && bias != nullptr) {
      if (values.size() != bias->size()) throw FormatError("router.bias has the wrong length");
      *bias = std::move(values);
      continue;
    }
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("unexpected tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw FormatError("tensor '" + name + "' has shape " + tensor::shape_str(shape) + ", expected " +
                        tensor::shape_str(it->second.shape()));
    }
    auto dst = it->second.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
    ++filled;
  }
  if (filled != slots.size()) throw FormatError("checkpoint is missing tensors");
  return model;
}

}  // namespace mor::model
