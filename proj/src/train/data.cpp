#include "mor/train/data.hpp"

#include <algorithm>
#include <array>
#include <cstdio>

#include "mor/errors.hpp"

namespace mor::train {

std::vector<int> ByteTokenizer::encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string ByteTokenizer::decode(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

std::string ByteTokenizer::token_text(int id) {
  if (id == kSeparator) return "<sep>";
  if (id == kPad) return "<pad>";
  if (id < 0 || id >= static_cast<int>(kVocab)) throw IndexError("token id " + std::to_string(id) + " out of range");
  if (id == '\n') return "\\n";
  if (id >= 0x20 && id < 0x7f) return std::string(1, static_cast<char>(id));
  char buf[8];
  std::snprintf(buf, sizeof buf, "\\x%02x", id);
  return buf;
}

namespace {

constexpr std::array kNouns{"cat",    "dog",    "river",  "teacher", "garden", "machine", "window", "student",
                            "forest", "signal", "planet", "market",  "engine", "letter",  "bridge", "doctor"};
constexpr std::array kAdjectives{"small", "bright", "quiet", "heavy", "old", "green", "strange", "careful", "distant"};
constexpr std::array kVerbs{"sees", "follows", "builds", "finds", "moves", "repairs", "watches", "carries", "opens"};
constexpr std::array kAdverbs{"slowly", "quickly", "often", "rarely", "again"};
constexpr std::array kPlaces{"near the station", "in the morning", "after the rain", "by the sea", "at night"};

class Grammar {
 public:
  explicit Grammar(std::uint64_t seed) : rng_(seed) {}

  std::string document() {
    std::string doc;
    const std::size_t n = 3 + pick(6);
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0) doc += ' ';
      doc += pick(5) == 0 ? arithmetic() : sentence(0);
    }
    return doc;
  }

 private:
  std::size_t pick(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }
  template <class A>
  const char* pick_from(const A& a) {
    return a[pick(a.size())];
  }

  std::string noun_phrase() {
    std::string np = pick(2) == 0 ? "the " : "a ";
    if (pick(2) == 0) np += std::string(pick_from(kAdjectives)) + " ";
    return np + pick_from(kNouns);
  }

  std::string clause(int nesting) {
    std::string s = noun_phrase() + " " + pick_from(kVerbs) + " " + noun_phrase();
    if (pick(3) == 0) s += std::string(" ") + pick_from(kAdverbs);
    if (pick(4) == 0) s += std::string(" ") + pick_from(kPlaces);
    if (nesting < 2 && pick(4) == 0) s += " that " + clause(nesting + 1);
    return s;
  }

  std::string sentence(int nesting) {
    std::string s = clause(nesting);
    s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s + ".";
  }

  std::string arithmetic() {
    const std::size_t a = pick(50), b = pick(50);
    return std::to_string(a) + " plus " + std::to_string(b) + " is " + std::to_string(a + b) + ".";
  }

  std::mt19937_64 rng_;
};

}  // namespace

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  Grammar g(seed);
  std::string out;
  out.reserve(bytes + 512);
  while (out.size() < bytes) {
    if (!out.empty()) out += "\n\n";
    out += g.document();
  }
  out.resize(bytes);
  return out;
}

std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = text.find("\n\n", start);
    const std::string_view doc = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    if (!doc.empty()) docs.emplace_back(doc);
    if (end == std::string_view::npos) break;
    start = end + 2;
    while (start < text.size() && text[start] == '\n') ++start;
  }
  return docs;
}

Corpus::Corpus(std::string_view text, std::size_t seq_len, double eval_fraction) : seq_len_(seq_len) {
  if (seq_len == 0) throw ConfigError("corpus: seq_len must be positive");
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) throw ConfigError("corpus: eval_fraction must lie in [0, 1)");
  for (const auto& doc : split_documents(text)) {
    stream_.push_back(ByteTokenizer::kSeparator);
    const auto ids = ByteTokenizer::encode(doc);
    stream_.insert(stream_.end(), ids.begin(), ids.end());
  }
  if (stream_.size() < seq_len + 1) throw ConfigError("corpus: text shorter than one window");
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + seq_len + 1 <= stream_.size(); s += seq_len) starts.push_back(s);
  const auto n_eval = static_cast<std::size_t>(eval_fraction * static_cast<double>(starts.size()));
  if (n_eval >= starts.size()) throw ConfigError("corpus: no training windows left after the eval split");
  train_.assign(starts.begin(), starts.end() - static_cast<std::ptrdiff_t>(n_eval));
  eval_.assign(starts.end() - static_cast<std::ptrdiff_t>(n_eval), starts.end());
}

Batch Corpus::window_batch(const std::vector<std::size_t>& starts) const {
  Batch b;
  b.size = starts.size();
  b.seq_len = seq_len_;
  b.starts = starts;
  for (std::size_t s : starts) {
    if (s + seq_len_ + 1 > stream_.size()) throw IndexError("corpus: window start out of range");
    b.inputs.emplace_back(stream_.begin() + static_cast<std::ptrdiff_t>(s),
                          stream_.begin() + static_cast<std::ptrdiff_t>(s + seq_len_));
    b.targets.emplace_back(stream_.begin() + static_cast<std::ptrdiff_t>(s + 1),
                           stream_.begin() + static_cast<std::ptrdiff_t>(s + seq_len_ + 1));
  }
  return b;
}

Batch Corpus::eval_batch(std::size_t n) const {
  std::vector<std::size_t> starts(eval_.begin(), eval_.begin() + static_cast<std::ptrdiff_t>(std::min(n, eval_.size())));
  return window_batch(starts);
}

Batcher::Batcher(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed)
    : corpus_(corpus), batch_size_(batch_size), rng_(seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  reshuffle();
}

void Batcher::reshuffle() {
  order_.resize(corpus_.train_windows());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  // Fisher-Yates with modulo draws keeps the order identical across standard libraries.
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
  cursor_ = 0;
}

Batch Batcher::next() {
  std::vector<std::size_t> starts;
  while (starts.size() < batch_size_) {
    if (cursor_ == order_.size()) reshuffle();
    starts.push_back(corpus_.train_starts()[order_[cursor_++]]);
  }
  return corpus_.window_batch(starts);
}

}  // namespace mor::train
