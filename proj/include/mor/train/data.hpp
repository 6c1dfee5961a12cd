#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace mor::train {

// Bytes map to ids 0..255; 256 separates documents, 257 pads.
struct ByteTokenizer {
  static constexpr int kSeparator = 256;
  static constexpr int kPad = 257;
  static constexpr std::size_t kVocab = 258;

  static std::vector<int> encode(std::string_view text);
  static std::string decode(const std::vector<int>& ids);  // specials are dropped
  static std::string token_text(int id);                    // printable form of one id
};

// Deterministic English-like text built from a small grammar plus
// arithmetic facts, so that some bytes are predictable from spelling and
// others need context. Documents are separated by blank lines.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

std::vector<std::string> split_documents(std::string_view text);

struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<std::vector<int>> inputs;   // size x seq_len
  std::vector<std::vector<int>> targets;  // inputs shifted left by one
  std::vector<std::size_t> starts;        // stream offset of each window, when known
};

// Token stream of separator-prefixed documents cut into windows of
// seq_len + 1 ids. The trailing `eval_fraction` of windows is held out.
class Corpus {
 public:
  Corpus(std::string_view text, std::size_t seq_len, double eval_fraction);

  std::size_t seq_len() const { return seq_len_; }
  std::size_t train_windows() const { return train_.size(); }
  std::size_t eval_windows() const { return eval_.size(); }
  std::size_t token_count() const { return stream_.size(); }

  // First n held-out windows (all if n exceeds the count), in order.
  Batch eval_batch(std::size_t n) const;
  Batch window_batch(const std::vector<std::size_t>& starts) const;

  const std::vector<std::size_t>& train_starts() const { return train_; }

 private:
  std::size_t seq_len_;
  std::vector<int> stream_;
  std::vector<std::size_t> train_, eval_;
};

// Visits training windows in a seeded permutation, reshuffling each epoch.
class Batcher {
 public:
  Batcher(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed);
  Batch next();

 private:
  void reshuffle();

  const Corpus& corpus_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace mor::train
