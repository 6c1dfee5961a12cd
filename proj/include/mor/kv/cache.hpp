#pragma once

// Per-layer key/value storage indexed by recursion depth.
//
// RecursionWise: depth r holds exactly the tokens selected at r.
// RecursiveSharing: only depth 1 is populated; every depth reads it.
// Hybrid: depth 1 holds every token; depth r additionally holds fresh
// entries for tokens selected at r, which shadow their depth-1 entries.
//
// Token indices double as absolute positions and are strictly increasing
// within each depth store. Stores are append-only.

#include <cstddef>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace mor::kv {

enum class KvMode { RecursionWise, RecursiveSharing, Hybrid };

std::string_view mode_name(KvMode mode);
KvMode parse_mode(std::string_view name);

struct KvView {
  std::vector<int> tokens;
  std::vector<double> keys;    // tokens.size() x width, row-major
  std::vector<double> values;  // tokens.size() x width
};

class KvCache {
 public:
  KvCache(KvMode mode, std::size_t depths, std::size_t width);

  KvMode mode() const { return mode_; }
  std::size_t depths() const { return stores_.size(); }
  std::size_t width() const { return width_; }

  // Depths are 1-based. Throws CacheConsistencyError when token does not
  // exceed the last token already stored at that depth, and IndexError on
  // a depth the mode never writes.
  void append(std::size_t depth, int token, const double* key, const double* value);

  // Keys visible to `query_token` at `depth` under the mode's rules, cut
  // causally at the query. Increments the read counter of `depth` by the
  // number of returned entries.
  KvView attend_view(std::size_t depth, int query_token);

  // Depth whose store must contain a token processed at `depth`.
  std::size_t governing_depth(std::size_t depth) const;
  bool contains(std::size_t depth, int token) const;
  const std::vector<int>& tokens(std::size_t depth) const;

  std::size_t entries(std::size_t depth) const;
  std::size_t total_entries() const;
  std::size_t reads(std::size_t depth) const;
  void add_reads(std::size_t depth, std::size_t count);
  // Number of distinct positions seen by this cache.
  std::size_t tokens_seen() const;

  // {"mode", "depths":[{"depth","entries","reads"}...], "total_entries",
  //  "ratio_vs_vanilla"}; the vanilla reference stores every seen token at
  // every depth.
  nlohmann::json stats() const;

 private:
  struct Store {
    std::vector<int> tokens;
    std::vector<double> keys;
    std::vector<double> values;
    std::size_t reads = 0;
  };

  const Store& store(std::size_t depth) const;
  Store& store(std::size_t depth);
  std::size_t find(const Store& s, int token) const;  // npos if absent

  KvMode mode_;
  std::size_t width_;
  std::vector<Store> stores_;
};

}  // namespace mor::kv
