#include "mor/kv/cache.hpp"

#include <algorithm>
#include <string>

#include "mor/errors.hpp"

namespace mor::kv {

namespace {
constexpr std::size_t npos = static_cast<std::size_t>(-1);
}

std::string_view mode_name(KvMode mode) {
  switch (mode) {
    case KvMode::RecursionWise:
      return "recursion-wise";
    case KvMode::RecursiveSharing:
      return "recursive-sharing";
    case KvMode::Hybrid:
      return "hybrid";
  }
  return "?";
}

KvMode parse_mode(std::string_view name) {
  if (name == "recursion-wise") return KvMode::RecursionWise;
  if (name == "recursive-sharing") return KvMode::RecursiveSharing;
  if (name == "hybrid") return KvMode::Hybrid;
  throw ConfigError("unknown kv mode '" + std::string(name) +
                    "' (expected recursion-wise, recursive-sharing or hybrid)");
}

KvCache::KvCache(KvMode mode, std::size_t depths, std::size_t width)
    : mode_(mode), width_(width), stores_(depths) {
  if (depths == 0) throw ConfigError("KvCache needs at least one depth");
  if (width == 0) throw ConfigError("KvCache width must be positive");
}

const KvCache::Store& KvCache::store(std::size_t depth) const {
  if (depth == 0 || depth > stores_.size()) {
    throw IndexError("kv depth " + std::to_string(depth) + " outside [1, " +
                     std::to_string(stores_.size()) + "]");
  }
  return stores_[depth - 1];
}

KvCache::Store& KvCache::store(std::size_t depth) {
  return const_cast<Store&>(static_cast<const KvCache&>(*this).store(depth));
}

std::size_t KvCache::find(const Store& s, int token) const {
  auto it = std::lower_bound(s.tokens.begin(), s.tokens.end(), token);
  if (it == s.tokens.end() || *it != token) return npos;
  return static_cast<std::size_t>(it - s.tokens.begin());
}

std::size_t KvCache::governing_depth(std::size_t depth) const {
  store(depth);
  return mode_ == KvMode::RecursiveSharing ? 1 : depth;
}

void KvCache::append(std::size_t depth, int token, const double* key, const double* value) {
  if (mode_ == KvMode::RecursiveSharing && depth != 1) {
    throw IndexError("recursive-sharing caches only store depth 1");
  }
  Store& s = store(depth);
  if (!s.tokens.empty() && token <= s.tokens.back()) {
    throw CacheConsistencyError("kv append out of order at depth " + std::to_string(depth) +
                                ": token " + std::to_string(token) + " after " +
                                std::to_string(s.tokens.back()));
  }
  s.tokens.push_back(token);
  s.keys.insert(s.keys.end(), key, key + width_);
  s.values.insert(s.values.end(), value, value + width_);
}

KvView KvCache::attend_view(std::size_t depth, int query_token) {
  const std::size_t gov = governing_depth(depth);
  if (find(store(gov), query_token) == npos) {
    throw CacheConsistencyError("query token " + std::to_string(query_token) +
                                " missing from depth-" + std::to_string(gov) + " store");
  }
  KvView view;
  auto take = [&](const Store& s, std::size_t i) {
    view.tokens.push_back(s.tokens[i]);
    view.keys.insert(view.keys.end(), s.keys.begin() + i * width_, s.keys.begin() + (i + 1) * width_);
    view.values.insert(view.values.end(), s.values.begin() + i * width_,
                       s.values.begin() + (i + 1) * width_);
  };

  if (mode_ == KvMode::Hybrid && depth > 1) {
    const Store& base = store(1);
    const Store& fresh = store(depth);
    for (std::size_t i = 0; i < base.tokens.size() && base.tokens[i] <= query_token; ++i) {
      const std::size_t j = find(fresh, base.tokens[i]);
      if (j == npos) {
        take(base, i);
      } else {
        take(fresh, j);
      }
    }
  } else {
    const Store& s = store(gov);
    for (std::size_t i = 0; i < s.tokens.size() && s.tokens[i] <= query_token; ++i) take(s, i);
  }
  store(depth).reads += view.tokens.size();
  return view;
}

bool KvCache::contains(std::size_t depth, int token) const { return find(store(depth), token) != npos; }

const std::vector<int>& KvCache::tokens(std::size_t depth) const { return store(depth).tokens; }

std::size_t KvCache::entries(std::size_t depth) const { return store(depth).tokens.size(); }

std::size_t KvCache::total_entries() const {
  std::size_t n = 0;
  for (const auto& s : stores_) n += s.tokens.size();
  return n;
}

std::size_t KvCache::reads(std::size_t depth) const { return store(depth).reads; }

void KvCache::add_reads(std::size_t depth, std::size_t count) { store(depth).reads += count; }

std::size_t KvCache::tokens_seen() const {
  int last = -1;
  for (const auto& s : stores_) {
    if (!s.tokens.empty()) last = std::max(last, s.tokens.back());
  }
  return static_cast<std::size_t>(last + 1);
}

nlohmann::json KvCache::stats() const {
  nlohmann::json j;
  j["mode"] = std::string(mode_name(mode_));
  j["depths"] = nlohmann::json::array();
  for (std::size_t d = 1; d <= stores_.size(); ++d) {
    j["depths"].push_back({{"depth", d}, {"entries", entries(d)}, {"reads", reads(d)}});
  }
  j["total_entries"] = total_entries();
  const std::size_t seen = tokens_seen();
  j["ratio_vs_vanilla"] =
      seen == 0 ? 0.0
                : static_cast<double>(total_entries()) / static_cast<double>(seen * stores_.size());
  return j;
}

}  // namespace mor::kv
