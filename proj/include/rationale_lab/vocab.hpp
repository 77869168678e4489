#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rationale_lab/error.hpp"
#include "rationale_lab/hash.hpp"

namespace rlab {

// Subword inventory. Every single character the tokenizer may meet must be
// present; learned vocabularies always carry printable ASCII.
class SubwordVocab {
 public:
  SubwordVocab() = default;
  explicit SubwordVocab(std::vector<std::string> tokens) {
    for (auto& t : tokens) add(std::move(t));
  }

  int add(std::string token) {
    if (token.empty()) throw InputError("empty subword token");
    auto [it, inserted] = index_.try_emplace(token, static_cast<int>(tokens_.size()));
    if (inserted) {
      max_len_ = std::max(max_len_, token.size());
      tokens_.push_back(std::move(token));
    }
    return it->second;
  }

  int find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? -1 : it->second;
  }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  std::size_t max_token_length() const { return max_len_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::uint64_t fingerprint() const {
    Fnv1a h;
    for (const auto& t : tokens_) {
      h.update(t);
      h.update(std::string_view("\n"));
    }
    return h.digest();
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static SubwordVocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read vocabulary file " + path);
    SubwordVocab v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) v.add(line);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t max_len_ = 0;
};

namespace detail {

struct PairHash {
  std::size_t operator()(const std::pair<int, int>& p) const noexcept {
    return std::hash<std::uint64_t>{}((static_cast<std::uint64_t>(static_cast<std::uint32_t>(p.first)) << 32) |
                                      static_cast<std::uint32_t>(p.second));
  }
};

}  // namespace detail

// Learn a vocabulary by iterative most-frequent-pair merging over a word
// frequency table, stopping at `target_size` tokens or when no pair occurs
// twice. Tokens are returned ordered by descending frequency under greedy
// segmentation of the training words (ties by string).
inline SubwordVocab learn_vocab(const std::map<std::string, std::uint64_t>& word_counts,
                                std::size_t target_size = 8000) {
  std::vector<std::string> symbols;
  std::unordered_map<std::string, int> symbol_id;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = symbol_id.try_emplace(s, static_cast<int>(symbols.size()));
    if (inserted) symbols.push_back(s);
    return it->second;
  };
  for (int c = 0x21; c < 0x7f; ++c) intern(std::string(1, static_cast<char>(c)));

  struct Word {
    std::vector<int> syms;
    std::int64_t freq;
  };
  std::vector<Word> words;
  for (const auto& [w, f] : word_counts) {
    if (w.empty() || f == 0) continue;
    Word wd{{}, static_cast<std::int64_t>(f)};
    for (char c : w) wd.syms.push_back(intern(std::string(1, c)));
    words.push_back(std::move(wd));
  }

  using Pair = std::pair<int, int>;
  std::unordered_map<Pair, std::int64_t, detail::PairHash> counts;
  std::unordered_map<Pair, std::set<std::size_t>, detail::PairHash> where;
  // Ordered by (-count, left string, right string) so the best pair is first.
  auto cmp = [&](const std::pair<std::int64_t, Pair>& a, const std::pair<std::int64_t, Pair>& b) {
    if (a.first != b.first) return a.first > b.first;
    const auto& la = symbols[static_cast<std::size_t>(a.second.first)];
    const auto& lb = symbols[static_cast<std::size_t>(b.second.first)];
    if (la != lb) return la < lb;
    return symbols[static_cast<std::size_t>(a.second.second)] < symbols[static_cast<std::size_t>(b.second.second)];
  };
  std::set<std::pair<std::int64_t, Pair>, decltype(cmp)> queue(cmp);

  auto adjust = [&](const Pair& p, std::int64_t delta, std::size_t wi) {
    auto& c = counts[p];
    if (c > 0) queue.erase({c, p});
    c += delta;
    if (c > 0) {
      queue.insert({c, p});
    } else {
      counts.erase(p);
    }
    if (delta > 0) where[p].insert(wi);
  };
  auto contribute = [&](std::size_t wi, int sign) {
    const auto& w = words[wi];
    for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
      adjust({w.syms[i], w.syms[i + 1]}, sign * w.freq, wi);
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) contribute(wi, +1);

  while (symbols.size() < target_size && !queue.empty()) {
    const auto [count, best] = *queue.begin();
    if (count < 2) break;
    const int merged = intern(symbols[static_cast<std::size_t>(best.first)] +
                              symbols[static_cast<std::size_t>(best.second)]);
    const auto affected = where[best];
    where.erase(best);
    for (std::size_t wi : affected) {
      auto& syms = words[wi].syms;
      bool has = false;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        if (syms[i] == best.first && syms[i + 1] == best.second) {
          has = true;
          break;
        }
      }
      if (!has) continue;
      contribute(wi, -1);
      std::vector<int> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == best.first && syms[i + 1] == best.second) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(syms[i]);
          ++i;
        }
      }
      syms = std::move(next);
      contribute(wi, +1);
    }
  }

  // Frequency ordering under greedy longest-match segmentation.
  SubwordVocab unordered(symbols);
  std::vector<std::uint64_t> freq(symbols.size(), 0);
  const std::size_t longest = unordered.max_token_length();
  for (const auto& [w, f] : word_counts) {
    std::size_t pos = 0;
    while (pos < w.size()) {
      std::size_t len = std::min(longest, w.size() - pos);
      int id = -1;
      for (; len > 0; --len) {
        id = unordered.find(std::string_view(w).substr(pos, len));
        if (id >= 0) break;
      }
      if (id < 0) break;
      freq[static_cast<std::size_t>(id)] += f;
      pos += len;
    }
  }
  std::vector<std::size_t> order(symbols.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (freq[a] != freq[b]) return freq[a] > freq[b];
    return symbols[a] < symbols[b];
  });
  std::vector<std::string> sorted;
  sorted.reserve(order.size());
  for (auto i : order) sorted.push_back(symbols[i]);
  return SubwordVocab(std::move(sorted));
}

}  // namespace rlab
