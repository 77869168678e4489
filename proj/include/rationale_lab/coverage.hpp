#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rationale_lab/error.hpp"
#include "rationale_lab/faithfulness.hpp"
#include "rationale_lab/textproc.hpp"

namespace rlab {

inline constexpr std::array<double, 3> kCoveragePercentiles = {90.0, 95.0, 98.0};

// Mean of the subword scores aligned to each word. The alignment has to
// tile the scored subwords without gaps.
inline std::vector<double> word_scores_from_subwords(std::span<const double> subword_scores,
                                                     const std::vector<Span>& alignment) {
  std::vector<double> out;
  out.reserve(alignment.size());
  std::size_t expect = 0;
  for (std::size_t w = 0; w < alignment.size(); ++w) {
    const Span a = alignment[w];
    if (a.empty() || a.begin != expect || a.end > subword_scores.size()) {
      throw ShapeError("alignment gap at word " + std::to_string(w));
    }
    double s = 0.0;
    for (std::size_t t = a.begin; t < a.end; ++t) s += subword_scores[t];
    out.push_back(s / static_cast<double>(a.size()));
    expect = a.end;
  }
  if (expect != subword_scores.size()) throw ShapeError("alignment does not cover every scored subword");
  return out;
}

// Indices scoring above the document's nearest-rank p-th percentile. When
// nothing lies strictly above (ties at the top), every maximal index is
// returned, so uniform scores highlight the whole document.
inline std::vector<std::size_t> highlight(std::span<const double> scores, double percentile) {
  if (scores.empty()) throw InputError("cannot highlight an empty score list");
  const double thr = nearest_rank(std::vector<double>(scores.begin(), scores.end()), percentile);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > thr) out.push_back(i);
  }
  if (out.empty()) {
    const double top = *std::max_element(scores.begin(), scores.end());
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] == top) out.push_back(i);
    }
  }
  return out;
}

enum class Denominator { Highlighted, Rationale };

inline Denominator denominator_from_string(std::string_view s) {
  if (s == "highlighted") return Denominator::Highlighted;
  if (s == "rationale") return Denominator::Rationale;
  throw ConfigError("unknown coverage denominator: " + std::string(s));
}

inline double coverage_ratio(const std::vector<std::size_t>& highlighted, const std::vector<std::uint8_t>& mask,
                             Denominator denom = Denominator::Highlighted) {
  std::size_t positives = 0;
  for (auto m : mask) positives += m ? 1 : 0;
  if (positives == 0) throw UndefinedError("coverage ratio with an empty rationale mask");
  std::size_t hit = 0;
  for (auto i : highlighted) {
    if (i >= mask.size()) throw ShapeError("highlighted index beyond the mask");
    hit += mask[i] ? 1 : 0;
  }
  if (denom == Denominator::Rationale) return static_cast<double>(hit) / static_cast<double>(positives);
  if (highlighted.empty()) throw UndefinedError("coverage ratio with nothing highlighted");
  return static_cast<double>(hit) / static_cast<double>(highlighted.size());
}

inline constexpr std::array<const char*, 6> kLengthBins = {"1-2", "3-5", "6-10", "11-15", "16-25", "26+"};

inline const char* length_bin(std::size_t words) {
  if (words == 0) throw DomainError("rationale length must be positive");
  if (words <= 2) return kLengthBins[0];
  if (words <= 5) return kLengthBins[1];
  if (words <= 10) return kLengthBins[2];
  if (words <= 15) return kLengthBins[3];
  if (words <= 25) return kLengthBins[4];
  return kLengthBins[5];
}

struct DocCoverage {
  std::string doc_id;
  bool correct = false;
  std::size_t rationale_length = 0;
  double ratio = 0.0;
};

struct GroupMean {
  std::size_t n = 0;
  double mean = 0.0;
};

struct CoverageBreakdown {
  GroupMean overall;
  std::map<std::string, GroupMean> by_correctness;  // "correct" / "incorrect"
  std::map<std::string, GroupMean> by_length;       // keyed by length bin
};

inline CoverageBreakdown coverage_breakdowns(const std::vector<DocCoverage>& docs) {
  CoverageBreakdown b;
  auto add = [](GroupMean& g, double x) {
    ++g.n;
    g.mean += (x - g.mean) / static_cast<double>(g.n);
  };
  for (const auto& d : docs) {
    add(b.overall, d.ratio);
    add(b.by_correctness[d.correct ? "correct" : "incorrect"], d.ratio);
    add(b.by_length[length_bin(d.rationale_length)], d.ratio);
  }
  return b;
}

// Population standard deviation (ddof 0).
inline double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(v.size()));
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

using HighlightSets = std::map<std::string, std::vector<std::size_t>>;  // doc_id -> indices

struct OverlapMatrix {
  std::vector<std::string> regimens;
  std::vector<std::vector<double>> values;
};

// Mean over documents of |A ∩ B ∩ R| / |(A ∪ B) ∩ R|. Documents where
// neither regimen highlights a rationale word are left out of the mean.
inline OverlapMatrix regimen_overlap(const std::map<std::string, HighlightSets>& by_regimen,
                                     const std::map<std::string, std::vector<std::uint8_t>>& masks) {
  OverlapMatrix m;
  for (const auto& [name, sets] : by_regimen) {
    m.regimens.push_back(name);
    if (sets.size() != masks.size()) throw InputError("regimen " + name + " covers a different document set");
    for (const auto& [doc, idx] : sets) {
      if (!masks.count(doc)) throw InputError("regimen " + name + " has unknown document " + doc);
    }
  }
  const std::size_t R = m.regimens.size();
  m.values.assign(R, std::vector<double>(R, 1.0));
  for (std::size_t a = 0; a < R; ++a) {
    for (std::size_t b = a + 1; b < R; ++b) {
      const auto& A = by_regimen.at(m.regimens[a]);
      const auto& B = by_regimen.at(m.regimens[b]);
      double sum = 0.0;
      std::size_t docs = 0;
      for (const auto& [doc, mask] : masks) {
        std::set<std::size_t> sa, sb;
        for (auto i : A.at(doc)) {
          if (i < mask.size() && mask[i]) sa.insert(i);
        }
        for (auto i : B.at(doc)) {
          if (i < mask.size() && mask[i]) sb.insert(i);
        }
        std::size_t inter = 0;
        for (auto i : sa) inter += sb.count(i);
        const std::size_t uni = sa.size() + sb.size() - inter;
        if (uni == 0) continue;
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++docs;
      }
      const double v = docs ? sum / static_cast<double>(docs) : 0.0;
      m.values[a][b] = m.values[b][a] = v;
    }
  }
  return m;
}

}  // namespace rlab
