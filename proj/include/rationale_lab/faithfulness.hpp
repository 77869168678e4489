#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "rationale_lab/error.hpp"
#include "rationale_lab/model.hpp"
#include "rationale_lab/textproc.hpp"
#include "rationale_lab/vocab.hpp"

namespace rlab {

// Threshold printed for the 90th-percentile filter on the original corpus.
inline constexpr double kLiteralP90Threshold = 0.817;
inline constexpr double kDefaultSufficiencyThreshold = 0.2;

namespace detail {
inline void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError(std::string(what) + " outside [0, 1]");
}
}  // namespace detail

inline double sufficiency(double p_full, double p_rat) {
  detail::check_probability(p_full, "p_full");
  detail::check_probability(p_rat, "p_rat");
  return std::clamp(1.0 - std::max(0.0, p_full - p_rat), 0.0, 1.0);
}

inline double comprehensiveness(double p_full, double p_comp) {
  detail::check_probability(p_full, "p_full");
  detail::check_probability(p_comp, "p_comp");
  return std::clamp(std::max(0.0, p_full - p_comp), 0.0, 1.0);
}

struct FaithfulnessScore {
  std::string doc_id;
  std::string rationale_id;
  int label = 0;
  // Predicted class on the full report, and on the rationale alone.
  int pred_full = 0;
  int pred_rat = 0;
  double p_full = 0.0;
  double p_rat = 0.0;
  double p_comp = 0.0;
  double suff = 0.0;
  double comp = 0.0;
};

// A document and its matched rationales, as handed to the scorer.
struct ScoringDoc {
  std::string doc_id;
  int label = 0;
  std::vector<std::string> words;
  std::vector<RationaleRecord> rationales;
};

struct ScoringResult {
  std::vector<FaithfulnessScore> scores;
  std::size_t skipped = 0;
};

// Every probability comes from the same model; y-hat is the full-report
// argmax. The rationale input is the document's masked words, the
// complement its unmasked words.
inline ScoringResult score_rationales(const Model& model, const SubwordVocab& vocab,
                                      const std::vector<ScoringDoc>& docs, unsigned workers = 1) {
  std::vector<std::vector<FaithfulnessScore>> per_doc(docs.size());
  std::vector<std::size_t> skipped(docs.size(), 0);
  auto work = [&](std::size_t i) {
    const auto& d = docs[i];
    const auto full = subword_tokenize(d.words, vocab);
    const auto pf = model.predict_proba(full.ids);
    const int yhat = argmax(pf);
    for (const auto& r : d.rationales) {
      if (!r.matched()) {
        ++skipped[i];
        continue;
      }
      const auto rat = subword_tokenize(select_words(d.words, r.word_mask, true), vocab);
      const auto cmp = subword_tokenize(select_words(d.words, r.word_mask, false), vocab);
      const auto pr = model.predict_proba(rat.ids);
      const auto pc = model.predict_proba(cmp.ids);
      FaithfulnessScore s;
      s.doc_id = d.doc_id;
      s.rationale_id = r.rationale_id;
      s.label = d.label;
      s.pred_full = yhat;
      s.pred_rat = argmax(pr);
      const auto y = static_cast<std::size_t>(yhat);
      s.p_full = pf[y];
      s.p_rat = pr[y];
      s.p_comp = pc[y];
      s.suff = sufficiency(s.p_full, s.p_rat);
      s.comp = comprehensiveness(s.p_full, s.p_comp);
      per_doc[i].push_back(std::move(s));
    }
  };
  workers = std::max(1u, workers);
  if (workers == 1 || docs.size() < 2) {
    for (std::size_t i = 0; i < docs.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < docs.size(); i += workers) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  ScoringResult out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    for (auto& s : per_doc[i]) out.scores.push_back(std::move(s));
    out.skipped += skipped[i];
  }
  return out;
}

// Rationale ids with suff strictly above the threshold.
inline std::set<std::string> filter_sufficient(const std::vector<FaithfulnessScore>& scores, double threshold) {
  std::set<std::string> out;
  for (const auto& s : scores) {
    if (s.suff > threshold) out.insert(s.rationale_id);
  }
  return out;
}

// Nearest-rank percentile (rank = ceil(p/100 * n), at least 1) of an
// unsorted sample.
inline double nearest_rank(std::vector<double> values, double percentile) {
  if (values.empty()) throw UndefinedError("percentile of an empty sample");
  if (!(percentile >= 0.0 && percentile <= 100.0)) throw DomainError("percentile outside [0, 100]");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(values.size()) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

// Percentile of sufficiency over rationales whose report was misclassified
// and whose rationale-only prediction is wrong too. Empty when no such
// rationale exists.
inline std::optional<double> misprediction_threshold(const std::vector<FaithfulnessScore>& scores,
                                                     double percentile = 90.0) {
  std::vector<double> v;
  for (const auto& s : scores) {
    if (s.pred_full != s.label && s.pred_rat != s.label) v.push_back(s.suff);
  }
  if (v.empty()) return std::nullopt;
  return nearest_rank(std::move(v), percentile);
}

enum class ScoreField { Suff, Comp };

struct FrequencyBin {
  std::size_t low = 0;
  std::optional<std::size_t> high;  // exclusive; none for the open last bin
  std::size_t classes = 0;
  std::size_t samples = 0;
  double sample_mean = 0.0;
  double class_mean = 0.0;
};

// Classes grouped by training count into [e_i, e_{i+1}) plus [e_last, inf).
// Bins without scored classes are omitted.
inline std::vector<FrequencyBin> aggregate_by_class_frequency(const std::vector<FaithfulnessScore>& scores,
                                                              const std::map<int, std::size_t>& class_counts,
                                                              std::vector<std::size_t> edges,
                                                              ScoreField field = ScoreField::Suff) {
  if (edges.empty()) throw ConfigError("at least one bin edge is required");
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  std::map<int, std::pair<double, std::size_t>> per_class;
  for (const auto& s : scores) {
    if (!class_counts.count(s.label)) throw InputError("no training count for class " + std::to_string(s.label));
    auto& [sum, n] = per_class[s.label];
    sum += field == ScoreField::Suff ? s.suff : s.comp;
    ++n;
  }
  std::vector<FrequencyBin> out;
  for (std::size_t b = 0; b < edges.size(); ++b) {
    FrequencyBin bin;
    bin.low = edges[b];
    if (b + 1 < edges.size()) bin.high = edges[b + 1];
    double sum = 0.0, class_sum = 0.0;
    for (const auto& [label, acc] : per_class) {
      const std::size_t count = class_counts.at(label);
      if (count < bin.low || (bin.high && count >= *bin.high)) continue;
      ++bin.classes;
      bin.samples += acc.second;
      sum += acc.first;
      class_sum += acc.first / static_cast<double>(acc.second);
    }
    if (bin.classes == 0) continue;
    bin.sample_mean = sum / static_cast<double>(bin.samples);
    bin.class_mean = class_sum / static_cast<double>(bin.classes);
    out.push_back(bin);
  }
  return out;
}

// Scores CSV: doc_id, rationale_id, class, p_full, p_rat, p_comp, suff, comp.
inline void write_scores_csv(std::ostream& out, const std::vector<FaithfulnessScore>& scores) {
  out << "doc_id,rationale_id,class,p_full,p_rat,p_comp,suff,comp\n";
  char buf[256];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g", s.label, s.p_full, s.p_rat, s.p_comp, s.suff,
                  s.comp);
    out << s.doc_id << ',' << s.rationale_id << ',' << buf << '\n';
  }
}

inline std::vector<FaithfulnessScore> read_scores_csv(std::istream& in) {
  std::vector<FaithfulnessScore> out;
  std::string line;
  if (!std::getline(in, line)) return out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw InputError("scores line " + std::to_string(lineno) + ": expected 8 fields");
    FaithfulnessScore s;
    try {
      s.doc_id = f[0];
      s.rationale_id = f[1];
      s.label = std::stoi(f[2]);
      s.p_full = std::stod(f[3]);
      s.p_rat = std::stod(f[4]);
      s.p_comp = std::stod(f[5]);
      s.suff = std::stod(f[6]);
      s.comp = std::stod(f[7]);
    } catch (const std::logic_error&) {
      throw InputError("scores line " + std::to_string(lineno) + ": malformed number");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace rlab
