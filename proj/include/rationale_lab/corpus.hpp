#pragma once

// Synthetic corpora with planted rationales, grouped train/val/test
// partitioning, distribution-matched control sampling and rationale
// subsampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "rationale_lab/error.hpp"
#include "rationale_lab/hash.hpp"
#include "rationale_lab/random.hpp"
#include "rationale_lab/textproc.hpp"

namespace rlab {

enum class Split { Train, Val, Test, Unassigned };

inline constexpr std::array<Split, 3> kSplits = {Split::Train, Split::Val, Split::Test};

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "?";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "unassigned" || s.empty()) return Split::Unassigned;
  throw InputError("unknown split: " + std::string(s));
}

struct PlantedRationale {
  std::string text;
  Span planted_span;  // word indices into word_tokenize(document text)
};

struct Document {
  std::string doc_id;
  std::string group_id;
  std::string text;
  int label = 0;
  Split split = Split::Unassigned;
  // Whether the rationales are visible to the pipeline. Generated documents
  // always carry their planted rationales as ground truth.
  bool annotated = false;
  std::vector<PlantedRationale> rationales;
};

struct Corpus {
  int num_classes = 0;
  std::vector<Document> docs;

  std::vector<std::size_t> class_histogram() const {
    std::vector<std::size_t> h(static_cast<std::size_t>(num_classes), 0);
    for (const auto& d : docs) h.at(static_cast<std::size_t>(d.label))++;
    return h;
  }
};

struct LognormalTarget {
  double mean = 0.0;
  double stddev = 0.0;
};

struct GeneratorSpec {
  int num_classes = 20;
  std::size_t num_docs = 5000;
  // Class frequency falls off as 1 / (rank + 1)^class_zipf unless explicit
  // class_weights are given.
  double class_zipf = 0.8;
  std::vector<double> class_weights;
  // Weights over documents-per-group sizes 1, 2, 3, ...
  std::vector<double> group_size_weights = {0.5, 0.3, 0.2};
  // Weights over rationale counts 1..7.
  std::vector<double> rationales_per_doc = {78801, 7608, 736, 92, 5, 5, 5};
  LognormalTarget rationale_words = {13.6, 16.8};
  double target_rationale_coverage = 0.041;
  // Relative spread of the per-document coverage draw.
  double coverage_cv = 0.5;
  // Per-class signal phrase templates; generated when empty.
  std::vector<std::vector<std::string>> rationale_phrases;
  std::size_t phrases_per_class = 4;
  std::size_t signal_words_per_class = 8;
  // Probability that a rationale uses a phrase shared with a partner class.
  double shared_phrase_rate = 0.35;
  // Expected class-lexicon words scattered outside the rationales.
  double signal_echo_mean = 0.5;
  std::size_t context_words_per_class = 30;
  // Fraction of background tokens drawn from the class context lexicon.
  double context_rate = 0.02;
  double spurious_token_strength = 0.3;
  std::size_t background_vocab_size = 2000;
  std::size_t filler_vocab_size = 150;
  double annotated_fraction = 0.70;
  std::string id_prefix = "doc";
  std::uint64_t seed = 1;
  // Seeds the class and background lexicons; 0 reuses `seed`. Corpora that
  // share it describe the same classes with different documents.
  std::uint64_t lexicon_seed = 0;

  void validate() const {
    if (num_classes <= 0) throw ConfigError("num_classes must be positive");
    if (num_docs == 0) throw ConfigError("num_docs must be positive");
    if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(num_classes)) {
      throw ConfigError("class_weights must have num_classes entries");
    }
    if (rationales_per_doc.empty() || rationales_per_doc.size() > 7) {
      throw ConfigError("rationales_per_doc must have support within 1..7");
    }
    if (std::accumulate(rationales_per_doc.begin(), rationales_per_doc.end(), 0.0) <= 0.0) {
      throw ConfigError("rationales_per_doc has no mass");
    }
    if (group_size_weights.empty()) throw ConfigError("group_size_weights is empty");
    if (!(target_rationale_coverage > 0.0 && target_rationale_coverage < 1.0)) {
      throw ConfigError("target_rationale_coverage must lie in (0, 1)");
    }
    if (!(rationale_words.mean >= 1.0) || rationale_words.stddev < 0.0) {
      throw ConfigError("rationale_words needs mean >= 1 and a non-negative stddev");
    }
    if (spurious_token_strength < 0.0 || spurious_token_strength > 1.0) {
      throw ConfigError("spurious_token_strength must lie in [0, 1]");
    }
    if (annotated_fraction < 0.0 || annotated_fraction > 1.0) {
      throw ConfigError("annotated_fraction must lie in [0, 1]");
    }
    if (background_vocab_size == 0) throw ConfigError("background_vocab_size must be positive");
    if (rationale_phrases.empty()) {
      if (phrases_per_class == 0 || signal_words_per_class == 0) {
        throw ConfigError("empty phrase lists: phrases_per_class and signal_words_per_class must be positive");
      }
    } else {
      if (rationale_phrases.size() != static_cast<std::size_t>(num_classes)) {
        throw ConfigError("rationale_phrases must have one list per class");
      }
      for (std::size_t c = 0; c < rationale_phrases.size(); ++c) {
        if (rationale_phrases[c].empty()) {
          throw ConfigError("empty phrase list for class " + std::to_string(c));
        }
        for (const auto& p : rationale_phrases[c]) {
          if (word_tokenize(p).empty()) throw ConfigError("blank phrase for class " + std::to_string(c));
        }
      }
    }
  }
};

namespace detail {

// Pronounceable pseudo-words, unique across every lexicon of one corpus.
class Lexicon {
 public:
  explicit Lexicon(Rng& rng) : rng_(rng) {}

  std::string fresh(std::size_t min_syll, std::size_t max_syll) {
    static constexpr std::string_view kOnset = "bcdfghjklmnprstvz";
    static constexpr std::string_view kVowel = "aeiou";
    static constexpr std::string_view kCoda = "nrslm";
    for (;;) {
      const std::size_t syll = min_syll + rng_.index(max_syll - min_syll + 1);
      std::string w;
      for (std::size_t i = 0; i < syll; ++i) {
        w.push_back(kOnset[rng_.index(kOnset.size())]);
        w.push_back(kVowel[rng_.index(kVowel.size())]);
        if (rng_.bernoulli(0.3)) w.push_back(kCoda[rng_.index(kCoda.size())]);
      }
      if (used_.insert(w).second) return w;
    }
  }

  std::vector<std::string> batch(std::size_t n, std::size_t min_syll, std::size_t max_syll) {
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(fresh(min_syll, max_syll));
    return out;
  }

 private:
  Rng& rng_;
  std::unordered_set<std::string> used_;
};

// Render words as text: punctuation attaches to the preceding word.
inline std::string render(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const bool punct = detail::is_punct_token(words[i]);
    if (i > 0 && !punct) out.push_back(' ');
    out += words[i];
  }
  return out;
}

}  // namespace detail

// Generate a corpus whose documents carry planted rationales. Document
// length follows from the drawn rationale words and a per-document coverage
// draw centred on the target coverage.
inline Corpus generate_corpus(const GeneratorSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Rng lex_rng(mix_seed(spec.lexicon_seed ? spec.lexicon_seed : spec.seed, 1));
  detail::Lexicon lex(lex_rng);
  const auto K = static_cast<std::size_t>(spec.num_classes);

  const auto background = lex.batch(spec.background_vocab_size, 1, 3);
  std::vector<double> bg_weights(background.size());
  for (std::size_t i = 0; i < bg_weights.size(); ++i) bg_weights[i] = 1.0 / static_cast<double>(i + 1);
  std::vector<double> bg_cdf(bg_weights.size());
  std::partial_sum(bg_weights.begin(), bg_weights.end(), bg_cdf.begin());
  auto draw_background = [&](Rng& r) {
    const double u = r.uniform() * bg_cdf.back();
    auto it = std::upper_bound(bg_cdf.begin(), bg_cdf.end(), u);
    return background[std::min<std::size_t>(static_cast<std::size_t>(it - bg_cdf.begin()), background.size() - 1)];
  };
  const auto filler = lex.batch(std::max<std::size_t>(spec.filler_vocab_size, 1), 1, 3);

  std::vector<std::vector<std::string>> signal(K), context(K);
  std::vector<std::string> spurious(K);
  std::vector<std::vector<std::vector<std::string>>> phrases(K), shared(K);
  for (std::size_t c = 0; c < K; ++c) {
    context[c] = lex.batch(spec.context_words_per_class, 2, 3);
    spurious[c] = lex.fresh(3, 4);
    if (!spec.rationale_phrases.empty()) {
      for (const auto& p : spec.rationale_phrases[c]) {
        phrases[c].push_back(word_tokenize(p));
        for (const auto& w : phrases[c].back()) signal[c].push_back(w);
      }
    } else {
      signal[c] = lex.batch(spec.signal_words_per_class, 2, 4);
      for (std::size_t p = 0; p < spec.phrases_per_class; ++p) {
        const std::size_t len = 2 + lex_rng.index(3);
        std::vector<std::string> phrase;
        for (std::size_t i = 0; i < len; ++i) phrase.push_back(signal[c][lex_rng.index(signal[c].size())]);
        phrases[c].push_back(std::move(phrase));
      }
    }
  }
  // Partner classes (0,1), (2,3), ... share a small pool of phrases built
  // from both lexicons.
  for (std::size_t c = 0; c + 1 < K; c += 2) {
    for (int p = 0; p < 2; ++p) {
      std::vector<std::string> phrase;
      const std::size_t len = 2 + lex_rng.index(2);
      for (std::size_t i = 0; i < len; ++i) {
        const auto& src = (i % 2 == 0) ? signal[c] : signal[c + 1];
        phrase.push_back(src[lex_rng.index(src.size())]);
      }
      shared[c].push_back(phrase);
      shared[c + 1].push_back(std::move(phrase));
    }
  }

  std::vector<double> class_w(K);
  for (std::size_t c = 0; c < K; ++c) {
    class_w[c] = spec.class_weights.empty() ? 1.0 / std::pow(static_cast<double>(c + 1), spec.class_zipf)
                                            : spec.class_weights[c];
  }

  auto make_rationale = [&](std::size_t c, std::size_t len) {
    const bool use_shared = !shared[c].empty() && rng.bernoulli(spec.shared_phrase_rate);
    const auto& pool = use_shared ? shared[c] : phrases[c];
    std::vector<std::string> phrase = pool[rng.index(pool.size())];
    if (phrase.size() > len) phrase.resize(len);
    std::vector<std::string> words;
    const std::size_t extra = len - phrase.size();
    const std::size_t before = extra == 0 ? 0 : rng.index(extra + 1);
    for (std::size_t i = 0; i < before; ++i) words.push_back(filler[rng.index(filler.size())]);
    words.insert(words.end(), phrase.begin(), phrase.end());
    for (std::size_t i = before; i < extra; ++i) words.push_back(filler[rng.index(filler.size())]);
    return words;
  };

  Corpus corpus;
  corpus.num_classes = spec.num_classes;
  corpus.docs.reserve(spec.num_docs);
  std::size_t group_index = 0;
  std::vector<std::size_t> class_docs(K, 0), class_annotated(K, 0);
  while (corpus.docs.size() < spec.num_docs) {
    const std::size_t c = rng.categorical(class_w);
    const std::size_t gsize = 1 + rng.categorical(spec.group_size_weights);
    bool annotated = rng.bernoulli(spec.annotated_fraction);
    // Keep each class's annotated share near the target.
    const double target = spec.annotated_fraction * static_cast<double>(class_docs[c] + gsize);
    if (annotated && static_cast<double>(class_annotated[c] + gsize) > target + 2.0) annotated = false;
    if (!annotated && static_cast<double>(class_annotated[c]) < target - 2.0) annotated = true;
    class_docs[c] += gsize;
    if (annotated) class_annotated[c] += gsize;
    const std::string group_id = spec.id_prefix + "-g" + std::to_string(group_index++);
    for (std::size_t g = 0; g < gsize && corpus.docs.size() < spec.num_docs; ++g) {
      const std::size_t r = 1 + rng.categorical(spec.rationales_per_doc);
      std::vector<std::vector<std::string>> rats;
      std::size_t rat_words = 0;
      for (std::size_t i = 0; i < r; ++i) {
        double draw = rng.lognormal(spec.rationale_words.mean, std::max(spec.rationale_words.stddev, 1e-9));
        const auto len = static_cast<std::size_t>(std::clamp(std::lround(draw), 1L, 128L));
        rats.push_back(make_rationale(c, len));
        rat_words += rats.back().size();
      }
      const double cov = std::clamp(
          rng.lognormal(spec.target_rationale_coverage,
                        std::max(spec.coverage_cv * spec.target_rationale_coverage, 1e-12)),
          0.01, 0.6);
      const auto total = std::max<std::size_t>(rat_words + 4, static_cast<std::size_t>(std::lround(rat_words / cov)));
      const std::size_t bg_len = total - rat_words;

      std::vector<std::string> bg;
      bg.reserve(bg_len);
      for (std::size_t i = 0; i < bg_len; ++i) {
        if (i > 0 && rng.bernoulli(1.0 / 12.0)) {
          bg.emplace_back(".");
        } else if (rng.bernoulli(spec.context_rate)) {
          bg.push_back(context[c][rng.index(context[c].size())]);
        } else {
          bg.push_back(draw_background(rng));
        }
      }
      // Echo a few class-lexicon words outside the rationales.
      std::size_t echoes = 0;
      while (rng.bernoulli(spec.signal_echo_mean / (1.0 + spec.signal_echo_mean))) ++echoes;
      for (std::size_t e = 0; e < echoes && !bg.empty(); ++e) {
        bg[rng.index(bg.size())] = signal[c][rng.index(signal[c].size())];
      }
      if (!bg.empty() && rng.bernoulli(spec.spurious_token_strength)) {
        bg[rng.index(bg.size())] = spurious[c];
      }
      // Avoid a leading period.
      if (!bg.empty() && bg.front() == ".") bg.front() = draw_background(rng);

      // Insert rationales at distinct gaps of the background sequence.
      std::vector<std::size_t> gaps;
      for (std::size_t i = 0; i < rats.size(); ++i) gaps.push_back(rng.index(bg.size() + 1));
      std::sort(gaps.begin(), gaps.end());
      std::vector<std::string> words;
      words.reserve(total);
      Document doc;
      std::size_t next_bg = 0;
      for (std::size_t i = 0; i < rats.size(); ++i) {
        while (next_bg < gaps[i]) words.push_back(bg[next_bg++]);
        const std::size_t start = words.size();
        words.insert(words.end(), rats[i].begin(), rats[i].end());
        doc.rationales.push_back({detail::render(rats[i]), {start, words.size()}});
      }
      while (next_bg < bg.size()) words.push_back(bg[next_bg++]);

      doc.doc_id = spec.id_prefix + "-" + std::to_string(corpus.docs.size());
      doc.group_id = group_id;
      doc.label = static_cast<int>(c);
      doc.annotated = annotated;
      doc.text = detail::render(words);
      corpus.docs.push_back(std::move(doc));
    }
  }
  return corpus;
}

// Realized statistics of the planted rationales.
struct CorpusStats {
  std::size_t documents = 0;
  std::size_t rationales = 0;
  double mean_doc_words = 0.0;
  double std_doc_words = 0.0;
  double mean_rationale_words = 0.0;
  double std_rationale_words = 0.0;
  double mean_coverage = 0.0;
  double std_coverage = 0.0;
};

namespace detail {

struct Moments {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  void add(double x) {
    sum += x;
    sq += x * x;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  double stddev() const {
    if (n == 0) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sq / static_cast<double>(n) - m * m));
  }
};

}  // namespace detail

inline CorpusStats corpus_stats(const Corpus& corpus) {
  detail::Moments doc_len, rat_len, cov;
  CorpusStats s;
  for (const auto& d : corpus.docs) {
    const auto words = word_tokenize(d.text);
    doc_len.add(static_cast<double>(words.size()));
    std::vector<Span> spans;
    for (const auto& r : d.rationales) {
      rat_len.add(static_cast<double>(word_tokenize(r.text).size()));
      spans.push_back(r.planted_span);
    }
    s.rationales += d.rationales.size();
    if (!d.rationales.empty() && !words.empty()) {
      std::size_t covered = 0;
      for (const auto& sp : merge_spans(spans)) covered += sp.size();
      cov.add(static_cast<double>(covered) / static_cast<double>(words.size()));
    }
  }
  s.documents = corpus.docs.size();
  s.mean_doc_words = doc_len.mean();
  s.std_doc_words = doc_len.stddev();
  s.mean_rationale_words = rat_len.mean();
  s.std_rationale_words = rat_len.stddev();
  s.mean_coverage = cov.mean();
  s.std_coverage = cov.stddev();
  return s;
}

// ---------------------------------------------------------------------------
// Partitioning

struct SplitRatios {
  double train = 0.68;
  double val = 0.15;
  double test = 0.17;

  double operator[](Split s) const {
    switch (s) {
      case Split::Train: return train;
      case Split::Val: return val;
      case Split::Test: return test;
      default: return 0.0;
    }
  }
};

struct SplitAssignment {
  std::map<std::string, Split> split_of;
  // [split][class] document counts for train, val and test.
  std::array<std::vector<std::size_t>, 3> histograms;
  std::size_t violations = 0;

  Split at(const std::string& doc_id) const {
    auto it = split_of.find(doc_id);
    return it == split_of.end() ? Split::Unassigned : it->second;
  }
};

// Number of groups whose documents span more than one split.
inline std::size_t count_group_violations(const Corpus& corpus, const std::map<std::string, Split>& split_of) {
  std::map<std::string, std::set<Split>> seen;
  for (const auto& d : corpus.docs) {
    auto it = split_of.find(d.doc_id);
    seen[d.group_id].insert(it == split_of.end() ? Split::Unassigned : it->second);
  }
  std::size_t v = 0;
  for (const auto& [g, s] : seen) v += s.size() > 1 ? 1 : 0;
  return v;
}

// Largest absolute difference in per-class relative frequency between any
// two non-empty splits.
inline double max_class_deviation(const std::array<std::vector<std::size_t>, 3>& hist) {
  std::vector<std::vector<double>> freqs;
  for (const auto& h : hist) {
    const double n = static_cast<double>(std::accumulate(h.begin(), h.end(), std::size_t{0}));
    if (n == 0) continue;
    std::vector<double> f;
    for (auto c : h) f.push_back(static_cast<double>(c) / n);
    freqs.push_back(std::move(f));
  }
  double worst = 0.0;
  for (std::size_t a = 0; a < freqs.size(); ++a) {
    for (std::size_t b = a + 1; b < freqs.size(); ++b) {
      for (std::size_t c = 0; c < freqs[a].size(); ++c) {
        worst = std::max(worst, std::abs(freqs[a][c] - freqs[b][c]));
      }
    }
  }
  return worst;
}

// Group-constrained split. Annotated groups go to train, except a held-out
// share (preferring single-rationale documents) routed to test. Remaining
// groups are placed largest first, each into the split with the largest
// per-class deficit against its target; ties follow a seeded shuffle.
inline SplitAssignment partition(const Corpus& corpus, const SplitRatios& ratios,
                                 double hold_out_rationale_fraction = 0.027, std::uint64_t seed = 0) {
  for (Split s : kSplits) {
    if (ratios[s] < 0.0) throw ConfigError("split ratios must be non-negative");
  }
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1");
  }
  if (hold_out_rationale_fraction < 0.0 || hold_out_rationale_fraction > 1.0) {
    throw ConfigError("hold-out fraction must lie in [0, 1]");
  }
  const auto K = static_cast<std::size_t>(corpus.num_classes);

  struct Group {
    std::string id;
    std::vector<std::size_t> docs;
    bool annotated = false;
    bool single_rationale = true;
  };
  std::vector<Group> groups;
  std::unordered_map<std::string, std::size_t> group_index;
  for (std::size_t i = 0; i < corpus.docs.size(); ++i) {
    const auto& d = corpus.docs[i];
    if (d.group_id.empty()) throw InputError("document " + d.doc_id + " has no group_id");
    if (d.label < 0 || static_cast<std::size_t>(d.label) >= K) {
      throw InputError("document " + d.doc_id + " has label out of range");
    }
    auto [it, inserted] = group_index.try_emplace(d.group_id, groups.size());
    if (inserted) groups.push_back({d.group_id, {}, false, true});
    auto& g = groups[it->second];
    g.docs.push_back(i);
    g.annotated = g.annotated || (d.annotated && !d.rationales.empty());
    g.single_rationale = g.single_rationale && d.rationales.size() <= 1;
  }

  Rng rng(mix_seed(seed, 17));
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::vector<Split> group_split(groups.size(), Split::Unassigned);
  std::array<std::vector<double>, 3> count;
  for (auto& c : count) c.assign(K, 0.0);
  auto assign = [&](std::size_t gi, Split s) {
    group_split[gi] = s;
    for (auto di : groups[gi].docs) count[static_cast<std::size_t>(s)][static_cast<std::size_t>(corpus.docs[di].label)] += 1.0;
  };

  // Annotated documents: held-out share to test, the rest to train.
  std::size_t annotated_docs = 0;
  for (const auto& g : groups) annotated_docs += g.annotated ? g.docs.size() : 0;
  const auto held_target = static_cast<std::size_t>(std::llround(hold_out_rationale_fraction * static_cast<double>(annotated_docs)));
  std::vector<std::size_t> annotated_order;
  for (auto gi : order) {
    if (groups[gi].annotated && groups[gi].single_rationale) annotated_order.push_back(gi);
  }
  for (auto gi : order) {
    if (groups[gi].annotated && !groups[gi].single_rationale) annotated_order.push_back(gi);
  }
  std::size_t held = 0;
  std::vector<std::string> blocking;
  for (auto gi : annotated_order) {
    if (held < held_target) {
      if (ratios.test <= 0.0) {
        blocking.push_back(groups[gi].id);
        continue;
      }
      assign(gi, Split::Test);
      held += groups[gi].docs.size();
    } else {
      if (ratios.train <= 0.0) {
        blocking.push_back(groups[gi].id);
        continue;
      }
      assign(gi, Split::Train);
    }
  }
  if (!blocking.empty()) {
    std::string msg = "infeasible partition: annotated groups need a split with zero ratio:";
    for (std::size_t i = 0; i < blocking.size() && i < 20; ++i) msg += " " + blocking[i];
    if (blocking.size() > 20) msg += " ... (" + std::to_string(blocking.size()) + " groups)";
    throw PartitionError(msg);
  }

  std::vector<double> class_share(K, 0.0);
  for (const auto& d : corpus.docs) class_share[static_cast<std::size_t>(d.label)] += 1.0;
  const double n_total = static_cast<double>(corpus.docs.size());
  for (auto& x : class_share) x /= n_total;

  // Final split sizes: a split already over its share from annotated groups
  // keeps that size and the others divide what remains.
  std::array<double, 3> size{};
  std::array<bool, 3> pinned{};
  for (bool changed = true; changed;) {
    changed = false;
    double free_docs = n_total, free_ratio = 0.0;
    for (Split s : kSplits) {
      const auto si = static_cast<std::size_t>(s);
      if (pinned[si]) {
        free_docs -= size[si];
      } else {
        free_ratio += ratios[s];
      }
    }
    for (Split s : kSplits) {
      const auto si = static_cast<std::size_t>(s);
      if (pinned[si]) continue;
      size[si] = free_ratio > 0.0 ? free_docs * ratios[s] / free_ratio : 0.0;
      const double forced = std::accumulate(count[si].begin(), count[si].end(), 0.0);
      if (forced > size[si] + 1e-9) {
        size[si] = forced;
        pinned[si] = true;
        changed = true;
      }
    }
  }

  std::vector<std::size_t> rest;
  for (auto gi : order) {
    if (group_split[gi] == Split::Unassigned) rest.push_back(gi);
  }
  std::stable_sort(rest.begin(), rest.end(),
                   [&](std::size_t a, std::size_t b) { return groups[a].docs.size() > groups[b].docs.size(); });
  for (auto gi : rest) {
    Split best = Split::Unassigned;
    double best_score = 0.0, best_total = 0.0;
    for (Split s : kSplits) {
      const double r = ratios[s];
      if (r <= 0.0) continue;
      const auto si = static_cast<std::size_t>(s);
      double score = 0.0;
      for (auto di : groups[gi].docs) {
        const auto c = static_cast<std::size_t>(corpus.docs[di].label);
        score += class_share[c] * size[si] - count[si][c];
      }
      double filled = 0.0;
      for (auto x : count[si]) filled += x;
      const double total_deficit = size[si] - filled;
      if (best == Split::Unassigned || score > best_score + 1e-12 ||
          (std::abs(score - best_score) <= 1e-12 && total_deficit > best_total + 1e-12)) {
        best = s;
        best_score = score;
        best_total = total_deficit;
      }
    }
    assign(gi, best);
  }

  SplitAssignment out;
  for (auto& h : out.histograms) h.assign(K, 0);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    for (auto di : groups[gi].docs) {
      const auto& d = corpus.docs[di];
      out.split_of[d.doc_id] = group_split[gi];
      out.histograms[static_cast<std::size_t>(group_split[gi])][static_cast<std::size_t>(d.label)]++;
    }
  }
  out.violations = count_group_violations(corpus, out.split_of);
  return out;
}

inline void apply_split(Corpus& corpus, const SplitAssignment& assignment) {
  for (auto& d : corpus.docs) d.split = assignment.at(d.doc_id);
}

// Draw documents from `pool` matching `target_histogram` exactly, avoiding
// the excluded groups.
inline std::vector<Document> sample_control(const Corpus& pool, const std::map<int, std::size_t>& target_histogram,
                                            const std::set<std::string>& exclude_groups, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.docs.size(); ++i) {
    const auto& d = pool.docs[i];
    if (!exclude_groups.contains(d.group_id)) by_class[d.label].push_back(i);
  }
  std::vector<Document> out;
  for (const auto& [label, want] : target_histogram) {
    if (want == 0) continue;
    auto& cand = by_class[label];
    if (cand.size() < want) throw ShortageError(label, want, cand.size());
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(label) + 101));
    rng.shuffle(cand);
    cand.resize(want);
    std::sort(cand.begin(), cand.end());
    for (auto i : cand) out.push_back(pool.docs[i]);
  }
  return out;
}

// Uniform random subset of size m among items whose label is in `classes`,
// returned in input order.
template <typename T, typename LabelFn>
std::vector<T> subsample_rationales(const std::vector<T>& items, const std::set<int>& classes, std::size_t m,
                                    std::uint64_t seed, LabelFn label_of) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (classes.contains(static_cast<int>(label_of(items[i])))) eligible.push_back(i);
  }
  if (m > eligible.size()) {
    throw CountError("requested " + std::to_string(m) + " rationales, only " + std::to_string(eligible.size()) +
                     " available in the selected classes");
  }
  Rng rng(mix_seed(seed, 29));
  for (std::size_t i = 0; i < m; ++i) {
    std::swap(eligible[i], eligible[i + rng.index(eligible.size() - i)]);
  }
  eligible.resize(m);
  std::sort(eligible.begin(), eligible.end());
  std::vector<T> out;
  out.reserve(m);
  for (auto i : eligible) out.push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines and config I/O

inline nlohmann::json to_json(const Document& d) {
  nlohmann::json j{{"doc_id", d.doc_id}, {"group_id", d.group_id}, {"text", d.text}, {"label", d.label}};
  if (d.split != Split::Unassigned) j["split"] = to_string(d.split);
  if (d.annotated || !d.rationales.empty()) j["annotated"] = d.annotated;
  if (!d.rationales.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& r : d.rationales) {
      arr.push_back({{"text", r.text}, {"planted_span", {r.planted_span.begin, r.planted_span.end}}});
    }
    j["rationales"] = std::move(arr);
  }
  return j;
}

inline Document document_from_json(const nlohmann::json& j) {
  Document d;
  d.doc_id = j.at("doc_id").get<std::string>();
  d.group_id = j.value("group_id", d.doc_id);
  d.text = j.at("text").get<std::string>();
  d.label = j.at("label").get<int>();
  d.split = split_from_string(j.value("split", std::string{}));
  if (j.contains("rationales")) {
    for (const auto& r : j["rationales"]) {
      PlantedRationale pr;
      pr.text = r.at("text").get<std::string>();
      if (r.contains("planted_span")) {
        pr.planted_span = {r["planted_span"].at(0).get<std::size_t>(), r["planted_span"].at(1).get<std::size_t>()};
      }
      d.rationales.push_back(std::move(pr));
    }
  }
  // External corpora that list rationales are annotated unless they say otherwise.
  d.annotated = j.value("annotated", !d.rationales.empty() && !j.contains("annotated"));
  return d;
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& d : corpus.docs) out << to_json(d).dump() << '\n';
}

inline void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write corpus file " + path);
  write_corpus(out, corpus);
}

// Class count is max label + 1 unless given.
inline Corpus load_corpus(const std::string& path, int num_classes = 0) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read corpus file " + path);
  Corpus corpus;
  std::string line;
  std::set<std::string> ids;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    auto d = document_from_json(j);
    if (!ids.insert(d.doc_id).second) throw InputError("duplicate doc_id " + d.doc_id);
    corpus.num_classes = std::max(corpus.num_classes, d.label + 1);
    corpus.docs.push_back(std::move(d));
  }
  if (num_classes > 0) {
    if (corpus.num_classes > num_classes) throw InputError("corpus label exceeds the declared class count");
    corpus.num_classes = num_classes;
  }
  return corpus;
}

inline std::uint64_t corpus_fingerprint(const Corpus& corpus) {
  Fnv1a h;
  h.update(static_cast<std::uint64_t>(corpus.num_classes));
  for (const auto& d : corpus.docs) h.update(to_json(d).dump());
  return h.digest();
}

inline GeneratorSpec generator_spec_from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("num_classes", s.num_classes);
  get("num_docs", s.num_docs);
  get("class_zipf", s.class_zipf);
  get("class_weights", s.class_weights);
  get("group_size_weights", s.group_size_weights);
  get("rationales_per_doc", s.rationales_per_doc);
  if (j.contains("rationale_words")) {
    s.rationale_words.mean = j["rationale_words"].value("mean", s.rationale_words.mean);
    s.rationale_words.stddev = j["rationale_words"].value("std", s.rationale_words.stddev);
  }
  get("target_rationale_coverage", s.target_rationale_coverage);
  get("coverage_cv", s.coverage_cv);
  get("rationale_phrases", s.rationale_phrases);
  get("phrases_per_class", s.phrases_per_class);
  get("signal_words_per_class", s.signal_words_per_class);
  get("shared_phrase_rate", s.shared_phrase_rate);
  get("signal_echo_mean", s.signal_echo_mean);
  get("context_words_per_class", s.context_words_per_class);
  get("context_rate", s.context_rate);
  get("spurious_token_strength", s.spurious_token_strength);
  get("background_vocab_size", s.background_vocab_size);
  get("filler_vocab_size", s.filler_vocab_size);
  get("annotated_fraction", s.annotated_fraction);
  get("id_prefix", s.id_prefix);
  get("seed", s.seed);
  get("lexicon_seed", s.lexicon_seed);
  return s;
}

inline nlohmann::json to_json(const GeneratorSpec& s) {
  return {{"num_classes", s.num_classes},
          {"num_docs", s.num_docs},
          {"class_zipf", s.class_zipf},
          {"class_weights", s.class_weights},
          {"group_size_weights", s.group_size_weights},
          {"rationales_per_doc", s.rationales_per_doc},
          {"rationale_words", {{"mean", s.rationale_words.mean}, {"std", s.rationale_words.stddev}}},
          {"target_rationale_coverage", s.target_rationale_coverage},
          {"coverage_cv", s.coverage_cv},
          {"rationale_phrases", s.rationale_phrases},
          {"phrases_per_class", s.phrases_per_class},
          {"signal_words_per_class", s.signal_words_per_class},
          {"shared_phrase_rate", s.shared_phrase_rate},
          {"signal_echo_mean", s.signal_echo_mean},
          {"context_words_per_class", s.context_words_per_class},
          {"context_rate", s.context_rate},
          {"spurious_token_strength", s.spurious_token_strength},
          {"background_vocab_size", s.background_vocab_size},
          {"filler_vocab_size", s.filler_vocab_size},
          {"annotated_fraction", s.annotated_fraction},
          {"id_prefix", s.id_prefix},
          {"seed", s.seed},
          {"lexicon_seed", s.lexicon_seed}};
}

}  // namespace rlab
