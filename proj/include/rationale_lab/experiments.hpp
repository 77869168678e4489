#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rationale_lab/corpus.hpp"
#include "rationale_lab/coverage.hpp"
#include "rationale_lab/error.hpp"
#include "rationale_lab/faithfulness.hpp"
#include "rationale_lab/hash.hpp"
#include "rationale_lab/metrics.hpp"
#include "rationale_lab/model.hpp"
#include "rationale_lab/textproc.hpp"
#include "rationale_lab/vocab.hpp"

namespace rlab {

// ---------------------------------------------------------------------------
// Logging

inline std::atomic<bool> g_log_enabled{true};
inline std::mutex g_log_mutex;

inline void log_line(const std::string& msg) {
  if (!g_log_enabled.load()) return;
  std::lock_guard lock(g_log_mutex);
  std::clog << "[rationale-lab] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Regimens

enum class RegimenKind {
  ReportsOnly,
  ReportsPlusRationales,
  ReportsPlusSufficient,
  ReportsPlusControl,
  RationalesOnly,
  ComplementsOnly,
  LowResource
};

// A sufficiency threshold: a literal value or the recomputed percentile.
struct Threshold {
  bool recomputed = false;
  double value = 0.0;  // the literal, or the percentile when recomputed

  std::string str() const {
    if (recomputed) {
      char b[32];
      std::snprintf(b, sizeof b, "p%g", value);
      return b;
    }
    char b[32];
    std::snprintf(b, sizeof b, "%g", value);
    return b;
  }
  static Threshold parse(std::string_view s) {
    Threshold t;
    try {
      if (!s.empty() && s.front() == 'p') {
        t.recomputed = true;
        t.value = std::stod(std::string(s.substr(1)));
      } else {
        t.value = std::stod(std::string(s));
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad threshold: " + std::string(s));
    }
    if (t.recomputed && !(t.value > 0.0 && t.value <= 100.0)) throw ConfigError("percentile must be in (0, 100]");
    return t;
  }
  friend bool operator==(const Threshold&, const Threshold&) = default;
};

struct RegimenConfig {
  RegimenKind kind = RegimenKind::ReportsOnly;
  std::optional<Threshold> threshold;  // sufficient; optional for low_resource
  std::size_t m = 0;                   // low_resource

  bool needs_scores() const { return threshold.has_value(); }

  std::string name() const {
    switch (kind) {
      case RegimenKind::ReportsOnly: return "reports_only";
      case RegimenKind::ReportsPlusRationales: return "reports_plus_rationales";
      case RegimenKind::ReportsPlusSufficient: return "reports_plus_sufficient(" + threshold->str() + ")";
      case RegimenKind::ReportsPlusControl: return "reports_plus_control";
      case RegimenKind::RationalesOnly: return "rationales_only";
      case RegimenKind::ComplementsOnly: return "complements_only";
      case RegimenKind::LowResource: {
        std::string s = "low_resource(m=" + std::to_string(m);
        if (threshold) s += ",t=" + threshold->str();
        return s + ")";
      }
    }
    return "?";
  }

  // Accepts the names produced by name().
  static RegimenConfig parse(std::string_view s) {
    RegimenConfig r;
    auto args_of = [&](std::string_view prefix) -> std::string {
      if (s.size() < prefix.size() + 2 || s.back() != ')') throw ConfigError("bad regimen: " + std::string(s));
      return std::string(s.substr(prefix.size() + 1, s.size() - prefix.size() - 2));
    };
    if (s == "reports_only") {
      r.kind = RegimenKind::ReportsOnly;
    } else if (s == "reports_plus_rationales") {
      r.kind = RegimenKind::ReportsPlusRationales;
    } else if (s == "reports_plus_control") {
      r.kind = RegimenKind::ReportsPlusControl;
    } else if (s == "rationales_only") {
      r.kind = RegimenKind::RationalesOnly;
    } else if (s == "complements_only") {
      r.kind = RegimenKind::ComplementsOnly;
    } else if (s.starts_with("reports_plus_sufficient(")) {
      r.kind = RegimenKind::ReportsPlusSufficient;
      r.threshold = Threshold::parse(args_of("reports_plus_sufficient"));
    } else if (s.starts_with("low_resource(")) {
      r.kind = RegimenKind::LowResource;
      std::stringstream ss(args_of("low_resource"));
      std::string part;
      bool have_m = false;
      while (std::getline(ss, part, ',')) {
        const auto eq = part.find('=');
        if (eq == std::string::npos) throw ConfigError("bad low_resource argument: " + part);
        const auto key = part.substr(0, eq), val = part.substr(eq + 1);
        if (key == "m") {
          try {
            r.m = std::stoul(val);
          } catch (const std::logic_error&) {
            throw ConfigError("bad m: " + val);
          }
          have_m = true;
        } else if (key == "t") {
          r.threshold = Threshold::parse(val);
        } else {
          throw ConfigError("unknown low_resource argument: " + key);
        }
      }
      if (!have_m || r.m == 0) throw ConfigError("low_resource needs m > 0");
    } else {
      throw ConfigError("unknown regimen: " + std::string(s));
    }
    return r;
  }
};

// The seven standard regimens.
inline std::vector<RegimenConfig> standard_regimens() {
  std::vector<RegimenConfig> out;
  for (const char* s : {"reports_only", "reports_plus_rationales", "reports_plus_sufficient(0.2)",
                        "reports_plus_sufficient(p90)", "reports_plus_control", "rationales_only", "complements_only"}) {
    out.push_back(RegimenConfig::parse(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid configuration

struct GridConfig {
  GeneratorSpec generator;
  std::optional<std::string> corpus_path;
  // Control pool: generated from `pool_generator` unless a path is given.
  GeneratorSpec pool_generator;
  std::optional<std::string> pool_path;
  bool use_pool = true;
  SplitRatios ratios;
  double hold_out = 0.027;
  std::uint64_t split_seed = 0;
  std::size_t vocab_size = 8000;
  std::size_t max_rationale_words = kMaxRationaleWords;
  std::size_t focus_classes = 10;
  std::vector<Architecture> architectures = {Architecture::Baseline};
  std::vector<RegimenConfig> regimens = standard_regimens();
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  TrainConfig train;
  Denominator denominator = Denominator::Highlighted;
  std::vector<std::size_t> frequency_bins = {0, 100, 200, 400};

  GridConfig() { pool_generator = pool_spec_for(generator); }

  // Same classes and lexicons as `main`, fresh documents, no annotations.
  static GeneratorSpec pool_spec_for(const GeneratorSpec& main) {
    GeneratorSpec p = main;
    p.lexicon_seed = main.lexicon_seed ? main.lexicon_seed : main.seed;
    p.seed = mix_seed(main.seed, 1001);
    p.num_docs = main.num_docs + main.num_docs / 5;
    p.id_prefix = "pool";
    p.annotated_fraction = 0.0;
    return p;
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"warmup_epochs", c.warmup_epochs}, {"patience", c.patience},
          {"batch_size", c.batch_size},       {"max_epochs", c.max_epochs},       {"alpha", c.alpha},
          {"heads", c.heads},                 {"embed_dim", c.embed_dim},         {"hidden_dim", c.hidden_dim},
          {"window", c.window},               {"weight_decay", c.weight_decay},   {"beta2", c.beta2},
          {"epsilon", c.epsilon},             {"optimizer", c.optimizer == Optimizer::Sgd ? "sgd" : "adamw"}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  for (const auto& [key, val] : j.items()) {
    if (key == "learning_rate") c.learning_rate = val.get<double>();
    else if (key == "warmup_epochs") c.warmup_epochs = val.get<int>();
    else if (key == "patience") c.patience = val.get<int>();
    else if (key == "batch_size") c.batch_size = val.get<int>();
    else if (key == "max_epochs") c.max_epochs = val.get<int>();
    else if (key == "alpha") c.alpha = val.get<double>();
    else if (key == "heads") c.heads = val.get<int>();
    else if (key == "embed_dim") c.embed_dim = val.get<int>();
    else if (key == "hidden_dim") c.hidden_dim = val.get<int>();
    else if (key == "window") c.window = val.get<int>();
    else if (key == "weight_decay") c.weight_decay = val.get<double>();
    else if (key == "beta2") c.beta2 = val.get<double>();
    else if (key == "epsilon") c.epsilon = val.get<double>();
    else if (key == "optimizer") {
      const auto s = val.get<std::string>();
      if (s == "adamw") c.optimizer = Optimizer::AdamW;
      else if (s == "sgd") c.optimizer = Optimizer::Sgd;
      else throw ConfigError("unknown optimizer: " + s);
    } else {
      throw ConfigError("unknown training option: " + key);
    }
  }
  return c;
}

// Canonical JSON of everything that shapes the data (not the cells).
inline nlohmann::json data_config_json(const GridConfig& g) {
  nlohmann::json j;
  if (g.corpus_path) j["corpus_path"] = *g.corpus_path;
  else j["generator"] = to_json(g.generator);
  if (g.use_pool) {
    if (g.pool_path) j["pool_path"] = *g.pool_path;
    else j["pool_generator"] = to_json(g.pool_generator);
  }
  j["split"] = {{"train", g.ratios.train}, {"val", g.ratios.val}, {"test", g.ratios.test},
                {"hold_out", g.hold_out},  {"seed", g.split_seed}};
  j["vocab_size"] = g.vocab_size;
  j["max_rationale_words"] = g.max_rationale_words;
  j["focus_classes"] = g.focus_classes;
  return j;
}

inline nlohmann::json to_json(const GridConfig& g) {
  nlohmann::json j = data_config_json(g);
  j["architectures"] = nlohmann::json::array();
  for (auto a : g.architectures) j["architectures"].push_back(to_string(a));
  j["regimens"] = nlohmann::json::array();
  for (const auto& r : g.regimens) j["regimens"].push_back(r.name());
  j["seeds"] = g.seeds;
  j["train"] = to_json(g.train);
  j["denominator"] = g.denominator == Denominator::Rationale ? "rationale" : "highlighted";
  j["frequency_bins"] = g.frequency_bins;
  return j;
}

inline GridConfig grid_config_from_json(const nlohmann::json& j) {
  GridConfig g;
  static const std::set<std::string> known = {
      "generator",   "corpus_path", "pool_generator", "pool_path", "use_pool",  "split",       "vocab_size",
      "max_rationale_words", "focus_classes", "architectures", "regimens", "seeds", "train", "denominator",
      "frequency_bins"};
  for (const auto& [key, val] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown grid key: " + key);
  }
  try {
    if (j.contains("generator")) g.generator = generator_spec_from_json(j["generator"]);
    if (j.contains("corpus_path")) g.corpus_path = j["corpus_path"].get<std::string>();
    g.pool_generator = j.contains("pool_generator") ? generator_spec_from_json(j["pool_generator"])
                                                    : GridConfig::pool_spec_for(g.generator);
    if (j.contains("pool_path")) g.pool_path = j["pool_path"].get<std::string>();
    g.use_pool = j.value("use_pool", true);
    if (j.contains("split")) {
      const auto& s = j["split"];
      g.ratios.train = s.value("train", g.ratios.train);
      g.ratios.val = s.value("val", g.ratios.val);
      g.ratios.test = s.value("test", g.ratios.test);
      g.hold_out = s.value("hold_out", g.hold_out);
      g.split_seed = s.value("seed", g.split_seed);
    }
    g.vocab_size = j.value("vocab_size", g.vocab_size);
    g.max_rationale_words = j.value("max_rationale_words", g.max_rationale_words);
    g.focus_classes = j.value("focus_classes", g.focus_classes);
    if (j.contains("architectures")) {
      g.architectures.clear();
      for (const auto& a : j["architectures"]) g.architectures.push_back(architecture_from_string(a.get<std::string>()));
    }
    if (j.contains("regimens")) {
      g.regimens.clear();
      for (const auto& r : j["regimens"]) g.regimens.push_back(RegimenConfig::parse(r.get<std::string>()));
    }
    if (j.contains("seeds")) g.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("train")) g.train = train_config_from_json(j["train"]);
    if (j.contains("denominator")) g.denominator = denominator_from_string(j["denominator"].get<std::string>());
    if (j.contains("frequency_bins")) g.frequency_bins = j["frequency_bins"].get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grid config: ") + e.what());
  }
  if (g.architectures.empty() || g.regimens.empty() || g.seeds.empty()) {
    throw ConfigError("grid needs at least one architecture, regimen and seed");
  }
  return g;
}

// ---------------------------------------------------------------------------
// Prepared data, shared read-only by every cell of a grid

struct EncodedItem {
  std::string sample_id;
  std::string doc_id;
  SampleKind kind = SampleKind::Report;
  EncodedSample sample;
};

struct CoverageDoc {
  std::string doc_id;
  int label = 0;
  TokenSequence seq;                 // retained words only
  std::vector<std::uint8_t> mask;    // word mask over seq.words
  std::size_t rationale_length = 0;  // words in the annotated rationale
};

struct ExperimentData {
  Corpus corpus;
  int num_classes = 0;
  SubwordVocab vocab;
  std::uint64_t corpus_hash = 0;
  std::vector<EncodedItem> train_reports, val_reports, test_reports;
  std::vector<EncodedItem> rationales, complements;
  std::vector<EncodedItem> control;
  std::optional<std::string> control_error;
  std::vector<ScoringDoc> scoring_docs;  // train documents with kept rationales
  std::vector<CoverageDoc> coverage_docs;
  std::vector<int> focus_classes;
  std::map<int, std::size_t> train_class_counts;
  std::map<std::string, std::size_t> match_counts;  // by status, plus "removed_length"
};

inline std::vector<EncodedSample> samples_of(const std::vector<EncodedItem>& items) {
  std::vector<EncodedSample> out;
  out.reserve(items.size());
  for (const auto& i : items) out.push_back(i.sample);
  return out;
}

inline ExperimentData prepare_data(const GridConfig& g) {
  ExperimentData d;
  d.corpus = g.corpus_path ? load_corpus(*g.corpus_path) : generate_corpus(g.generator);
  d.num_classes = d.corpus.num_classes;
  std::optional<Corpus> pool;
  if (g.use_pool) {
    pool = g.pool_path ? load_corpus(*g.pool_path, d.num_classes) : generate_corpus(g.pool_generator);
    if (pool->num_classes != d.num_classes) throw ConfigError("control pool and corpus disagree on the class count");
  }
  Fnv1a h;
  h.update(corpus_fingerprint(d.corpus));
  if (pool) h.update(corpus_fingerprint(*pool));
  d.corpus_hash = h.digest();

  // A corpus that arrives fully split keeps its assignment.
  const bool presplit = std::all_of(d.corpus.docs.begin(), d.corpus.docs.end(),
                                    [](const Document& doc) { return doc.split != Split::Unassigned; });
  if (!presplit) apply_split(d.corpus, partition(d.corpus, g.ratios, g.hold_out, g.split_seed));

  std::map<std::string, std::uint64_t> counts;
  std::vector<std::vector<std::string>> words(d.corpus.docs.size());
  for (std::size_t i = 0; i < d.corpus.docs.size(); ++i) {
    words[i] = word_tokenize(d.corpus.docs[i].text);
    if (d.corpus.docs[i].split == Split::Train) {
      for (const auto& w : words[i]) ++counts[w];
    }
  }
  d.vocab = learn_vocab(counts, g.vocab_size);

  std::map<int, std::size_t> rationale_hist;
  std::set<std::string> groups;
  for (std::size_t i = 0; i < d.corpus.docs.size(); ++i) {
    const auto& doc = d.corpus.docs[i];
    groups.insert(doc.group_id);
    const auto seq = subword_tokenize(words[i], d.vocab);
    std::vector<RationaleRecord> records;
    if (doc.annotated) {
      for (std::size_t r = 0; r < doc.rationales.size(); ++r) {
        auto rec = match_rationale(words[i], doc.rationales[r].text, doc.doc_id, doc.doc_id + "#r" + std::to_string(r));
        ++d.match_counts[to_string(rec.status)];
        if (!rec.matched()) continue;
        attach_subword_mask(rec, seq);
        records.push_back(std::move(rec));
      }
      auto filtered = filter_by_length(std::move(records), g.max_rationale_words);
      d.match_counts["removed_length"] += filtered.removed.size();
      records = std::move(filtered.kept);
    }

    EncodedItem report{doc.doc_id, doc.doc_id, SampleKind::Report, {seq.ids, std::vector<std::uint8_t>(seq.size(), 0), doc.label}};
    for (const auto& rec : records) {
      for (std::size_t t = 0; t < seq.size(); ++t) report.sample.mask[t] |= rec.subword_mask[t];
    }

    if (doc.split == Split::Train) {
      ++d.train_class_counts[doc.label];
      d.train_reports.push_back(std::move(report));
      if (!records.empty()) {
        ScoringDoc sd{doc.doc_id, doc.label, words[i], {}};
        for (const auto& rec : records) {
          const auto rseq = subword_tokenize_text(rec.raw_text, d.vocab);
          d.rationales.push_back({rec.rationale_id, doc.doc_id, SampleKind::Rationale,
                                  {rseq.ids, std::vector<std::uint8_t>(rseq.size(), 1), doc.label}});
          const auto comp = make_complement(words[i], rec.word_mask, doc.label);
          const auto cseq = subword_tokenize(comp.words, d.vocab);
          d.complements.push_back({rec.rationale_id + "~c", doc.doc_id, SampleKind::Complement,
                                   {cseq.ids, std::vector<std::uint8_t>(cseq.size(), 0), doc.label}});
          ++rationale_hist[doc.label];
          sd.rationales.push_back(rec);
        }
        d.scoring_docs.push_back(std::move(sd));
      }
    } else if (doc.split == Split::Val) {
      d.val_reports.push_back(std::move(report));
    } else if (doc.split == Split::Test) {
      d.test_reports.push_back(std::move(report));
      if (!records.empty()) {
        CoverageDoc cd;
        cd.doc_id = doc.doc_id;
        cd.label = doc.label;
        const std::size_t kept = seq.retained_words();
        cd.seq = seq;
        cd.seq.words.resize(kept);
        cd.seq.alignment.resize(kept);
        cd.mask.assign(kept, 0);
        for (const auto& rec : records) {
          for (std::size_t w = 0; w < kept; ++w) cd.mask[w] |= rec.word_mask[w];
          cd.rationale_length += rec.word_length;
        }
        if (std::any_of(cd.mask.begin(), cd.mask.end(), [](std::uint8_t m) { return m != 0; })) {
          d.coverage_docs.push_back(std::move(cd));
        }
      }
    }
  }

  if (pool) {
    try {
      const auto docs = sample_control(*pool, rationale_hist, groups, mix_seed(g.split_seed, 17));
      for (const auto& doc : docs) {
        const auto seq = subword_tokenize_text(doc.text, d.vocab);
        d.control.push_back({doc.doc_id, doc.doc_id, SampleKind::Report,
                             {seq.ids, std::vector<std::uint8_t>(seq.size(), 0), doc.label}});
      }
    } catch (const ShortageError& e) {
      d.control_error = e.what();
      log_line(std::string("control sampling failed: ") + e.what());
    }
  } else {
    d.control_error = "no control pool configured";
  }

  std::vector<std::pair<std::size_t, int>> freq;
  for (const auto& [label, n] : d.train_class_counts) freq.push_back({n, label});
  std::sort(freq.begin(), freq.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  for (std::size_t i = 0; i < freq.size() && i < g.focus_classes; ++i) d.focus_classes.push_back(freq[i].second);
  std::sort(d.focus_classes.begin(), d.focus_classes.end());

  std::ostringstream msg;
  msg << "data: " << d.train_reports.size() << " train / " << d.val_reports.size() << " val / "
      << d.test_reports.size() << " test reports, " << d.rationales.size() << " rationales, " << d.control.size()
      << " control reports, " << d.coverage_docs.size() << " coverage documents, vocab " << d.vocab.size();
  for (const auto& [k, v] : d.match_counts) msg << ", " << k << " " << v;
  log_line(msg.str());
  return d;
}

// ---------------------------------------------------------------------------
// Training-set composition

struct TrainingSet {
  std::vector<EncodedSample> samples;
  std::vector<std::string> sample_ids;
  std::vector<SampleKind> kinds;
  std::map<std::string, std::size_t> counts;
  std::optional<double> threshold;
  bool threshold_fallback = false;
};

// Resolves a threshold against scores; the recomputed percentile falls back
// to the literal 0.817 when no rationale qualifies.
inline std::pair<double, bool> resolve_threshold(const Threshold& t, const std::vector<FaithfulnessScore>& scores) {
  if (!t.recomputed) return {t.value, false};
  if (auto v = misprediction_threshold(scores, t.value)) return {*v, false};
  log_line("no misclassified rationale to take a percentile from; using " + std::to_string(kLiteralP90Threshold));
  return {kLiteralP90Threshold, true};
}

inline TrainingSet build_training_set(const ExperimentData& d, const RegimenConfig& r,
                                      const std::vector<FaithfulnessScore>* scores, std::uint64_t seed) {
  TrainingSet ts;
  auto add = [&](const std::vector<EncodedItem>& items, const char* what) {
    for (const auto& i : items) {
      ts.samples.push_back(i.sample);
      ts.sample_ids.push_back(i.sample_id);
      ts.kinds.push_back(i.kind);
    }
    ts.counts[what] += items.size();
  };
  auto need = [&](bool ok, const std::string& stage) {
    if (!ok) throw DependencyError("regimen " + r.name() + " needs " + stage);
  };
  std::vector<EncodedItem> rats = d.rationales;
  if (r.threshold) {
    need(scores != nullptr, "sufficiency scores");
    auto [t, fallback] = resolve_threshold(*r.threshold, *scores);
    ts.threshold = t;
    ts.threshold_fallback = fallback;
    const auto keep = filter_sufficient(*scores, t);
    std::erase_if(rats, [&](const EncodedItem& i) { return !keep.count(i.sample_id); });
  }
  switch (r.kind) {
    case RegimenKind::ReportsOnly:
      add(d.train_reports, "report");
      break;
    case RegimenKind::ReportsPlusRationales:
    case RegimenKind::ReportsPlusSufficient:
      need(!d.rationales.empty(), "matched rationales");
      add(d.train_reports, "report");
      add(rats, "rationale");
      break;
    case RegimenKind::ReportsPlusControl:
      need(!d.control_error && !d.control.empty(), "a control set" + (d.control_error ? " (" + *d.control_error + ")" : std::string{}));
      add(d.train_reports, "report");
      add(d.control, "control");
      break;
    case RegimenKind::RationalesOnly:
      need(!d.rationales.empty(), "matched rationales");
      add(d.rationales, "rationale");
      break;
    case RegimenKind::ComplementsOnly:
      need(!d.complements.empty(), "rationale complements");
      add(d.complements, "complement");
      break;
    case RegimenKind::LowResource: {
      need(!d.rationales.empty(), "matched rationales");
      const std::set<int> classes(d.focus_classes.begin(), d.focus_classes.end());
      add(d.train_reports, "report");
      add(subsample_rationales(rats, classes, r.m, seed, [](const EncodedItem& i) { return i.sample.label; }),
          "rationale");
      break;
    }
  }
  std::ostringstream msg;
  msg << r.name() << " seed " << seed << ":";
  for (const auto& [k, v] : ts.counts) msg << ' ' << k << ' ' << v;
  if (ts.threshold) msg << " threshold " << *ts.threshold;
  log_line(msg.str());
  return ts;
}

// ---------------------------------------------------------------------------
// Grid cells

struct CellSpec {
  RegimenConfig regimen;
  Architecture arch = Architecture::Baseline;
  std::uint64_t seed = 0;
};

inline std::string cell_fingerprint(const GridConfig& g, const CellSpec& c, std::uint64_t corpus_hash) {
  nlohmann::json j = data_config_json(g);
  j["regimen"] = c.regimen.name();
  j["architecture"] = to_string(c.arch);
  j["seed"] = c.seed;
  j["train"] = to_json(g.train);
  j["denominator"] = g.denominator == Denominator::Rationale ? "rationale" : "highlighted";
  Fnv1a h;
  h.update(j.dump());
  h.update(corpus_hash);
  return hex64(h.digest());
}

struct SplitMetrics {
  std::string split;
  MetricsReport report;
};

struct CoverageRun {
  std::string mechanism;  // "word" or "phrase"
  double percentile = 0.0;
  std::vector<DocCoverage> docs;
  // Highlighted rationale words per document; all the overlap matrix needs.
  std::vector<std::vector<std::size_t>> hits;
};

struct CellResult {
  std::string regimen;
  std::string architecture;
  std::uint64_t seed = 0;
  std::string fingerprint;
  bool ok = false;
  std::string error;
  int num_classes = 0;
  std::map<std::string, std::size_t> counts;
  std::optional<double> threshold;
  bool threshold_fallback = false;
  int epochs = 0;
  int best_epoch = 0;
  std::vector<SplitMetrics> metrics;  // train, val, test reports
  std::vector<FaithfulnessScore> scores;
  std::vector<CoverageRun> coverage;
  std::vector<int> focus_classes;
  std::map<int, std::size_t> train_class_counts;

  const MetricsReport* split(const std::string& s) const {
    for (const auto& m : metrics) {
      if (m.split == s) return &m.report;
    }
    return nullptr;
  }
};

inline TrainConfig cell_train_config(const GridConfig& g, const CellSpec& c) {
  TrainConfig cfg = g.train;
  cfg.arch = c.arch;
  cfg.seed = c.seed;
  return cfg;
}

inline TrainedModel train_for(const std::vector<EncodedSample>& samples, const std::vector<EncodedSample>& val,
                              const TrainConfig& cfg, int vocab_size, int num_classes) {
  switch (cfg.arch) {
    case Architecture::MultitaskTokenSeq: return train_multitask(samples, &val, cfg, vocab_size, num_classes);
    case Architecture::MaskedAttention: return train_masked_attention(samples, &val, cfg, vocab_size, num_classes);
    default: return train(samples, &val, cfg, vocab_size, num_classes);
  }
}

// Report-trained models per (architecture, seed); every cell that needs
// sufficiency scores shares one, trained once.
class ScorerCache {
 public:
  struct Entry {
    TrainedModel model;
    std::vector<FaithfulnessScore> scores;
  };

  std::shared_ptr<const Entry> get(const ExperimentData& d, const GridConfig& g, const CellSpec& c) {
    const std::string key = std::string(to_string(c.arch)) + "/" + std::to_string(c.seed);
    std::shared_future<std::shared_ptr<const Entry>> fut;
    std::promise<std::shared_ptr<const Entry>> promise;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      auto it = cache_.find(key);
      if (it == cache_.end()) {
        fut = promise.get_future().share();
        cache_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        auto e = std::make_shared<Entry>();
        const auto ts = build_training_set(d, RegimenConfig{}, nullptr, c.seed);
        e->model = train_for(ts.samples, samples_of(d.val_reports), cell_train_config(g, c),
                             static_cast<int>(d.vocab.size()), d.num_classes);
        e->scores = score_rationales(e->model.model, d.vocab, d.scoring_docs).scores;
        promise.set_value(std::move(e));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_future<std::shared_ptr<const Entry>>> cache_;
};

inline MetricsReport evaluate_model(const Model& m, const std::vector<EncodedItem>& items, int num_classes,
                                    std::vector<int>* preds_out = nullptr) {
  std::vector<int> preds, golds;
  for (const auto& i : items) {
    preds.push_back(argmax(m.predict_proba(i.sample.ids)));
    golds.push_back(i.sample.label);
  }
  if (preds_out) *preds_out = preds;
  if (items.empty()) return {};
  return evaluate(preds, golds, num_classes);
}

inline std::vector<CoverageRun> coverage_runs(const Model& m, const ExperimentData& d, Denominator denom) {
  std::vector<CoverageRun> runs;
  for (const char* mech : {"word", "phrase"}) {
    for (double p : kCoveragePercentiles) runs.push_back({mech, p, {}, {}});
  }
  for (const auto& doc : d.coverage_docs) {
    const auto scores = m.attention_scores(doc.seq.ids);
    const bool correct = argmax(m.predict_proba(doc.seq.ids)) == doc.label;
    const auto word = word_scores_from_subwords(scores.word, doc.seq.alignment);
    const auto phrase = word_scores_from_subwords(scores.phrase, doc.seq.alignment);
    for (auto& run : runs) {
      const auto& ws = run.mechanism == std::string("word") ? word : phrase;
      const auto hl = highlight(ws, run.percentile);
      run.docs.push_back({doc.doc_id, correct, doc.rationale_length, coverage_ratio(hl, doc.mask, denom)});
      std::vector<std::size_t> hit;
      for (auto i : hl) {
        if (doc.mask[i]) hit.push_back(i);
      }
      run.hits.push_back(std::move(hit));
    }
  }
  return runs;
}

struct CellModel {
  TrainedModel trained;
  std::map<std::string, std::size_t> counts;
  std::optional<double> threshold;
  bool threshold_fallback = false;
  std::vector<FaithfulnessScore> scores;  // filled for reports_only
};

inline CellModel train_cell(const ExperimentData& d, const GridConfig& g, const CellSpec& c, ScorerCache& cache) {
  CellModel out;
  std::shared_ptr<const ScorerCache::Entry> scorer;
  const bool is_base = c.regimen.kind == RegimenKind::ReportsOnly;
  if (is_base || c.regimen.needs_scores()) scorer = cache.get(d, g, c);
  if (is_base) {
    out.trained = scorer->model;
    out.scores = scorer->scores;
    out.counts["report"] = d.train_reports.size();
    return out;
  }
  auto ts = build_training_set(d, c.regimen, scorer ? &scorer->scores : nullptr, c.seed);
  out.counts = ts.counts;
  out.threshold = ts.threshold;
  out.threshold_fallback = ts.threshold_fallback;
  out.trained = train_for(ts.samples, samples_of(d.val_reports), cell_train_config(g, c),
                          static_cast<int>(d.vocab.size()), d.num_classes);
  return out;
}

inline CellResult run_cell(const ExperimentData& d, const GridConfig& g, const CellSpec& c, ScorerCache& cache) {
  CellResult res;
  res.regimen = c.regimen.name();
  res.architecture = to_string(c.arch);
  res.seed = c.seed;
  res.fingerprint = cell_fingerprint(g, c, d.corpus_hash);
  res.num_classes = d.num_classes;
  res.focus_classes = d.focus_classes;
  res.train_class_counts = d.train_class_counts;
  try {
    auto cm = train_cell(d, g, c, cache);
    res.counts = cm.counts;
    res.threshold = cm.threshold;
    res.threshold_fallback = cm.threshold_fallback;
    res.scores = std::move(cm.scores);
    const auto& tm = cm.trained;
    res.epochs = static_cast<int>(tm.history.size());
    res.best_epoch = tm.best_epoch;
    res.metrics.push_back({"train", evaluate_model(tm.model, d.train_reports, d.num_classes)});
    res.metrics.push_back({"val", evaluate_model(tm.model, d.val_reports, d.num_classes)});
    res.metrics.push_back({"test", evaluate_model(tm.model, d.test_reports, d.num_classes)});
    if (c.arch == Architecture::PhraseAttention || c.arch == Architecture::MaskedAttention) {
      res.coverage = coverage_runs(tm.model, d, g.denominator);
    }
    res.ok = true;
  } catch (const std::exception& e) {
    res.ok = false;
    res.error = e.what();
    log_line("cell " + res.regimen + " / " + res.architecture + " / seed " + std::to_string(c.seed) + " failed: " + e.what());
  }
  return res;
}

// ---------------------------------------------------------------------------
// Result serialization

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& c : m.per_class) pc.push_back({{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}});
  return {{"n", m.n},
          {"accuracy", m.accuracy},
          {"macro_f1", m.macro_f1},
          {"accuracy_ci", {m.accuracy_ci.low, m.accuracy_ci.high}},
          {"macro_f1_ci", {m.macro_f1_ci.low, m.macro_f1_ci.high}},
          {"per_class", pc}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport m;
  m.n = j.at("n");
  m.accuracy = j.at("accuracy");
  m.macro_f1 = j.at("macro_f1");
  m.accuracy_ci = {j.at("accuracy_ci")[0], j.at("accuracy_ci")[1]};
  m.macro_f1_ci = {j.at("macro_f1_ci")[0], j.at("macro_f1_ci")[1]};
  for (const auto& c : j.at("per_class")) m.per_class.push_back({c.at("precision"), c.at("recall"), c.at("f1")});
  return m;
}

inline nlohmann::json to_json(const CellResult& r) {
  nlohmann::json j{{"regimen", r.regimen},         {"architecture", r.architecture}, {"seed", r.seed},
                   {"fingerprint", r.fingerprint}, {"ok", r.ok},                     {"num_classes", r.num_classes},
                   {"counts", r.counts},           {"epochs", r.epochs},             {"best_epoch", r.best_epoch},
                   {"focus_classes", r.focus_classes}};
  if (!r.ok) j["error"] = r.error;
  if (r.threshold) j["threshold"] = *r.threshold;
  j["threshold_fallback"] = r.threshold_fallback;
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [k, v] : r.train_class_counts) counts[std::to_string(k)] = v;
  j["train_class_counts"] = counts;
  j["metrics"] = nlohmann::json::object();
  for (const auto& m : r.metrics) j["metrics"][m.split] = to_json(m.report);
  j["coverage"] = nlohmann::json::array();
  for (const auto& c : r.coverage) {
    nlohmann::json docs = nlohmann::json::array();
    for (std::size_t i = 0; i < c.docs.size(); ++i) {
      const auto& d = c.docs[i];
      docs.push_back({{"doc_id", d.doc_id},
                      {"correct", d.correct},
                      {"rationale_length", d.rationale_length},
                      {"ratio", d.ratio},
                      {"hits", c.hits[i]}});
    }
    j["coverage"].push_back({{"mechanism", c.mechanism}, {"percentile", c.percentile}, {"docs", docs}});
  }
  return j;
}

inline CellResult cell_from_json(const nlohmann::json& j) {
  CellResult r;
  r.regimen = j.at("regimen");
  r.architecture = j.at("architecture");
  r.seed = j.at("seed");
  r.fingerprint = j.at("fingerprint");
  r.ok = j.at("ok");
  r.error = j.value("error", std::string{});
  r.num_classes = j.at("num_classes");
  r.counts = j.at("counts").get<std::map<std::string, std::size_t>>();
  r.epochs = j.at("epochs");
  r.best_epoch = j.at("best_epoch");
  r.focus_classes = j.at("focus_classes").get<std::vector<int>>();
  if (j.contains("threshold")) r.threshold = j["threshold"].get<double>();
  r.threshold_fallback = j.value("threshold_fallback", false);
  for (const auto& [k, v] : j.at("train_class_counts").items()) r.train_class_counts[std::stoi(k)] = v;
  for (const auto& [k, v] : j.at("metrics").items()) r.metrics.push_back({k, metrics_from_json(v)});
  for (const auto& c : j.at("coverage")) {
    CoverageRun run{c.at("mechanism"), c.at("percentile"), {}, {}};
    for (const auto& d : c.at("docs")) {
      run.docs.push_back({d.at("doc_id"), d.at("correct"), d.at("rationale_length"), d.at("ratio")});
      run.hits.push_back(d.at("hits").get<std::vector<std::size_t>>());
    }
    r.coverage.push_back(std::move(run));
  }
  return r;
}

inline std::string cell_dir_name(const CellResult& r) {
  std::string name = r.regimen + "__" + r.architecture + "__seed" + std::to_string(r.seed) + "__" + r.fingerprint;
  for (char& ch : name) {
    if (ch == '(' || ch == ')' || ch == ',' || ch == '=') ch = '_';
  }
  return name;
}

inline void save_cell(const std::filesystem::path& root, const CellResult& r) {
  const auto dir = root / cell_dir_name(r);
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "result.json") << to_json(r).dump(1) << '\n';
  if (!r.scores.empty()) {
    std::ofstream out(dir / "scores.csv");
    write_scores_csv(out, r.scores);
  }
}

inline std::vector<CellResult> load_results(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw InputError("no results directory " + root.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory() && std::filesystem::exists(e.path() / "result.json")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<CellResult> out;
  for (const auto& dir : dirs) {
    std::ifstream in(dir / "result.json");
    auto r = cell_from_json(nlohmann::json::parse(in));
    if (std::filesystem::exists(dir / "scores.csv")) {
      std::ifstream s(dir / "scores.csv");
      r.scores = read_scores_csv(s);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid runner

struct GridReport {
  std::vector<CellResult> cells;
  std::size_t failed() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.ok ? 0 : 1;
    return n;
  }
};

inline std::vector<CellSpec> grid_cells(const GridConfig& g) {
  std::vector<CellSpec> out;
  for (auto arch : g.architectures) {
    for (const auto& r : g.regimens) {
      for (auto seed : g.seeds) out.push_back({r, arch, seed});
    }
  }
  return out;
}

// Runs every cell (up to `workers` at once). Failed cells are recorded and
// the grid carries on. With `out` set, each cell is persisted as it ends.
inline GridReport run_grid(const ExperimentData& d, const GridConfig& g, unsigned workers = 1,
                           const std::optional<std::filesystem::path>& out = std::nullopt) {
  const auto cells = grid_cells(g);
  GridReport report;
  report.cells.resize(cells.size());
  ScorerCache cache;
  std::atomic<std::size_t> next{0};
  std::mutex save_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto t0 = std::chrono::steady_clock::now();
      report.cells[i] = run_cell(d, g, cells[i], cache);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const auto* test = report.cells[i].split("test");
      char buf[128];
      std::snprintf(buf, sizeof buf, " done in %.1fs, test accuracy %.4f", secs, test ? test->accuracy : 0.0);
      log_line(report.cells[i].regimen + " / " + report.cells[i].architecture + " / seed " +
               std::to_string(cells[i].seed) + (report.cells[i].ok ? std::string(buf) : " failed"));
      if (out) {
        std::lock_guard lock(save_mu);
        save_cell(*out, report.cells[i]);
      }
    }
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(cells.size())));
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return report;
}

// ---------------------------------------------------------------------------
// Reports

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void write_csv(std::ostream& out, const Table& t) {
  for (std::size_t i = 0; i < t.header.size(); ++i) out << (i ? "," : "") << csv_escape(t.header[i]);
  out << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_escape(row[i]);
    out << '\n';
  }
}

inline nlohmann::json table_json(const Table& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : t.rows) {
    nlohmann::json o = nlohmann::json::object();
    for (std::size_t i = 0; i < t.header.size() && i < row.size(); ++i) o[t.header[i]] = row[i];
    rows.push_back(o);
  }
  return {{"columns", t.header}, {"rows", rows}};
}

inline std::string fmt_number(double x, int round) {
  if (round >= 0) return format_fixed(x, round);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// Cells of one (regimen, architecture), ordered by seed.
inline std::map<std::pair<std::string, std::string>, std::vector<const CellResult*>> group_cells(
    const std::vector<CellResult>& cells) {
  std::map<std::pair<std::string, std::string>, std::vector<const CellResult*>> out;
  for (const auto& c : cells) {
    if (c.ok) out[{c.regimen, c.architecture}].push_back(&c);
  }
  for (auto& [k, v] : out) {
    std::sort(v.begin(), v.end(), [](auto a, auto b) { return a->seed < b->seed; });
  }
  return out;
}

// One row per (regimen, model, metric): seed-mean test value with its
// normal-approximation interval at the test size.
inline Table table2(const std::vector<CellResult>& cells, int round = 3) {
  Table t{{"regimen", "model", "metric", "value", "ci", "ci_low", "ci_high", "n_test", "seeds", "train_samples"}, {}};
  for (const auto& [key, group] : group_cells(cells)) {
    std::size_t n = 0;
    double acc = 0.0, f1 = 0.0, samples = 0.0;
    for (const auto* c : group) {
      const auto* m = c->split("test");
      n = m->n;
      acc += m->accuracy;
      f1 += m->macro_f1;
      std::size_t s = 0;
      for (const auto& [k, v] : c->counts) s += v;
      samples += static_cast<double>(s);
    }
    const double k = static_cast<double>(group.size());
    for (const auto& [metric, value] : {std::pair{"accuracy", acc / k}, std::pair{"macro_f1", f1 / k}}) {
      const auto ci = n ? normal_ci(value, n) : Interval{value, value};
      t.rows.push_back({key.first, key.second, metric, fmt_number(value, round), format_interval(ci, 3),
                        fmt_number(ci.low, round), fmt_number(ci.high, round), std::to_string(n),
                        std::to_string(group.size()), fmt_number(samples / k, 0)});
    }
  }
  return t;
}

// Class-wise test F1 for the focus classes across low-resource settings,
// next to the report-only and all-rationale references.
inline Table table3(const std::vector<CellResult>& cells, int round = 3) {
  Table t{{"model", "class", "setting", "m", "threshold", "f1", "seeds"}, {}};
  for (const auto& [key, group] : group_cells(cells)) {
    const auto& regimen = key.first;
    std::string m = "", thr = "none";
    if (regimen == "reports_only") {
      m = "0";
    } else if (regimen == "reports_plus_rationales") {
      m = "all";
    } else if (regimen.starts_with("low_resource(")) {
      const auto r = RegimenConfig::parse(regimen);
      m = std::to_string(r.m);
      if (r.threshold) thr = r.threshold->str();
    } else {
      continue;
    }
    for (int cls : group.front()->focus_classes) {
      double f1 = 0.0;
      for (const auto* c : group) f1 += c->split("test")->per_class.at(static_cast<std::size_t>(cls)).f1;
      t.rows.push_back({key.second, std::to_string(cls), regimen, m, thr,
                        fmt_number(f1 / static_cast<double>(group.size()), round), std::to_string(group.size())});
    }
  }
  return t;
}

// Accuracy and macro-F1 on train / val / test reports for models trained on
// rationales, complements, or reports.
inline Table table4(const std::vector<CellResult>& cells, int round = 3) {
  Table t{{"model", "split", "metric", "rationales", "complements", "reports"}, {}};
  const auto groups = group_cells(cells);
  std::set<std::string> models;
  for (const auto& [k, v] : groups) models.insert(k.second);
  for (const auto& model : models) {
    for (const char* split : {"train", "val", "test"}) {
      for (const char* metric : {"accuracy", "macro_f1"}) {
        std::vector<std::string> row{model, split, metric};
        for (const char* reg : {"rationales_only", "complements_only", "reports_only"}) {
          auto it = groups.find({reg, model});
          if (it == groups.end()) {
            row.push_back("");
            continue;
          }
          double s = 0.0;
          for (const auto* c : it->second) {
            const auto* m = c->split(split);
            s += std::string(metric) == "accuracy" ? m->accuracy : m->macro_f1;
          }
          row.push_back(fmt_number(s / static_cast<double>(it->second.size()), round));
        }
        t.rows.push_back(std::move(row));
      }
    }
  }
  return t;
}

// Coverage keyed by (regimen, model, mechanism, percentile): seed-mean of
// the mean per-document ratio and its std across seeds.
inline Table coverage_table(const std::vector<CellResult>& cells, int round = 3) {
  Table t{{"regimen", "model", "mechanism", "percentile", "group", "mean", "std", "docs", "seeds"}, {}};
  for (const auto& [key, group] : group_cells(cells)) {
    if (group.front()->coverage.empty()) continue;
    for (std::size_t run = 0; run < group.front()->coverage.size(); ++run) {
      std::map<std::string, std::vector<double>> per_group;
      std::map<std::string, std::size_t> docs;
      for (const auto* c : group) {
        const auto b = coverage_breakdowns(c->coverage[run].docs);
        per_group["all"].push_back(b.overall.mean);
        docs["all"] += b.overall.n;
        for (const auto& [g, m] : b.by_correctness) {
          per_group[g].push_back(m.mean);
          docs[g] += m.n;
        }
        for (const auto& [g, m] : b.by_length) {
          per_group["length " + g].push_back(m.mean);
          docs["length " + g] += m.n;
        }
      }
      const auto& cr = group.front()->coverage[run];
      for (const auto& [g, v] : per_group) {
        t.rows.push_back({key.first, key.second, cr.mechanism, fmt_number(cr.percentile, 0), g,
                          fmt_number(mean_of(v), round), fmt_number(population_std(v), round),
                          std::to_string(docs[g]), std::to_string(v.size())});
      }
    }
  }
  return t;
}

// Long format: one row per (cell, mechanism, percentile, document).
inline Table coverage_docs_table(const std::vector<CellResult>& cells, int round = -1) {
  Table t{{"regimen", "model", "seed", "mechanism", "percentile", "doc_id", "correct", "rationale_length", "ratio"}, {}};
  for (const auto& c : cells) {
    for (const auto& run : c.coverage) {
      for (const auto& d : run.docs) {
        t.rows.push_back({c.regimen, c.architecture, std::to_string(c.seed), run.mechanism,
                          fmt_number(run.percentile, 0), d.doc_id, d.correct ? "1" : "0",
                          std::to_string(d.rationale_length), fmt_number(d.ratio, round)});
      }
    }
  }
  return t;
}

// Bar-chart data: groups (regimens) × percentiles with error bars, plus the
// regimen overlap matrices averaged over seeds.
inline nlohmann::json fig1_json(const std::vector<CellResult>& cells) {
  nlohmann::json out{{"series", nlohmann::json::array()}, {"overlap", nlohmann::json::array()}};
  const auto groups = group_cells(cells);
  for (const auto& [key, group] : groups) {
    if (group.front()->coverage.empty()) continue;
    for (std::size_t run = 0; run < group.front()->coverage.size(); ++run) {
      std::vector<double> means;
      for (const auto* c : group) means.push_back(coverage_breakdowns(c->coverage[run].docs).overall.mean);
      out["series"].push_back({{"group", key.first},
                               {"model", key.second},
                               {"mechanism", group.front()->coverage[run].mechanism},
                               {"percentile", group.front()->coverage[run].percentile},
                               {"mean", mean_of(means)},
                               {"error", population_std(means)}});
    }
  }
  // Overlap across regimens for each (model, mechanism, percentile).
  std::map<std::tuple<std::string, std::string, double>, std::map<std::uint64_t, std::map<std::string, const CoverageRun*>>>
      by_setting;
  for (const auto& c : cells) {
    if (!c.ok) continue;
    for (const auto& run : c.coverage) by_setting[{c.architecture, run.mechanism, run.percentile}][c.seed][c.regimen] = &run;
  }
  for (const auto& [setting, seeds] : by_setting) {
    std::vector<std::string> names;
    std::vector<std::vector<double>> acc;
    std::size_t used = 0;
    for (const auto& [seed, regs] : seeds) {
      if (regs.size() < 2) continue;
      std::map<std::string, HighlightSets> sets;
      std::map<std::string, std::vector<std::uint8_t>> masks;
      for (const auto& [reg, run] : regs) {
        for (std::size_t i = 0; i < run->docs.size(); ++i) sets[reg][run->docs[i].doc_id] = run->hits[i];
      }
      // Hits are already restricted to rationale words, so their union is
      // an exact stand-in for the rationale mask.
      for (const auto& [reg, hs] : sets) {
        for (const auto& [doc, idx] : hs) {
          auto& m = masks[doc];
          for (auto i : idx) {
            if (m.size() <= i) m.resize(i + 1, 0);
            m[i] = 1;
          }
        }
      }
      const auto mat = regimen_overlap(sets, masks);
      if (names.empty()) {
        names = mat.regimens;
        acc.assign(names.size(), std::vector<double>(names.size(), 0.0));
      }
      if (mat.regimens != names) continue;
      for (std::size_t a = 0; a < names.size(); ++a) {
        for (std::size_t b = 0; b < names.size(); ++b) acc[a][b] += mat.values[a][b];
      }
      ++used;
    }
    if (!used) continue;
    for (auto& row : acc) {
      for (auto& v : row) v /= static_cast<double>(used);
    }
    out["overlap"].push_back({{"model", std::get<0>(setting)},
                              {"mechanism", std::get<1>(setting)},
                              {"percentile", std::get<2>(setting)},
                              {"regimens", names},
                              {"matrix", acc}});
  }
  return out;
}

// Faithfulness by class-frequency bin, pooled over seeds.
inline nlohmann::json fig2_json(const std::vector<CellResult>& cells, const std::vector<std::size_t>& edges) {
  nlohmann::json out = nlohmann::json::array();
  std::map<std::string, std::vector<FaithfulnessScore>> pooled;
  std::map<std::string, std::map<int, std::size_t>> counts;
  for (const auto& c : cells) {
    if (!c.ok || c.scores.empty()) continue;
    auto& p = pooled[c.architecture];
    p.insert(p.end(), c.scores.begin(), c.scores.end());
    counts[c.architecture] = c.train_class_counts;
  }
  for (const auto& [model, scores] : pooled) {
    for (auto field : {ScoreField::Suff, ScoreField::Comp}) {
      nlohmann::json bins = nlohmann::json::array();
      for (const auto& b : aggregate_by_class_frequency(scores, counts[model], edges, field)) {
        bins.push_back({{"low", b.low},
                        {"high", b.high ? nlohmann::json(*b.high) : nlohmann::json(nullptr)},
                        {"classes", b.classes},
                        {"samples", b.samples},
                        {"sample_mean", b.sample_mean},
                        {"class_mean", b.class_mean}});
      }
      out.push_back({{"model", model}, {"score", field == ScoreField::Suff ? "sufficiency" : "comprehensiveness"},
                     {"bins", bins}});
    }
  }
  return out;
}

// Per-cell metrics in long format, full precision by default.
inline Table cells_table(const std::vector<CellResult>& cells, int round = -1) {
  Table t{{"regimen", "model", "seed", "fingerprint", "status", "split", "accuracy", "macro_f1", "n", "threshold",
           "error"},
          {}};
  for (const auto& c : cells) {
    const std::string thr = c.threshold ? fmt_number(*c.threshold, round) : "";
    if (!c.ok) {
      t.rows.push_back({c.regimen, c.architecture, std::to_string(c.seed), c.fingerprint, "failed", "", "", "", "",
                        thr, c.error});
      continue;
    }
    for (const auto& m : c.metrics) {
      t.rows.push_back({c.regimen, c.architecture, std::to_string(c.seed), c.fingerprint, "ok", m.split,
                        fmt_number(m.report.accuracy, round), fmt_number(m.report.macro_f1, round),
                        std::to_string(m.report.n), thr, ""});
    }
  }
  return t;
}

enum class ReportFormat { Csv, Json };

inline void emit_report(const std::vector<CellResult>& cells, const std::filesystem::path& out, ReportFormat format,
                        int round = 3, const std::vector<std::size_t>& frequency_bins = {0, 100, 200, 400}) {
  std::filesystem::create_directories(out);
  const std::vector<std::pair<std::string, Table>> tables = {
      {"table2", table2(cells, round)},     {"table3", table3(cells, round)},
      {"table4", table4(cells, round)},     {"coverage", coverage_table(cells, round)},
      {"coverage_docs", coverage_docs_table(cells)}, {"cells", cells_table(cells, round)}};
  for (const auto& [name, t] : tables) {
    if (format == ReportFormat::Csv) {
      std::ofstream f(out / (name + ".csv"));
      write_csv(f, t);
    } else {
      std::ofstream f(out / (name + ".json"));
      f << table_json(t).dump(1) << '\n';
    }
  }
  std::ofstream(out / "fig1.json") << fig1_json(cells).dump(1) << '\n';
  std::ofstream(out / "fig2.json") << fig2_json(cells, frequency_bins).dump(1) << '\n';
}

}  // namespace rlab
