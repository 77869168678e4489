// rationale-lab: corpus tooling, training, faithfulness scoring and the
// experiment grid from the command line.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rationale_lab/experiments.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw rlab::InputError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw rlab::ConfigError(path + ": " + e.what());
  }
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw rlab::InputError("cannot read " + path);
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw rlab::InputError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// "-" writes to stdout.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path != "-") {
      file_.open(path);
      if (!file_) throw rlab::InputError("cannot write " + path);
    }
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

std::vector<rlab::RationaleRecord> read_matched(const std::string& path) {
  std::vector<rlab::RationaleRecord> out;
  for (const auto& j : read_jsonl(path)) out.push_back(rlab::rationale_record_from_json(j));
  return out;
}

std::map<std::string, const rlab::Document*> index_docs(const rlab::Corpus& c) {
  std::map<std::string, const rlab::Document*> m;
  for (const auto& d : c.docs) m[d.doc_id] = &d;
  return m;
}

const rlab::Document& doc_of(const std::map<std::string, const rlab::Document*>& idx, const std::string& id) {
  auto it = idx.find(id);
  if (it == idx.end()) throw rlab::InputError("document " + id + " is not in the corpus");
  return *it->second;
}

std::optional<rlab::Split> split_filter(const std::string& s) {
  if (s.empty() || s == "all") return std::nullopt;
  auto sp = rlab::split_from_string(s);
  if (sp == rlab::Split::Unassigned) throw rlab::ConfigError("unknown split: " + s);
  return sp;
}

bool in_split(const rlab::Document& d, const std::optional<rlab::Split>& s) { return !s || d.split == *s; }

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoul(part));
    } catch (const std::logic_error&) {
      throw rlab::ConfigError("bad list entry: " + part);
    }
  }
  return out;
}

void check_vocab(const rlab::Model& m, const rlab::SubwordVocab& v) {
  if (m.vocab_hash != 0 && m.vocab_hash != v.fingerprint()) {
    throw rlab::InputError("vocabulary does not match the one the model was trained with");
  }
  if (v.size() != static_cast<std::size_t>(m.dims().vocab_size)) {
    throw rlab::InputError("vocabulary size does not match the model");
  }
}

// Class counts over the train split, or the whole corpus when unsplit.
std::map<int, std::size_t> train_counts(const rlab::Corpus& c) {
  bool split = false;
  for (const auto& d : c.docs) split |= d.split != rlab::Split::Unassigned;
  std::map<int, std::size_t> out;
  for (const auto& d : c.docs) {
    if (!split || d.split == rlab::Split::Train) ++out[d.label];
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rationale-augmented text classification experiments"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress logging");

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus");
  std::string gen_config, gen_out = "-";
  std::optional<std::uint64_t> gen_seed;
  bool gen_pool = false;
  gen->add_option("--config", gen_config, "Generator spec (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--seed", gen_seed, "Override the spec seed");
  gen->add_option("--out", gen_out, "Corpus JSONL");
  gen->add_flag("--pool", gen_pool, "Emit the unannotated control pool for this spec");

  // split
  auto* split = app.add_subcommand("split", "Assign train/val/test splits by group");
  std::string split_in, split_out = "-";
  std::uint64_t split_seed = 0;
  rlab::SplitRatios ratios;
  double hold_out = 0.027;
  split->add_option("--in", split_in, "Corpus JSONL")->required()->check(CLI::ExistingFile);
  split->add_option("--out", split_out, "Split corpus JSONL");
  split->add_option("--seed", split_seed);
  split->add_option("--train", ratios.train);
  split->add_option("--val", ratios.val);
  split->add_option("--test", ratios.test);
  split->add_option("--hold-out", hold_out, "Share of annotated documents routed to test");

  // control-sample
  auto* ctrl = app.add_subcommand("control-sample", "Draw a class-matched control set from a pool");
  std::string ctrl_pool, ctrl_corpus, ctrl_matched, ctrl_out = "-";
  std::uint64_t ctrl_seed = 0;
  ctrl->add_option("--pool", ctrl_pool, "Pool corpus JSONL")->required()->check(CLI::ExistingFile);
  ctrl->add_option("--corpus", ctrl_corpus, "Main corpus; its groups are excluded")->required()->check(CLI::ExistingFile);
  ctrl->add_option("--matched", ctrl_matched, "Matched rationales whose class histogram is matched")
      ->required()
      ->check(CLI::ExistingFile);
  ctrl->add_option("--seed", ctrl_seed);
  ctrl->add_option("--out", ctrl_out);

  // subsample
  auto* sub = app.add_subcommand("subsample", "Random subset of matched rationales in selected classes");
  std::string sub_in, sub_corpus, sub_classes, sub_out = "-";
  std::size_t sub_m = 0, sub_top = 10;
  std::uint64_t sub_seed = 0;
  sub->add_option("--in", sub_in, "Matched rationales JSONL")->required()->check(CLI::ExistingFile);
  sub->add_option("--corpus", sub_corpus, "Corpus providing labels")->required()->check(CLI::ExistingFile);
  sub->add_option("--m", sub_m, "Total rationales to keep")->required();
  sub->add_option("--classes", sub_classes, "Comma-separated classes (default: most frequent --top)");
  sub->add_option("--top", sub_top, "Number of most frequent training classes");
  sub->add_option("--seed", sub_seed);
  sub->add_option("--out", sub_out);

  // vocab
  auto* voc = app.add_subcommand("vocab", "Learn a subword vocabulary");
  std::string voc_corpus, voc_split = "train", voc_out = "-";
  std::size_t voc_size = 8000;
  voc->add_option("--corpus", voc_corpus)->required()->check(CLI::ExistingFile);
  voc->add_option("--split", voc_split, "Split to learn from (all for every document)");
  voc->add_option("--size", voc_size);
  voc->add_option("--out", voc_out);

  // match
  auto* match = app.add_subcommand("match", "Locate annotated rationales in their documents");
  std::string match_corpus, match_split, match_out = "-";
  match->add_option("--corpus", match_corpus)->required()->check(CLI::ExistingFile);
  match->add_option("--split", match_split, "Restrict to one split");
  match->add_option("--out", match_out);

  // complement
  auto* comp = app.add_subcommand("complement", "Documents with their matched rationale removed");
  std::string comp_corpus, comp_matched, comp_out = "-";
  comp->add_option("--corpus", comp_corpus)->required()->check(CLI::ExistingFile);
  comp->add_option("--matched", comp_matched)->required()->check(CLI::ExistingFile);
  comp->add_option("--out", comp_out);

  // filter-length
  auto* flen = app.add_subcommand("filter-length", "Drop over-long rationales");
  std::string flen_in, flen_out = "-", flen_removed;
  std::size_t flen_max = rlab::kMaxRationaleWords;
  bool flen_auto = false;
  flen->add_option("--in", flen_in)->required()->check(CLI::ExistingFile);
  flen->add_option("--out", flen_out);
  flen->add_option("--removed", flen_removed, "Write removed records here");
  auto* flen_max_opt = flen->add_option("--max-words", flen_max);
  flen->add_flag("--auto", flen_auto, "Use mean + 2 std of the matched lengths")->excludes(flen_max_opt);

  // train
  auto* trn = app.add_subcommand("train", "Train one model under one regimen");
  std::string trn_config, trn_corpus, trn_pool, trn_arch = "baseline", trn_regimen = "reports_only", trn_out,
                                                trn_vocab_out, trn_history;
  std::uint64_t trn_seed = 1;
  trn->add_option("--config", trn_config, "Grid config supplying data and training options")->check(CLI::ExistingFile);
  trn->add_option("--corpus", trn_corpus, "Corpus JSONL (overrides the config)")->check(CLI::ExistingFile);
  trn->add_option("--pool", trn_pool, "Control pool JSONL")->check(CLI::ExistingFile);
  trn->add_option("--arch", trn_arch);
  trn->add_option("--regimen", trn_regimen);
  trn->add_option("--seed", trn_seed);
  trn->add_option("--out", trn_out, "Checkpoint JSON")->required();
  trn->add_option("--vocab-out", trn_vocab_out, "Vocabulary file (default: <out>.vocab)");
  trn->add_option("--history", trn_history, "Per-epoch history JSON");

  // predict
  auto* pred = app.add_subcommand("predict", "Class probabilities for corpus documents");
  std::string pred_model, pred_vocab, pred_corpus, pred_split, pred_out = "-";
  pred->add_option("--model", pred_model)->required()->check(CLI::ExistingFile);
  pred->add_option("--vocab", pred_vocab)->required()->check(CLI::ExistingFile);
  pred->add_option("--corpus", pred_corpus)->required()->check(CLI::ExistingFile);
  pred->add_option("--split", pred_split);
  pred->add_option("--out", pred_out);

  // attend
  auto* att = app.add_subcommand("attend", "Word and phrase attention scores per document");
  std::string att_model, att_vocab, att_corpus, att_split, att_doc, att_out = "-";
  double att_percentile = 90.0;
  att->add_option("--model", att_model)->required()->check(CLI::ExistingFile);
  att->add_option("--vocab", att_vocab)->required()->check(CLI::ExistingFile);
  att->add_option("--corpus", att_corpus)->required()->check(CLI::ExistingFile);
  att->add_option("--split", att_split);
  att->add_option("--doc", att_doc, "A single document id");
  att->add_option("--percentile", att_percentile, "Highlight percentile");
  att->add_option("--out", att_out);

  // faithfulness
  auto* faith = app.add_subcommand("faithfulness", "Sufficiency and comprehensiveness");
  faith->require_subcommand(1);
  auto* fscore = faith->add_subcommand("score", "Score matched rationales with a trained model");
  std::string fs_model, fs_vocab, fs_corpus, fs_matched, fs_out = "-";
  unsigned fs_workers = 1;
  fscore->add_option("--model", fs_model)->required()->check(CLI::ExistingFile);
  fscore->add_option("--vocab", fs_vocab)->required()->check(CLI::ExistingFile);
  fscore->add_option("--corpus", fs_corpus)->required()->check(CLI::ExistingFile);
  fscore->add_option("--matched", fs_matched)->required()->check(CLI::ExistingFile);
  fscore->add_option("--workers", fs_workers);
  fscore->add_option("--out", fs_out, "Scores CSV");
  auto* ffilter = faith->add_subcommand("filter", "Rationale ids above a sufficiency threshold");
  std::string ff_scores, ff_threshold = "0.2", ff_out = "-";
  ffilter->add_option("--scores", ff_scores)->required()->check(CLI::ExistingFile);
  ffilter->add_option("--threshold", ff_threshold, "Sufficiency threshold (percentile forms need run)");
  ffilter->add_option("--out", ff_out);
  auto* fagg = faith->add_subcommand("aggregate", "Mean scores by class-frequency bin");
  std::string fa_scores, fa_corpus, fa_bins = "0,100,200,400", fa_field = "suff", fa_out = "-";
  fagg->add_option("--scores", fa_scores)->required()->check(CLI::ExistingFile);
  fagg->add_option("--corpus", fa_corpus, "Corpus providing training class counts")->required()->check(CLI::ExistingFile);
  fagg->add_option("--bins", fa_bins, "Comma-separated lower edges");
  fagg->add_option("--field", fa_field)->check(CLI::IsMember({"suff", "comp"}));
  fagg->add_option("--out", fa_out);

  // run
  auto* run = app.add_subcommand("run", "Run an experiment grid");
  std::string run_grid, run_out = "results", run_denominator;
  unsigned run_workers = 1;
  run->add_option("--grid", run_grid, "Grid config JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--out", run_out, "Results directory");
  run->add_option("--workers", run_workers);
  run->add_option("--denominator", run_denominator, "Coverage denominator")
      ->check(CLI::IsMember({"highlighted", "rationale"}));

  // report
  auto* rep = app.add_subcommand("report", "Tables and figure data from grid results");
  std::string rep_in = "results", rep_format = "csv", rep_out;
  int rep_round = 3;
  std::string rep_bins;
  rep->add_option("--in", rep_in, "Results directory");
  rep->add_option("--format", rep_format)->check(CLI::IsMember({"csv", "json"}));
  rep->add_option("--round", rep_round, "Decimals; negative keeps full precision");
  rep->add_option("--bins", rep_bins, "Frequency bin edges (default: from the grid config)");
  rep->add_option("--out", rep_out, "Report directory (default: <in>/report)");

  CLI11_PARSE(app, argc, argv);
  rlab::g_log_enabled = !quiet;

  try {
    if (*gen) {
      rlab::GeneratorSpec spec;
      if (!gen_config.empty()) spec = rlab::generator_spec_from_json(read_json(gen_config));
      if (gen_seed) spec.seed = *gen_seed;
      if (gen_pool) spec = rlab::GridConfig::pool_spec_for(spec);
      Output out(gen_out);
      rlab::write_corpus(out.stream(), rlab::generate_corpus(spec));
    } else if (*split) {
      auto corpus = rlab::load_corpus(split_in);
      const auto a = rlab::partition(corpus, ratios, hold_out, split_seed);
      rlab::apply_split(corpus, a);
      Output out(split_out);
      rlab::write_corpus(out.stream(), corpus);
      std::clog << "group violations " << a.violations << ", max class deviation "
                << rlab::max_class_deviation(a.histograms) << '\n';
    } else if (*ctrl) {
      const auto corpus = rlab::load_corpus(ctrl_corpus);
      const auto pool = rlab::load_corpus(ctrl_pool, corpus.num_classes);
      const auto idx = index_docs(corpus);
      std::map<int, std::size_t> hist;
      for (const auto& r : read_matched(ctrl_matched)) {
        if (r.matched()) ++hist[doc_of(idx, r.doc_id).label];
      }
      std::set<std::string> groups;
      for (const auto& d : corpus.docs) groups.insert(d.group_id);
      rlab::Corpus picked;
      picked.num_classes = corpus.num_classes;
      picked.docs = rlab::sample_control(pool, hist, groups, ctrl_seed);
      Output out(ctrl_out);
      rlab::write_corpus(out.stream(), picked);
    } else if (*sub) {
      const auto corpus = rlab::load_corpus(sub_corpus);
      const auto idx = index_docs(corpus);
      std::set<int> classes;
      if (!sub_classes.empty()) {
        for (auto c : parse_list(sub_classes)) classes.insert(static_cast<int>(c));
      } else {
        std::vector<std::pair<std::size_t, int>> freq;
        for (const auto& [label, n] : train_counts(corpus)) freq.push_back({n, label});
        std::sort(freq.begin(), freq.end(),
                  [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
        for (std::size_t i = 0; i < freq.size() && i < sub_top; ++i) classes.insert(freq[i].second);
      }
      auto records = read_matched(sub_in);
      std::erase_if(records, [](const rlab::RationaleRecord& r) { return !r.matched(); });
      const auto picked = rlab::subsample_rationales(records, classes, sub_m, sub_seed, [&](const rlab::RationaleRecord& r) {
        return doc_of(idx, r.doc_id).label;
      });
      Output out(sub_out);
      for (const auto& r : picked) out.stream() << rlab::to_json(r).dump() << '\n';
    } else if (*voc) {
      const auto corpus = rlab::load_corpus(voc_corpus);
      const auto s = split_filter(voc_split);
      std::map<std::string, std::uint64_t> counts;
      for (const auto& d : corpus.docs) {
        if (!in_split(d, s)) continue;
        for (const auto& w : rlab::word_tokenize(d.text)) ++counts[w];
      }
      const auto v = rlab::learn_vocab(counts, voc_size);
      Output out(voc_out);
      for (const auto& t : v.tokens()) out.stream() << t << '\n';
    } else if (*match) {
      const auto corpus = rlab::load_corpus(match_corpus);
      const auto s = split_filter(match_split);
      std::map<std::string, std::size_t> status;
      Output out(match_out);
      for (const auto& d : corpus.docs) {
        if (!d.annotated || !in_split(d, s)) continue;
        const auto words = rlab::word_tokenize(d.text);
        for (std::size_t r = 0; r < d.rationales.size(); ++r) {
          const auto rec =
              rlab::match_rationale(words, d.rationales[r].text, d.doc_id, d.doc_id + "#r" + std::to_string(r));
          ++status[rlab::to_string(rec.status)];
          out.stream() << rlab::to_json(rec).dump() << '\n';
        }
      }
      for (const auto& [k, v] : status) std::clog << k << ' ' << v << '\n';
    } else if (*comp) {
      const auto corpus = rlab::load_corpus(comp_corpus);
      const auto idx = index_docs(corpus);
      Output out(comp_out);
      for (auto& r : read_matched(comp_matched)) {
        if (!r.matched()) continue;
        const auto& d = doc_of(idx, r.doc_id);
        const auto words = rlab::word_tokenize(d.text);
        rlab::restore_word_mask(r, words.size());
        const auto c = rlab::make_complement(words, r.word_mask, d.label, d.doc_id, r.rationale_id + "~c");
        out.stream() << json{{"sample_id", c.sample_id}, {"doc_id", c.doc_id}, {"label", c.label},
                             {"kind", rlab::to_string(c.kind)}, {"text", rlab::join_words(c.words)}}
                            .dump()
                     << '\n';
      }
    } else if (*flen) {
      auto records = read_matched(flen_in);
      std::size_t max_words = flen_max;
      if (flen_auto) {
        std::vector<std::size_t> lengths;
        for (const auto& r : records) lengths.push_back(r.word_length);
        max_words = static_cast<std::size_t>(rlab::length_threshold(lengths));
      }
      const auto res = rlab::filter_by_length(std::move(records), max_words);
      Output out(flen_out);
      for (const auto& r : res.kept) out.stream() << rlab::to_json(r).dump() << '\n';
      if (!flen_removed.empty()) {
        Output rm(flen_removed);
        for (const auto& r : res.removed) rm.stream() << rlab::to_json(r).dump() << '\n';
      }
      std::clog << "max words " << max_words << ": kept " << res.kept.size() << ", removed " << res.removed.size()
                << '\n';
    } else if (*trn) {
      rlab::GridConfig g = trn_config.empty() ? rlab::GridConfig{} : rlab::grid_config_from_json(read_json(trn_config));
      if (!trn_corpus.empty()) {
        g.corpus_path = trn_corpus;
        g.use_pool = !trn_pool.empty();
      }
      if (!trn_pool.empty()) g.pool_path = trn_pool;
      rlab::CellSpec c{rlab::RegimenConfig::parse(trn_regimen), rlab::architecture_from_string(trn_arch), trn_seed};
      const auto d = rlab::prepare_data(g);
      rlab::ScorerCache cache;
      auto cm = rlab::train_cell(d, g, c, cache);
      cm.trained.model.vocab_hash = d.vocab.fingerprint();
      rlab::save_model(trn_out, cm.trained.model);
      d.vocab.save(trn_vocab_out.empty() ? trn_out + ".vocab" : trn_vocab_out);
      if (!trn_history.empty()) {
        json h = json::array();
        for (const auto& e : cm.trained.history) {
          h.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"monitor_accuracy", e.monitor_accuracy},
                       {"monitor_loss", e.monitor_loss}});
        }
        Output out(trn_history);
        out.stream() << json{{"best_epoch", cm.trained.best_epoch}, {"history", h}}.dump(2) << '\n';
      }
      const auto test = rlab::evaluate_model(cm.trained.model, d.test_reports, d.num_classes);
      std::clog << c.regimen.name() << " / " << trn_arch << " / seed " << trn_seed << ": best epoch "
                << cm.trained.best_epoch << ", val accuracy " << cm.trained.best_accuracy << ", test accuracy "
                << test.accuracy << " " << rlab::format_interval(test.accuracy_ci) << '\n';
    } else if (*pred) {
      const auto model = rlab::load_model(pred_model);
      const auto vocab = rlab::SubwordVocab::load(pred_vocab);
      check_vocab(model, vocab);
      const auto corpus = rlab::load_corpus(pred_corpus);
      const auto s = split_filter(pred_split);
      Output out(pred_out);
      for (const auto& d : corpus.docs) {
        if (!in_split(d, s)) continue;
        const auto seq = rlab::subword_tokenize_text(d.text, vocab);
        auto j = rlab::to_json(rlab::predict(model, seq.ids, d.doc_id));
        j["label"] = d.label;
        out.stream() << j.dump() << '\n';
      }
    } else if (*att) {
      const auto model = rlab::load_model(att_model);
      const auto vocab = rlab::SubwordVocab::load(att_vocab);
      check_vocab(model, vocab);
      const auto corpus = rlab::load_corpus(att_corpus);
      const auto s = split_filter(att_split);
      Output out(att_out);
      bool found = att_doc.empty();
      for (const auto& d : corpus.docs) {
        if (!in_split(d, s) || (!att_doc.empty() && d.doc_id != att_doc)) continue;
        found = true;
        auto seq = rlab::subword_tokenize_text(d.text, vocab);
        if (seq.size() == 0) continue;
        const auto scores = model.attention_scores(seq.ids);
        const std::size_t kept = seq.retained_words();
        seq.words.resize(kept);
        seq.alignment.resize(kept);
        const auto word = rlab::word_scores_from_subwords(scores.word, seq.alignment);
        const auto phrase = rlab::word_scores_from_subwords(scores.phrase, seq.alignment);
        out.stream() << json{{"doc_id", d.doc_id},
                             {"words", seq.words},
                             {"word", word},
                             {"phrase", phrase},
                             {"word_highlight", rlab::highlight(word, att_percentile)},
                             {"phrase_highlight", rlab::highlight(phrase, att_percentile)}}
                            .dump()
                     << '\n';
      }
      if (!found) throw rlab::InputError("document " + att_doc + " not found");
    } else if (*fscore) {
      const auto model = rlab::load_model(fs_model);
      const auto vocab = rlab::SubwordVocab::load(fs_vocab);
      check_vocab(model, vocab);
      const auto corpus = rlab::load_corpus(fs_corpus);
      const auto idx = index_docs(corpus);
      std::map<std::string, rlab::ScoringDoc> docs;
      for (auto& r : read_matched(fs_matched)) {
        const auto& d = doc_of(idx, r.doc_id);
        auto [it, fresh] = docs.try_emplace(d.doc_id);
        if (fresh) it->second = {d.doc_id, d.label, rlab::word_tokenize(d.text), {}};
        if (r.matched()) rlab::restore_word_mask(r, it->second.words.size());
        it->second.rationales.push_back(std::move(r));
      }
      std::vector<rlab::ScoringDoc> list;
      for (auto& [k, v] : docs) list.push_back(std::move(v));
      const auto res = rlab::score_rationales(model, vocab, list, fs_workers);
      if (res.skipped) std::clog << "skipped " << res.skipped << " unmatched rationales\n";
      Output out(fs_out);
      rlab::write_scores_csv(out.stream(), res.scores);
    } else if (*ffilter) {
      std::ifstream in(ff_scores);
      const auto scores = rlab::read_scores_csv(in);
      const auto t = rlab::Threshold::parse(ff_threshold);
      if (t.recomputed) {
        throw rlab::ConfigError("percentile thresholds need predicted classes; the scores file carries none. "
                                "Use run for the recomputed threshold");
      }
      Output out(ff_out);
      for (const auto& id : rlab::filter_sufficient(scores, t.value)) out.stream() << id << '\n';
    } else if (*fagg) {
      std::ifstream in(fa_scores);
      const auto scores = rlab::read_scores_csv(in);
      const auto bins = rlab::aggregate_by_class_frequency(scores, train_counts(rlab::load_corpus(fa_corpus)),
                                                           parse_list(fa_bins),
                                                           fa_field == "comp" ? rlab::ScoreField::Comp : rlab::ScoreField::Suff);
      json arr = json::array();
      for (const auto& b : bins) {
        json j{{"low", b.low},         {"classes", b.classes},         {"samples", b.samples},
               {"sample_mean", b.sample_mean}, {"class_mean", b.class_mean}};
        j["high"] = b.high ? json(*b.high) : json(nullptr);
        arr.push_back(j);
      }
      Output out(fa_out);
      out.stream() << arr.dump(2) << '\n';
    } else if (*run) {
      rlab::GridConfig g;
      try {
        g = rlab::grid_config_from_json(read_json(run_grid));
        if (!run_denominator.empty()) g.denominator = rlab::denominator_from_string(run_denominator);
      } catch (const rlab::Error& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 1;
      }
      const auto d = rlab::prepare_data(g);
      fs::create_directories(run_out);
      {
        std::ofstream cfg(fs::path(run_out) / "grid.json");
        cfg << rlab::to_json(g).dump(2) << '\n';
      }
      const auto report = rlab::run_grid(d, g, run_workers, fs::path(run_out));
      std::clog << report.cells.size() - report.failed() << " of " << report.cells.size() << " cells succeeded\n";
      return report.failed() ? 2 : 0;
    } else if (*rep) {
      const auto cells = rlab::load_results(rep_in);
      std::vector<std::size_t> bins = rlab::GridConfig{}.frequency_bins;
      if (!rep_bins.empty()) {
        bins = parse_list(rep_bins);
      } else if (fs::exists(fs::path(rep_in) / "grid.json")) {
        bins = rlab::grid_config_from_json(read_json((fs::path(rep_in) / "grid.json").string())).frequency_bins;
      }
      const fs::path out = rep_out.empty() ? fs::path(rep_in) / "report" : fs::path(rep_out);
      rlab::emit_report(cells, out, rep_format == "json" ? rlab::ReportFormat::Json : rlab::ReportFormat::Csv,
                        rep_round, bins);
      std::clog << "wrote " << out.string() << '\n';
    }
  } catch (const rlab::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
