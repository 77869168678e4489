#pragma once

// Word and subword tokenization, rationale-to-span matching, masks,
// complements and rationale length filtering.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rationale_lab/error.hpp"
#include "rationale_lab/vocab.hpp"

namespace rlab {

inline constexpr std::size_t kMaxSubwords = 4096;
inline constexpr std::size_t kMaxRationaleWords = 128;

inline bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

// Whitespace split with every ASCII punctuation character detached as its
// own token.
inline std::vector<std::string> word_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

// Half-open word or subword index range.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct TokenSequence {
  std::vector<std::string> words;
  std::vector<std::string> subwords;
  std::vector<int> ids;
  // One entry per word. Words lost to truncation get an empty range at the end.
  std::vector<Span> alignment;
  bool truncated = false;

  std::size_t size() const { return ids.size(); }
  // Number of words that kept at least one subword.
  std::size_t retained_words() const {
    std::size_t n = 0;
    for (const auto& a : alignment) n += a.empty() ? 0 : 1;
    return n;
  }
};

// Greedy longest-match segmentation of each word, truncated at max_subwords.
inline TokenSequence subword_tokenize(std::vector<std::string> words, const SubwordVocab& vocab,
                                      std::size_t max_subwords = kMaxSubwords) {
  TokenSequence seq;
  seq.words = std::move(words);
  seq.alignment.reserve(seq.words.size());
  const std::size_t longest = vocab.max_token_length();
  for (const auto& w : seq.words) {
    const std::size_t begin = seq.ids.size();
    std::size_t pos = 0;
    while (pos < w.size()) {
      std::size_t len = std::min(longest, w.size() - pos);
      int id = -1;
      for (; len > 0; --len) {
        id = vocab.find(std::string_view(w).substr(pos, len));
        if (id >= 0) break;
      }
      if (id < 0) {
        throw TokenizationError("character '" + std::string(1, w[pos]) +
                                "' is not in the subword vocabulary");
      }
      if (seq.ids.size() < max_subwords) {
        seq.ids.push_back(id);
        seq.subwords.push_back(vocab.token(id));
      } else {
        seq.truncated = true;
      }
      pos += len;
    }
    seq.alignment.push_back({std::min(begin, seq.ids.size()), seq.ids.size()});
  }
  return seq;
}

inline TokenSequence subword_tokenize_text(std::string_view text, const SubwordVocab& vocab,
                                           std::size_t max_subwords = kMaxSubwords) {
  return subword_tokenize(word_tokenize(text), vocab, max_subwords);
}

enum class MatchStatus { Direct, Cleaned, Unmatched };

inline const char* to_string(MatchStatus s) {
  switch (s) {
    case MatchStatus::Direct: return "Direct";
    case MatchStatus::Cleaned: return "Cleaned";
    case MatchStatus::Unmatched: return "Unmatched";
  }
  return "?";
}

inline MatchStatus match_status_from_string(std::string_view s) {
  if (s == "Direct") return MatchStatus::Direct;
  if (s == "Cleaned") return MatchStatus::Cleaned;
  if (s == "Unmatched") return MatchStatus::Unmatched;
  throw InputError("unknown match status: " + std::string(s));
}

struct RationaleRecord {
  std::string doc_id;
  std::string rationale_id;
  std::string raw_text;
  MatchStatus status = MatchStatus::Unmatched;
  // Every occurrence, in document order; may overlap.
  std::vector<Span> spans;
  std::vector<std::uint8_t> word_mask;
  std::vector<std::uint8_t> subword_mask;
  std::size_t word_length = 0;

  bool matched() const { return status != MatchStatus::Unmatched; }
};

// Sorted union of possibly overlapping spans.
inline std::vector<Span> merge_spans(std::vector<Span> spans) {
  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.begin < b.begin || (a.begin == b.begin && a.end < b.end); });
  std::vector<Span> out;
  for (const auto& s : spans) {
    if (s.empty()) continue;
    if (!out.empty() && s.begin <= out.back().end) {
      out.back().end = std::max(out.back().end, s.end);
    } else {
      out.push_back(s);
    }
  }
  return out;
}

namespace detail {

inline std::string casefold(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool is_punct_token(const std::string& t) {
  return !t.empty() && std::all_of(t.begin(), t.end(), is_punct);
}

inline std::vector<Span> find_all(const std::vector<std::string>& hay,
                                  const std::vector<std::string>& needle) {
  std::vector<Span> out;
  if (needle.empty() || needle.size() > hay.size()) return out;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(i))) {
      out.push_back({i, i + needle.size()});
    }
  }
  return out;
}

}  // namespace detail

// Two-stage matching. Stage one looks for the rationale's word sequence
// verbatim; stage two casefolds both sides, and drops punctuation tokens at
// the rationale's edges. Whitespace differences vanish in tokenization.
inline RationaleRecord match_rationale(const std::vector<std::string>& doc_words,
                                       std::string_view rationale_text,
                                       std::string doc_id = {}, std::string rationale_id = {}) {
  RationaleRecord rec;
  rec.doc_id = std::move(doc_id);
  rec.rationale_id = std::move(rationale_id);
  rec.raw_text = std::string(rationale_text);
  const auto needle = word_tokenize(rationale_text);
  rec.word_length = needle.size();
  rec.word_mask.assign(doc_words.size(), 0);

  rec.spans = detail::find_all(doc_words, needle);
  if (!rec.spans.empty()) {
    rec.status = MatchStatus::Direct;
  } else {
    std::vector<std::string> folded_needle;
    for (const auto& t : needle) folded_needle.push_back(detail::casefold(t));
    auto first = std::find_if_not(folded_needle.begin(), folded_needle.end(), detail::is_punct_token);
    auto last = std::find_if_not(folded_needle.rbegin(), folded_needle.rend(), detail::is_punct_token).base();
    std::vector<std::string> stripped;
    if (first < last) stripped.assign(first, last);
    std::vector<std::string> folded_doc;
    folded_doc.reserve(doc_words.size());
    for (const auto& t : doc_words) folded_doc.push_back(detail::casefold(t));
    rec.spans = detail::find_all(folded_doc, stripped);
    rec.status = rec.spans.empty() ? MatchStatus::Unmatched : MatchStatus::Cleaned;
  }
  for (const auto& s : merge_spans(rec.spans)) {
    std::fill(rec.word_mask.begin() + static_cast<std::ptrdiff_t>(s.begin),
              rec.word_mask.begin() + static_cast<std::ptrdiff_t>(s.end), 1);
  }
  return rec;
}

// Project a word mask onto the subwords of a tokenized document. Words whose
// subwords were truncated away are cleared from the word mask as well.
inline void attach_subword_mask(RationaleRecord& rec, const TokenSequence& seq) {
  if (rec.word_mask.size() != seq.words.size()) {
    throw ShapeError("word mask has " + std::to_string(rec.word_mask.size()) +
                     " entries, document has " + std::to_string(seq.words.size()) + " words");
  }
  rec.subword_mask.assign(seq.size(), 0);
  for (std::size_t w = 0; w < seq.words.size(); ++w) {
    const Span a = seq.alignment[w];
    if (a.empty()) {
      rec.word_mask[w] = 0;
      continue;
    }
    if (rec.word_mask[w]) {
      std::fill(rec.subword_mask.begin() + static_cast<std::ptrdiff_t>(a.begin),
                rec.subword_mask.begin() + static_cast<std::ptrdiff_t>(a.end), 1);
    }
  }
}

// Words whose mask bit is set, in order.
inline std::vector<std::string> select_words(const std::vector<std::string>& words,
                                             const std::vector<std::uint8_t>& mask, bool keep_masked) {
  if (mask.size() != words.size()) {
    throw ShapeError("mask has " + std::to_string(mask.size()) + " entries, document has " +
                     std::to_string(words.size()) + " words");
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if ((mask[i] != 0) == keep_masked) out.push_back(words[i]);
  }
  return out;
}

enum class SampleKind { Report, Rationale, Complement };

inline const char* to_string(SampleKind k) {
  switch (k) {
    case SampleKind::Report: return "report";
    case SampleKind::Rationale: return "rationale";
    case SampleKind::Complement: return "complement";
  }
  return "?";
}

inline SampleKind sample_kind_from_string(std::string_view s) {
  if (s == "report") return SampleKind::Report;
  if (s == "rationale") return SampleKind::Rationale;
  if (s == "complement") return SampleKind::Complement;
  throw InputError("unknown sample kind: " + std::string(s));
}

struct TrainingSample {
  std::string sample_id;
  std::string doc_id;
  int label = 0;
  SampleKind kind = SampleKind::Report;
  std::vector<std::string> words;
  // Rationale mask over `words`; empty when the sample carries none.
  std::vector<std::uint8_t> word_mask;
};

// The document with masked words deleted (not blanked).
inline TrainingSample make_complement(const std::vector<std::string>& doc_words,
                                      const std::vector<std::uint8_t>& word_mask, int label = 0,
                                      std::string doc_id = {}, std::string sample_id = {}) {
  TrainingSample s;
  s.doc_id = std::move(doc_id);
  s.sample_id = std::move(sample_id);
  s.label = label;
  s.kind = SampleKind::Complement;
  s.words = select_words(doc_words, word_mask, false);
  return s;
}

struct LengthFilterResult {
  std::vector<RationaleRecord> kept;
  std::vector<RationaleRecord> removed;
};

inline LengthFilterResult filter_by_length(std::vector<RationaleRecord> records,
                                           std::size_t max_words = kMaxRationaleWords) {
  LengthFilterResult out;
  for (auto& r : records) {
    (r.word_length <= max_words ? out.kept : out.removed).push_back(std::move(r));
  }
  return out;
}

// mean + 2 * std (population) of rationale word lengths.
inline double length_threshold(const std::vector<std::size_t>& lengths) {
  if (lengths.empty()) throw UndefinedError("length threshold of an empty rationale set");
  double mean = 0.0;
  for (auto l : lengths) mean += static_cast<double>(l);
  mean /= static_cast<double>(lengths.size());
  double var = 0.0;
  for (auto l : lengths) var += (static_cast<double>(l) - mean) * (static_cast<double>(l) - mean);
  var /= static_cast<double>(lengths.size());
  return mean + 2.0 * std::sqrt(var);
}

// Matched-rationale file rows. Masks are not stored; they follow from the
// spans and the document.
inline nlohmann::json to_json(const RationaleRecord& r) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : r.spans) spans.push_back({s.begin, s.end});
  nlohmann::json j{{"doc_id", r.doc_id}, {"raw_text", r.raw_text}, {"status", to_string(r.status)},
                   {"spans", spans}, {"word_length", r.word_length}};
  if (!r.rationale_id.empty()) j["rationale_id"] = r.rationale_id;
  return j;
}

inline RationaleRecord rationale_record_from_json(const nlohmann::json& j) {
  RationaleRecord r;
  r.doc_id = j.at("doc_id").get<std::string>();
  r.rationale_id = j.value("rationale_id", std::string{});
  r.raw_text = j.at("raw_text").get<std::string>();
  r.status = match_status_from_string(j.at("status").get<std::string>());
  for (const auto& s : j.at("spans")) r.spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
  r.word_length = j.at("word_length").get<std::size_t>();
  return r;
}

// Rebuilds the word mask of a record read back from disk.
inline void restore_word_mask(RationaleRecord& r, std::size_t doc_words) {
  r.word_mask.assign(doc_words, 0);
  for (const auto& s : merge_spans(r.spans)) {
    if (s.end > doc_words) throw ShapeError("span of " + r.rationale_id + " runs past the document");
    std::fill(r.word_mask.begin() + static_cast<std::ptrdiff_t>(s.begin),
              r.word_mask.begin() + static_cast<std::ptrdiff_t>(s.end), 1);
  }
}

}  // namespace rlab
