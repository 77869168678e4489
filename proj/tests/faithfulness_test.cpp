#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "rationale_lab/faithfulness.hpp"
#include "support.hpp"

using namespace rlab;

namespace {

FaithfulnessScore scored(std::string id, int label, double suff, double comp = 0.0) {
  FaithfulnessScore s;
  s.doc_id = id;
  s.rationale_id = id + "#r0";
  s.label = label;
  s.suff = suff;
  s.comp = comp;
  return s;
}

// A trained-looking model over the character vocabulary with random weights.
Model random_model(const SubwordVocab& v, int classes, std::uint64_t seed) {
  Model m(Architecture::Baseline, {static_cast<int>(v.size()), classes});
  Rng rng(seed);
  for (auto& p : m.params()) p = rng.normal();
  return m;
}

}  // namespace

TEST(Sufficiency, Examples) {
  EXPECT_NEAR(sufficiency(0.9, 0.7), 0.8, 1e-12);
  EXPECT_EQ(sufficiency(0.6, 0.9), 1.0);
  for (double p : {0.0, 0.13, 0.5, 1.0}) EXPECT_EQ(sufficiency(p, p), 1.0);
  EXPECT_THROW(sufficiency(1.1, 0.5), DomainError);
  EXPECT_THROW(sufficiency(0.5, -0.1), DomainError);
  EXPECT_THROW(sufficiency(std::nan(""), 0.5), DomainError);
}

TEST(Comprehensiveness, Examples) {
  EXPECT_NEAR(comprehensiveness(0.9, 0.2), 0.7, 1e-12);
  EXPECT_EQ(comprehensiveness(0.3, 0.8), 0.0);
  for (double p : {0.0, 0.42, 1.0}) EXPECT_EQ(comprehensiveness(p, p), 0.0);
  EXPECT_THROW(comprehensiveness(0.5, 2.0), DomainError);
}

TEST(Faithfulness, ScoresStayInUnitInterval) {
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(), b = rng.uniform();
    const double s = sufficiency(a, b), c = comprehensiveness(a, b);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
    EXPECT_NEAR(s, 1.0 - std::max(0.0, a - b), 1e-15);
    EXPECT_NEAR(c, std::max(0.0, a - b), 1e-15);
  }
}

TEST(ScoreRationales, FullMaskAndEmptyComplement) {
  const auto vocab = testing_support::char_vocab();
  const auto model = random_model(vocab, 4, 3);
  const auto words = word_tokenize("invasive ductal carcinoma of the left breast");
  auto rec = match_rationale(words, "invasive ductal carcinoma of the left breast", "d1", "d1#r0");
  ScoringDoc doc{"d1", 2, words, {rec}};
  const auto res = score_rationales(model, vocab, {doc});
  ASSERT_EQ(res.scores.size(), 1u);
  const auto& s = res.scores[0];
  EXPECT_EQ(s.suff, 1.0);
  const auto full = model.predict_proba(subword_tokenize(words, vocab).ids);
  const auto empty = model.predict_proba(std::vector<int>{});
  const auto y = static_cast<std::size_t>(argmax(full));
  EXPECT_EQ(s.pred_full, static_cast<int>(y));
  EXPECT_NEAR(s.comp, std::max(0.0, full[y] - empty[y]), 1e-15);
}

TEST(ScoreRationales, MatchesDirectRecomputation) {
  const auto vocab = testing_support::char_vocab();
  const auto model = random_model(vocab, 3, 8);
  const auto words = word_tokenize("grade 2 tumor , margins clear ; lymph nodes negative for tumor");
  auto r1 = match_rationale(words, "margins clear", "d", "d#r0");
  auto r2 = match_rationale(words, "tumor", "d", "d#r1");
  auto r3 = match_rationale(words, "not in this report", "d", "d#r2");
  ScoringDoc doc{"d", 1, words, {r1, r2, r3}};
  const auto res = score_rationales(model, vocab, {doc, doc, doc}, 2);
  EXPECT_EQ(res.skipped, 3u);
  ASSERT_EQ(res.scores.size(), 6u);
  const auto pf = model.predict_proba(subword_tokenize(words, vocab).ids);
  const auto y = static_cast<std::size_t>(argmax(pf));
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& rec = i == 0 ? r1 : r2;
    std::vector<std::string> kept, rest;
    for (std::size_t w = 0; w < words.size(); ++w) (rec.word_mask[w] ? kept : rest).push_back(words[w]);
    const auto pr = model.predict_proba(subword_tokenize(kept, vocab).ids);
    const auto pc = model.predict_proba(subword_tokenize(rest, vocab).ids);
    const auto& s = res.scores[i];
    EXPECT_EQ(s.rationale_id, rec.rationale_id);
    EXPECT_NEAR(s.suff, std::clamp(1.0 - std::max(0.0, pf[y] - pr[y]), 0.0, 1.0), 1e-15);
    EXPECT_NEAR(s.comp, std::clamp(std::max(0.0, pf[y] - pc[y]), 0.0, 1.0), 1e-15);
  }
}

TEST(FilterSufficient, Boundaries) {
  std::vector<FaithfulnessScore> scores = {scored("a", 0, 0.0), scored("b", 0, 0.2), scored("c", 1, 0.5),
                                           scored("d", 1, 1.0)};
  EXPECT_EQ(filter_sufficient(scores, 0.0), (std::set<std::string>{"b#r0", "c#r0", "d#r0"}));
  EXPECT_TRUE(filter_sufficient(scores, 1.0).empty());
  EXPECT_EQ(filter_sufficient(scores, 0.2), (std::set<std::string>{"c#r0", "d#r0"}));
}

TEST(FilterSufficient, AgreesWithRecomputation) {
  Rng rng(77);
  std::vector<FaithfulnessScore> scores;
  for (int i = 0; i < 500; ++i) {
    auto s = scored("doc" + std::to_string(i), i % 4, 0.0);
    s.p_full = rng.uniform();
    s.p_rat = rng.uniform();
    s.suff = sufficiency(s.p_full, s.p_rat);
    scores.push_back(s);
  }
  std::set<std::string> expect;
  for (const auto& s : scores) {
    if (1.0 - std::max(0.0, s.p_full - s.p_rat) > 0.2) expect.insert(s.rationale_id);
  }
  EXPECT_EQ(filter_sufficient(scores, 0.2), expect);
}

TEST(NearestRank, Definition) {
  std::vector<double> v;
  for (int i = 1; i <= 100; ++i) v.push_back(i);
  EXPECT_EQ(nearest_rank(v, 90), 90.0);
  EXPECT_EQ(nearest_rank(v, 98), 98.0);
  EXPECT_EQ(nearest_rank(v, 0), 1.0);
  EXPECT_EQ(nearest_rank(v, 100), 100.0);
  EXPECT_EQ(nearest_rank({3.0, 1.0, 2.0}, 50), 2.0);
  EXPECT_THROW(nearest_rank({}, 50), UndefinedError);
  EXPECT_THROW(nearest_rank({1.0}, 101), DomainError);
}

TEST(MispredictionThreshold, UsesDoublyWrongRationalesOnly) {
  std::vector<FaithfulnessScore> scores;
  for (int i = 0; i < 20; ++i) {
    auto s = scored("d" + std::to_string(i), 0, 0.05 * i);
    s.pred_full = i < 10 ? 1 : 0;
    s.pred_rat = i % 2 == 0 ? 1 : 0;
    scores.push_back(s);
  }
  // Doubly wrong: i in {0, 2, 4, 6, 8}, suff {0, .1, .2, .3, .4}; rank ceil(4.5) = 5.
  const auto t = misprediction_threshold(scores);
  ASSERT_TRUE(t.has_value());
  EXPECT_NEAR(*t, 0.4, 1e-12);
  for (auto& s : scores) s.pred_full = s.label;
  EXPECT_FALSE(misprediction_threshold(scores).has_value());
}

TEST(Aggregate, ClassAndSampleMeans) {
  std::vector<FaithfulnessScore> scores = {scored("a", 0, 0.2), scored("b", 1, 1.0), scored("c", 1, 1.0),
                                           scored("d", 1, 1.0)};
  const auto bins = aggregate_by_class_frequency(scores, {{0, 10}, {1, 20}}, {0, 100});
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0].classes, 2u);
  EXPECT_EQ(bins[0].samples, 4u);
  EXPECT_NEAR(bins[0].class_mean, 0.6, 1e-12);
  EXPECT_NEAR(bins[0].sample_mean, 0.8, 1e-12);
}

TEST(Aggregate, SingleClassAndEmptyBins) {
  std::vector<FaithfulnessScore> scores = {scored("a", 3, 0.3, 0.1), scored("b", 3, 0.9, 0.5)};
  const auto bins = aggregate_by_class_frequency(scores, {{3, 250}}, {0, 100, 200, 400}, ScoreField::Comp);
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0].low, 200u);
  ASSERT_TRUE(bins[0].high.has_value());
  EXPECT_EQ(*bins[0].high, 400u);
  EXPECT_NEAR(bins[0].class_mean, 0.3, 1e-12);
  EXPECT_NEAR(bins[0].sample_mean, bins[0].class_mean, 1e-12);
  EXPECT_THROW(aggregate_by_class_frequency(scores, {{1, 5}}, {0}), InputError);
  EXPECT_THROW(aggregate_by_class_frequency(scores, {{3, 5}}, {}), ConfigError);
}

TEST(ScoresCsv, RoundTrip) {
  Rng rng(5);
  std::vector<FaithfulnessScore> scores;
  for (int i = 0; i < 30; ++i) {
    auto s = scored("doc" + std::to_string(i), i % 7, rng.uniform(), rng.uniform());
    s.p_full = rng.uniform();
    s.p_rat = rng.uniform();
    s.p_comp = rng.uniform();
    scores.push_back(s);
  }
  std::stringstream buf;
  write_scores_csv(buf, scores);
  const auto back = read_scores_csv(buf);
  ASSERT_EQ(back.size(), scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    EXPECT_EQ(back[i].rationale_id, scores[i].rationale_id);
    EXPECT_EQ(back[i].label, scores[i].label);
    EXPECT_EQ(back[i].p_full, scores[i].p_full);
    EXPECT_EQ(back[i].suff, scores[i].suff);
    EXPECT_EQ(back[i].comp, scores[i].comp);
  }
  std::stringstream bad("header\na,b,1,0.5\n");
  EXPECT_THROW(read_scores_csv(bad), InputError);
}
