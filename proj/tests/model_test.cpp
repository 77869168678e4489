#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "rationale_lab/model.hpp"
#include "support.hpp"

using namespace rlab;

namespace {

constexpr Architecture kAll[] = {Architecture::Baseline, Architecture::PhraseAttention,
                                 Architecture::MultitaskTokenSeq, Architecture::MaskedAttention};

std::vector<EncodedSample> random_samples(int n, int vocab, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EncodedSample> out;
  for (int i = 0; i < n; ++i) {
    EncodedSample e;
    const int len = 2 + 2 * i;
    for (int t = 0; t < len; ++t) {
      e.ids.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(vocab))));
      e.mask.push_back(rng.bernoulli(0.4) ? 1 : 0);
    }
    e.label = i % classes;
    out.push_back(std::move(e));
  }
  return out;
}

// Class c is signalled by token c at a random position; tokens 10..29 are noise.
std::vector<EncodedSample> planted(int n, std::uint64_t seed, std::vector<std::size_t>* where = nullptr) {
  Rng rng(seed);
  std::vector<EncodedSample> out;
  for (int i = 0; i < n; ++i) {
    EncodedSample e;
    e.label = i % 3;
    const std::size_t len = 8 + rng.index(8);
    const std::size_t pos = rng.index(len);
    for (std::size_t t = 0; t < len; ++t) {
      e.ids.push_back(t == pos ? e.label : 10 + static_cast<int>(rng.index(20)));
      e.mask.push_back(t == pos ? 1 : 0);
    }
    if (where) where->push_back(pos);
    out.push_back(std::move(e));
  }
  return out;
}

TrainConfig quick(Architecture arch) {
  TrainConfig cfg;
  cfg.arch = arch;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 8;
  cfg.max_epochs = 30;
  cfg.warmup_epochs = 1;
  cfg.patience = 30;
  cfg.learning_rate = 0.05;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST(Model, GradientsMatchFiniteDifferences) {
  for (auto arch : kAll) {
    ModelDims d{12, 3, 4, 5, arch == Architecture::MaskedAttention ? 2 : 1, 3};
    Model m(arch, d);
    m.init(3);
    Rng rng(5);
    for (auto& p : m.params()) p += 0.3 * rng.normal();
    const auto samples = random_samples(5, 12, 3, 9);
    std::vector<double> g(m.params().size(), 0.0);
    for (const auto& s : samples) m.loss(s, true, 0.5, &g);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double orig = m.params()[i];
      double lp = 0.0, lm = 0.0;
      m.params()[i] = orig + 1e-5;
      for (const auto& s : samples) lp += m.loss(s, true, 0.5);
      m.params()[i] = orig - 1e-5;
      for (const auto& s : samples) lm += m.loss(s, true, 0.5);
      m.params()[i] = orig;
      const double fd = (lp - lm) / 2e-5;
      if (std::abs(fd - g[i]) < 1e-9) continue;
      worst = std::max(worst, std::abs(fd - g[i]) / (std::abs(fd) + std::abs(g[i])));
    }
    EXPECT_LT(worst, 1e-4) << to_string(arch);
  }
}

TEST(Model, ZeroWeightsGiveUniform) {
  for (auto arch : kAll) {
    Model m(arch, {10, 4, 4, 4, arch == Architecture::MaskedAttention ? 2 : 1, 3});
    m.init(1);
    if (arch != Architecture::Baseline) {
      for (auto& x : m.block("W")) x = 0.0;
    }
    const std::vector<int> ids = {1, 2, 3, 3};
    for (double p : m.predict_proba(ids)) EXPECT_NEAR(p, 0.25, 1e-12) << to_string(arch);
  }
}

TEST(Model, BiasDominates) {
  Model m(Architecture::Baseline, {10, 3});
  m.block("B")[0] = 10.0;
  const std::vector<int> ids = {4};
  const auto p = m.predict_proba(ids);
  EXPECT_GT(p[0], 0.99);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
}

TEST(Model, ProbabilitiesSumToOne) {
  Rng rng(4);
  for (auto arch : kAll) {
    Model m(arch, {15, 5, 6, 6, arch == Architecture::MaskedAttention ? 4 : 1, 5});
    m.init(8);
    for (auto& p : m.params()) p += rng.normal();
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<int> ids(1 + rng.index(30));
      for (auto& id : ids) id = static_cast<int>(rng.index(15));
      const auto p = m.predict_proba(ids);
      EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
      for (double x : p) EXPECT_GE(x, 0.0);
    }
  }
}

TEST(Train, SingleClassIsLearned) {
  auto samples = random_samples(16, 10, 1, 2);
  for (auto& s : samples) s.label = 1;
  for (auto arch : {Architecture::Baseline, Architecture::PhraseAttention}) {
    auto cfg = quick(arch);
    cfg.patience = 100;
    cfg.max_epochs = 100;
    cfg.weight_decay = 0.0;
    const auto tm = train(samples, nullptr, cfg, 10, 2);
    EXPECT_GE(tm.model.predict_proba(samples[0].ids)[1], 0.99) << to_string(arch);
  }
}

TEST(Train, SeparableTwoClass) {
  std::vector<EncodedSample> samples;
  for (int i = 0; i < 20; ++i) samples.push_back({{i % 2 == 0 ? 0 : 1, 2 + i % 5}, {}, i % 2});
  const auto tm = train(samples, nullptr, quick(Architecture::Baseline), 8, 2);
  EXPECT_EQ(accuracy_on(tm.model, samples), 1.0);
}

TEST(Train, DeterministicPerSeed) {
  const auto samples = planted(60, 3);
  for (auto arch : {Architecture::Baseline, Architecture::PhraseAttention}) {
    auto cfg = quick(arch);
    cfg.max_epochs = 5;
    const auto a = train(samples, nullptr, cfg, 30, 3);
    const auto b = train(samples, nullptr, cfg, 30, 3);
    ASSERT_EQ(a.model.params().size(), b.model.params().size());
    for (std::size_t i = 0; i < a.model.params().size(); ++i) {
      EXPECT_NEAR(a.model.params()[i], b.model.params()[i], 1e-12);
    }
  }
}

TEST(Train, ConvexSgdLossNeverRises) {
  const auto samples = planted(40, 6);
  TrainConfig cfg;
  cfg.optimizer = Optimizer::Sgd;
  cfg.batch_size = static_cast<int>(samples.size());
  cfg.warmup_epochs = 0;
  cfg.weight_decay = 0.0;
  cfg.learning_rate = 0.5;
  cfg.max_epochs = 40;
  cfg.patience = 40;
  const auto tm = train(samples, nullptr, cfg, 30, 3);
  ASSERT_GT(tm.history.size(), 5u);
  for (std::size_t e = 1; e < tm.history.size(); ++e) {
    EXPECT_LE(tm.history[e].train_loss, tm.history[e - 1].train_loss + 1e-12) << "epoch " << e + 1;
  }
}

TEST(Train, Errors) {
  const auto samples = planted(10, 1);
  EXPECT_THROW(train({}, nullptr, quick(Architecture::Baseline), 30, 3), ConfigError);
  auto cfg = quick(Architecture::Baseline);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(train(samples, nullptr, cfg, 30, 3), ConfigError);
  auto bad = samples;
  bad[0].ids[0] = 30;
  EXPECT_THROW(train(bad, nullptr, quick(Architecture::Baseline), 30, 3), InputError);
  auto masked = quick(Architecture::MaskedAttention);
  masked.heads = 3;
  EXPECT_THROW(train_masked_attention(samples, nullptr, masked, 30, 3), ConfigError);
  auto unmasked = samples;
  unmasked[2].mask.clear();
  EXPECT_THROW(train_multitask(unmasked, nullptr, quick(Architecture::MultitaskTokenSeq), 30, 3), InputError);
  EXPECT_THROW(train_masked_attention(unmasked, nullptr, quick(Architecture::MaskedAttention), 30, 3), InputError);
}

TEST(Attention, SingleTokenGetsAllWeight) {
  Model m(Architecture::PhraseAttention, {10, 3, 4, 4, 1, 5});
  m.init(2);
  const std::vector<int> ids = {7};
  const auto s = m.attention_scores(ids);
  ASSERT_EQ(s.word.size(), 1u);
  EXPECT_NEAR(s.word[0], 1.0, 1e-12);
}

TEST(Attention, ScoresFormDistributions) {
  Rng rng(3);
  for (auto arch : {Architecture::PhraseAttention, Architecture::MaskedAttention}) {
    Model m(arch, {20, 4, 5, 5, arch == Architecture::MaskedAttention ? 4 : 1, 5});
    m.init(4);
    std::vector<int> ids(23);
    for (auto& id : ids) id = static_cast<int>(rng.index(20));
    const auto s = m.attention_scores(ids);
    ASSERT_EQ(s.word.size(), ids.size());
    EXPECT_NEAR(std::accumulate(s.word.begin(), s.word.end(), 0.0), 1.0, 1e-9);
    for (double x : s.word) EXPECT_GE(x, 0.0);
    for (double x : s.phrase) EXPECT_GE(x, 0.0);
    EXPECT_FALSE(s.phrase.empty());
  }
  Model base(Architecture::Baseline, {20, 4});
  const std::vector<int> ids = {1, 2};
  EXPECT_THROW(base.attention_scores(ids), UnsupportedError);
}

TEST(Attention, FindsThePlantedToken) {
  const auto train_set = planted(150, 21);
  std::vector<std::size_t> where;
  const auto test_set = planted(100, 22, &where);
  auto cfg = quick(Architecture::PhraseAttention);
  cfg.embed_dim = 16;
  cfg.hidden_dim = 16;
  const auto tm = train(train_set, nullptr, cfg, 30, 3);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const auto s = tm.model.attention_scores(test_set[i].ids);
    hits += static_cast<std::size_t>(argmax(s.word)) == where[i] ? 1 : 0;
  }
  EXPECT_GE(hits, 90u);
}

TEST(Multitask, ZeroAlphaMatchesPlainTraining) {
  const auto samples = planted(40, 8);
  auto cfg = quick(Architecture::MultitaskTokenSeq);
  cfg.max_epochs = 4;
  cfg.alpha = 0.0;
  const auto a = train_multitask(samples, nullptr, cfg, 30, 3);
  const auto b = train(samples, nullptr, cfg, 30, 3);
  ASSERT_EQ(a.model.params().size(), b.model.params().size());
  for (std::size_t i = 0; i < a.model.params().size(); ++i) {
    EXPECT_NEAR(a.model.params()[i], b.model.params()[i], 1e-12);
  }
}

TEST(Multitask, EmptyMasksSilenceTheTokenHead) {
  auto samples = planted(60, 5);
  for (auto& s : samples) std::fill(s.mask.begin(), s.mask.end(), 0);
  auto cfg = quick(Architecture::MultitaskTokenSeq);
  cfg.alpha = 1.0;
  const auto tm = train_multitask(samples, nullptr, cfg, 30, 3);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    for (double p : tm.model.token_probabilities(s.ids)) {
      sum += p;
      ++n;
    }
  }
  EXPECT_LT(sum / static_cast<double>(n), 0.05);
}

// With every position masked out, the suppression shifts all scores of the
// restricted heads equally and the softmax is unchanged.
TEST(MaskedAttention, AllZeroMaskEqualsUnmasked) {
  Model m(Architecture::MaskedAttention, {12, 3, 4, 5, 4, 3});
  m.init(6);
  Rng rng(2);
  for (auto& p : m.params()) p += 0.2 * rng.normal();
  auto samples = random_samples(5, 12, 3, 4);
  for (auto& s : samples) {
    std::fill(s.mask.begin(), s.mask.end(), 0);
    EXPECT_NEAR(m.loss(s, true, 0.0), m.loss(s, false, 0.0), 1e-9);
  }
}

TEST(MaskedAttention, MaskChangesTrainingLossOnly) {
  Model m(Architecture::MaskedAttention, {12, 3, 4, 5, 2, 3});
  m.init(6);
  Rng rng(2);
  for (auto& p : m.params()) p += 0.5 * rng.normal();
  EncodedSample s{{1, 2, 3, 4, 5, 6}, {0, 0, 1, 0, 0, 0}, 1};
  EXPECT_GT(std::abs(m.loss(s, true, 0.0) - m.loss(s, false, 0.0)), 1e-9);
  // Inference ignores the mask.
  const double from_probs = -std::log(m.predict_proba(s.ids)[1]);
  EXPECT_NEAR(from_probs, m.loss(s, false, 0.0), 1e-9);
}

TEST(Checkpoint, RoundTrip) {
  for (auto arch : kAll) {
    Model m(arch, {9, 3, 4, 4, arch == Architecture::MaskedAttention ? 2 : 1, 3});
    m.init(5);
    Rng rng(1);
    for (auto& p : m.params()) p += rng.normal();
    m.vocab_hash = 0xdeadbeefcafeULL;
    const auto path = testing_support::temp_path("model.json");
    save_model(path, m);
    const auto back = load_model(path);
    EXPECT_EQ(back.architecture(), arch);
    EXPECT_EQ(back.vocab_hash, m.vocab_hash);
    EXPECT_EQ(back.params(), m.params());
    const std::vector<int> ids = {0, 3, 8, 8};
    EXPECT_EQ(back.predict_proba(ids), m.predict_proba(ids));
  }
}

TEST(Model, RejectsBadInput) {
  Model m(Architecture::Baseline, {5, 2});
  const std::vector<int> ids = {5};
  EXPECT_THROW(m.predict_proba(ids), InputError);
  EXPECT_THROW(Model(Architecture::Baseline, {0, 2}), ConfigError);
  EXPECT_THROW(architecture_from_string("transformer"), ConfigError);
}
