#pragma once

// Desk-scale classifiers. All parameters live in one flat vector so the
// optimizer, gradient checks and checkpoints treat every architecture alike.
//
//   Baseline           softmax regression on the L2-normalised set of subwords
//   PhraseAttention    h_t = tanh(A e_t + a); word-level target attention plus
//                      phrase-level attention over sliding windows
//   MaskedAttention    PhraseAttention with a multi-head word-level attention;
//                      during training, half the heads are restricted to
//                      rationale positions
//   MultitaskTokenSeq  mean-pooled h_t for the sequence head and a per-token
//                      rationale head, loss = CE + alpha * mean token BCE

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rationale_lab/error.hpp"
#include "rationale_lab/hash.hpp"
#include "rationale_lab/random.hpp"

namespace rlab {

enum class Architecture { Baseline, PhraseAttention, MultitaskTokenSeq, MaskedAttention };

inline const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::Baseline: return "baseline";
    case Architecture::PhraseAttention: return "phrase-attention";
    case Architecture::MultitaskTokenSeq: return "multitask";
    case Architecture::MaskedAttention: return "masked-attention";
  }
  return "?";
}

inline Architecture architecture_from_string(std::string_view s) {
  if (s == "baseline") return Architecture::Baseline;
  if (s == "phrase-attention" || s == "attention") return Architecture::PhraseAttention;
  if (s == "multitask") return Architecture::MultitaskTokenSeq;
  if (s == "masked-attention") return Architecture::MaskedAttention;
  throw ConfigError("unknown architecture: " + std::string(s));
}

enum class Optimizer { AdamW, Sgd };

struct ModelDims {
  int vocab_size = 0;
  int num_classes = 0;
  int embed_dim = 32;
  int hidden_dim = 64;
  int heads = 1;
  int window = 5;
};

struct TrainConfig {
  Architecture arch = Architecture::Baseline;
  double learning_rate = 0.01;
  int warmup_epochs = 5;
  int patience = 3;
  int batch_size = 8;
  int max_epochs = 50;
  double alpha = 0.25;
  int heads = 2;
  int embed_dim = 32;
  int hidden_dim = 64;
  int window = 5;
  double weight_decay = 0.01;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Optimizer optimizer = Optimizer::AdamW;
  bool shuffle = true;
  std::uint64_t seed = 0;

};

// A tokenized sample. `mask` is a per-subword rationale mask or empty.
struct EncodedSample {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  int label = 0;
};

struct AttentionScores {
  std::vector<double> word;
  std::vector<double> phrase;
};

inline constexpr double kSuppression = 1e4;

// Numerically stable in-place softmax; returns log-sum-exp.
inline double softmax_inplace(std::span<double> x) {
  if (x.empty()) return 0.0;
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double& v : x) {
    v = std::exp(v - m);
    z += v;
  }
  for (double& v : x) v /= z;
  return m + std::log(z);
}

// Lowest index among the maxima.
inline int argmax(std::span<const double> p) {
  int best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

class Model {
 public:
  Model() = default;
  Model(Architecture arch, ModelDims dims) : arch_(arch), dims_(dims) {
    if (dims_.vocab_size <= 0 || dims_.num_classes <= 0) throw ConfigError("model needs a vocabulary and classes");
    if (arch_ == Architecture::PhraseAttention || arch_ == Architecture::MultitaskTokenSeq) dims_.heads = 1;
    if (dims_.heads <= 0 || dims_.window <= 0 || dims_.embed_dim <= 0 || dims_.hidden_dim <= 0) {
      throw ConfigError("model dimensions must be positive");
    }
    build_layout();
    params_.assign(layout_.total, 0.0);
  }

  Architecture architecture() const { return arch_; }
  const ModelDims& dims() const { return dims_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::uint64_t vocab_hash = 0;

  void init(std::uint64_t seed) {
    std::fill(params_.begin(), params_.end(), 0.0);
    if (arch_ == Architecture::Baseline) return;
    Rng rng(mix_seed(seed, 7));
    const double de = dims_.embed_dim, dh = dims_.hidden_dim;
    for (std::size_t i = 0; i < size(E_); ++i) params_[layout_.E + i] = rng.normal();
    for (std::size_t i = 0; i < size(A_); ++i) params_[layout_.A + i] = rng.normal() / std::sqrt(de);
    for (std::size_t i = 0; i < size(W_); ++i) params_[layout_.W + i] = 0.1 * rng.normal() / std::sqrt(dh);
    for (std::size_t i = 0; i < size(U_); ++i) params_[layout_.U + i] = 0.1 * rng.normal();
    for (std::size_t i = 0; i < size(UP_); ++i) params_[layout_.up + i] = 0.1 * rng.normal();
  }

  // Class probabilities, no masks applied.
  std::vector<double> predict_proba(std::span<const int> ids) const {
    check_ids(ids);
    std::vector<double> probs;
    forward_backward(ids, {}, 0, false, 0.0, probs, nullptr, nullptr);
    return probs;
  }

  // Per-sample loss; with `grad` non-null the gradient is accumulated into it.
  // `use_mask` applies the training-time behaviour of MaskedAttention and
  // the token loss of MultitaskTokenSeq.
  double loss(const EncodedSample& s, bool use_mask, double alpha, std::vector<double>* grad = nullptr) const {
    check_ids(s.ids);
    std::vector<double> probs;
    return forward_backward(s.ids, use_mask ? std::span<const std::uint8_t>(s.mask) : std::span<const std::uint8_t>{},
                            s.label, true, alpha, probs, grad, nullptr);
  }

  AttentionScores attention_scores(std::span<const int> ids) const {
    if (arch_ != Architecture::PhraseAttention && arch_ != Architecture::MaskedAttention) {
      throw UnsupportedError(std::string("attention scores are not available for the ") + to_string(arch_) +
                             " architecture");
    }
    check_ids(ids);
    std::vector<double> probs;
    AttentionScores out;
    forward_backward(ids, {}, 0, false, 0.0, probs, nullptr, &out);
    return out;
  }

  // Per-token rationale probabilities of the multitask token head.
  std::vector<double> token_probabilities(std::span<const int> ids) const {
    if (arch_ != Architecture::MultitaskTokenSeq) throw UnsupportedError("token head exists only in the multitask model");
    check_ids(ids);
    std::vector<double> out(ids.size());
    std::vector<double> h(static_cast<std::size_t>(dims_.hidden_dim));
    for (std::size_t t = 0; t < ids.size(); ++t) {
      encode(ids[t], h.data());
      double z = params_[layout_.bv];
      for (int i = 0; i < dims_.hidden_dim; ++i) z += params_[layout_.v + static_cast<std::size_t>(i)] * h[static_cast<std::size_t>(i)];
      out[t] = 1.0 / (1.0 + std::exp(-z));
    }
    return out;
  }

  // Named parameter blocks, used by tests and checkpoints.
  struct Block {
    const char* name;
    std::size_t offset;
    std::size_t size;
  };
  std::vector<Block> blocks() const {
    std::vector<Block> out;
    auto add = [&](const char* n, std::size_t off, std::size_t sz) {
      if (sz) out.push_back({n, off, sz});
    };
    add("W", layout_.W, size(W_));
    add("B", layout_.B, size(B_));
    add("E", layout_.E, size(E_));
    add("A", layout_.A, size(A_));
    add("a", layout_.a, size(a_));
    add("U", layout_.U, size(U_));
    add("up", layout_.up, size(UP_));
    add("v", layout_.v, size(V_));
    add("bv", layout_.bv, size(BV_));
    return out;
  }
  std::span<double> block(const char* name) {
    for (const auto& b : blocks()) {
      if (std::string_view(b.name) == name) return {params_.data() + b.offset, b.size};
    }
    throw InputError(std::string("no parameter block ") + name);
  }

 private:
  enum BlockId { W_, B_, E_, A_, a_, U_, UP_, V_, BV_ };
  struct Layout {
    std::size_t W = 0, B = 0, E = 0, A = 0, a = 0, U = 0, up = 0, v = 0, bv = 0, total = 0;
    std::size_t sizes[9] = {};
  };

  std::size_t size(BlockId b) const { return layout_.sizes[b]; }

  void build_layout() {
    const auto V = static_cast<std::size_t>(dims_.vocab_size), K = static_cast<std::size_t>(dims_.num_classes);
    const auto de = static_cast<std::size_t>(dims_.embed_dim), dh = static_cast<std::size_t>(dims_.hidden_dim);
    auto& s = layout_.sizes;
    if (arch_ == Architecture::Baseline) {
      s[W_] = V * K;
      s[B_] = K;
    } else {
      s[W_] = K * dh;
      s[B_] = K;
      s[E_] = V * de;
      s[A_] = dh * de;
      s[a_] = dh;
      if (arch_ == Architecture::MultitaskTokenSeq) {
        s[V_] = dh;
        s[BV_] = 1;
      } else {
        s[U_] = static_cast<std::size_t>(dims_.heads) * dh;
        s[UP_] = dh;
      }
    }
    std::size_t off = 0;
    std::size_t* offs[9] = {&layout_.W, &layout_.B, &layout_.E, &layout_.A, &layout_.a,
                            &layout_.U, &layout_.up, &layout_.v, &layout_.bv};
    for (int b = 0; b < 9; ++b) {
      *offs[b] = off;
      off += s[b];
    }
    layout_.total = off;
  }

  void check_ids(std::span<const int> ids) const {
    for (int id : ids) {
      if (id < 0 || id >= dims_.vocab_size) {
        throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(dims_.vocab_size));
      }
    }
  }

  // h = tanh(A e_id + a)
  void encode(int id, double* h) const {
    const auto de = static_cast<std::size_t>(dims_.embed_dim), dh = static_cast<std::size_t>(dims_.hidden_dim);
    const double* e = params_.data() + layout_.E + static_cast<std::size_t>(id) * de;
    const double* A = params_.data() + layout_.A;
    for (std::size_t i = 0; i < dh; ++i) {
      double z = params_[layout_.a + i];
      const double* row = A + i * de;
      for (std::size_t j = 0; j < de; ++j) z += row[j] * e[j];
      h[i] = std::tanh(z);
    }
  }

  // One routine for inference, loss and gradient so that every path shares
  // the same arithmetic. Returns the loss when `with_loss`.
  double forward_backward(std::span<const int> ids, std::span<const std::uint8_t> mask, int label, bool with_loss,
                          double alpha, std::vector<double>& probs, std::vector<double>* grad,
                          AttentionScores* scores) const {
    const auto K = static_cast<std::size_t>(dims_.num_classes);
    const std::size_t N = ids.size();
    if (with_loss && (label < 0 || static_cast<std::size_t>(label) >= K)) {
      throw InputError("label " + std::to_string(label) + " out of range");
    }
    if (!mask.empty() && mask.size() != N) throw ShapeError("mask length differs from sequence length");

    // Unique token ids and the slot of every position.
    std::vector<int> uniq(ids.begin(), ids.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    const std::size_t Nu = uniq.size();
    std::vector<std::size_t> slot(N);
    std::vector<double> count(Nu, 0.0);
    for (std::size_t t = 0; t < N; ++t) {
      slot[t] = static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), ids[t]) - uniq.begin());
      count[slot[t]] += 1.0;
    }

    probs.assign(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) probs[k] = params_[layout_.B + k];

    if (arch_ == Architecture::Baseline) {
      const double x = Nu ? 1.0 / std::sqrt(static_cast<double>(Nu)) : 0.0;
      for (std::size_t u = 0; u < Nu; ++u) {
        const double* w = params_.data() + layout_.W + static_cast<std::size_t>(uniq[u]) * K;
        for (std::size_t k = 0; k < K; ++k) probs[k] += x * w[k];
      }
      softmax_inplace(probs);
      double loss = 0.0;
      if (with_loss) loss = nll(probs, label);
      if (grad) {
        auto& g = *grad;
        for (std::size_t k = 0; k < K; ++k) {
          const double d = probs[k] - (static_cast<int>(k) == label ? 1.0 : 0.0);
          g[layout_.B + k] += d;
          for (std::size_t u = 0; u < Nu; ++u) {
            g[layout_.W + static_cast<std::size_t>(uniq[u]) * K + k] += d * x;
          }
        }
      }
      return loss;
    }

    const auto dh = static_cast<std::size_t>(dims_.hidden_dim);
    const auto de = static_cast<std::size_t>(dims_.embed_dim);
    std::vector<double> H(Nu * dh);
    for (std::size_t u = 0; u < Nu; ++u) encode(uniq[u], H.data() + u * dh);
    auto hrow = [&](std::size_t u) { return H.data() + u * dh; };
    auto dot = [&](const double* x, const double* y) {
      double s = 0.0;
      for (std::size_t i = 0; i < dh; ++i) s += x[i] * y[i];
      return s;
    };

    // omega[u]: total weight of unique token u in the context vector.
    std::vector<double> omega(Nu, 0.0);
    const auto heads = static_cast<std::size_t>(dims_.heads);
    std::vector<std::vector<double>> alpha_w;  // [head][t]
    std::vector<double> beta, gamma;           // windows, per-position phrase weight
    std::vector<std::size_t> win_begin, win_end;
    double token_loss = 0.0;
    std::vector<double> token_q;

    if (arch_ == Architecture::MultitaskTokenSeq) {
      for (std::size_t u = 0; u < Nu; ++u) omega[u] = count[u] / static_cast<double>(N);
      if (with_loss && alpha != 0.0 && !mask.empty() && N > 0) {
        token_q.resize(Nu);
        std::vector<double> logit(Nu);
        for (std::size_t u = 0; u < Nu; ++u) {
          logit[u] = params_[layout_.bv] + dot(params_.data() + layout_.v, hrow(u));
          token_q[u] = 1.0 / (1.0 + std::exp(-logit[u]));
        }
        for (std::size_t t = 0; t < N; ++t) {
          const double z = logit[slot[t]];
          const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
          token_loss += softplus - (mask[t] ? z : 0.0);
        }
        token_loss *= alpha / static_cast<double>(N);
      }
    } else if (N > 0) {
      // Word-level heads.
      const bool suppress = !mask.empty() && arch_ == Architecture::MaskedAttention &&
                            std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
      alpha_w.assign(heads, std::vector<double>(N));
      for (std::size_t k = 0; k < heads; ++k) {
        const double* Uk = params_.data() + layout_.U + k * dh;
        std::vector<double> su(Nu);
        for (std::size_t u = 0; u < Nu; ++u) su[u] = dot(Uk, hrow(u));
        const bool this_head = suppress && k < heads / 2;
        for (std::size_t t = 0; t < N; ++t) {
          alpha_w[k][t] = su[slot[t]] - ((this_head && !mask[t]) ? kSuppression : 0.0);
        }
        softmax_inplace(alpha_w[k]);
        for (std::size_t t = 0; t < N; ++t) omega[slot[t]] += alpha_w[k][t] / static_cast<double>(heads);
      }
      // Phrase windows of width w, stride 1.
      const auto w = static_cast<std::size_t>(dims_.window);
      const std::size_t M = N >= w ? N - w + 1 : 1;
      win_begin.resize(M);
      win_end.resize(M);
      std::vector<double> q(N), qprefix(N + 1, 0.0);
      std::vector<double> qu(Nu);
      for (std::size_t u = 0; u < Nu; ++u) qu[u] = dot(params_.data() + layout_.up, hrow(u));
      for (std::size_t t = 0; t < N; ++t) {
        q[t] = qu[slot[t]];
        qprefix[t + 1] = qprefix[t] + q[t];
      }
      beta.resize(M);
      for (std::size_t j = 0; j < M; ++j) {
        win_begin[j] = j;
        win_end[j] = std::min(j + w, N);
        beta[j] = (qprefix[win_end[j]] - qprefix[j]) / static_cast<double>(win_end[j] - j);
      }
      softmax_inplace(beta);
      gamma = scatter_windows(beta, win_begin, win_end, N);
      for (std::size_t t = 0; t < N; ++t) omega[slot[t]] += gamma[t];
    }

    std::vector<double> C(dh, 0.0);
    for (std::size_t u = 0; u < Nu; ++u) {
      const double* h = hrow(u);
      for (std::size_t i = 0; i < dh; ++i) C[i] += omega[u] * h[i];
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double* Wk = params_.data() + layout_.W + k * dh;
      probs[k] += dot(Wk, C.data());
    }
    softmax_inplace(probs);

    if (scores) {
      scores->word.assign(N, 0.0);
      for (std::size_t k = 0; k < alpha_w.size(); ++k) {
        for (std::size_t t = 0; t < N; ++t) scores->word[t] += alpha_w[k][t] / static_cast<double>(heads);
      }
      scores->phrase = gamma;
    }

    double loss = 0.0;
    if (with_loss) loss = nll(probs, label) + token_loss;
    if (!grad) return loss;

    auto& g = *grad;
    std::vector<double> dC(dh, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const double d = probs[k] - (static_cast<int>(k) == label ? 1.0 : 0.0);
      g[layout_.B + k] += d;
      double* gW = g.data() + layout_.W + k * dh;
      const double* Wk = params_.data() + layout_.W + k * dh;
      for (std::size_t i = 0; i < dh; ++i) {
        gW[i] += d * C[i];
        dC[i] += d * Wk[i];
      }
    }
    std::vector<double> dH(Nu * dh, 0.0);
    auto add_scaled = [&](double* dst, const double* src, double s) {
      for (std::size_t i = 0; i < dh; ++i) dst[i] += s * src[i];
    };
    for (std::size_t u = 0; u < Nu; ++u) add_scaled(dH.data() + u * dh, dC.data(), omega[u]);

    if (arch_ == Architecture::MultitaskTokenSeq) {
      if (!token_q.empty()) {
        std::vector<double> dlogit(Nu, 0.0);
        for (std::size_t t = 0; t < N; ++t) {
          dlogit[slot[t]] += alpha / static_cast<double>(N) * (token_q[slot[t]] - (mask[t] ? 1.0 : 0.0));
        }
        for (std::size_t u = 0; u < Nu; ++u) {
          g[layout_.bv] += dlogit[u];
          add_scaled(g.data() + layout_.v, hrow(u), dlogit[u]);
          add_scaled(dH.data() + u * dh, params_.data() + layout_.v, dlogit[u]);
        }
      }
    } else if (N > 0) {
      std::vector<double> e(Nu);
      for (std::size_t u = 0; u < Nu; ++u) e[u] = dot(dC.data(), hrow(u));
      for (std::size_t k = 0; k < heads; ++k) {
        const auto& a = alpha_w[k];
        double mean = 0.0;
        for (std::size_t t = 0; t < N; ++t) mean += a[t] * e[slot[t]];
        std::vector<double> S(Nu, 0.0);
        for (std::size_t t = 0; t < N; ++t) {
          S[slot[t]] += a[t] * (e[slot[t]] - mean) / static_cast<double>(heads);
        }
        const double* Uk = params_.data() + layout_.U + k * dh;
        double* gU = g.data() + layout_.U + k * dh;
        for (std::size_t u = 0; u < Nu; ++u) {
          add_scaled(gU, hrow(u), S[u]);
          add_scaled(dH.data() + u * dh, Uk, S[u]);
        }
      }
      const std::size_t M = beta.size();
      std::vector<double> eprefix(N + 1, 0.0);
      for (std::size_t t = 0; t < N; ++t) eprefix[t + 1] = eprefix[t] + e[slot[t]];
      std::vector<double> dbeta(M);
      double mean = 0.0;
      for (std::size_t j = 0; j < M; ++j) {
        dbeta[j] = (eprefix[win_end[j]] - eprefix[win_begin[j]]) / static_cast<double>(win_end[j] - win_begin[j]);
        mean += beta[j] * dbeta[j];
      }
      std::vector<double> dr(M);
      for (std::size_t j = 0; j < M; ++j) dr[j] = beta[j] * (dbeta[j] - mean);
      const auto dq = scatter_windows(dr, win_begin, win_end, N);
      std::vector<double> dqu(Nu, 0.0);
      for (std::size_t t = 0; t < N; ++t) dqu[slot[t]] += dq[t];
      for (std::size_t u = 0; u < Nu; ++u) {
        add_scaled(g.data() + layout_.up, hrow(u), dqu[u]);
        add_scaled(dH.data() + u * dh, params_.data() + layout_.up, dqu[u]);
      }
    }

    // Through the token encoder.
    std::vector<double> dz(dh);
    for (std::size_t u = 0; u < Nu; ++u) {
      const double* h = hrow(u);
      const double* dhu = dH.data() + u * dh;
      for (std::size_t i = 0; i < dh; ++i) dz[i] = dhu[i] * (1.0 - h[i] * h[i]);
      const auto id = static_cast<std::size_t>(uniq[u]);
      const double* emb = params_.data() + layout_.E + id * de;
      double* gE = g.data() + layout_.E + id * de;
      for (std::size_t i = 0; i < dh; ++i) {
        if (dz[i] == 0.0) continue;
        g[layout_.a + i] += dz[i];
        double* gA = g.data() + layout_.A + i * de;
        const double* Ai = params_.data() + layout_.A + i * de;
        for (std::size_t j = 0; j < de; ++j) {
          gA[j] += dz[i] * emb[j];
          gE[j] += dz[i] * Ai[j];
        }
      }
    }
    return loss;
  }

  static double nll(const std::vector<double>& probs, int label) {
    return -std::log(std::max(probs[static_cast<std::size_t>(label)], 1e-300));
  }

  // Spread window weights uniformly over window members.
  static std::vector<double> scatter_windows(const std::vector<double>& weight, const std::vector<std::size_t>& begin,
                                             const std::vector<std::size_t>& end, std::size_t N) {
    std::vector<double> diff(N + 1, 0.0);
    for (std::size_t j = 0; j < weight.size(); ++j) {
      const double share = weight[j] / static_cast<double>(end[j] - begin[j]);
      diff[begin[j]] += share;
      diff[end[j]] -= share;
    }
    std::vector<double> out(N);
    double run = 0.0;
    for (std::size_t t = 0; t < N; ++t) {
      run += diff[t];
      out[t] = run;
    }
    return out;
  }

  Architecture arch_ = Architecture::Baseline;
  ModelDims dims_;
  Layout layout_;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double monitor_accuracy = 0.0;
  double monitor_loss = 0.0;
};

struct TrainedModel {
  Model model;
  int best_epoch = 0;
  double best_accuracy = 0.0;
  std::vector<EpochRecord> history;
};

struct PredictionRecord {
  std::string doc_id;
  std::string kind;
  std::vector<double> probs;
  int predicted = 0;
};

inline PredictionRecord predict(const Model& model, std::span<const int> ids, std::string doc_id = {},
                                std::string kind = "report") {
  PredictionRecord r;
  r.doc_id = std::move(doc_id);
  r.kind = std::move(kind);
  r.probs = model.predict_proba(ids);
  r.predicted = argmax(r.probs);
  return r;
}

inline double accuracy_on(const Model& model, const std::vector<EncodedSample>& data, double* mean_loss = nullptr) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  double loss = 0.0;
  for (const auto& s : data) {
    const auto p = model.predict_proba(s.ids);
    correct += argmax(p) == s.label ? 1 : 0;
    loss -= std::log(std::max(p[static_cast<std::size_t>(s.label)], 1e-300));
  }
  if (mean_loss) *mean_loss = loss / static_cast<double>(data.size());
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace detail {

inline TrainedModel fit(const std::vector<EncodedSample>& samples, const std::vector<EncodedSample>* validation,
                        const TrainConfig& cfg, int vocab_size, int num_classes, bool use_masks, double alpha) {
  if (samples.empty()) throw ConfigError("empty training set");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (cfg.batch_size <= 0 || cfg.max_epochs <= 0 || cfg.patience <= 0 || cfg.warmup_epochs < 0) {
    throw ConfigError("batch size, epochs and patience must be positive");
  }
  for (const auto& s : samples) {
    if (s.label < 0 || s.label >= num_classes) throw ConfigError("sample label out of range");
  }
  ModelDims dims;
  dims.vocab_size = vocab_size;
  dims.num_classes = num_classes;
  dims.embed_dim = cfg.embed_dim;
  dims.hidden_dim = cfg.hidden_dim;
  dims.heads = cfg.arch == Architecture::MaskedAttention ? cfg.heads : 1;
  dims.window = cfg.window;
  Model model(cfg.arch, dims);
  model.init(cfg.seed);

  const double lr = cfg.learning_rate;
  const std::size_t P = model.params().size();
  std::vector<double> grad(P), second(P, 0.0);
  const std::size_t steps_per_epoch = (samples.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                      static_cast<std::size_t>(cfg.batch_size);
  const std::size_t warmup_steps = steps_per_epoch * static_cast<std::size_t>(cfg.warmup_epochs);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(cfg.seed, 3));

  TrainedModel out;
  out.model = model;
  double best_acc = -1.0, best_loss = std::numeric_limits<double>::infinity();
  int since_improvement = 0;
  std::size_t step = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (cfg.shuffle) rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = b; i < e; ++i) batch_loss += model.loss(samples[order[i]], use_masks, alpha, &grad);
      if (!std::isfinite(batch_loss)) throw DivergenceError(epoch, "non-finite loss");
      epoch_loss += batch_loss;
      const double inv = 1.0 / static_cast<double>(e - b);
      ++step;
      const double rate = warmup_steps > 0 ? lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps)) : lr;
      auto& p = model.params();
      if (cfg.optimizer == Optimizer::Sgd) {
        for (std::size_t i = 0; i < P; ++i) p[i] -= rate * (grad[i] * inv + cfg.weight_decay * p[i]);
      } else {
        const double correction = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < P; ++i) {
          const double gi = grad[i] * inv;
          second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * gi * gi;
          p[i] -= rate * cfg.weight_decay * p[i];
          p[i] -= rate * gi / (std::sqrt(second[i] / correction) + cfg.epsilon);
        }
      }
      for (double x : p) {
        if (!std::isfinite(x)) throw DivergenceError(epoch, "non-finite parameter");
      }
    }
    const auto& monitor = (validation && !validation->empty()) ? *validation : samples;
    double mon_loss = 0.0;
    const double acc = accuracy_on(model, monitor, &mon_loss);
    out.history.push_back({epoch, epoch_loss / static_cast<double>(samples.size()), acc, mon_loss});
    if (acc > best_acc) {
      best_acc = acc;
      best_loss = mon_loss;
      out.model = model;
      out.best_epoch = epoch;
      since_improvement = 0;
    } else {
      // Equal accuracy keeps the lower-loss epoch but does not reset patience.
      if (acc == best_acc && mon_loss < best_loss) {
        best_loss = mon_loss;
        out.model = model;
        out.best_epoch = epoch;
      }
      if (++since_improvement >= cfg.patience) break;
    }
  }
  out.best_accuracy = best_acc;
  return out;
}

inline void require_masks(const std::vector<EncodedSample>& samples) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].mask.size() != samples[i].ids.size()) {
      throw InputError("sample " + std::to_string(i) + " lacks a rationale mask of matching length");
    }
  }
}

}  // namespace detail

// Plain cross-entropy training. Masks are ignored.
inline TrainedModel train(const std::vector<EncodedSample>& samples, const std::vector<EncodedSample>* validation,
                          const TrainConfig& cfg, int vocab_size, int num_classes) {
  if (cfg.arch == Architecture::MaskedAttention && cfg.heads != 2 && cfg.heads != 4 && cfg.heads != 8) {
    throw ConfigError("heads must be 2, 4 or 8");
  }
  return detail::fit(samples, validation, cfg, vocab_size, num_classes, false, 0.0);
}

// Joint sequence and token-level loss; every sample must carry a mask.
inline TrainedModel train_multitask(const std::vector<EncodedSample>& samples,
                                    const std::vector<EncodedSample>* validation, TrainConfig cfg, int vocab_size,
                                    int num_classes) {
  detail::require_masks(samples);
  if (cfg.alpha < 0.0) throw ConfigError("alpha must be non-negative");
  cfg.arch = Architecture::MultitaskTokenSeq;
  return detail::fit(samples, validation, cfg, vocab_size, num_classes, true, cfg.alpha);
}

// Rationale-masked attention training; inference never sees masks.
inline TrainedModel train_masked_attention(const std::vector<EncodedSample>& samples,
                                           const std::vector<EncodedSample>* validation, TrainConfig cfg,
                                           int vocab_size, int num_classes) {
  if (cfg.heads != 2 && cfg.heads != 4 && cfg.heads != 8) throw ConfigError("heads must be 2, 4 or 8");
  detail::require_masks(samples);
  cfg.arch = Architecture::MaskedAttention;
  return detail::fit(samples, validation, cfg, vocab_size, num_classes, true, 0.0);
}

// ---------------------------------------------------------------------------
// Checkpoints and prediction dumps

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_json(const Model& m) {
  const auto& d = m.dims();
  return {{"format", "rationale-lab-model"},
          {"version", kCheckpointVersion},
          {"architecture", to_string(m.architecture())},
          {"dims",
           {{"vocab_size", d.vocab_size},
            {"num_classes", d.num_classes},
            {"embed_dim", d.embed_dim},
            {"hidden_dim", d.hidden_dim},
            {"heads", d.heads},
            {"window", d.window}}},
          {"vocab_hash", hex64(m.vocab_hash)},
          {"parameters", m.params()}};
}

inline Model model_from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "rationale-lab-model") throw InputError("not a model checkpoint");
  if (j.value("version", 0) != kCheckpointVersion) throw InputError("unsupported checkpoint version");
  ModelDims d;
  const auto& jd = j.at("dims");
  d.vocab_size = jd.at("vocab_size");
  d.num_classes = jd.at("num_classes");
  d.embed_dim = jd.at("embed_dim");
  d.hidden_dim = jd.at("hidden_dim");
  d.heads = jd.at("heads");
  d.window = jd.at("window");
  Model m(architecture_from_string(j.at("architecture").get<std::string>()), d);
  auto params = j.at("parameters").get<std::vector<double>>();
  if (params.size() != m.params().size()) throw InputError("checkpoint parameter count does not match dims");
  m.params() = std::move(params);
  m.vocab_hash = std::stoull(j.at("vocab_hash").get<std::string>(), nullptr, 16);
  return m;
}

inline void save_model(const std::string& path, const Model& m) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write checkpoint " + path);
  out << checkpoint_json(m).dump() << '\n';
}

inline Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read checkpoint " + path);
  return model_from_checkpoint(nlohmann::json::parse(in));
}

inline nlohmann::json to_json(const PredictionRecord& r) {
  return {{"doc_id", r.doc_id}, {"kind", r.kind}, {"probs", r.probs}, {"predicted", r.predicted}};
}

}  // namespace rlab
