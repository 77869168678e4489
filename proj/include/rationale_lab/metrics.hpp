#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rationale_lab/error.hpp"

namespace rlab {

struct ConfusionCounts {
  std::size_t n = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> tp, fp, fn, tn;

  std::size_t num_classes() const { return tp.size(); }
  // Sums of the one-vs-rest tables.
  std::size_t global_tp() const { return sum(tp); }
  std::size_t global_fp() const { return sum(fp); }
  std::size_t global_fn() const { return sum(fn); }
  std::size_t global_tn() const { return sum(tn); }

 private:
  static std::size_t sum(const std::vector<std::size_t>& v) {
    std::size_t s = 0;
    for (auto x : v) s += x;
    return s;
  }
};

inline ConfusionCounts confusion(std::span<const int> preds, std::span<const int> golds, int num_classes) {
  if (preds.size() != golds.size()) throw ShapeError("predictions and gold labels differ in length");
  if (num_classes <= 0) throw DomainError("class count must be positive");
  const auto K = static_cast<std::size_t>(num_classes);
  ConfusionCounts c;
  c.n = preds.size();
  c.tp.assign(K, 0);
  c.fp.assign(K, 0);
  c.fn.assign(K, 0);
  c.tn.assign(K, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= num_classes || golds[i] < 0 || golds[i] >= num_classes) {
      throw DomainError("label outside [0, " + std::to_string(num_classes) + ")");
    }
    const auto p = static_cast<std::size_t>(preds[i]), g = static_cast<std::size_t>(golds[i]);
    if (p == g) {
      ++c.tp[p];
      ++c.correct;
    } else {
      ++c.fp[p];
      ++c.fn[g];
    }
  }
  for (std::size_t k = 0; k < K; ++k) c.tn[k] = c.n - c.tp[k] - c.fp[k] - c.fn[k];
  return c;
}

// Fraction of predictions equal to the gold label.
inline double accuracy(const ConfusionCounts& c) {
  if (c.n == 0) throw UndefinedError("accuracy of an empty prediction set");
  return static_cast<double>(c.correct) / static_cast<double>(c.n);
}

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline double safe_div(double a, double b) { return b == 0.0 ? 0.0 : a / b; }

inline ClassMetrics class_metrics(const ConfusionCounts& c, std::size_t k) {
  const double tp = static_cast<double>(c.tp.at(k)), fp = static_cast<double>(c.fp[k]), fn = static_cast<double>(c.fn[k]);
  ClassMetrics m;
  m.precision = safe_div(tp, tp + fp);
  m.recall = safe_div(tp, tp + fn);
  m.f1 = safe_div(2.0 * m.precision * m.recall, m.precision + m.recall);
  return m;
}

// Unweighted mean of class F1 over all K classes, absent classes included.
inline double macro_f1(const ConfusionCounts& c) {
  if (c.n == 0) throw UndefinedError("macro-F1 of an empty prediction set");
  if (c.num_classes() == 0) throw DomainError("macro-F1 needs at least one class");
  double s = 0.0;
  for (std::size_t k = 0; k < c.num_classes(); ++k) s += class_metrics(c, k).f1;
  return s / static_cast<double>(c.num_classes());
}

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

inline Interval normal_ci(double metric, std::size_t n, double z = 1.96) {
  if (n == 0) throw UndefinedError("confidence interval with n = 0");
  if (!(metric >= 0.0 && metric <= 1.0)) throw DomainError("metric outside [0, 1]");
  const double half = z * std::sqrt(metric * (1.0 - metric) / static_cast<double>(n));
  return {std::max(0.0, metric - half), std::min(1.0, metric + half)};
}

inline double round_to(double x, int decimals) {
  const double f = std::pow(10.0, decimals);
  return std::round(x * f) / f;
}

inline std::string format_fixed(double x, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, round_to(x, decimals));
  return buf;
}

// "(low, high)" as printed in result tables.
inline std::string format_interval(const Interval& ci, int decimals = 3) {
  return "(" + format_fixed(ci.low, decimals) + ", " + format_fixed(ci.high, decimals) + ")";
}

struct MetricsReport {
  std::size_t n = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  Interval accuracy_ci;
  Interval macro_f1_ci;
  std::vector<ClassMetrics> per_class;
};

inline MetricsReport evaluate(std::span<const int> preds, std::span<const int> golds, int num_classes,
                              double z = 1.96) {
  const auto c = confusion(preds, golds, num_classes);
  MetricsReport r;
  r.n = c.n;
  r.accuracy = accuracy(c);
  r.macro_f1 = macro_f1(c);
  r.accuracy_ci = normal_ci(r.accuracy, c.n, z);
  r.macro_f1_ci = normal_ci(r.macro_f1, c.n, z);
  for (std::size_t k = 0; k < c.num_classes(); ++k) r.per_class.push_back(class_metrics(c, k));
  return r;
}

}  // namespace rlab
