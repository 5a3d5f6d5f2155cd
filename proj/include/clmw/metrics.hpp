//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Masked-LM metrics, regression metrics and Student-t summaries.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "clmw/common.hpp"

namespace clmw {

/// One entry per masked position: log-probability of the reference token,
/// the top-1 prediction and the reference id.
struct MaskedEvalBatch {
  std::vector<double> ref_logp;
  std::vector<int> pred;
  std::vector<int> ref;

  std::size_t size() const { return ref.size(); }
  void append(const MaskedEvalBatch& o) {
    ref_logp.insert(ref_logp.end(), o.ref_logp.begin(), o.ref_logp.end());
    pred.insert(pred.end(), o.pred.begin(), o.pred.end());
    ref.insert(ref.end(), o.ref.begin(), o.ref.end());
  }
};

namespace detail {
inline void require_masked(const MaskedEvalBatch& b) {
  if (b.ref.empty()) throw Error(ErrorCode::NoMaskedPositions, "evaluation batch has no masked positions");
  if (b.pred.size() != b.ref.size() || b.ref_logp.size() != b.ref.size())
    throw Error(ErrorCode::LengthMismatch, "evaluation batch fields are not aligned");
}
}  // namespace detail

/// Mean negative log-likelihood over masked positions.
inline double masked_loss(const MaskedEvalBatch& b) {
  detail::require_masked(b);
  double s = 0.0;
  for (double lp : b.ref_logp) s -= lp;
  return s / static_cast<double>(b.size());
}

inline double pppl(double loss) { return std::exp(loss); }
inline double pppl(const MaskedEvalBatch& b) { return pppl(masked_loss(b)); }

/// Top-1 accuracy over masked positions.
inline double masked_accuracy(const MaskedEvalBatch& b) {
  detail::require_masked(b);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < b.size(); ++i) ok += b.pred[i] == b.ref[i];
  return static_cast<double>(ok) / static_cast<double>(b.size());
}

struct ClassCounts {
  std::size_t tp = 0, fp = 0, fn = 0, support = 0;
};

inline std::map<int, ClassCounts> confusion_counts(const MaskedEvalBatch& b) {
  std::map<int, ClassCounts> c;
  for (std::size_t i = 0; i < b.size(); ++i) {
    ++c[b.ref[i]].support;
    if (b.pred[i] == b.ref[i]) {
      ++c[b.ref[i]].tp;
    } else {
      ++c[b.ref[i]].fn;
      ++c[b.pred[i]].fp;
    }
  }
  return c;
}

/// Support-weighted one-vs-rest accuracy (TP + TN) / N per reference class.
inline double one_vs_rest_accuracy(const MaskedEvalBatch& b) {
  detail::require_masked(b);
  const double n = static_cast<double>(b.size());
  double s = 0.0;
  for (const auto& [cls, k] : confusion_counts(b)) {
    if (k.support == 0) continue;
    const double tn = n - static_cast<double>(k.tp + k.fp + k.fn);
    s += static_cast<double>(k.support) * (static_cast<double>(k.tp) + tn) / n;
  }
  return s / n;
}

/// Support-weighted F1 over classes present in the references. F1 is 0 when
/// precision + recall is 0.
inline double weighted_f1(const MaskedEvalBatch& b) {
  detail::require_masked(b);
  double s = 0.0;
  for (const auto& [cls, k] : confusion_counts(b)) {
    if (k.support == 0) continue;
    const double p = k.tp + k.fp == 0 ? 0.0 : static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp);
    const double r = static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn);
    const double f1 = p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
    s += static_cast<double>(k.support) * f1;
  }
  return s / static_cast<double>(b.size());
}

struct RegressionReport {
  double mae = 0.0;
  double rmse = 0.0;
  double pearson_r = 0.0;
  double r2 = 0.0;
};

/// A constant prediction has no defined correlation; it is reported as 0.
inline RegressionReport regression_metrics(std::span<const double> pred, std::span<const double> ref) {
  if (pred.size() != ref.size())
    throw Error(ErrorCode::LengthMismatch, std::to_string(pred.size()) + " predictions for " +
                                               std::to_string(ref.size()) + " references");
  if (ref.size() < 2) throw Error(ErrorCode::TooFewSamples, "regression metrics need at least 2 points");
  const double n = static_cast<double>(ref.size());
  double mp = 0, mr = 0, ae = 0, se = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    mp += pred[i];
    mr += ref[i];
    ae += std::abs(pred[i] - ref[i]);
    se += (pred[i] - ref[i]) * (pred[i] - ref[i]);
  }
  mp /= n;
  mr /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    sxy += (pred[i] - mp) * (ref[i] - mr);
    sxx += (pred[i] - mp) * (pred[i] - mp);
    syy += (ref[i] - mr) * (ref[i] - mr);
  }
  if (syy == 0.0) throw Error(ErrorCode::DegenerateReference, "reference values are constant");
  RegressionReport r;
  r.mae = ae / n;
  r.rmse = std::sqrt(se / n);
  r.pearson_r = sxx == 0.0 ? 0.0 : std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  r.r2 = 1.0 - se / syy;
  return r;
}

/// Two-sided 95% Student-t critical values (0.975 quantile), df 1..30;
/// 1.96 beyond.
inline double t_critical_95(std::size_t df) {
  static constexpr double kTable[30] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                        2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                                        2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df == 0) throw Error(ErrorCode::TooFewSamples, "t quantile needs at least one degree of freedom");
  return df <= 30 ? kTable[df - 1] : 1.96;
}

struct SummaryStat {
  std::size_t n = 0;
  double mean = 0.0;
  double s_n = 0.0;
  double t_crit = 0.0;
  double ci_half = 0.0;
};

/// Mean, n-1 standard deviation and the 95% confidence half-width
/// (s_N / sqrt(n)) * t(n-1).
inline SummaryStat summarize(std::span<const double> values) {
  if (values.size() < 2) throw Error(ErrorCode::TooFewSamples, "summarize needs at least 2 values");
  SummaryStat s;
  s.n = values.size();
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.s_n = std::sqrt(ss / static_cast<double>(s.n - 1));
  s.t_crit = t_critical_95(s.n - 1);
  s.ci_half = s.s_n / std::sqrt(static_cast<double>(s.n)) * s.t_crit;
  return s;
}

/// "mean ± s_N (test)" table cell.
inline std::string format_cv_cell(double mean, double s_n, double test, int decimals = 3) {
  return fixed(mean, decimals) + " \xC2\xB1 " + fixed(s_n, decimals) + " (" + fixed(test, decimals) + ")";
}

}  // namespace clmw
