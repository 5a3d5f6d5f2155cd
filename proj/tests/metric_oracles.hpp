//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Independent reference implementations for the metric tests.

#include <cmath>
#include <set>
#include <vector>

namespace testing_oracles {

/// Student-t CDF by Simpson integration of the density from 0 to x.
inline double student_t_cdf(double x, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI);
  auto pdf = [&](double t) { return c * std::pow(1 + t * t / df, -(df + 1) / 2); };
  const int n = 20000;
  const double h = x / n;
  double s = pdf(0) + pdf(x);
  for (int i = 1; i < n; ++i) s += pdf(i * h) * (i % 2 ? 4 : 2);
  return 0.5 + s * h / 3;
}

/// 0.975 quantile by bisection on the integrated CDF.
inline double student_t_975(double df) {
  double lo = 0, hi = 100;
  for (int i = 0; i < 100; ++i) {
    const double mid = (lo + hi) / 2;
    (student_t_cdf(mid, df) < 0.975 ? lo : hi) = mid;
  }
  return (lo + hi) / 2;
}

/// Weighted F1 by explicit loops over each reference class.
inline double brute_weighted_f1(const std::vector<int>& pred, const std::vector<int>& ref) {
  std::set<int> classes(ref.begin(), ref.end());
  double total = 0;
  for (int c : classes) {
    double tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (ref[i] == c) support += 1;
      if (pred[i] == c && ref[i] == c) tp += 1;
      if (pred[i] == c && ref[i] != c) fp += 1;
      if (pred[i] != c && ref[i] == c) fn += 1;
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0;
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0;
    total += support * f;
  }
  return total / static_cast<double>(ref.size());
}

}  // namespace testing_oracles
