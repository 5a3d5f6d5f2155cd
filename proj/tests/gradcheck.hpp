//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Central finite-difference gradient oracle shared by the unit and
// acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "clmw/common.hpp"

namespace testing_oracles {

struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

/// `loss(x)` evaluates the scalar objective at the flat coordinate vector x.
/// Compares analytic[i] against (f(x+h e_i) - f(x-h e_i)) / 2h for `samples`
/// random coordinates. The relative error uses max(|a|, |n|, 1e-6) in the
/// denominator so coordinates with near-zero gradient do not blow up.
inline GradCheck finite_difference_check(const std::function<double(const std::vector<double>&)>& loss,
                                         std::vector<double> x, const std::vector<double>& analytic,
                                         std::size_t samples, std::uint64_t seed, double h = 1e-5) {
  GradCheck r;
  clmw::Rng rng(seed);
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  const std::size_t n = std::min(samples, idx.size());
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t i = idx[s];
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = loss(x);
    x[i] = x0 - h;
    const double fm = loss(x);
    x[i] = x0;
    const double num = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(num), std::abs(analytic[i]), 1e-6});
    r.max_rel_err = std::max(r.max_rel_err, std::abs(num - analytic[i]) / denom);
    ++r.checked;
  }
  return r;
}

}  // namespace testing_oracles
