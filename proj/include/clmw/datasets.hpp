//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Corpus splitting, exponential size bins and standardization-noise grids.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "clmw/common.hpp"

namespace clmw {

/// First-bin size, largest bin index and corpus size of the full PubChem layout.
inline constexpr std::uint64_t kPubChemBinA = 2979620;
inline constexpr int kPubChemKMax = 5;
inline constexpr std::uint64_t kPubChemTotal = 119184806;

struct SplitPlan {
  std::uint64_t seed = 0;
  std::uint64_t n_total = 0;
  std::uint64_t n_train = 0;
  std::uint64_t n_valid = 0;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> valid_indices;
};

/// n_train = floor(n_total * train_frac), n_valid = n_total - n_train.
inline std::pair<std::uint64_t, std::uint64_t> split_counts(std::uint64_t n_total, double train_frac) {
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw Error(ErrorCode::InvalidFraction, "train_frac must lie in (0, 1), got " + exact(train_frac));
  const long double x = static_cast<long double>(n_total) * static_cast<long double>(train_frac);
  const auto n_train = static_cast<std::uint64_t>(std::floor(x + 1e-9L));
  return {n_train, n_total - n_train};
}

/// Seeded uniform shuffle of 0..n_total-1; the first n_train indices form the
/// training split. With `counts_only` the index lists are left empty, which
/// allows planning at the 10^8 scale.
inline SplitPlan make_split(std::uint64_t n_total, double train_frac, std::uint64_t seed, bool counts_only = false) {
  SplitPlan p;
  p.seed = seed;
  p.n_total = n_total;
  std::tie(p.n_train, p.n_valid) = split_counts(n_total, train_frac);
  if (counts_only) return p;
  std::vector<std::size_t> idx(n_total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed({seed, 0x5311u}));
  rng.shuffle(idx);
  p.train_indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(p.n_train));
  p.valid_indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(p.n_train), idx.end());
  return p;
}

inline std::uint64_t pow2(int k) {
  if (k < 0 || k > 62) throw Error(ErrorCode::Overflow, "2^" + std::to_string(k));
  return std::uint64_t{1} << k;
}

/// N_train(k) = a * 2^k + b.
///
/// Without `target`, b = 4 exactly when k = k_max = 5 and a = 2,979,620 (the
/// published layout) and 0 otherwise. With `target`, b is chosen at k = k_max
/// so that the last bin holds exactly `target` examples.
inline std::uint64_t bin_size(int k, std::uint64_t a, int k_max, std::optional<std::uint64_t> target = std::nullopt) {
  if (k < 0 || k > k_max) throw Error(ErrorCode::InvalidArgument, "bin index out of range");
  const std::uint64_t base = a * pow2(k);
  if (k != k_max) return base;
  if (target) {
    if (*target < base) throw Error(ErrorCode::Overflow, "target smaller than a * 2^k_max");
    return *target;
  }
  return (k_max == kPubChemKMax && a == kPubChemBinA) ? base + 4 : base;
}

struct BinPlan {
  std::uint64_t a = 0;
  int k_max = 0;
  std::vector<std::uint64_t> sizes;  // index k
};

inline BinPlan make_bin_plan(std::uint64_t a, int k_max, std::optional<std::uint64_t> target = std::nullopt) {
  BinPlan p{a, k_max, {}};
  for (int k = 0; k <= k_max; ++k) p.sizes.push_back(bin_size(k, a, k_max, target));
  return p;
}

/// Largest a such that a * 2^k_max <= n_train.
inline std::uint64_t first_bin_for(std::uint64_t n_train, int k_max) { return n_train / pow2(k_max); }

struct NoiseGrid {
  int tau = 0;
  double nu = 0.0;
  std::uint64_t n_train = 0;
  std::uint64_t n_valid = 0;
  std::uint64_t nc_train = 0;  // alternate-protocol lines in training
  std::uint64_t np_train = 0;
  std::uint64_t nc_valid = 0;
  std::uint64_t np_valid = 0;
};

/// N^C_train = a * 2^tau + b(tau), where b is nonzero only at tau = k_max and
/// makes the alternate share fill the training split. N^C_valid =
/// round-half-up(nu * n_valid).
inline NoiseGrid noise_counts(int tau, double nu, std::uint64_t n_train, std::uint64_t n_valid, std::uint64_t a,
                              int k_max = kPubChemKMax) {
  if (tau < 0 || tau > k_max) throw Error(ErrorCode::InvalidArgument, "tau out of range");
  if (!(nu >= 0.0 && nu <= 1.0)) throw Error(ErrorCode::InvalidFraction, "nu must lie in [0, 1]");
  NoiseGrid g;
  g.tau = tau;
  g.nu = nu;
  g.n_train = n_train;
  g.n_valid = n_valid;
  const std::uint64_t base = a * pow2(tau);
  if (tau == k_max) {
    if (n_train < base) throw Error(ErrorCode::Overflow, "a * 2^tau exceeds n_train");
    g.nc_train = n_train;
  } else {
    g.nc_train = base;
  }
  if (g.nc_train > n_train) throw Error(ErrorCode::Overflow, "N_C_train exceeds n_train");
  g.np_train = n_train - g.nc_train;
  g.nc_valid = round_half_up(nu * static_cast<double>(n_valid));
  if (g.nc_valid > n_valid) g.nc_valid = n_valid;
  g.np_valid = n_valid - g.nc_valid;
  return g;
}

struct MixedCorpus {
  std::vector<std::string> train;
  std::vector<std::string> valid;
  std::vector<bool> train_from_alt;
  std::vector<bool> valid_from_alt;
};

/// Draws exactly grid.nc_train training and grid.nc_valid validation lines
/// from `alt` and the rest from `base`. Replacement positions come from a
/// seeded shuffle of the split, or from its prefix when `prefix_mode` is set.
inline MixedCorpus materialize_mixed_corpus(const std::vector<std::string>& base, const std::vector<std::string>& alt,
                                            const NoiseGrid& grid, const SplitPlan& split, std::uint64_t seed,
                                            bool prefix_mode = false) {
  if (base.size() != alt.size())
    throw Error(ErrorCode::AlignmentError, "base has " + std::to_string(base.size()) + " lines, alt has " +
                                               std::to_string(alt.size()));
  if (split.n_total != base.size() || split.train_indices.size() != split.n_train ||
      split.valid_indices.size() != split.n_valid)
    throw Error(ErrorCode::AlignmentError, "split plan does not describe this corpus");
  if (grid.n_train != split.n_train || grid.n_valid != split.n_valid)
    throw Error(ErrorCode::InvalidArgument, "noise grid counts do not match the split");

  auto choose = [&](std::size_t n, std::uint64_t take, std::uint64_t salt) {
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    if (!prefix_mode) {
      Rng rng(derive_seed({seed, salt}));
      rng.shuffle(pos);
    }
    std::vector<bool> mark(n, false);
    for (std::uint64_t k = 0; k < take; ++k) mark[pos[k]] = true;
    return mark;
  };

  MixedCorpus out;
  out.train_from_alt = choose(split.train_indices.size(), grid.nc_train, 0x7a11);
  out.valid_from_alt = choose(split.valid_indices.size(), grid.nc_valid, 0x7a12);
  for (std::size_t k = 0; k < split.train_indices.size(); ++k) {
    const std::size_t i = split.train_indices[k];
    out.train.push_back(out.train_from_alt[k] ? alt[i] : base[i]);
  }
  for (std::size_t k = 0; k < split.valid_indices.size(); ++k) {
    const std::size_t i = split.valid_indices[k];
    out.valid.push_back(out.valid_from_alt[k] ? alt[i] : base[i]);
  }
  return out;
}

inline nlohmann::json grid_to_json(const NoiseGrid& g) {
  return {{"tau", g.tau},         {"nu", g.nu},           {"n_train", g.n_train},   {"n_valid", g.n_valid},
          {"N_C_train", g.nc_train}, {"N_P_train", g.np_train}, {"N_C_valid", g.nc_valid}, {"N_P_valid", g.np_valid}};
}

/// Writes train.txt / valid.txt under `dir` and returns the manifest that is
/// also stored as manifest.json.
inline nlohmann::json write_mixed_corpus(const std::filesystem::path& dir, const MixedCorpus& m,
                                         const NoiseGrid& grid, const SplitPlan& split, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  write_lines((dir / "train.txt").string(), m.train);
  write_lines((dir / "valid.txt").string(), m.valid);
  nlohmann::json j;
  j["grid"] = grid_to_json(grid);
  j["split_seed"] = split.seed;
  j["noise_seed"] = seed;
  j["files"] = {{"train.txt", hash_lines(m.train)}, {"valid.txt", hash_lines(m.valid)}};
  write_file((dir / "manifest.json").string(), j.dump(2) + "\n");
  return j;
}

}  // namespace clmw
