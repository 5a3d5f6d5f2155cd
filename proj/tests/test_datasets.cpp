//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "clmw/datasets.hpp"

namespace {

using namespace clmw;

TEST(Split, SmallSplitIsDisjointAndDeterministic) {
  const SplitPlan p = make_split(10, 0.8, 42);
  EXPECT_EQ(p.n_train, 8u);
  EXPECT_EQ(p.n_valid, 2u);
  std::set<std::size_t> all(p.train_indices.begin(), p.train_indices.end());
  for (auto i : p.valid_indices) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 10u);
  const SplitPlan q = make_split(10, 0.8, 42);
  EXPECT_EQ(p.train_indices, q.train_indices);
  EXPECT_EQ(p.valid_indices, q.valid_indices);
  EXPECT_NE(make_split(1000, 0.8, 1).train_indices, make_split(1000, 0.8, 2).train_indices);
}

TEST(Split, PublishedCounts) {
  const SplitPlan p = make_split(kPubChemTotal, 0.8, 0, true);
  EXPECT_EQ(p.n_train, 95347844u);
  EXPECT_EQ(p.n_valid, 23836962u);
  EXPECT_TRUE(p.train_indices.empty());
}

TEST(Split, RejectsBadFractions) {
  for (double f : {0.0, 1.0, -0.5, 1.5}) {
    try {
      make_split(10, f, 0);
      ADD_FAILURE() << f;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::InvalidFraction);
    }
  }
}

TEST(Bins, PublishedLayout) {
  EXPECT_EQ(bin_size(0, kPubChemBinA, 5), 2979620u);
  EXPECT_EQ(bin_size(3, kPubChemBinA, 5), 23836960u);
  EXPECT_EQ(bin_size(5, kPubChemBinA, 5), 95347844u);
  const BinPlan p = make_bin_plan(kPubChemBinA, 5);
  for (int k = 0; k <= 5; ++k) {
    const std::uint64_t oracle = kPubChemBinA * (std::uint64_t{1} << k) + (k == 5 ? 4 : 0);
    EXPECT_EQ(p.sizes[static_cast<std::size_t>(k)], oracle);
    if (k > 0) {
      EXPECT_GT(p.sizes[static_cast<std::size_t>(k)], p.sizes[static_cast<std::size_t>(k - 1)]);
    }
  }
}

TEST(Bins, GenericTarget) {
  EXPECT_EQ(bin_size(3, 50, 3, 407), 407u);
  EXPECT_EQ(bin_size(2, 50, 3, 407), 200u);
  EXPECT_EQ(bin_size(3, 50, 3), 400u);
  EXPECT_THROW(bin_size(3, 50, 3, 10), Error);
  EXPECT_THROW(bin_size(4, 50, 3), Error);
}

TEST(Noise, PublishedCounts) {
  const auto g5 = noise_counts(5, 1.0, 95347844, 23836962, kPubChemBinA);
  EXPECT_EQ(g5.np_train, 0u);
  EXPECT_EQ(g5.nc_train, 95347844u);
  EXPECT_EQ(g5.nc_valid, 23836962u);
  EXPECT_EQ(noise_counts(0, 0.5, 95347844, 23836962, kPubChemBinA).nc_valid, 11918481u);
  const auto g0 = noise_counts(0, 0.0, 95347844, 23836962, kPubChemBinA);
  EXPECT_EQ(g0.nc_train, kPubChemBinA);
  EXPECT_EQ(g0.nc_valid, 0u);
  for (int tau = 0; tau <= 5; ++tau) {
    for (double nu : {0.0, 0.5, 1.0}) {
      const auto g = noise_counts(tau, nu, 95347844, 23836962, kPubChemBinA);
      EXPECT_EQ(g.nc_train + g.np_train, 95347844u);
      EXPECT_EQ(g.nc_valid + g.np_valid, 23836962u);
      EXPECT_EQ(g.nc_train, bin_size(tau, kPubChemBinA, 5));
    }
  }
  EXPECT_THROW(noise_counts(2, 0.0, 100, 10, 40), Error);
}

std::vector<std::string> lines(const std::string& prefix, int n) {
  std::vector<std::string> v;
  for (int i = 0; i < n; ++i) v.push_back(prefix + std::to_string(i));
  return v;
}

TEST(Mixed, IdentityAndFullReplacement) {
  const auto base = lines("b", 10);
  const auto alt = lines("a", 10);
  const SplitPlan s = make_split(10, 0.8, 3);
  const auto none = materialize_mixed_corpus(base, alt, noise_counts(0, 0.0, 8, 2, 0, 2), s, 1);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(none.train[k], base[s.train_indices[k]]);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(none.valid[k], base[s.valid_indices[k]]);
  const auto all = materialize_mixed_corpus(base, alt, noise_counts(2, 1.0, 8, 2, 2, 2), s, 1);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(all.train[k], alt[s.train_indices[k]]);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(all.valid[k], alt[s.valid_indices[k]]);
}

TEST(Mixed, ExactlyFourTrainLinesDiffer) {
  const auto base = lines("b", 10);
  const auto alt = lines("a", 10);
  const SplitPlan s = make_split(10, 0.8, 3);
  // a = 1, tau = 2 -> N_C_train = 4.
  const auto grid = noise_counts(2, 0.0, 8, 2, 1, 3);
  ASSERT_EQ(grid.nc_train, 4u);
  for (bool prefix : {false, true}) {
    const auto m = materialize_mixed_corpus(base, alt, grid, s, 9, prefix);
    int differ = 0;
    for (std::size_t k = 0; k < m.train.size(); ++k) differ += m.train[k] != base[s.train_indices[k]];
    EXPECT_EQ(differ, 4);
  }
  const auto p = materialize_mixed_corpus(base, alt, grid, s, 9, true);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(p.train_from_alt[k], k < 4);
}

TEST(Mixed, AlignmentErrors) {
  const SplitPlan s = make_split(10, 0.8, 3);
  try {
    materialize_mixed_corpus(lines("b", 10), lines("a", 9), noise_counts(0, 0.0, 8, 2, 0, 2), s, 1);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AlignmentError);
  }
}

TEST(Mixed, ManifestIsByteStable) {
  const auto base = lines("b", 50);
  const auto alt = lines("a", 50);
  const SplitPlan s = make_split(50, 0.8, 3);
  const auto grid = noise_counts(1, 0.5, 40, 10, 5, 3);
  const auto dir = std::filesystem::temp_directory_path() / "clmw_mixed_test";
  const auto j1 = write_mixed_corpus(dir, materialize_mixed_corpus(base, alt, grid, s, 4), grid, s, 4);
  const std::string t1 = read_file((dir / "train.txt").string());
  const auto j2 = write_mixed_corpus(dir, materialize_mixed_corpus(base, alt, grid, s, 4), grid, s, 4);
  EXPECT_EQ(t1, read_file((dir / "train.txt").string()));
  EXPECT_EQ(j1, j2);
  EXPECT_EQ(j1["grid"]["N_C_valid"], 5);
  std::filesystem::remove_all(dir);
}

}  // namespace
