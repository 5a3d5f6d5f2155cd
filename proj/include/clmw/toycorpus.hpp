//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Synthetic SMILES corpora for desk-scale experiments. Molecules are chains
// of small units decorated with functional groups on which the two
// standardization protocols disagree (carboxylates, nitro groups,
// sulfoxides, ammonium, azides, halogen oxides, isotopes, counter-ions).

#include <cstdint>
#include <string>
#include <vector>

#include "clmw/common.hpp"
#include "clmw/standardize.hpp"

namespace clmw {

struct ToyCorpusOptions {
  std::size_t count = 1000;
  std::uint64_t seed = 0;
  int min_units = 2;
  int max_units = 9;
  double group_rate = 0.45;
  double salt_rate = 0.15;
};

inline std::vector<std::string> make_toy_corpus(const ToyCorpusOptions& opt) {
  static const char* const kUnits[] = {"C", "C", "C", "CC", "N", "O", "c1ccccc1", "C1CCCCC1", "C(C)", "C=C",
                                       "S", "c1ccncc1", "[CH2-]"};
  static const bool kBranchable[] = {true, true, true, true, false, false, false, false, true, true,
                                     false, false, false};
  static const char* const kGroups[] = {"C(=O)[O-]", "C(=O)O",   "N(=O)=O", "[N+](=O)[O-]", "S(C)=O",
                                        "[NH3+]",    "N",        "P(=O)(O)O", "N=N#N",      "OCl(=O)=O",
                                        "F",         "Cl",       "Br",       "[13CH3]",     "O",
                                        "C#N",       "[O-]",     "OC(=O)C"};
  static const char* const kSalts[] = {".[Na+]", ".[K+]", ".Cl", ".O", ".[Cl-]", ".[Br-]"};
  constexpr std::size_t n_units = sizeof(kUnits) / sizeof(kUnits[0]);
  constexpr std::size_t n_groups = sizeof(kGroups) / sizeof(kGroups[0]);
  constexpr std::size_t n_salts = sizeof(kSalts) / sizeof(kSalts[0]);
  if (opt.min_units < 1 || opt.max_units < opt.min_units)
    throw Error(ErrorCode::InvalidArgument, "toy corpus unit range");

  Rng rng(opt.seed);
  std::vector<std::string> out;
  out.reserve(opt.count);
  while (out.size() < opt.count) {
    const int units =
        opt.min_units + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(opt.max_units - opt.min_units + 1)));
    std::string s;
    for (int u = 0; u < units; ++u) {
      const std::size_t k = rng.uniform_index(n_units);
      s += kUnits[k];
      if (kBranchable[k] && u + 1 < units && rng.uniform01() < opt.group_rate)
        s += std::string("(") + kGroups[rng.uniform_index(n_groups)] + ")";
    }
    if (rng.uniform01() < 0.6) s += kGroups[rng.uniform_index(n_groups)];
    if (rng.uniform01() < opt.salt_rate) s += kSalts[rng.uniform_index(n_salts)];
    // Keep only molecules both protocols can process.
    try {
      chem::standardize_smiles(s, chem::Protocol::ChEMBLLike);
    } catch (const Error&) {
      continue;
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Line-aligned base (PubChem-like) and alternate (ChEMBL-like) versions of
/// the same raw molecules.
struct AlignedCorpora {
  std::vector<std::string> raw;
  std::vector<std::string> base;
  std::vector<std::string> alt;
};

inline AlignedCorpora make_aligned_corpora(const ToyCorpusOptions& opt) {
  AlignedCorpora c;
  c.raw = make_toy_corpus(opt);
  c.base.reserve(c.raw.size());
  c.alt.reserve(c.raw.size());
  for (const auto& s : c.raw) {
    c.base.push_back(chem::standardize_smiles(s, chem::Protocol::PubChemLike));
    c.alt.push_back(chem::standardize_smiles(s, chem::Protocol::ChEMBLLike));
  }
  return c;
}

}  // namespace clmw
