//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used only by the tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <tuple>
#include <vector>

#include "clmw/common.hpp"
#include "clmw/smiles.hpp"

namespace testing_oracles {

using clmw::Rng;
using namespace clmw::chem;

inline MolGraph random_graph(Rng& rng, int n) {
  static const int elements[] = {element::C, element::C, element::C, element::N, element::O, element::S};
  MolGraph g;
  for (int i = 0; i < n; ++i) {
    Atom a;
    a.element = elements[rng.uniform_index(6)];
    if (rng.uniform01() < 0.3) {
      a.explicit_h = static_cast<int>(rng.uniform_index(3));
      const int q = static_cast<int>(rng.uniform_index(5));
      a.formal_charge = q == 0 ? 1 : q == 1 ? -1 : 0;
    }
    if (rng.uniform01() < 0.1) a.isotope = 13;
    g.add_atom(a);
  }
  auto order = [&]() {
    const double u = rng.uniform01();
    return u < 0.7 ? BondOrder::Single : u < 0.92 ? BondOrder::Double : BondOrder::Triple;
  };
  for (int i = 1; i < n; ++i) {
    if (rng.uniform01() < 0.05) continue;  // occasional extra component
    g.add_bond(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(i))), i, order());
  }
  const int extra = static_cast<int>(rng.uniform_index(3));
  for (int e = 0; e < extra; ++e) {
    const int x = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
    const int y = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
    if (x != y && !g.bond_between(x, y)) g.add_bond(x, y, order());
  }
  return g;
}

/// Brute-force backtracking isomorphism test over all attributes the
/// serializer preserves.
inline bool isomorphic(const MolGraph& a, const MolGraph& b) {
  const int n = static_cast<int>(a.atom_count());
  if (n != static_cast<int>(b.atom_count()) || a.bond_count() != b.bond_count()) return false;
  auto sig = [](const MolGraph& g, int i) {
    const Atom& x = g.atom(i);
    return std::make_tuple(x.element, x.formal_charge, x.isotope.value_or(0), x.aromatic, hydrogen_count(g, i),
                           static_cast<int>(x.chirality), g.degree(i));
  };
  auto code = [](const MolGraph& g, int u, int v) -> int {
    auto id = g.bond_between(u, v);
    if (!id) return -1;
    const Bond& bd = g.bond(*id);
    const BondStereo st = bd.begin == u ? bd.stereo : flip(bd.stereo);
    return static_cast<int>(bd.order) * 3 + static_cast<int>(st);
  };
  std::vector<int> map(static_cast<std::size_t>(n), -1);
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  std::function<bool(int)> go = [&](int i) -> bool {
    if (i == n) return true;
    for (int j = 0; j < n; ++j) {
      if (used[static_cast<std::size_t>(j)] || sig(a, i) != sig(b, j)) continue;
      bool ok = true;
      for (int k = 0; k < i && ok; ++k) ok = code(a, k, i) == code(b, map[static_cast<std::size_t>(k)], j);
      if (!ok) continue;
      map[static_cast<std::size_t>(i)] = j;
      used[static_cast<std::size_t>(j)] = 1;
      if (go(i + 1)) return true;
      used[static_cast<std::size_t>(j)] = 0;
    }
    return false;
  };
  return go(0);
}

}  // namespace testing_oracles
