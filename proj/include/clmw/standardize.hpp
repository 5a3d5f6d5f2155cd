//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Two divergent standardization protocols.
//
// ChEMBLLike: valence clean-up rewrites, the sulfoxide zwitterion rule,
// parent extraction (salt stripping, isotope removal) and neutralization.
// PubChemLike: canonicalization only; charges and S=O stay as written.

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "clmw/common.hpp"
#include "clmw/smiles.hpp"

namespace clmw::chem {

enum class Protocol { PubChemLike, ChEMBLLike };

inline Protocol parse_protocol(std::string_view s) {
  if (s == "pubchem" || s == "PubChemLike") return Protocol::PubChemLike;
  if (s == "chembl" || s == "ChEMBLLike") return Protocol::ChEMBLLike;
  throw Error(ErrorCode::InvalidArgument, "unknown protocol '" + std::string(s) + "'");
}

inline const char* protocol_name(Protocol p) { return p == Protocol::PubChemLike ? "pubchem" : "chembl"; }

/// Canonical SMILES of components treated as salts or solvents.
class SaltList {
 public:
  SaltList() = default;

  explicit SaltList(const std::vector<std::string>& smiles) {
    for (const auto& s : smiles) add(s);
  }

  /// Cl-, Br-, Na+, K+, HCl, water and acetate.
  static const SaltList& standard() {
    static const SaltList s({"[Cl-]", "[Br-]", "[Na+]", "[K+]", "Cl", "O", "CC(=O)[O-]"});
    return s;
  }

  /// One SMILES per line; blank lines and lines starting with '#' are skipped.
  static SaltList from_file(const std::string& path) {
    SaltList out;
    std::size_t line_no = 0;
    for (const auto& raw : read_lines(path)) {
      ++line_no;
      const std::string line = trim(raw);
      if (line.empty() || line[0] == '#') continue;
      try {
        out.add(line);
      } catch (const Error& e) {
        throw Error(ErrorCode::InvalidArgument, path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    return out;
  }

  void add(std::string_view smiles) { entries_.insert(canonical_smiles(smiles)); }
  bool contains(const std::string& canonical) const { return entries_.count(canonical) > 0; }
  const std::set<std::string>& entries() const { return entries_; }

 private:
  std::set<std::string> entries_;
};

namespace detail {

inline std::vector<int> atoms_by_rank(const std::vector<int>& rank) {
  std::vector<int> order(rank.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[static_cast<std::size_t>(rank[i])] = static_cast<int>(i);
  return order;
}

/// Neighbours of `i` joined by a bond of `order` to a neutral atom of element
/// `z`, sorted by canonical rank.
inline std::vector<Neighbor> bonded(const MolGraph& g, int i, BondOrder order, int z,
                                    const std::vector<int>& rank) {
  std::vector<Neighbor> out;
  for (const auto& nb : g.neighbors(i))
    if (g.bond(nb.bond).order == order && g.atom(nb.atom).element == z && g.atom(nb.atom).formal_charge == 0)
      out.push_back(nb);
  std::sort(out.begin(), out.end(), [&](const Neighbor& a, const Neighbor& b) {
    return rank[static_cast<std::size_t>(a.atom)] < rank[static_cast<std::size_t>(b.atom)];
  });
  return out;
}

/// Edits the site at atom `i` and returns true, or returns false when `i` is
/// not a site of the rule.
using RuleFn = bool (*)(MolGraph&, int, const std::vector<int>&);

inline int valence_with_h(const MolGraph& g, int i) { return bond_order_sum(g, i) + hydrogen_count(g, i); }

// Neutral pentavalent N with a =O neighbour -> [N+]-[O-].
inline bool rule_nitro(MolGraph& g, int i, const std::vector<int>& rank) {
  const Atom& a = g.atom(i);
  if (a.element != element::N || a.formal_charge != 0 || valence_with_h(g, i) != 5) return false;
  const auto oxo = bonded(g, i, BondOrder::Double, element::O, rank);
  if (oxo.empty()) return false;
  freeze_hydrogens(g, i);
  freeze_hydrogens(g, oxo[0].atom);
  g.atom(i).formal_charge = 1;
  g.atom(oxo[0].atom).formal_charge = -1;
  g.bond(oxo[0].bond).order = BondOrder::Single;
  return true;
}

// Neutral pentavalent N with a #N neighbour (azide) -> =[N+]=[N-].
inline bool rule_azide(MolGraph& g, int i, const std::vector<int>& rank) {
  const Atom& a = g.atom(i);
  if (a.element != element::N || a.formal_charge != 0 || valence_with_h(g, i) != 5) return false;
  const auto term = bonded(g, i, BondOrder::Triple, element::N, rank);
  if (term.empty()) return false;
  freeze_hydrogens(g, i);
  freeze_hydrogens(g, term[0].atom);
  g.atom(i).formal_charge = 1;
  g.atom(term[0].atom).formal_charge = -1;
  g.bond(term[0].bond).order = BondOrder::Double;
  return true;
}

// Neutral pentavalent P with =O and a double bond to C or P -> [P+]-[O-].
inline bool rule_phosphorus(MolGraph& g, int i, const std::vector<int>& rank) {
  const Atom& a = g.atom(i);
  if (a.element != element::P || a.formal_charge != 0 || valence_with_h(g, i) != 5) return false;
  const auto oxo = bonded(g, i, BondOrder::Double, element::O, rank);
  if (oxo.empty()) return false;
  bool partner = false;
  for (const auto& nb : g.neighbors(i)) {
    const int z = g.atom(nb.atom).element;
    if (g.bond(nb.bond).order == BondOrder::Double && (z == element::C || z == element::P)) partner = true;
  }
  if (!partner) return false;
  freeze_hydrogens(g, i);
  freeze_hydrogens(g, oxo[0].atom);
  g.atom(i).formal_charge = 1;
  g.atom(oxo[0].atom).formal_charge = -1;
  g.bond(oxo[0].bond).order = BondOrder::Single;
  return true;
}

// Neutral 3/5/7-valent Cl, Br or I bonded only to oxygens: every =O becomes
// [O-] and the halogen takes one positive charge per rewritten bond.
inline bool rule_halogen(MolGraph& g, int i, const std::vector<int>& rank) {
  const Atom& a = g.atom(i);
  if ((a.element != element::Cl && a.element != element::Br && a.element != element::I) || a.formal_charge != 0)
    return false;
  const int v = valence_with_h(g, i);
  if (v != 3 && v != 5 && v != 7) return false;
  if (g.degree(i) == 0) return false;
  for (const auto& nb : g.neighbors(i))
    if (g.atom(nb.atom).element != element::O) return false;
  const auto oxo = bonded(g, i, BondOrder::Double, element::O, rank);
  if (oxo.empty()) return false;
  freeze_hydrogens(g, i);
  for (const auto& nb : oxo) {
    freeze_hydrogens(g, nb.atom);
    g.atom(nb.atom).formal_charge = -1;
    g.bond(nb.bond).order = BondOrder::Single;
  }
  g.atom(i).formal_charge = static_cast<int>(oxo.size());
  return true;
}

// Neutral tetravalent S with exactly two carbon neighbours and =O -> [S+]-[O-].
inline bool rule_sulfoxide(MolGraph& g, int i, const std::vector<int>& rank) {
  const Atom& a = g.atom(i);
  if (a.element != element::S || a.formal_charge != 0 || a.aromatic || valence_with_h(g, i) != 4 ||
      g.degree(i) != 3)
    return false;
  int carbons = 0;
  for (const auto& nb : g.neighbors(i))
    if (g.atom(nb.atom).element == element::C && g.bond(nb.bond).order == BondOrder::Single) ++carbons;
  const auto oxo = bonded(g, i, BondOrder::Double, element::O, rank);
  if (carbons != 2 || oxo.size() != 1) return false;
  freeze_hydrogens(g, i);
  freeze_hydrogens(g, oxo[0].atom);
  g.atom(i).formal_charge = 1;
  g.atom(oxo[0].atom).formal_charge = -1;
  g.bond(oxo[0].bond).order = BondOrder::Single;
  return true;
}

/// Applies one rule until no site matches; sites are visited in ascending
/// canonical rank of the graph at the start of each sweep.
inline void apply_exhaustively(MolGraph& g, RuleFn rule) {
  for (std::size_t sweep = 0; sweep <= g.atom_count(); ++sweep) {
    const auto rank = canonical_ranks(g);
    bool changed = false;
    for (int i : atoms_by_rank(rank)) changed |= rule(g, i, rank);
    if (!changed) return;
  }
}

inline bool has_neighbor_charge(const MolGraph& g, int i, int sign) {
  for (const auto& nb : g.neighbors(i)) {
    const int q = g.atom(nb.atom).formal_charge;
    if ((sign > 0 && q > 0) || (sign < 0 && q < 0)) return true;
  }
  return false;
}

}  // namespace detail

/// Valence clean-up rewrites in fixed order: nitro-type N, azide N,
/// phosphorus, halogen oxides. Heavy-atom count is unchanged.
inline MolGraph cleanup_rewrites(const MolGraph& in) {
  MolGraph g = in;
  detail::apply_exhaustively(g, detail::rule_nitro);
  detail::apply_exhaustively(g, detail::rule_azide);
  detail::apply_exhaustively(g, detail::rule_phosphorus);
  detail::apply_exhaustively(g, detail::rule_halogen);
  return g;
}

inline MolGraph sulfoxide_zwitterion(const MolGraph& in) {
  MolGraph g = in;
  detail::apply_exhaustively(g, detail::rule_sulfoxide);
  return g;
}

/// Drops salt/solvent components and clears isotopes. If every component is
/// listed as a salt, the largest one (by heavy atoms, then atoms) is kept.
inline MolGraph get_parent(const MolGraph& g, const SaltList& salts = SaltList::standard()) {
  if (g.atom_count() == 0) throw Error(ErrorCode::EmptyInput, "get_parent on a graph with zero atoms");
  const auto comps = g.components();
  std::vector<int> keep;
  std::size_t best = 0;
  std::pair<std::size_t, std::size_t> best_size{0, 0};
  for (std::size_t c = 0; c < comps.size(); ++c) {
    const MolGraph sub = g.subgraph(comps[c]);
    const std::pair<std::size_t, std::size_t> size{sub.heavy_atom_count(), sub.atom_count()};
    if (size > best_size) {
      best = c;
      best_size = size;
    }
    if (!salts.contains(write_canonical(sub))) keep.insert(keep.end(), comps[c].begin(), comps[c].end());
  }
  if (keep.empty()) keep = comps[best];
  std::sort(keep.begin(), keep.end());
  MolGraph out = g.subgraph(keep);
  for (int i = 0; i < static_cast<int>(out.atom_count()); ++i) out.atom(i).isotope.reset();
  return out;
}

/// Protonates isolated anions and deprotonates isolated cations that carry
/// hydrogens. Atoms next to an opposite charge (zwitterions) are left alone,
/// as is any change that would leave a disallowed valence.
inline MolGraph neutralize(const MolGraph& in) {
  MolGraph g = in;
  const auto& table = ValenceTable::standard();
  for (int i = 0; i < static_cast<int>(g.atom_count()); ++i) {
    const int q = g.atom(i).formal_charge;
    if (q == 0) continue;
    const int h = hydrogen_count(g, i);
    const int bonds = bond_order_sum(g, i) + (g.atom(i).aromatic ? 1 : 0);
    if (q < 0 && !detail::has_neighbor_charge(g, i, +1)) {
      const int new_h = h - q;
      if (table.is_allowed(g.atom(i).element, bonds + new_h)) {
        g.atom(i).formal_charge = 0;
        g.atom(i).explicit_h = new_h;
      }
    } else if (q > 0 && h >= q && !detail::has_neighbor_charge(g, i, -1)) {
      const int new_h = h - q;
      if (table.is_allowed(g.atom(i).element, bonds + new_h)) {
        g.atom(i).formal_charge = 0;
        g.atom(i).explicit_h = new_h;
      }
    }
  }
  return g;
}

/// Re-derives a graph from its canonical string so bracket flags and bond
/// storage order depend only on the molecule.
inline MolGraph canonical_reparse(const MolGraph& g) { return parse_smiles(write_canonical(g)); }

inline MolGraph standardize(const MolGraph& g, Protocol p, const SaltList& salts = SaltList::standard()) {
  if (g.atom_count() == 0) throw Error(ErrorCode::EmptyInput, "standardize on a graph with zero atoms");
  if (p == Protocol::PubChemLike) return canonical_reparse(g);
  MolGraph x = cleanup_rewrites(g);
  x = sulfoxide_zwitterion(x);
  x = get_parent(x, salts);
  x = neutralize(x);
  return canonical_reparse(x);
}

inline std::string standardize_smiles(std::string_view smiles, Protocol p,
                                      const SaltList& salts = SaltList::standard()) {
  return write_canonical(standardize(parse_smiles(smiles), p, salts));
}

/// A corpus line that could not be processed.
struct Reject {
  std::size_t line_no = 0;  // 1-based
  std::string error;
  std::size_t offset = 0;
};

struct CorpusResult {
  std::vector<std::string> output;  // successfully standardized lines, input order
  std::vector<std::size_t> source_line;
  std::vector<Reject> rejects;
};

inline CorpusResult standardize_corpus(const std::vector<std::string>& lines, Protocol p,
                                       const SaltList& salts = SaltList::standard()) {
  CorpusResult r;
  for (std::size_t k = 0; k < lines.size(); ++k) {
    const std::string s = trim(lines[k]);
    try {
      r.output.push_back(standardize_smiles(s, p, salts));
      r.source_line.push_back(k + 1);
    } catch (const SmilesError& e) {
      r.rejects.push_back({k + 1, smiles_error_name(e.kind()), e.offset()});
    } catch (const Error& e) {
      r.rejects.push_back({k + 1, error_code_name(e.code()), 0});
    }
  }
  return r;
}

inline std::vector<std::string> rejects_csv(const std::vector<Reject>& rejects) {
  std::vector<std::string> out{"line_no,error,offset"};
  for (const auto& r : rejects)
    out.push_back(std::to_string(r.line_no) + "," + r.error + "," + std::to_string(r.offset));
  return out;
}

}  // namespace clmw::chem
