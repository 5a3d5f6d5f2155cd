//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// SMILES reading, molecular graphs, valence bookkeeping and a canonical
// writer.
//
// Supported grammar: organic-subset atoms (B C N O P S F Cl Br I and the
// aromatic b c n o p s), bracket atoms with isotope, element, @/@@, H count,
// charge and an atom class (parsed and discarded), the bond symbols
// - = # : / \, branches, ring closures (0-9 and %nn) and dot-separated
// components. Wildcards, reactions and quadruple bonds are rejected.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "clmw/common.hpp"

namespace clmw::chem {

inline constexpr std::array<std::string_view, 119> kElementSymbols = {
    "*",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
    "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
    "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
    "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac",
    "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf",
    "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

namespace element {
inline constexpr int H = 1, B = 5, C = 6, N = 7, O = 8, F = 9, P = 15, S = 16, Cl = 17,
                     As = 33, Se = 34, Br = 35, I = 53;
}  // namespace element

/// Atomic number for an element symbol, or 0 when unknown.
inline int element_from_symbol(std::string_view sym) {
  for (int z = 1; z < static_cast<int>(kElementSymbols.size()); ++z)
    if (kElementSymbols[static_cast<std::size_t>(z)] == sym) return z;
  return 0;
}

inline std::string_view element_symbol(int z) {
  if (z <= 0 || z >= static_cast<int>(kElementSymbols.size()))
    throw Error(ErrorCode::InvalidArgument, "atomic number out of range: " + std::to_string(z));
  return kElementSymbols[static_cast<std::size_t>(z)];
}

inline bool is_organic_subset(int z) {
  switch (z) {
    case element::B: case element::C: case element::N: case element::O: case element::P:
    case element::S: case element::F: case element::Cl: case element::Br: case element::I:
      return true;
    default:
      return false;
  }
}

inline bool may_be_aromatic(int z) {
  switch (z) {
    case element::B: case element::C: case element::N: case element::O: case element::P:
    case element::S: case element::Se: case element::As:
      return true;
    default:
      return false;
  }
}

/// Allowed total valences per element.
class ValenceTable {
 public:
  ValenceTable() {
    for (int z = 1; z < static_cast<int>(kElementSymbols.size()); ++z)
      table_[z] = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    auto set = [&](std::initializer_list<int> zs, std::vector<int> v) {
      for (int z : zs) table_[z] = v;
    };
    set({1, 3, 11, 19, 37, 55, 87}, {1});          // H and alkali metals
    set({4, 12, 20, 38, 56, 88}, {2});             // alkaline earths
    set({2, 10, 18, 36, 54, 86}, {0});             // noble gases
    set({5, 13, 31}, {3});                         // B Al Ga
    set({6, 14, 32}, {4});                         // C Si Ge
    set({7, 15, 33, 51}, {3, 5});                  // N P As Sb
    set({8}, {2});
    set({16, 34, 52}, {2, 4, 6});                  // S Se Te
    set({9}, {1});
    set({17, 35, 53, 85}, {1, 3, 5, 7});           // Cl Br I At
    set({50, 82}, {2, 4});                         // Sn Pb
  }

  std::span<const int> allowed(int z) const {
    auto it = table_.find(z);
    if (it == table_.end()) throw Error(ErrorCode::InvalidArgument, "no valence entry for Z=" + std::to_string(z));
    return it->second;
  }

  void set(int z, std::vector<int> valences) {
    if (valences.empty()) throw Error(ErrorCode::InvalidArgument, "valence list must be non-empty");
    table_[z] = std::move(valences);
  }

  bool is_allowed(int z, int valence) const {
    auto a = allowed(z);
    return std::find(a.begin(), a.end(), valence) != a.end();
  }

  static const ValenceTable& standard() {
    static const ValenceTable t;
    return t;
  }

 private:
  std::map<int, std::vector<int>> table_;
};

enum class Chirality : std::uint8_t { None, CounterClockwise, Clockwise };  // @, @@
enum class BondOrder : std::uint8_t { Single = 1, Double = 2, Triple = 3, Aromatic = 4 };
enum class BondStereo : std::uint8_t { None, Up, Down };                      // '/', '\'

inline BondStereo flip(BondStereo s) {
  if (s == BondStereo::Up) return BondStereo::Down;
  if (s == BondStereo::Down) return BondStereo::Up;
  return s;
}

/// Bond order as used for valence rules; aromatic bonds count as 1.
inline int valence_contribution(BondOrder o) {
  switch (o) {
    case BondOrder::Single: return 1;
    case BondOrder::Double: return 2;
    case BondOrder::Triple: return 3;
    case BondOrder::Aromatic: return 1;
  }
  return 1;
}

struct Atom {
  int element = element::C;
  int formal_charge = 0;
  std::optional<int> isotope;
  /// Present exactly for bracket atoms; implicit hydrogens otherwise.
  std::optional<int> explicit_h;
  bool aromatic = false;
  Chirality chirality = Chirality::None;
  int index = 0;

  bool bracket() const { return explicit_h.has_value(); }
};

/// Stereo marks are relative to the direction begin -> end.
struct Bond {
  int begin = 0;
  int end = 0;
  BondOrder order = BondOrder::Single;
  BondStereo stereo = BondStereo::None;

  int other(int a) const { return a == begin ? end : begin; }
};

struct Neighbor {
  int atom;
  int bond;
};

class MolGraph {
 public:
  int add_atom(Atom a) {
    a.index = static_cast<int>(atoms_.size());
    if (a.element <= 0 || a.element >= static_cast<int>(kElementSymbols.size()))
      throw Error(ErrorCode::InvalidArgument, "unsupported element " + std::to_string(a.element));
    if (a.explicit_h && *a.explicit_h < 0)
      throw Error(ErrorCode::InvalidArgument, "negative hydrogen count");
    atoms_.push_back(a);
    adj_.emplace_back();
    return a.index;
  }

  int add_bond(int a, int b, BondOrder order, BondStereo stereo = BondStereo::None) {
    check_index(a);
    check_index(b);
    if (a == b) throw Error(ErrorCode::InvalidArgument, "bond endpoints must differ");
    if (bond_between(a, b)) throw Error(ErrorCode::InvalidArgument, "duplicate bond");
    const int id = static_cast<int>(bonds_.size());
    bonds_.push_back(Bond{a, b, order, stereo});
    adj_[static_cast<std::size_t>(a)].push_back({b, id});
    adj_[static_cast<std::size_t>(b)].push_back({a, id});
    return id;
  }

  std::size_t atom_count() const { return atoms_.size(); }
  std::size_t bond_count() const { return bonds_.size(); }

  std::size_t heavy_atom_count() const {
    return static_cast<std::size_t>(std::count_if(atoms_.begin(), atoms_.end(),
                                                  [](const Atom& a) { return a.element != element::H; }));
  }

  const std::vector<Atom>& atoms() const { return atoms_; }
  const std::vector<Bond>& bonds() const { return bonds_; }
  const Atom& atom(int i) const { check_index(i); return atoms_[static_cast<std::size_t>(i)]; }
  Atom& atom(int i) { check_index(i); return atoms_[static_cast<std::size_t>(i)]; }
  const Bond& bond(int i) const { return bonds_.at(static_cast<std::size_t>(i)); }
  Bond& bond(int i) { return bonds_.at(static_cast<std::size_t>(i)); }

  std::span<const Neighbor> neighbors(int i) const {
    check_index(i);
    return adj_[static_cast<std::size_t>(i)];
  }

  std::optional<int> bond_between(int a, int b) const {
    for (const auto& n : neighbors(a))
      if (n.atom == b) return n.bond;
    return std::nullopt;
  }

  int degree(int i) const { return static_cast<int>(neighbors(i).size()); }

  /// Connected components, each sorted ascending, ordered by smallest member.
  std::vector<std::vector<int>> components() const {
    const int n = static_cast<int>(atoms_.size());
    std::vector<int> comp(static_cast<std::size_t>(n), -1);
    std::vector<std::vector<int>> out;
    for (int s = 0; s < n; ++s) {
      if (comp[static_cast<std::size_t>(s)] >= 0) continue;
      const int id = static_cast<int>(out.size());
      out.emplace_back();
      std::vector<int> stack{s};
      comp[static_cast<std::size_t>(s)] = id;
      while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        out.back().push_back(u);
        for (const auto& nb : adj_[static_cast<std::size_t>(u)]) {
          if (comp[static_cast<std::size_t>(nb.atom)] < 0) {
            comp[static_cast<std::size_t>(nb.atom)] = id;
            stack.push_back(nb.atom);
          }
        }
      }
      std::sort(out.back().begin(), out.back().end());
    }
    return out;
  }

  /// Induced subgraph on `keep`; atom keep[i] becomes atom i.
  MolGraph subgraph(std::span<const int> keep) const {
    MolGraph g;
    std::vector<int> map(atoms_.size(), -1);
    for (int a : keep) {
      map[static_cast<std::size_t>(a)] = g.add_atom(atom(a));
    }
    for (const auto& b : bonds_) {
      const int x = map[static_cast<std::size_t>(b.begin)];
      const int y = map[static_cast<std::size_t>(b.end)];
      if (x >= 0 && y >= 0) g.add_bond(x, y, b.order, b.stereo);
    }
    return g;
  }

  /// Same molecule with atom i moved to index perm[i].
  MolGraph relabeled(std::span<const int> perm) const {
    if (perm.size() != atoms_.size()) throw Error(ErrorCode::LengthMismatch, "permutation size");
    std::vector<int> inverse(atoms_.size(), -1);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      const int p = perm[i];
      if (p < 0 || static_cast<std::size_t>(p) >= perm.size() || inverse[static_cast<std::size_t>(p)] >= 0)
        throw Error(ErrorCode::InvalidArgument, "not a permutation");
      inverse[static_cast<std::size_t>(p)] = static_cast<int>(i);
    }
    MolGraph g;
    for (int old : inverse) g.add_atom(atom(old));
    for (const auto& b : bonds_)
      g.add_bond(perm[static_cast<std::size_t>(b.begin)], perm[static_cast<std::size_t>(b.end)], b.order,
                 b.stereo);
    return g;
  }

 private:
  void check_index(int i) const {
    if (i < 0 || static_cast<std::size_t>(i) >= atoms_.size())
      throw Error(ErrorCode::IndexOutOfRange, "atom index " + std::to_string(i));
  }

  std::vector<Atom> atoms_;
  std::vector<Bond> bonds_;
  std::vector<std::vector<Neighbor>> adj_;
};

// ---------------------------------------------------------------------------
// Valence.

/// Sum of bond orders at an atom (aromatic = 1).
inline int bond_order_sum(const MolGraph& g, int i) {
  int s = 0;
  for (const auto& nb : g.neighbors(i)) s += valence_contribution(g.bond(nb.bond).order);
  return s;
}

/// Bond-order sum plus explicit hydrogens. Aromatic bonds count 1 so that
/// valence rules can match without Kekulization; implicit hydrogens of
/// organic-subset atoms are not included (see implicit_hydrogens).
inline int total_valence(const MolGraph& g, int i) {
  return bond_order_sum(g, i) + g.atom(i).explicit_h.value_or(0);
}

/// Implicit hydrogens of a non-bracket atom: the lowest allowed valence that
/// is >= the bond sum, minus the bond sum. Aromatic atoms reserve one unit
/// for the pi system. Bracket atoms always return 0.
/// Implicit hydrogens of a non-bracket atom: the lowest allowed valence that
/// is >= the bond sum, minus the bond sum. Aromatic atoms reserve one unit
/// for the pi system. Bracket atoms always return 0 from implicit_hydrogens.
inline int default_hydrogens(const MolGraph& g, int i,
                             const ValenceTable& table = ValenceTable::standard()) {
  const Atom& a = g.atom(i);
  const int used = bond_order_sum(g, i) + (a.aromatic ? 1 : 0);
  // Written halogens only ever imply hydrogens at valence 1, so "O=Cl(=O)=O"
  // stays hexavalent instead of gaining a hydrogen.
  static constexpr int kHalogenNormal[] = {1};
  const bool halogen = a.element == element::F || a.element == element::Cl || a.element == element::Br ||
                       a.element == element::I;
  const std::span<const int> normal = halogen ? std::span<const int>(kHalogenNormal) : table.allowed(a.element);
  for (int v : normal)
    if (v >= used) return v - used;
  return 0;
}

inline int implicit_hydrogens(const MolGraph& g, int i,
                              const ValenceTable& table = ValenceTable::standard()) {
  return g.atom(i).bracket() ? 0 : default_hydrogens(g, i, table);
}

inline int hydrogen_count(const MolGraph& g, int i,
                          const ValenceTable& table = ValenceTable::standard()) {
  const Atom& a = g.atom(i);
  return a.explicit_h ? *a.explicit_h : implicit_hydrogens(g, i, table);
}

inline int net_charge(const MolGraph& g) {
  int q = 0;
  for (const auto& a : g.atoms()) q += a.formal_charge;
  return q;
}

/// Turns an organic-subset atom into a bracket atom carrying its current
/// hydrogen count, so later edits to bonds or charge do not alter it.
inline void freeze_hydrogens(MolGraph& g, int i) {
  if (!g.atom(i).explicit_h) {
    const int h = implicit_hydrogens(g, i);
    g.atom(i).explicit_h = h;
  }
}

// ---------------------------------------------------------------------------
// Parsing.

enum class SmilesErrorKind {
  Empty,
  UnbalancedParenthesis,
  UnpairedRingClosure,
  UnknownElement,
  MalformedBracketAtom,
  UnsupportedConstruct,
  InvalidBond,
};

inline const char* smiles_error_name(SmilesErrorKind k) {
  switch (k) {
    case SmilesErrorKind::Empty: return "Empty";
    case SmilesErrorKind::UnbalancedParenthesis: return "UnbalancedParenthesis";
    case SmilesErrorKind::UnpairedRingClosure: return "UnpairedRingClosure";
    case SmilesErrorKind::UnknownElement: return "UnknownElement";
    case SmilesErrorKind::MalformedBracketAtom: return "MalformedBracketAtom";
    case SmilesErrorKind::UnsupportedConstruct: return "UnsupportedConstruct";
    case SmilesErrorKind::InvalidBond: return "InvalidBond";
  }
  return "Unknown";
}

class SmilesError : public Error {
 public:
  SmilesError(SmilesErrorKind kind, std::size_t offset, const std::string& detail)
      : Error(kind == SmilesErrorKind::Empty ? ErrorCode::EmptyInput : ErrorCode::InvalidArgument,
              std::string(smiles_error_name(kind)) + " at offset " + std::to_string(offset) + ": " + detail),
        kind_(kind),
        offset_(offset) {}

  SmilesErrorKind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  SmilesErrorKind kind_;
  std::size_t offset_;
};

namespace detail {

class SmilesParser {
 public:
  explicit SmilesParser(std::string_view text) : s_(text) {}

  MolGraph parse() {
    if (s_.empty()) fail(SmilesErrorKind::Empty, 0, "empty SMILES");
    for (unsigned char c : s_)
      if (c >= 0x80) fail(SmilesErrorKind::UnknownElement, 0, "non-ASCII input");
    while (pos_ < s_.size()) step();
    if (!branches_.empty())
      fail(SmilesErrorKind::UnbalancedParenthesis, branches_.back().second, "unclosed branch");
    if (!rings_.empty()) {
      const auto& open = rings_.begin()->second;
      fail(SmilesErrorKind::UnpairedRingClosure, open.offset,
           "ring bond " + std::to_string(rings_.begin()->first) + " never closed");
    }
    if (pending_) fail(SmilesErrorKind::InvalidBond, pending_offset_, "dangling bond symbol");
    if (g_.atom_count() == 0) fail(SmilesErrorKind::Empty, 0, "no atoms");
    return std::move(g_);
  }

 private:
  struct RingOpen {
    int atom;
    char bond;
    std::size_t offset;
  };

  [[noreturn]] static void fail(SmilesErrorKind k, std::size_t off, const std::string& msg) {
    throw SmilesError(k, off, msg);
  }

  void step() {
    const char c = s_[pos_];
    switch (c) {
      case '(':
        if (prev_ < 0) fail(SmilesErrorKind::UnbalancedParenthesis, pos_, "branch without preceding atom");
        if (pending_) fail(SmilesErrorKind::InvalidBond, pending_offset_, "bond symbol before branch");
        branches_.emplace_back(prev_, pos_);
        ++pos_;
        return;
      case ')':
        if (branches_.empty()) fail(SmilesErrorKind::UnbalancedParenthesis, pos_, "unmatched ')'");
        if (pending_) fail(SmilesErrorKind::InvalidBond, pending_offset_, "dangling bond symbol");
        prev_ = branches_.back().first;
        branches_.pop_back();
        ++pos_;
        return;
      case '-': case '=': case '#': case ':': case '/': case '\\':
        if (pending_) fail(SmilesErrorKind::InvalidBond, pos_, "two consecutive bond symbols");
        pending_ = c;
        pending_offset_ = pos_;
        ++pos_;
        return;
      case '$':
        fail(SmilesErrorKind::UnsupportedConstruct, pos_, "quadruple bonds are not supported");
      case '.':
        if (pending_) fail(SmilesErrorKind::InvalidBond, pending_offset_, "bond symbol before '.'");
        if (!branches_.empty()) fail(SmilesErrorKind::UnsupportedConstruct, pos_, "'.' inside a branch");
        prev_ = -1;
        ++pos_;
        return;
      case '%':
        ring_closure();
        return;
      case '[':
        bracket_atom();
        return;
      case '*':
        fail(SmilesErrorKind::UnsupportedConstruct, pos_, "wildcard atoms are not supported");
      case '>':
        fail(SmilesErrorKind::UnsupportedConstruct, pos_, "reaction SMILES are not supported");
      default:
        break;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      ring_closure();
      return;
    }
    organic_atom();
  }

  void organic_atom() {
    const std::size_t start = pos_;
    Atom a;
    const char c = s_[pos_];
    const char n = pos_ + 1 < s_.size() ? s_[pos_ + 1] : '\0';
    if (c == 'C' && n == 'l') {
      a.element = element::Cl;
      pos_ += 2;
    } else if (c == 'B' && n == 'r') {
      a.element = element::Br;
      pos_ += 2;
    } else {
      switch (c) {
        case 'B': a.element = element::B; break;
        case 'C': a.element = element::C; break;
        case 'N': a.element = element::N; break;
        case 'O': a.element = element::O; break;
        case 'P': a.element = element::P; break;
        case 'S': a.element = element::S; break;
        case 'F': a.element = element::F; break;
        case 'I': a.element = element::I; break;
        case 'b': a.element = element::B; a.aromatic = true; break;
        case 'c': a.element = element::C; a.aromatic = true; break;
        case 'n': a.element = element::N; a.aromatic = true; break;
        case 'o': a.element = element::O; a.aromatic = true; break;
        case 'p': a.element = element::P; a.aromatic = true; break;
        case 's': a.element = element::S; a.aromatic = true; break;
        default:
          fail(SmilesErrorKind::UnknownElement, start, std::string("unexpected character '") + c + "'");
      }
      ++pos_;
    }
    attach(g_.add_atom(a), start);
  }

  void bracket_atom() {
    const std::size_t start = pos_;
    ++pos_;  // '['
    Atom a;
    a.explicit_h = 0;
    auto peek = [&]() -> char { return pos_ < s_.size() ? s_[pos_] : '\0'; };
    auto read_int = [&]() -> std::optional<int> {
      if (!std::isdigit(static_cast<unsigned char>(peek()))) return std::nullopt;
      long v = 0;
      while (std::isdigit(static_cast<unsigned char>(peek()))) {
        v = v * 10 + (peek() - '0');
        if (v > 100000) fail(SmilesErrorKind::MalformedBracketAtom, start, "number too large");
        ++pos_;
      }
      return static_cast<int>(v);
    };

    if (auto iso = read_int()) {
      if (*iso <= 0) fail(SmilesErrorKind::MalformedBracketAtom, start, "isotope must be positive");
      a.isotope = *iso;
    }
    // element symbol
    const char c = peek();
    if (c == '*') fail(SmilesErrorKind::UnsupportedConstruct, pos_, "wildcard atoms are not supported");
    if (std::islower(static_cast<unsigned char>(c))) {
      const std::string_view rest = s_.substr(pos_);
      if (rest.starts_with("se")) {
        a.element = element::Se;
        pos_ += 2;
      } else if (rest.starts_with("as")) {
        a.element = element::As;
        pos_ += 2;
      } else {
        const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        const int z = element_from_symbol(std::string_view(&up, 1));
        if (z == 0 || !may_be_aromatic(z))
          fail(SmilesErrorKind::UnknownElement, pos_, std::string("unknown aromatic symbol '") + c + "'");
        a.element = z;
        ++pos_;
      }
      a.aromatic = true;
    } else if (std::isupper(static_cast<unsigned char>(c))) {
      int z = 0;
      if (pos_ + 1 < s_.size() && std::islower(static_cast<unsigned char>(s_[pos_ + 1]))) {
        z = element_from_symbol(s_.substr(pos_, 2));
        if (z != 0) pos_ += 2;
      }
      if (z == 0) {
        z = element_from_symbol(s_.substr(pos_, 1));
        if (z == 0) fail(SmilesErrorKind::UnknownElement, pos_, "unknown element symbol");
        ++pos_;
      }
      a.element = z;
    } else {
      fail(SmilesErrorKind::MalformedBracketAtom, start, "missing element symbol");
    }
    // chirality
    if (peek() == '@') {
      ++pos_;
      if (peek() == '@') {
        ++pos_;
        a.chirality = Chirality::Clockwise;
      } else {
        a.chirality = Chirality::CounterClockwise;
      }
      if (std::isupper(static_cast<unsigned char>(peek())) && peek() != 'H')
        fail(SmilesErrorKind::MalformedBracketAtom, pos_, "extended chirality classes are not supported");
    }
    // hydrogens
    if (peek() == 'H') {
      ++pos_;
      a.explicit_h = read_int().value_or(1);
    }
    // charge
    if (peek() == '+' || peek() == '-') {
      const char sign = peek();
      ++pos_;
      int mag = 1;
      if (auto m = read_int()) {
        mag = *m;
      } else {
        while (peek() == sign) {
          ++mag;
          ++pos_;
        }
      }
      if (mag > 15) fail(SmilesErrorKind::MalformedBracketAtom, start, "charge magnitude too large");
      a.formal_charge = sign == '+' ? mag : -mag;
    }
    // atom class, discarded
    if (peek() == ':') {
      ++pos_;
      if (!read_int()) fail(SmilesErrorKind::MalformedBracketAtom, pos_, "atom class without digits");
    }
    if (peek() != ']') fail(SmilesErrorKind::MalformedBracketAtom, start, "expected ']'");
    ++pos_;
    attach(g_.add_atom(a), start);
  }

  void attach(int atom, std::size_t offset) {
    if (prev_ >= 0) {
      add_bond_checked(prev_, atom, pending_, '\0', pending_ ? pending_offset_ : offset);
    } else if (pending_) {
      fail(SmilesErrorKind::InvalidBond, pending_offset_, "bond symbol without preceding atom");
    }
    pending_ = '\0';
    prev_ = atom;
  }

  /// `sym_a` is written at `a` looking toward `b`, `sym_b` at `b` toward `a`.
  void add_bond_checked(int a, int b, char sym_a, char sym_b, std::size_t offset) {
    if (a == b) fail(SmilesErrorKind::InvalidBond, offset, "ring closure onto the same atom");
    if (g_.bond_between(a, b)) fail(SmilesErrorKind::InvalidBond, offset, "duplicate bond between atoms");
    auto order_of = [&](char sym) -> std::optional<BondOrder> {
      switch (sym) {
        case '-': case '/': case '\\': return BondOrder::Single;
        case '=': return BondOrder::Double;
        case '#': return BondOrder::Triple;
        case ':': return BondOrder::Aromatic;
        default: return std::nullopt;
      }
    };
    auto oa = order_of(sym_a);
    auto ob = order_of(sym_b);
    if (oa && ob && *oa != *ob) fail(SmilesErrorKind::InvalidBond, offset, "conflicting ring bond symbols");
    BondOrder order;
    if (oa) {
      order = *oa;
    } else if (ob) {
      order = *ob;
    } else {
      order = (g_.atom(a).aromatic && g_.atom(b).aromatic) ? BondOrder::Aromatic : BondOrder::Single;
    }
    BondStereo st = BondStereo::None;
    if (sym_a == '/') st = BondStereo::Up;
    if (sym_a == '\\') st = BondStereo::Down;
    if (st == BondStereo::None) {
      if (sym_b == '/') st = BondStereo::Down;
      if (sym_b == '\\') st = BondStereo::Up;
    }
    g_.add_bond(a, b, order, st);
  }

  void ring_closure() {
    const std::size_t start = pos_;
    int num = 0;
    if (s_[pos_] == '%') {
      if (pos_ + 2 >= s_.size() || !std::isdigit(static_cast<unsigned char>(s_[pos_ + 1])) ||
          !std::isdigit(static_cast<unsigned char>(s_[pos_ + 2])))
        fail(SmilesErrorKind::UnpairedRingClosure, start, "'%' must be followed by two digits");
      num = (s_[pos_ + 1] - '0') * 10 + (s_[pos_ + 2] - '0');
      pos_ += 3;
    } else {
      num = s_[pos_] - '0';
      ++pos_;
    }
    if (prev_ < 0) fail(SmilesErrorKind::UnpairedRingClosure, start, "ring bond without preceding atom");
    auto it = rings_.find(num);
    if (it == rings_.end()) {
      rings_.emplace(num, RingOpen{prev_, pending_, start});
    } else {
      const RingOpen open = it->second;
      rings_.erase(it);
      add_bond_checked(open.atom, prev_, open.bond, pending_, start);
    }
    pending_ = '\0';
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  MolGraph g_;
  int prev_ = -1;
  char pending_ = '\0';
  std::size_t pending_offset_ = 0;
  std::vector<std::pair<int, std::size_t>> branches_;
  std::map<int, RingOpen> rings_;
};

}  // namespace detail

inline MolGraph parse_smiles(std::string_view text) { return detail::SmilesParser(text).parse(); }

// ---------------------------------------------------------------------------
// Canonical writer.
//
// Atoms are ranked by iterative refinement of (element, aromatic, charge,
// isotope, H count, degree, chirality) with neighbour multisets. Remaining
// ties are resolved by individualization: every member of the first tied
// cell is tried and the lexicographically smallest serialization wins. The
// search is capped at `kLeafBudget` leaves per component; past the cap only
// the first member of each cell is explored.

namespace detail {

inline constexpr std::size_t kLeafBudget = 512;

inline int bond_code(const MolGraph& g, int from, const Neighbor& nb) {
  const Bond& b = g.bond(nb.bond);
  BondStereo st = b.begin == from ? b.stereo : flip(b.stereo);
  return static_cast<int>(b.order) * 3 + static_cast<int>(st);
}

inline std::string ring_label(int d) {
  if (d < 10) return std::string(1, static_cast<char>('0' + d));
  return "%" + std::to_string(d);
}

inline std::string atom_text(const MolGraph& g, int i) {
  const Atom& a = g.atom(i);
  const int h = hydrogen_count(g, i);
  bool shorthand = is_organic_subset(a.element) && a.formal_charge == 0 && !a.isotope &&
                   a.chirality == Chirality::None && (!a.aromatic || may_be_aromatic(a.element)) &&
                   !(a.aromatic && (a.element == element::F || a.element == element::Cl ||
                                    a.element == element::Br || a.element == element::I));
  if (shorthand) shorthand = default_hydrogens(g, i) == h;
  std::string sym(element_symbol(a.element));
  if (a.aromatic) {
    for (auto& ch : sym) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  if (shorthand) return sym;
  std::string out = "[";
  if (a.isotope) out += std::to_string(*a.isotope);
  out += sym;
  if (a.chirality == Chirality::CounterClockwise) out += "@";
  if (a.chirality == Chirality::Clockwise) out += "@@";
  if (h > 0) {
    out += "H";
    if (h > 1) out += std::to_string(h);
  }
  if (a.formal_charge != 0) {
    out += a.formal_charge > 0 ? "+" : "-";
    const int mag = std::abs(a.formal_charge);
    if (mag > 1) out += std::to_string(mag);
  }
  out += "]";
  return out;
}

inline std::string bond_text(const MolGraph& g, int bond, int from) {
  const Bond& b = g.bond(bond);
  const bool both_aromatic = g.atom(b.begin).aromatic && g.atom(b.end).aromatic;
  switch (b.order) {
    case BondOrder::Single: {
      const BondStereo st = b.begin == from ? b.stereo : flip(b.stereo);
      if (st == BondStereo::Up) return "/";
      if (st == BondStereo::Down) return "\\";
      return both_aromatic ? "-" : "";
    }
    case BondOrder::Double: return "=";
    case BondOrder::Triple: return "#";
    case BondOrder::Aromatic: return both_aromatic ? "" : ":";
  }
  return "";
}

/// Serializes a connected graph given a total order of its atoms.
inline std::string serialize_connected(const MolGraph& g, const std::vector<int>& label) {
  const int n = static_cast<int>(g.atom_count());
  std::vector<int> by_label(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) by_label[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])] = i;

  std::vector<std::vector<Neighbor>> sorted_nb(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto nbs = g.neighbors(i);
    sorted_nb[static_cast<std::size_t>(i)].assign(nbs.begin(), nbs.end());
    std::sort(sorted_nb[static_cast<std::size_t>(i)].begin(), sorted_nb[static_cast<std::size_t>(i)].end(),
              [&](const Neighbor& x, const Neighbor& y) {
                return label[static_cast<std::size_t>(x.atom)] < label[static_cast<std::size_t>(y.atom)];
              });
  }

  std::vector<char> visited(static_cast<std::size_t>(n), 0);
  std::vector<char> bond_used(g.bond_count(), 0);
  std::vector<std::vector<Neighbor>> children(static_cast<std::size_t>(n));
  std::vector<std::vector<int>> ring_opens(static_cast<std::size_t>(n));   // bond ids
  std::vector<std::vector<int>> ring_closes(static_cast<std::size_t>(n));  // bond ids

  // Pass 1: spanning tree and ring bonds (iterative DFS).
  struct Frame {
    int atom;
    int parent_bond;
    std::size_t next;
  };
  const int root = by_label[0];
  std::vector<Frame> stack{{root, -1, 0}};
  visited[static_cast<std::size_t>(root)] = 1;
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& nbs = sorted_nb[static_cast<std::size_t>(f.atom)];
    if (f.next == nbs.size()) {
      stack.pop_back();
      continue;
    }
    const Neighbor nb = nbs[f.next++];
    if (nb.bond == f.parent_bond || bond_used[static_cast<std::size_t>(nb.bond)]) continue;
    bond_used[static_cast<std::size_t>(nb.bond)] = 1;
    if (visited[static_cast<std::size_t>(nb.atom)]) {
      ring_opens[static_cast<std::size_t>(nb.atom)].push_back(nb.bond);
      ring_closes[static_cast<std::size_t>(f.atom)].push_back(nb.bond);
    } else {
      children[static_cast<std::size_t>(f.atom)].push_back(nb);
      visited[static_cast<std::size_t>(nb.atom)] = 1;
      const int a = nb.atom;
      stack.push_back({a, nb.bond, 0});
    }
  }

  // Pass 2: emit text.
  std::string out;
  std::vector<int> digit_of_bond(g.bond_count(), -1);
  std::vector<char> digit_busy(100, 0);
  auto alloc_digit = [&]() {
    for (int d = 1; d < 100; ++d)
      if (!digit_busy[static_cast<std::size_t>(d)]) {
        digit_busy[static_cast<std::size_t>(d)] = 1;
        return d;
      }
    throw Error(ErrorCode::Overflow, "more than 99 simultaneously open rings");
  };

  struct EmitFrame {
    int atom;
    std::size_t next_child;
  };
  auto emit_atom = [&](int u) {
    out += atom_text(g, u);
    auto& closes = ring_closes[static_cast<std::size_t>(u)];
    std::sort(closes.begin(), closes.end(), [&](int x, int y) {
      return label[static_cast<std::size_t>(g.bond(x).other(u))] < label[static_cast<std::size_t>(g.bond(y).other(u))];
    });
    for (int b : closes) {
      const int d = digit_of_bond[static_cast<std::size_t>(b)];
      out += ring_label(d);
      digit_busy[static_cast<std::size_t>(d)] = 0;
    }
    auto& opens = ring_opens[static_cast<std::size_t>(u)];
    std::sort(opens.begin(), opens.end(), [&](int x, int y) {
      return label[static_cast<std::size_t>(g.bond(x).other(u))] < label[static_cast<std::size_t>(g.bond(y).other(u))];
    });
    for (int b : opens) {
      const int d = alloc_digit();
      digit_of_bond[static_cast<std::size_t>(b)] = d;
      out += bond_text(g, b, u);
      out += ring_label(d);
    }
  };

  std::vector<EmitFrame> es;
  emit_atom(root);
  es.push_back({root, 0});
  while (!es.empty()) {
    EmitFrame& f = es.back();
    const auto& ch = children[static_cast<std::size_t>(f.atom)];
    if (f.next_child == ch.size()) {
      const int done = f.atom;
      es.pop_back();
      if (!es.empty()) {
        // Close the branch unless `done` was the last child of its parent.
        const EmitFrame& p = es.back();
        if (p.next_child < children[static_cast<std::size_t>(p.atom)].size()) out += ")";
      }
      (void)done;
      continue;
    }
    const std::size_t k = f.next_child++;
    const Neighbor c = ch[k];
    const bool last = k + 1 == ch.size();
    if (!last) out += "(";
    out += bond_text(g, c.bond, f.atom);
    emit_atom(c.atom);
    es.push_back({c.atom, 0});
  }
  return out;
}

class ComponentCanonicalizer {
 public:
  explicit ComponentCanonicalizer(const MolGraph& g) : g_(g), n_(static_cast<int>(g.atom_count())) {}

  std::pair<std::string, std::vector<int>> run() {
    std::vector<std::vector<long long>> inv(static_cast<std::size_t>(n_));
    for (int i = 0; i < n_; ++i) {
      const Atom& a = g_.atom(i);
      inv[static_cast<std::size_t>(i)] = {a.element,
                                          a.aromatic ? 1 : 0,
                                          a.formal_charge,
                                          a.isotope.value_or(0),
                                          hydrogen_count(g_, i),
                                          g_.degree(i),
                                          static_cast<long long>(a.chirality)};
    }
    std::vector<int> colors = rank_keys(inv);
    search(std::move(colors));
    return {best_, best_labels_};
  }

 private:
  static std::vector<int> rank_keys(const std::vector<std::vector<long long>>& keys) {
    const std::size_t n = keys.size();
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) {
      return keys[static_cast<std::size_t>(x)] < keys[static_cast<std::size_t>(y)];
    });
    std::vector<int> color(n);
    for (std::size_t k = 0; k < n; ++k) {
      const int i = order[k];
      if (k > 0 && keys[static_cast<std::size_t>(order[k - 1])] == keys[static_cast<std::size_t>(i)]) {
        color[static_cast<std::size_t>(i)] = color[static_cast<std::size_t>(order[k - 1])];
      } else {
        color[static_cast<std::size_t>(i)] = static_cast<int>(k);
      }
    }
    return color;
  }

  static int distinct(const std::vector<int>& c) {
    std::vector<int> s = c;
    std::sort(s.begin(), s.end());
    return static_cast<int>(std::unique(s.begin(), s.end()) - s.begin());
  }

  void refine(std::vector<int>& colors) const {
    int classes = distinct(colors);
    while (classes < n_) {
      std::vector<std::vector<long long>> keys(static_cast<std::size_t>(n_));
      for (int i = 0; i < n_; ++i) {
        auto& k = keys[static_cast<std::size_t>(i)];
        k.push_back(colors[static_cast<std::size_t>(i)]);
        std::vector<long long> nb;
        for (const auto& x : g_.neighbors(i))
          nb.push_back(static_cast<long long>(bond_code(g_, i, x)) * (n_ + 1) + colors[static_cast<std::size_t>(x.atom)]);
        std::sort(nb.begin(), nb.end());
        k.insert(k.end(), nb.begin(), nb.end());
      }
      std::vector<int> next = rank_keys(keys);
      const int c = distinct(next);
      colors = std::move(next);
      if (c == classes) break;
      classes = c;
    }
  }

  void search(std::vector<int> colors) {
    refine(colors);
    // First non-singleton cell, by color.
    std::vector<int> counts(static_cast<std::size_t>(n_), 0);
    for (int c : colors) ++counts[static_cast<std::size_t>(c)];
    int target = -1;
    for (int c = 0; c < n_; ++c)
      if (counts[static_cast<std::size_t>(c)] > 1) {
        target = c;
        break;
      }
    if (target < 0) {
      ++leaves_;
      std::string s = serialize_connected(g_, colors);
      if (best_labels_.empty() || s < best_) {
        best_ = std::move(s);
        best_labels_ = colors;
      }
      return;
    }
    std::vector<int> members;
    for (int i = 0; i < n_; ++i)
      if (colors[static_cast<std::size_t>(i)] == target) members.push_back(i);
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (k > 0 && leaves_ >= kLeafBudget) break;
      std::vector<int> child = colors;
      for (int u : members)
        if (u != members[k]) child[static_cast<std::size_t>(u)] = target + 1;
      search(std::move(child));
    }
  }

  const MolGraph& g_;
  int n_;
  std::size_t leaves_ = 0;
  std::string best_;
  std::vector<int> best_labels_;
};

}  // namespace detail

struct CanonicalForm {
  std::string smiles;
  /// Canonical label of every atom of the input graph (a permutation).
  std::vector<int> rank;
};

inline CanonicalForm canonicalize(const MolGraph& g) {
  if (g.atom_count() == 0) return {};
  struct Part {
    std::string text;
    std::vector<int> atoms;   // original indices
    std::vector<int> labels;  // labels within the component
  };
  std::vector<Part> parts;
  for (const auto& comp : g.components()) {
    MolGraph sub = g.subgraph(comp);
    auto [text, labels] = detail::ComponentCanonicalizer(sub).run();
    parts.push_back({std::move(text), comp, std::move(labels)});
  }
  std::stable_sort(parts.begin(), parts.end(), [](const Part& a, const Part& b) { return a.text < b.text; });
  CanonicalForm out;
  out.rank.assign(g.atom_count(), 0);
  int offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (p > 0) out.smiles += ".";
    out.smiles += parts[p].text;
    for (std::size_t k = 0; k < parts[p].atoms.size(); ++k)
      out.rank[static_cast<std::size_t>(parts[p].atoms[k])] = offset + parts[p].labels[k];
    offset += static_cast<int>(parts[p].atoms.size());
  }
  return out;
}

inline std::string write_canonical(const MolGraph& g) { return canonicalize(g).smiles; }

inline std::vector<int> canonical_ranks(const MolGraph& g) { return canonicalize(g).rank; }

inline bool graphs_equal(const MolGraph& a, const MolGraph& b) {
  if (a.atom_count() != b.atom_count() || a.bond_count() != b.bond_count()) return false;
  return write_canonical(a) == write_canonical(b);
}

/// Canonical SMILES of a SMILES string.
inline std::string canonical_smiles(std::string_view text) { return write_canonical(parse_smiles(text)); }

}  // namespace clmw::chem
