//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// BPE and WordPiece tokenizers trained on raw SMILES characters. Each corpus
// line is one word; there is no pre-tokenization.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "clmw/common.hpp"

namespace clmw::tok {

enum class Algorithm { WordPiece, BPE };

inline const char* algorithm_name(Algorithm a) { return a == Algorithm::BPE ? "bpe" : "wordpiece"; }

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "bpe" || s == "BPE") return Algorithm::BPE;
  if (s == "wordpiece" || s == "WordPiece") return Algorithm::WordPiece;
  throw Error(ErrorCode::InvalidArgument, "unknown tokenizer algorithm '" + std::string(s) + "'");
}

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kSep = 3;
inline constexpr int kMask = 4;
inline constexpr int kNumSpecials = 5;
inline const std::array<std::string, kNumSpecials> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
inline constexpr std::string_view kContinuation = "##";
inline constexpr std::string_view kReplacementChar = "\xEF\xBF\xBD";

inline constexpr std::size_t kDefaultVocabSize = 30522;
inline constexpr std::size_t kDefaultMinFrequency = 2;
inline constexpr std::size_t kDefaultMaxLen = 512;

class Vocab {
 public:
  Vocab() {
    for (const auto& s : kSpecialTokens) add(s);
  }

  /// Returns the id of `token`, appending it if new.
  int add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  std::optional<int> id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw Error(ErrorCode::UnknownId, "token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  bool contains(std::string_view token) const { return id(token).has_value(); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct TrainerOptions {
  std::size_t vocab_size = kDefaultVocabSize;  // including the five specials
  std::size_t min_frequency = kDefaultMinFrequency;
  std::size_t max_len = kDefaultMaxLen;
};

struct Encoding {
  std::vector<int> ids;
  std::vector<std::string> tokens;
  bool truncated = false;
};

struct Decoded {
  std::string text;
  bool lossy = false;  // an UNK was replaced by U+FFFD
};

class SubwordModel {
 public:
  Algorithm algorithm = Algorithm::BPE;
  Vocab vocab;
  std::vector<std::pair<std::string, std::string>> merges;
  std::size_t vocab_cap = kDefaultVocabSize;
  std::size_t min_frequency = kDefaultMinFrequency;
  std::size_t max_len = kDefaultMaxLen;

  std::size_t size() const { return vocab.size(); }

  Encoding encode(std::string_view text) const {
    std::vector<int> pieces = algorithm == Algorithm::BPE ? encode_bpe(text) : encode_wordpiece(text);
    Encoding e;
    const std::size_t room = max_len >= 2 ? max_len - 2 : 0;
    if (pieces.size() > room) {
      pieces.resize(room);
      e.truncated = true;
    }
    e.ids.reserve(pieces.size() + 2);
    e.ids.push_back(kCls);
    e.ids.insert(e.ids.end(), pieces.begin(), pieces.end());
    e.ids.push_back(kSep);
    for (int id : e.ids) e.tokens.push_back(vocab.token(id));
    return e;
  }

  Decoded decode(std::span<const int> ids) const {
    Decoded d;
    for (int id : ids) {
      const std::string& t = vocab.token(id);  // throws UnknownId
      if (id == kUnk) {
        d.text += kReplacementChar;
        d.lossy = true;
        continue;
      }
      if (id < kNumSpecials) continue;
      if (algorithm == Algorithm::WordPiece && std::string_view(t).starts_with(kContinuation)) {
        d.text += t.substr(kContinuation.size());
      } else {
        d.text += t;
      }
    }
    return d;
  }

  /// Writes vocab.txt, merges.txt and manifest.json into `dir`.
  nlohmann::json save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::vector<std::string> merge_lines;
    for (const auto& [l, r] : merges) merge_lines.push_back(l + " " + r);
    write_lines((dir / "vocab.txt").string(), vocab.tokens());
    write_lines((dir / "merges.txt").string(), merge_lines);
    nlohmann::json j = {{"algorithm", algorithm_name(algorithm)},
                        {"vocab_cap", vocab_cap},
                        {"vocab_size", vocab.size()},
                        {"min_frequency", min_frequency},
                        {"max_len", max_len},
                        {"merges", merges.size()},
                        {"files", {{"vocab.txt", hash_lines(vocab.tokens())}, {"merges.txt", hash_lines(merge_lines)}}}};
    write_file((dir / "manifest.json").string(), j.dump(2) + "\n");
    return j;
  }

  static SubwordModel load(const std::filesystem::path& dir) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file((dir / "manifest.json").string()));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::CorruptManifest, (dir / "manifest.json").string() + ": " + e.what());
    }
    SubwordModel m;
    try {
      m.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
      m.vocab_cap = j.at("vocab_cap").get<std::size_t>();
      m.min_frequency = j.at("min_frequency").get<std::size_t>();
      m.max_len = j.at("max_len").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::CorruptManifest, e.what());
    }
    auto tokens = read_lines((dir / "vocab.txt").string());
    auto merge_lines = read_lines((dir / "merges.txt").string());
    if (hash_lines(tokens) != j["files"].value("vocab.txt", "") ||
        hash_lines(merge_lines) != j["files"].value("merges.txt", ""))
      throw Error(ErrorCode::CorruptManifest, "tokenizer files do not match manifest hashes");
    if (tokens.size() < kNumSpecials) throw Error(ErrorCode::CorruptManifest, "vocab.txt lacks special tokens");
    for (int i = 0; i < kNumSpecials; ++i)
      if (tokens[static_cast<std::size_t>(i)] != kSpecialTokens[static_cast<std::size_t>(i)])
        throw Error(ErrorCode::CorruptManifest, "special token order mismatch");
    for (const auto& t : tokens) m.vocab.add(t);
    if (m.vocab.size() != tokens.size()) throw Error(ErrorCode::CorruptManifest, "duplicate vocab entries");
    for (const auto& l : merge_lines) {
      const auto sp = l.find(' ');
      if (sp == std::string::npos) throw Error(ErrorCode::CorruptManifest, "bad merge line '" + l + "'");
      m.merges.emplace_back(l.substr(0, sp), l.substr(sp + 1));
    }
    m.index_merges();
    return m;
  }

  void index_merges() {
    merge_rank_.clear();
    for (std::size_t r = 0; r < merges.size(); ++r) merge_rank_.emplace(merges[r].first + " " + merges[r].second, r);
    max_token_len_ = 0;
    for (const auto& t : vocab.tokens()) max_token_len_ = std::max(max_token_len_, t.size());
  }

 private:
  std::vector<int> encode_bpe(std::string_view text) const {
    struct Sym {
      std::string s;
      bool unk;
    };
    std::vector<Sym> syms;
    for (char c : text) {
      std::string s(1, c);
      syms.push_back({s, !vocab.contains(s)});
    }
    while (syms.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        if (syms[i].unk || syms[i + 1].unk) continue;
        auto it = merge_rank_.find(syms[i].s + " " + syms[i + 1].s);
        if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == SIZE_MAX) break;
      const auto& [l, r] = merges[best_rank];
      std::vector<Sym> next;
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && !syms[i].unk && !syms[i + 1].unk && syms[i].s == l && syms[i + 1].s == r) {
          next.push_back({l + r, false});
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
    std::vector<int> ids;
    for (const auto& s : syms) ids.push_back(s.unk ? kUnk : vocab.id(s.s).value_or(kUnk));
    return ids;
  }

  std::vector<int> encode_wordpiece(std::string_view text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    std::string probe;
    while (i < text.size()) {
      std::optional<int> found;
      std::size_t found_len = 0;
      const std::size_t longest = std::min(text.size() - i, max_token_len_);
      for (std::size_t len = longest; len >= 1; --len) {
        probe.assign(i == 0 ? "" : std::string(kContinuation));
        probe.append(text.substr(i, len));
        if (auto id = vocab.id(probe)) {
          found = id;
          found_len = len;
          break;
        }
      }
      if (found) {
        ids.push_back(*found);
        i += found_len;
      } else {
        ids.push_back(kUnk);
        ++i;
      }
    }
    return ids;
  }

  std::unordered_map<std::string, std::size_t> merge_rank_;
  std::size_t max_token_len_ = 0;
};

namespace detail {

/// Shared merge loop. Symbols are interned; pair counts are maintained
/// incrementally and only words containing the merged pair are rewritten.
class MergeTrainer {
 public:
  MergeTrainer(const std::vector<std::string>& corpus, Algorithm algo, const TrainerOptions& opt)
      : algo_(algo), opt_(opt) {
    if (opt.min_frequency < 1) throw Error(ErrorCode::InvalidArgument, "min_frequency must be >= 1");
    std::map<std::string, std::uint64_t> counts;
    for (const auto& raw : corpus) {
      std::string w = trim(raw);
      if (!w.empty()) ++counts[w];
    }
    if (counts.empty()) throw Error(ErrorCode::EmptyCorpus, "tokenizer corpus has no non-empty lines");

    std::set<std::string> alphabet;
    for (const auto& [w, c] : counts) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        alphabet.insert(unit(w.substr(i, 1), i > 0));
        if (algo_ == Algorithm::WordPiece) {
          alphabet.insert(w.substr(i, 1));
          alphabet.insert(std::string(kContinuation) + w.substr(i, 1));
        }
      }
    }
    for (const auto& a : alphabet) model_.vocab.add(a);
    if (opt.vocab_size < model_.vocab.size())
      throw Error(ErrorCode::InvalidArgument, "vocab_size " + std::to_string(opt.vocab_size) +
                                                  " is smaller than alphabet plus specials (" +
                                                  std::to_string(model_.vocab.size()) + ")");
    for (const auto& [w, c] : counts) {
      std::vector<int> syms;
      for (std::size_t i = 0; i < w.size(); ++i) syms.push_back(intern(unit(w.substr(i, 1), i > 0)));
      words_.push_back(std::move(syms));
      word_count_.push_back(c);
    }
    for (std::size_t w = 0; w < words_.size(); ++w) add_word(w, +1);
  }

  SubwordModel run() {
    model_.algorithm = algo_;
    model_.vocab_cap = opt_.vocab_size;
    model_.min_frequency = opt_.min_frequency;
    model_.max_len = opt_.max_len;
    while (model_.vocab.size() < opt_.vocab_size) {
      auto best = select();
      if (!best) break;
      merge(*best);
    }
    model_.index_merges();
    return std::move(model_);
  }

 private:
  static std::uint64_t key(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  std::string unit(const std::string& c, bool continuation) const {
    return (algo_ == Algorithm::WordPiece && continuation) ? std::string(kContinuation) + c : c;
  }

  int intern(const std::string& s) {
    auto it = sym_id_.find(s);
    if (it != sym_id_.end()) return it->second;
    const int id = static_cast<int>(sym_str_.size());
    sym_str_.push_back(s);
    sym_freq_.push_back(0);
    sym_id_.emplace(s, id);
    return id;
  }

  void add_word(std::size_t w, int sign) {
    const auto& s = words_[w];
    const auto c = static_cast<std::int64_t>(word_count_[w]) * sign;
    for (std::size_t i = 0; i < s.size(); ++i) {
      sym_freq_[static_cast<std::size_t>(s[i])] += c;
      if (i + 1 < s.size()) {
        const auto k = key(s[i], s[i + 1]);
        pair_freq_[k] += c;
        if (sign > 0) pair_words_[k].insert(w);
      }
    }
  }

  /// Strict total order: true if pair `a` should be merged before `b`.
  bool better(std::uint64_t a, std::int64_t fa, std::uint64_t b, std::int64_t fb) const {
    if (algo_ == Algorithm::WordPiece) {
      const auto la = static_cast<unsigned __int128>(sym_freq_[a >> 32]);
      const auto ra = static_cast<unsigned __int128>(sym_freq_[a & 0xffffffffu]);
      const auto lb = static_cast<unsigned __int128>(sym_freq_[b >> 32]);
      const auto rb = static_cast<unsigned __int128>(sym_freq_[b & 0xffffffffu]);
      const unsigned __int128 sa = static_cast<unsigned __int128>(fa) * lb * rb;
      const unsigned __int128 sb = static_cast<unsigned __int128>(fb) * la * ra;
      if (sa != sb) return sa > sb;
    }
    if (fa != fb) return fa > fb;
    const auto& al = sym_str_[a >> 32];
    const auto& bl = sym_str_[b >> 32];
    if (al != bl) return al < bl;
    return sym_str_[a & 0xffffffffu] < sym_str_[b & 0xffffffffu];
  }

  std::optional<std::uint64_t> select() const {
    std::optional<std::uint64_t> best;
    std::int64_t best_f = 0;
    for (const auto& [k, f] : pair_freq_) {
      if (f < static_cast<std::int64_t>(opt_.min_frequency)) continue;
      if (!best || better(k, f, *best, best_f)) {
        best = k;
        best_f = f;
      }
    }
    return best;
  }

  void merge(std::uint64_t k) {
    const int a = static_cast<int>(k >> 32);
    const int b = static_cast<int>(k & 0xffffffffu);
    const std::string left = sym_str_[static_cast<std::size_t>(a)];
    const std::string right = sym_str_[static_cast<std::size_t>(b)];
    std::string merged = left;
    merged += (algo_ == Algorithm::WordPiece && std::string_view(right).starts_with(kContinuation))
                  ? right.substr(kContinuation.size())
                  : right;
    model_.merges.emplace_back(left, right);
    model_.vocab.add(merged);
    const int m = intern(merged);

    std::vector<std::size_t> affected(pair_words_[k].begin(), pair_words_[k].end());
    std::sort(affected.begin(), affected.end());
    for (std::size_t w : affected) {
      add_word(w, -1);
      auto& s = words_[w];
      std::vector<int> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == a && s[i + 1] == b) {
          next.push_back(m);
          ++i;
        } else {
          next.push_back(s[i]);
        }
      }
      s = std::move(next);
      add_word(w, +1);
    }
    for (auto it = pair_freq_.begin(); it != pair_freq_.end();) {
      if (it->second == 0) {
        pair_words_.erase(it->first);
        it = pair_freq_.erase(it);
      } else {
        ++it;
      }
    }
  }

  Algorithm algo_;
  TrainerOptions opt_;
  SubwordModel model_;
  std::vector<std::vector<int>> words_;
  std::vector<std::uint64_t> word_count_;
  std::vector<std::string> sym_str_;
  std::vector<std::int64_t> sym_freq_;
  std::unordered_map<std::string, int> sym_id_;
  std::unordered_map<std::uint64_t, std::int64_t> pair_freq_;
  std::unordered_map<std::uint64_t, std::unordered_set<std::size_t>> pair_words_;
};

}  // namespace detail

/// Frequency-scored merges: the most frequent adjacent pair (ties broken by
/// the lexicographically smaller pair) whose count is >= min_frequency.
inline SubwordModel train_bpe(const std::vector<std::string>& corpus, const TrainerOptions& opt = {}) {
  return detail::MergeTrainer(corpus, Algorithm::BPE, opt).run();
}

/// Likelihood-scored merges: freq(pair) / (freq(left) * freq(right)); ties go
/// to the more frequent pair, then the lexicographically smaller one.
/// Non-initial units carry the "##" prefix.
inline SubwordModel train_wordpiece(const std::vector<std::string>& corpus, const TrainerOptions& opt = {}) {
  return detail::MergeTrainer(corpus, Algorithm::WordPiece, opt).run();
}

inline SubwordModel train(Algorithm a, const std::vector<std::string>& corpus, const TrainerOptions& opt = {}) {
  return a == Algorithm::BPE ? train_bpe(corpus, opt) : train_wordpiece(corpus, opt);
}

}  // namespace clmw::tok
