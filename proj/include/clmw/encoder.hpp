//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Bidirectional transformer encoder with a masked-language-model head.
//
// Layout follows BERT: word + position + segment embeddings, layer norm,
// post-norm transformer layers, then a dense/GELU/layer-norm transform whose
// output is projected onto the (tied) word-embedding matrix plus a bias.
// Sequences are processed one at a time on their own tape; padding is
// handled by dropping masked-out positions before attention, which is
// equivalent to an additive -inf key mask.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clmw/common.hpp"
#include "clmw/optim.hpp"
#include "clmw/tensor.hpp"

namespace clmw {

struct EncoderConfig {
  std::size_t hidden = 128;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t intermediate = 512;
  std::size_t vocab_size = 30522;
  std::size_t max_positions = 512;
  std::size_t type_vocab = 2;
  double hidden_dropout = 0.1;
  double attn_dropout = 0.1;
  double init_std = 0.02;
  double layer_norm_eps = 1e-12;

  void validate() const {
    if (hidden == 0 || layers == 0 || heads == 0 || intermediate == 0 || vocab_size == 0 || max_positions == 0)
      throw Error(ErrorCode::InvalidArgument, "encoder dimensions must be positive");
    if (hidden % heads != 0)
      throw Error(ErrorCode::InvalidArgument, "hidden " + std::to_string(hidden) + " not divisible by heads " +
                                                  std::to_string(heads));
    for (double p : {hidden_dropout, attn_dropout})
      if (!(p >= 0.0 && p < 1.0)) throw Error(ErrorCode::InvalidFraction, "dropout must lie in [0, 1)");
    if (type_vocab == 0) throw Error(ErrorCode::InvalidArgument, "type_vocab must be positive");
  }

  /// "tiny", "small", "base" (published sizes) or "toy" (desk scale).
  static EncoderConfig preset(const std::string& name) {
    EncoderConfig c;
    if (name == "tiny") {
      c.hidden = 128, c.layers = 2, c.heads = 2, c.intermediate = 512;
    } else if (name == "small") {
      c.hidden = 512, c.layers = 4, c.heads = 8, c.intermediate = 2048;
    } else if (name == "base") {
      c.hidden = 768, c.layers = 12, c.heads = 12, c.intermediate = 3072;
    } else if (name == "toy") {
      c.hidden = 32, c.layers = 2, c.heads = 2, c.intermediate = 64, c.vocab_size = 512, c.max_positions = 128;
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown encoder preset '" + name + "'");
    }
    return c;
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"hidden", c.hidden},           {"layers", c.layers},
       {"heads", c.heads},             {"intermediate", c.intermediate},
       {"vocab_size", c.vocab_size},   {"max_positions", c.max_positions},
       {"type_vocab", c.type_vocab},   {"hidden_dropout", c.hidden_dropout},
       {"attn_dropout", c.attn_dropout}, {"init_std", c.init_std},
       {"layer_norm_eps", c.layer_norm_eps}};
}

/// Accepts either {"preset": name, ...overrides} or a full field list.
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c = j.contains("preset") ? EncoderConfig::preset(j.at("preset").get<std::string>()) : EncoderConfig{};
  c.hidden = j.value("hidden", c.hidden);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.intermediate = j.value("intermediate", c.intermediate);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.type_vocab = j.value("type_vocab", c.type_vocab);
  c.hidden_dropout = j.value("hidden_dropout", c.hidden_dropout);
  c.attn_dropout = j.value("attn_dropout", c.attn_dropout);
  c.init_std = j.value("init_std", c.init_std);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  c.validate();
}

/// Exact parameter count; the output projection is tied to the word
/// embeddings so only its bias is counted.
inline std::uint64_t count_parameters(const EncoderConfig& c) {
  const std::uint64_t H = c.hidden, I = c.intermediate, V = c.vocab_size;
  const std::uint64_t emb = V * H + c.max_positions * H + c.type_vocab * H + 2 * H;
  const std::uint64_t layer = 4 * (H * H + H) + (H * I + I) + (I * H + H) + 2 * (2 * H);
  const std::uint64_t head = H * H + H + 2 * H + V;
  return emb + c.layers * layer + head;
}

template <class T>
class Encoder {
 public:
  using Tape = nn::Tape<T>;
  using Var = nn::Var;

  struct Layer {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  Encoder() = default;
  explicit Encoder(EncoderConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t H = cfg_.hidden, I = cfg_.intermediate;
    word_ = store_.add("embeddings.word", cfg_.vocab_size, H);
    pos_ = store_.add("embeddings.position", cfg_.max_positions, H);
    seg_ = store_.add("embeddings.segment", cfg_.type_vocab, H);
    emb_ln_g_ = store_.add("embeddings.ln.gamma", 1, H);
    emb_ln_b_ = store_.add("embeddings.ln.beta", 1, H);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L{};
      L.wq = store_.add(p + "attn.q.weight", H, H);
      L.bq = store_.add(p + "attn.q.bias", 1, H);
      L.wk = store_.add(p + "attn.k.weight", H, H);
      L.bk = store_.add(p + "attn.k.bias", 1, H);
      L.wv = store_.add(p + "attn.v.weight", H, H);
      L.bv = store_.add(p + "attn.v.bias", 1, H);
      L.wo = store_.add(p + "attn.out.weight", H, H);
      L.bo = store_.add(p + "attn.out.bias", 1, H);
      L.ln1_g = store_.add(p + "attn.ln.gamma", 1, H);
      L.ln1_b = store_.add(p + "attn.ln.beta", 1, H);
      L.w1 = store_.add(p + "ffn.in.weight", H, I);
      L.b1 = store_.add(p + "ffn.in.bias", 1, I);
      L.w2 = store_.add(p + "ffn.out.weight", I, H);
      L.b2 = store_.add(p + "ffn.out.bias", 1, H);
      L.ln2_g = store_.add(p + "ffn.ln.gamma", 1, H);
      L.ln2_b = store_.add(p + "ffn.ln.beta", 1, H);
      layers_.push_back(L);
    }
    head_w_ = store_.add("mlm.transform.weight", H, H);
    head_b_ = store_.add("mlm.transform.bias", 1, H);
    head_ln_g_ = store_.add("mlm.ln.gamma", 1, H);
    head_ln_b_ = store_.add("mlm.ln.beta", 1, H);
    dec_b_ = store_.add("mlm.decoder.bias", 1, cfg_.vocab_size);
    initialize(seed);
  }

  const EncoderConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  /// Weights ~ N(0, init_std), biases 0, layer-norm gains 1.
  void initialize(std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0xE1C0}));
    for (std::size_t i = 0; i < store_.entries().size(); ++i) {
      const auto& e = store_.entry(i);
      T* p = store_.ptr(i);
      const bool gamma = e.name.ends_with(".gamma");
      const bool zero = e.name.ends_with(".bias") || e.name.ends_with(".beta");
      for (std::size_t k = 0; k < e.size(); ++k)
        p[k] = gamma ? T(1) : zero ? T(0) : static_cast<T>(rng.normal() * cfg_.init_std);
    }
  }

  /// Checks ids and length; throws IndexOutOfRange / PositionOverflow.
  void check_input(std::span<const int> ids) const {
    if (ids.size() > cfg_.max_positions)
      throw Error(ErrorCode::PositionOverflow, "sequence of " + std::to_string(ids.size()) + " tokens exceeds " +
                                                   std::to_string(cfg_.max_positions) + " positions");
    for (int id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
        throw Error(ErrorCode::IndexOutOfRange, "token id " + std::to_string(id) + " outside vocabulary of " +
                                                    std::to_string(cfg_.vocab_size));
  }

  /// Final hidden states (n x hidden) of one sequence. `positions` defaults
  /// to 0..n-1. A null `sink` treats the encoder as constant (no gradients);
  /// otherwise gradients are added into sink[0..params().size()). When
  /// `attention` is given, the per-head attention matrices are appended to it.
  Var hidden(Tape& t, std::span<const int> ids, T* sink, bool train, Rng& rng,
             std::span<const int> positions = {}, std::vector<Var>* attention = nullptr) const {
    check_input(ids);
    if (ids.empty()) throw Error(ErrorCode::ShapeMismatch, "empty sequence");
    std::vector<int> pos_ids;
    if (positions.empty()) {
      pos_ids.resize(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) pos_ids[i] = static_cast<int>(i);
    } else {
      if (positions.size() != ids.size()) throw Error(ErrorCode::ShapeMismatch, "position ids length");
      pos_ids.assign(positions.begin(), positions.end());
      for (int p : pos_ids)
        if (p < 0 || static_cast<std::size_t>(p) >= cfg_.max_positions)
          throw Error(ErrorCode::PositionOverflow, "position " + std::to_string(p));
    }
    const std::vector<int> seg_ids(ids.size(), 0);
    const double hp = train ? cfg_.hidden_dropout : 0.0;
    const double ap = train ? cfg_.attn_dropout : 0.0;
    const T eps = static_cast<T>(cfg_.layer_norm_eps);
    auto P = [&](std::size_t i) { return param(t, i, sink); };

    Var x = t.add(t.add(t.embedding(P(word_), ids), t.embedding(P(pos_), pos_ids)), t.embedding(P(seg_), seg_ids));
    x = t.dropout(t.layer_norm(x, P(emb_ln_g_), P(emb_ln_b_), eps), hp, rng);

    const std::size_t heads = cfg_.heads, d = cfg_.hidden / cfg_.heads;
    const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    for (const Layer& L : layers_) {
      Var q = t.add_bias(t.matmul(x, P(L.wq)), P(L.bq));
      Var k = t.add_bias(t.matmul(x, P(L.wk)), P(L.bk));
      Var v = t.add_bias(t.matmul(x, P(L.wv)), P(L.bv));
      std::vector<Var> ctx;
      ctx.reserve(heads);
      for (std::size_t h = 0; h < heads; ++h) {
        Var qh = heads == 1 ? q : t.slice_cols(q, h * d, (h + 1) * d);
        Var kh = heads == 1 ? k : t.slice_cols(k, h * d, (h + 1) * d);
        Var vh = heads == 1 ? v : t.slice_cols(v, h * d, (h + 1) * d);
        Var a = t.softmax_rows(t.scale(t.matmul_bt(qh, kh), inv_sqrt_d));
        if (attention) attention->push_back(a);
        ctx.push_back(t.matmul(t.dropout(a, ap, rng), vh));
      }
      Var c = heads == 1 ? ctx[0] : t.concat_cols(ctx);
      Var o = t.dropout(t.add_bias(t.matmul(c, P(L.wo)), P(L.bo)), hp, rng);
      x = t.layer_norm(t.add(x, o), P(L.ln1_g), P(L.ln1_b), eps);
      Var f = t.gelu(t.add_bias(t.matmul(x, P(L.w1)), P(L.b1)));
      f = t.dropout(t.add_bias(t.matmul(f, P(L.w2)), P(L.b2)), hp, rng);
      x = t.layer_norm(t.add(x, f), P(L.ln2_g), P(L.ln2_b), eps);
    }
    return x;
  }

  /// MLM logits (|rows| x vocab) for the selected rows of `h`.
  Var mlm_logits(Tape& t, Var h, std::span<const int> rows, T* sink) const {
    auto P = [&](std::size_t i) { return param(t, i, sink); };
    Var z = t.gather_rows(h, rows);
    z = t.gelu(t.add_bias(t.matmul(z, P(head_w_)), P(head_b_)));
    z = t.layer_norm(z, P(head_ln_g_), P(head_ln_b_), static_cast<T>(cfg_.layer_norm_eps));
    return t.add_bias(t.matmul_bt(z, P(word_)), P(dec_b_));
  }

  /// Per-position vocabulary log-probabilities, shape {batch, seq, vocab},
  /// in evaluation mode. All sequences must share one (padded) length.
  /// Positions whose attention mask is 0 are removed before attention and
  /// reported as the uniform distribution.
  nn::Tensor<T> forward_mlm(const std::vector<std::vector<int>>& batch,
                            const std::vector<std::vector<int>>& attention_mask = {}) const {
    const std::size_t B = batch.size();
    const std::size_t S = B ? batch[0].size() : 0;
    const std::size_t V = cfg_.vocab_size;
    if (!attention_mask.empty() && attention_mask.size() != B)
      throw Error(ErrorCode::ShapeMismatch, "attention mask batch " + std::to_string(attention_mask.size()) +
                                                " vs " + std::to_string(B));
    nn::Tensor<T> out = nn::Tensor<T>::zeros({B, S, V});
    const T uniform = -static_cast<T>(std::log(static_cast<double>(V)));
    Rng unused(0);
    for (std::size_t b = 0; b < B; ++b) {
      if (batch[b].size() != S)
        throw Error(ErrorCode::ShapeMismatch, "sequence " + std::to_string(b) + " has length " +
                                                  std::to_string(batch[b].size()) + ", expected " + std::to_string(S));
      check_input(batch[b]);
      std::vector<int> ids, pos;
      for (std::size_t s = 0; s < S; ++s) {
        const bool on = attention_mask.empty() || attention_mask[b].at(s) != 0;
        if (on) {
          ids.push_back(batch[b][s]);
          pos.push_back(static_cast<int>(s));
        }
      }
      T* dst = out.data.data() + b * S * V;
      std::fill(dst, dst + S * V, uniform);
      if (ids.empty()) continue;
      Tape t;
      Var h = hidden(t, ids, nullptr, false, unused, pos);
      std::vector<int> rows(ids.size());
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
      Var logits = mlm_logits(t, h, rows, nullptr);
      const auto lp = nn::log_softmax_rows(t.value(logits), rows.size(), V);
      for (std::size_t i = 0; i < pos.size(); ++i)
        std::copy(lp.begin() + static_cast<std::ptrdiff_t>(i * V), lp.begin() + static_cast<std::ptrdiff_t>((i + 1) * V),
                  dst + static_cast<std::size_t>(pos[i]) * V);
    }
    return out;
  }

  std::size_t word_embedding_index() const { return word_; }
  std::size_t head_first_index() const { return head_w_; }

 private:
  Var param(Tape& t, std::size_t i, T* sink) const {
    const auto& e = store_.entry(i);
    return t.param(store_.ptr(i), e.rows, e.cols, sink ? sink + e.offset : nullptr);
  }

  EncoderConfig cfg_;
  nn::ParamStore<T> store_;
  std::size_t word_ = 0, pos_ = 0, seg_ = 0, emb_ln_g_ = 0, emb_ln_b_ = 0;
  std::vector<Layer> layers_;
  std::size_t head_w_ = 0, head_b_ = 0, head_ln_g_ = 0, head_ln_b_ = 0, dec_b_ = 0;
};

}  // namespace clmw
