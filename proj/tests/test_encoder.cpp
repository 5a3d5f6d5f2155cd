//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include <cmath>

#include "clmw/encoder.hpp"
#include "gradcheck.hpp"

using clmw::Encoder;
using clmw::EncoderConfig;
using clmw::ErrorCode;

namespace {

EncoderConfig tiny_toy(std::size_t vocab = 20) {
  EncoderConfig c;
  c.hidden = 8;
  c.layers = 1;
  c.heads = 2;
  c.intermediate = 16;
  c.vocab_size = vocab;
  c.max_positions = 16;
  c.hidden_dropout = 0.0;
  c.attn_dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

double mlm_loss(const Encoder<double>& enc, const std::vector<int>& ids, const std::vector<int>& rows,
                const std::vector<int>& targets, double* grad_sink) {
  clmw::Rng rng(0);
  clmw::nn::Tape<double> t;
  auto h = enc.hidden(t, ids, grad_sink, false, rng);
  auto loss = t.cross_entropy_masked(enc.mlm_logits(t, h, rows, grad_sink), targets);
  if (grad_sink) t.backward(loss);
  return t.scalar(loss);
}

}  // namespace

TEST(ParameterCount, HandEnumeratedToy) {
  EncoderConfig c;
  c.hidden = 4;
  c.layers = 1;
  c.heads = 1;
  c.intermediate = 8;
  c.vocab_size = 10;
  c.max_positions = 6;
  // embeddings: word 10*4, position 6*4, segment 2*4, layer norm 4+4
  const std::uint64_t emb = 40 + 24 + 8 + 8;
  // layer: q,k,v,o (4*4+4 each), ln 8, ffn in 4*8+8, ffn out 8*4+4, ln 8
  const std::uint64_t layer = 4 * 20 + 8 + 40 + 36 + 8;
  // head: transform 4*4+4, ln 8, decoder bias 10 (weights tied)
  const std::uint64_t head = 20 + 8 + 10;
  EXPECT_EQ(clmw::count_parameters(c), emb + layer + head);
  EXPECT_EQ(clmw::count_parameters(c), 290u);
  Encoder<double> enc(c);
  EXPECT_EQ(enc.params().size(), 290u);
}

TEST(ParameterCount, PublishedSizes) {
  EXPECT_NEAR(static_cast<double>(clmw::count_parameters(EncoderConfig::preset("tiny"))), 4.4e6, 0.02 * 4.4e6);
  EXPECT_NEAR(static_cast<double>(clmw::count_parameters(EncoderConfig::preset("small"))), 28.5e6, 0.02 * 28.5e6);
  for (const char* p : {"tiny", "small", "toy"}) {
    Encoder<float> enc(EncoderConfig::preset(p));
    EXPECT_EQ(enc.params().size(), clmw::count_parameters(EncoderConfig::preset(p))) << p;
  }
}

TEST(Config, JsonRoundTripAndValidation) {
  nlohmann::json j = EncoderConfig::preset("small");
  EncoderConfig back = j.get<EncoderConfig>();
  EXPECT_EQ(back.hidden, 512u);
  EXPECT_EQ(back.heads, 8u);
  nlohmann::json p = {{"preset", "toy"}, {"vocab_size", 77}};
  EXPECT_EQ(p.get<EncoderConfig>().vocab_size, 77u);
  nlohmann::json bad = {{"preset", "toy"}, {"heads", 3}};
  EXPECT_THROW(bad.get<EncoderConfig>(), clmw::Error);
  EXPECT_THROW(EncoderConfig::preset("huge"), clmw::Error);
}

TEST(ForwardMlm, InitIsNearUniformAndNormalized) {
  EncoderConfig c = EncoderConfig::preset("tiny");
  Encoder<double> enc(c, 1);
  auto out = enc.forward_mlm({{2, 100, 2000, 30000, 7, 3}});
  ASSERT_EQ(out.shape, (std::vector<std::size_t>{1, 6, c.vocab_size}));
  const double logv = std::log(static_cast<double>(c.vocab_size));
  for (std::size_t s = 0; s < 6; ++s) {
    double psum = 0, ent = 0;
    for (std::size_t v = 0; v < c.vocab_size; ++v) {
      const double lp = out.data[s * c.vocab_size + v];
      psum += std::exp(lp);
      ent -= std::exp(lp) * lp;
    }
    EXPECT_NEAR(psum, 1.0, 1e-9);
    EXPECT_NEAR(ent, logv, 0.05 * logv);
  }
}

TEST(ForwardMlm, BatchOrderEquivariance) {
  Encoder<double> enc(tiny_toy(), 3);
  std::vector<std::vector<int>> b{{2, 5, 6, 3}, {2, 9, 9, 3}, {2, 7, 8, 3}};
  auto o1 = enc.forward_mlm(b);
  auto o2 = enc.forward_mlm({b[2], b[0], b[1]});
  const std::size_t per = 4 * 20;
  for (std::size_t i = 0; i < per; ++i) {
    EXPECT_EQ(o1.data[i], o2.data[per + i]);
    EXPECT_EQ(o1.data[2 * per + i], o2.data[i]);
  }
}

TEST(ForwardMlm, ClsSepOnlyAndErrors) {
  Encoder<double> enc(tiny_toy(), 3);
  auto out = enc.forward_mlm({{2, 3}});
  EXPECT_EQ(out.shape[1], 2u);
  for (double v : out.data) EXPECT_TRUE(std::isfinite(v));
  try {
    enc.forward_mlm({std::vector<int>(17, 5)});
    FAIL();
  } catch (const clmw::Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::PositionOverflow);
  }
  try {
    enc.forward_mlm({{2, 3}, {2, 4, 3}});
    FAIL();
  } catch (const clmw::Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  EXPECT_THROW(enc.forward_mlm({{2, 25}}), clmw::Error);
}

TEST(ForwardMlm, PaddingIsInvisible) {
  Encoder<double> enc(tiny_toy(), 4);
  auto plain = enc.forward_mlm({{2, 5, 6, 3}});
  auto padded = enc.forward_mlm({{2, 5, 6, 3, 0, 0}}, {{1, 1, 1, 1, 0, 0}});
  for (std::size_t i = 0; i < 4 * 20; ++i) EXPECT_EQ(plain.data[i], padded.data[i]);
}

TEST(Attention, RowsAreDistributions) {
  Encoder<double> enc(tiny_toy(), 5);
  clmw::Rng rng(0);
  clmw::nn::Tape<double> t;
  std::vector<clmw::nn::Var> att;
  std::vector<int> ids{2, 4, 8, 12, 3};
  enc.hidden(t, ids, nullptr, false, rng, {}, &att);
  ASSERT_EQ(att.size(), 2u);
  for (auto a : att)
    for (std::size_t i = 0; i < t.rows(a); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < t.cols(a); ++j) s += t.value(a)[i * t.cols(a) + j];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Encoder, DeterministicWithoutDropout) {
  Encoder<double> a(tiny_toy(), 6), b(tiny_toy(), 6);
  EXPECT_EQ(a.forward_mlm({{2, 5, 6, 3}}).data, b.forward_mlm({{2, 5, 6, 3}}).data);
}

TEST(Encoder, Bidirectional) {
  Encoder<double> enc(tiny_toy(), 7);
  auto o1 = enc.forward_mlm({{2, 4, 9, 10, 3}});
  auto o2 = enc.forward_mlm({{2, 4, 9, 15, 3}});
  // position 1 (a masked slot) sees the token at position 3 to its right
  double diff = 0;
  for (std::size_t v = 0; v < 20; ++v) diff += std::abs(o1.data[1 * 20 + v] - o2.data[1 * 20 + v]);
  EXPECT_GT(diff, 1e-8);
}

TEST(Encoder, GradientMatchesFiniteDifferences) {
  auto c = tiny_toy();
  c.layers = 1;
  Encoder<double> enc(c, 8);
  const std::vector<int> ids{2, 4, 11, 4, 17, 3}, rows{1, 3, 4}, targets{9, 6, 12};
  std::vector<double> grad(enc.params().size(), 0.0);
  mlm_loss(enc, ids, rows, targets, grad.data());
  Encoder<double> probe = enc;
  auto res = testing_oracles::finite_difference_check(
      [&](const std::vector<double>& p) {
        probe.params().values() = p;
        return mlm_loss(probe, ids, rows, targets, nullptr);
      },
      enc.params().values(), grad, 60, 9);
  EXPECT_GE(res.checked, 50u);
  EXPECT_LT(res.max_rel_err, 1e-4);
}
