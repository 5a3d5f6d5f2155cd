//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "clmw/pretrain.hpp"
#include "clmw/toycorpus.hpp"

using namespace clmw;

namespace {

EncoderConfig small_model(std::size_t vocab) {
  EncoderConfig c = EncoderConfig::preset("toy");
  c.vocab_size = vocab;
  c.max_positions = 64;
  return c;
}

struct Fixture {
  tok::SubwordModel tokenizer;
  std::vector<std::vector<int>> train, valid;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    ToyCorpusOptions o;
    o.count = 600;
    o.seed = 5;
    auto lines = make_toy_corpus(o);
    x.tokenizer = tok::train(tok::Algorithm::BPE, lines, {120, 2, 64});
    Encoder<double> probe(small_model(x.tokenizer.size()));
    auto ids = encode_corpus(x.tokenizer, probe, lines);
    x.train.assign(ids.begin(), ids.begin() + 500);
    x.valid.assign(ids.begin() + 500, ids.end());
    return x;
  }();
  return f;
}

std::vector<int> seq_of(std::size_t n) {
  std::vector<int> s{tok::kCls};
  for (std::size_t i = 0; i < n; ++i) s.push_back(5 + static_cast<int>(i % 40));
  s.push_back(tok::kSep);
  return s;
}

}  // namespace

TEST(EffectiveBatch, Products) {
  EXPECT_EQ(effective_batch(4, 4, 64, 1), 1024u);
  EXPECT_EQ(effective_batch(1, 8, 128, 1), 1024u);
  EXPECT_EQ(effective_batch(1, 1, 8, 4), 32u);
  EXPECT_EQ(effective_batch(2, 4, 64, 2), 1024u);
  EXPECT_THROW(effective_batch(0, 1, 1, 1), Error);
  TrainConfig c;
  c.b_eff_target = 99;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Mask, CountRule) {
  EXPECT_EQ(make_mask(seq_of(20), 0.15, 1, 1, 0).positions.size(), 3u);
  EXPECT_EQ(make_mask(seq_of(3), 0.15, 1, 1, 0).positions.size(), 1u);
  try {
    make_mask(std::vector<int>{tok::kCls, tok::kSep}, 0.15, 1, 1, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoEligiblePositions);
  }
}

TEST(Mask, ExcludesSpecialsAndIsPure) {
  auto s = seq_of(30);
  s.push_back(tok::kPad);
  auto a = make_mask(s, MaskPolicy{}, 9, 2, 3, 4, 100);
  auto b = make_mask(s, MaskPolicy{}, 9, 2, 3, 4, 100);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_EQ(a.input, b.input);
  for (int p : a.positions) EXPECT_TRUE(maskable(s[static_cast<std::size_t>(p)]));
  EXPECT_TRUE(std::is_sorted(a.positions.begin(), a.positions.end()));
}

TEST(Mask, RateOverTenThousandTokens) {
  std::size_t tokens = 0, masked = 0, i = 0;
  Rng rng(3);
  while (tokens < 10000) {
    auto s = seq_of(10 + rng.uniform_index(40));
    auto p = make_mask(s, 0.15, 17, 1, 0);
    (void)i++;
    tokens += s.size() - 2;
    masked += p.positions.size();
  }
  const double rate = static_cast<double>(masked) / static_cast<double>(tokens);
  EXPECT_NEAR(rate, 0.15, 0.01);
}

TEST(Mask, DynamicAcrossEpochs) {
  std::size_t differ = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    auto s = seq_of(20 + i % 10);
    differ += make_mask(s, MaskPolicy{}, 4, 1, 0, i, 100).positions != make_mask(s, MaskPolicy{}, 4, 2, 0, i, 100).positions;
  }
  EXPECT_GE(differ, 95u);
}

TEST(Mask, ActionSplit) {
  std::size_t counts[3] = {0, 0, 0};
  MaskPolicy pol;
  pol.rate = 0.5;
  for (std::uint64_t i = 0; i < 2000; ++i) {
    auto p = make_mask(seq_of(20), pol, 1, 1, 0, i, 100);
    for (auto a : p.actions) ++counts[static_cast<int>(a)];
  }
  const double n = static_cast<double>(counts[0] + counts[1] + counts[2]);
  EXPECT_NEAR(counts[0] / n, 0.8, 0.01);
  EXPECT_NEAR(counts[1] / n, 0.1, 0.01);
  EXPECT_NEAR(counts[2] / n, 0.1, 0.01);
  MaskPolicy all{0.15, 1.0, 0.0, 0.0};
  auto p = make_mask(seq_of(40), all, 1, 1, 0, 0, 100);
  for (int pos : p.positions) EXPECT_EQ(p.input[static_cast<std::size_t>(pos)], tok::kMask);
}

TEST(MaskedLoss, BatchedPathEqualsScalarOracle) {
  const auto& f = fixture();
  Encoder<double> model(small_model(f.tokenizer.size()), 2);
  std::vector<MaskPlan> plans;
  for (std::size_t i = 0; i < 12; ++i) plans.push_back(make_mask(f.valid[i], MaskPolicy{}, 3, 1, 0, i, f.tokenizer.size()));
  auto st = mlm_step<double>(model, plans, nullptr, false, 0);
  // oracle: full log-probabilities per sequence, double loop over masked slots
  double sum = 0;
  std::size_t cnt = 0;
  for (const auto& p : plans) {
    auto lp = model.forward_mlm({p.input});
    for (std::size_t k = 0; k < p.positions.size(); ++k) {
      sum -= lp.data[static_cast<std::size_t>(p.positions[k]) * f.tokenizer.size() + static_cast<std::size_t>(p.targets[k])];
      ++cnt;
    }
  }
  EXPECT_EQ(st.masked, cnt);
  EXPECT_NEAR(st.nll_sum / static_cast<double>(st.masked), sum / static_cast<double>(cnt), 1e-9);
}

TEST(Train, AccumulationIdentityIsBitwise) {
  const auto& f = fixture();
  std::vector<std::vector<int>> tr(f.train.begin(), f.train.begin() + 48), va(f.valid.begin(), f.valid.begin() + 16);
  auto cfgm = small_model(f.tokenizer.size());
  cfgm.hidden_dropout = cfgm.attn_dropout = 0.0;
  auto run = [&](std::size_t b_gpu, std::size_t n_ga, std::size_t threads) {
    Encoder<double> m(cfgm, 1);
    TrainConfig c;
    c.epochs = 2;
    c.b_gpu = b_gpu;
    c.n_ga = n_ga;
    c.threads = threads;
    c.adam.lr = 1e-3;
    c.restore_best = false;
    train_encoded(m, tr, va, c);
    return m.params().values();
  };
  const auto a = run(8, 1, 1);
  EXPECT_EQ(a, run(4, 2, 1));
  EXPECT_EQ(a, run(4, 2, 3));
}

TEST(Train, SmokeLossDecreases) {
  const auto& f = fixture();
  Encoder<double> m(small_model(f.tokenizer.size()), 1);
  TrainConfig c;
  c.epochs = 5;
  c.b_gpu = 8;
  c.adam.lr = 1e-3;
  c.early_stop.patience = 10;
  auto man = train_encoded(m, f.train, f.valid, c);
  ASSERT_EQ(man.stop_reason, "completed");
  std::vector<double> losses;
  for (const auto& r : man.records)
    if (r.split == "train") losses.push_back(r.loss);
  ASSERT_EQ(losses.size(), 5u);
  EXPECT_LT(losses.back(), losses.front());
  EXPECT_LT(losses.front(), std::log(static_cast<double>(f.tokenizer.size())));
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  const auto& f = fixture();
  std::vector<std::vector<int>> tr(f.train.begin(), f.train.begin() + 32), va(f.valid.begin(), f.valid.begin() + 8);
  Encoder<double> m(small_model(f.tokenizer.size()), 1);
  const auto before = m.params().values();
  TrainConfig c;
  c.epochs = 2;
  c.adam.lr = 0.0;
  auto man = train_encoded(m, tr, va, c);
  EXPECT_EQ(m.params().values(), before);
  EXPECT_EQ(man.records[1].loss, man.records[3].loss);  // fixed validation masks
}

TEST(Train, InjectedNanDiverges) {
  const auto& f = fixture();
  std::vector<std::vector<int>> tr(f.train.begin(), f.train.begin() + 32), va(f.valid.begin(), f.valid.begin() + 8);
  Encoder<double> m(small_model(f.tokenizer.size()), 1);
  TrainHooks<double> h;
  h.after_backward = [](std::vector<double>& g, std::size_t e, std::size_t s) {
    if (e == 1 && s == 2) g[7] = std::nan("");
  };
  TrainConfig c;
  c.epochs = 3;
  auto man = train_encoded(m, tr, va, c, h);
  EXPECT_EQ(man.stop_reason, "diverged");
  EXPECT_EQ(man.optimizer_steps, 2u);
}

TEST(Train, EarlyStopping) {
  const auto& f = fixture();
  std::vector<std::vector<int>> tr(f.train.begin(), f.train.begin() + 16), va(f.valid.begin(), f.valid.begin() + 8);
  Encoder<double> m(small_model(f.tokenizer.size()), 1);
  TrainConfig c;
  c.epochs = 20;
  c.adam.lr = 0.0;  // validation loss never improves after epoch 1
  auto man = train_encoded(m, tr, va, c);
  EXPECT_EQ(man.stop_reason, "early_stopped");
  EXPECT_EQ(man.epochs_run, 4u);
  EXPECT_EQ(man.best_epoch, 1u);
}

TEST(Train, Errors) {
  const auto& f = fixture();
  Encoder<double> m(small_model(f.tokenizer.size() + 1), 1);
  try {
    train(m, f.tokenizer, {"CCO"}, {"CCN"}, TrainConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VocabMismatch);
  }
  Encoder<double> ok(small_model(f.tokenizer.size()), 1);
  try {
    train(ok, f.tokenizer, {}, {"CCN"}, TrainConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyCorpus);
  }
}

TEST(Manifest, JsonRoundTrip) {
  RunManifest m;
  m.config = TrainConfig{};
  m.records.push_back({1, "valid", 0.5, 0.4, 0.3, std::exp(0.5)});
  m.stop_reason = "early_stopped";
  m.best_epoch = 1;
  m.best_valid_loss = 0.5;
  auto back = manifest_from_json(manifest_to_json(m));
  EXPECT_EQ(back.stop_reason, "early_stopped");
  EXPECT_EQ(back.records.size(), 1u);
  EXPECT_EQ(back.best_valid()->loss, 0.5);
  TrainConfig c = m.config.get<TrainConfig>();
  EXPECT_EQ(c.b_eff(), 8u);
}
