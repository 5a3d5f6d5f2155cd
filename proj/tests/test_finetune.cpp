//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "clmw/finetune.hpp"
#include "clmw/toycorpus.hpp"

using namespace clmw;

namespace {

struct Setup {
  tok::SubwordModel tokenizer;
  Encoder<double> encoder;
  EncodedDataset data;
};

// Labels are a linear function of token count plus small noise.
const Setup& setup() {
  static const Setup s = [] {
    Setup x;
    ToyCorpusOptions o;
    o.count = 60;
    o.seed = 8;
    auto lines = make_toy_corpus(o);
    x.tokenizer = tok::train(tok::Algorithm::BPE, lines, {60, 2, 64});
    EncoderConfig c = EncoderConfig::preset("toy");
    c.vocab_size = x.tokenizer.size();
    c.max_positions = 64;
    x.encoder = Encoder<double>(c, 3);
    x.data.ids = encode_corpus(x.tokenizer, x.encoder, lines);
    Rng rng(1);
    for (const auto& s : x.data.ids) x.data.labels.push_back(0.2 * static_cast<double>(s.size()) + 0.1 * rng.normal());
    return x;
  }();
  return s;
}

SearchOptions quick(std::size_t trials) {
  SearchOptions o;
  o.trials = trials;
  o.startup = 2;
  o.max_epochs = 6;
  o.patience = 2;
  o.seed = 11;
  return o;
}

}  // namespace

TEST(CvPlan, SizesAndPartition) {
  auto p = make_cv_plan(100, 7);
  EXPECT_EQ(p.test.size(), 20u);
  std::multiset<std::size_t> sizes{p.folds[0].size(), p.folds[1].size(), p.folds[2].size()};
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{26, 27, 27}));
  std::set<std::size_t> all(p.test.begin(), p.test.end());
  for (const auto& f : p.folds) all.insert(f.begin(), f.end());
  EXPECT_EQ(all.size(), 100u);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto tr = p.train_for(r);
    for (auto i : p.folds[r]) EXPECT_FALSE(std::binary_search(tr.begin(), tr.end(), i));
  }
  EXPECT_EQ(p.train_all().size(), 80u);
  auto q = make_cv_plan(100, 7);
  EXPECT_EQ(p.test, q.test);
  EXPECT_EQ(p.folds, q.folds);
  EXPECT_NE(p.test, make_cv_plan(100, 8).test);
  auto back = plan_from_json(plan_to_json(p));
  EXPECT_EQ(back.folds, p.folds);
  try {
    make_cv_plan(14, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewSamples);
  }
}

TEST(HeadConfig, GridAndJson) {
  HeadConfig c;
  c.stack_depth = 3;
  c.batch_size = 64;
  c.learning_rate = 5e-4;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<HeadConfig>(), c);
  EXPECT_EQ(HeadConfig::from_indices(c.indices()), c);
  c.batch_size = 48;
  EXPECT_THROW(c.validate(), Error);
  c.batch_size = 8;
  c.dropout = 0.25;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Head, ParameterCounts) {
  const auto& s = setup();
  const std::size_t H = s.encoder.config().hidden;
  HeadConfig c0, c5;
  c5.stack_depth = 5;
  const auto m0 = attach_head(s.encoder, c0, 1), m5 = attach_head(s.encoder, c5, 1);
  EXPECT_EQ(m0.head().size(), H + 1);
  EXPECT_EQ(m5.head().size() - m0.head().size(), 5 * (H * H + H));
  EXPECT_EQ(m5.head().size(), head_parameter_count(H, 5));
}

TEST(Head, FreezeLeavesEncoderUntouched) {
  const auto& s = setup();
  HeadConfig c;
  c.freeze_base_model = true;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  auto m = attach_head(s.encoder, c, 2);
  const auto enc_before = m.encoder().params().values();
  const auto head_before = m.head().values();
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < 80 && i < s.data.size(); ++i) idx.push_back(i);
  FitHooks<double> hooks;
  std::size_t calls = 0;
  hooks.after_backward = [&](const std::vector<double>& ge, const std::vector<double>&) {
    ++calls;
    for (double g : ge) ASSERT_EQ(g, 0.0);
  };
  auto r = fit(m, s.data, idx, {}, FitOptions{2, 0, 5}, nullptr, hooks);
  EXPECT_GE(r.steps, 10u);
  EXPECT_EQ(calls, r.steps);
  EXPECT_EQ(m.encoder().params().values(), enc_before);
  EXPECT_NE(m.head().values(), head_before);
}

TEST(Head, UnfrozenEncoderMoves) {
  const auto& s = setup();
  HeadConfig c;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  auto m = attach_head(s.encoder, c, 2);
  const auto before = m.encoder().params().values();
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  fit(m, s.data, idx, {}, FitOptions{1, 0, 5});
  EXPECT_NE(m.encoder().params().values(), before);
}

TEST(Search, DeterministicAndRanked) {
  const auto& s = setup();
  const auto plan = make_cv_plan(s.data.size(), 2);
  const auto a = search(s.encoder, s.data, plan, quick(3));
  const auto b = search(s.encoder, s.data, plan, quick(3));
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].index, b[i].index);
    EXPECT_EQ(a[i].config, b[i].config);
    EXPECT_EQ(a[i].mean_r2, b[i].mean_r2);
    EXPECT_EQ(a[i].rank, i + 1);
    if (i > 0) {
      EXPECT_GE(a[i - 1].mean_r2, a[i].mean_r2);
    }
  }
  const auto one = search(s.encoder, s.data, plan, quick(1));
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].rank, 1u);
  for (const auto& t : a)
    if (t.index == 0) {
      EXPECT_EQ(one[0].config, t.config);
    }
}

TEST(Search, RankTiesFavourEarlierTrials) {
  std::vector<TrialResult> t(3);
  for (std::size_t i = 0; i < 3; ++i) t[i].index = i;
  t[0].mean_r2 = 0.5;
  t[1].mean_r2 = 0.7;
  t[2].mean_r2 = 0.7;
  auto r = rank_trials(t);
  EXPECT_EQ(r[0].index, 1u);
  EXPECT_EQ(r[1].index, 2u);
  EXPECT_EQ(r[2].index, 0u);
}

TEST(Search, SuggestionsInvariantToAffineRescaling) {
  SearchOptions o;
  o.startup = 4;
  o.seed = 3;
  std::vector<TrialResult> h, g;
  Rng rng(5);
  for (std::size_t i = 0; i < 12; ++i) {
    TrialResult t;
    t.index = i;
    t.config = HeadConfig::from_indices(detail::random_indices(rng));
    t.mean_r2 = rng.uniform01();
    h.push_back(t);
    t.mean_r2 = 3.0 * t.mean_r2 - 7.0;
    g.push_back(t);
  }
  for (std::size_t k = 12; k < 20; ++k) EXPECT_EQ(suggest(h, o, k), suggest(g, o, k));
  EXPECT_EQ(rank_trials(h)[0].index, rank_trials(g)[0].index);
  o.random_search = true;
  EXPECT_EQ(suggest(h, o, 12), suggest({}, o, 12));
}

TEST(Refit, ReportAndPermutationNull) {
  const auto& s = setup();
  const auto plan = make_cv_plan(s.data.size(), 2);
  TrialResult best;
  best.config.batch_size = 8;
  best.config.learning_rate = 1e-3;
  best.config.stack_depth = 1;
  best.config.dropout = 0.0;
  best.folds[0] = {0.3, 0.4, 0.9, 0.80};
  best.folds[1] = {0.35, 0.45, 0.9, 0.82};
  best.folds[2] = {0.32, 0.41, 0.9, 0.81};
  auto rep = refit_and_test(s.encoder, best, s.data, plan, 9);
  EXPECT_EQ(rep.test_pred.size(), plan.test.size());
  EXPECT_NEAR(rep.cv[3].mean, 0.81, 1e-12);
  EXPECT_NEAR(rep.cv[3].s_n, 0.01, 1e-12);
  const std::string csv = report_csv(rep);
  EXPECT_NE(csv.find("metric,cv_mean,cv_s_n,test,cell\nMAE,"), std::string::npos);
  EXPECT_NE(csv.find("0.810 \xC2\xB1 0.010 ("), std::string::npos);
  EXPECT_EQ(regression_metrics(rep.test_ref, rep.test_ref).r2, 1.0);

  EncodedDataset shuffled = s.data;
  Rng rng(4);
  rng.shuffle(shuffled.labels);
  auto null_rep = refit_and_test(s.encoder, best, shuffled, plan, 9);
  EXPECT_LE(null_rep.test.r2, 0.1);
}

TEST(Dataset, CsvParsing) {
  auto d = parse_regression_csv({"smiles,label", "CCO,1.5", "", "c1ccccc1,-2e-1"});
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.smiles[1], "c1ccccc1");
  EXPECT_EQ(d.labels[1], -0.2);
  EXPECT_NEAR(parse_regression_csv({"CCO,100"}, true).labels[0], 2.0, 1e-15);
  try {
    parse_regression_csv({"smiles,label", "CCO,high"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonNumericLabels);
  }
  try {
    parse_regression_csv({"smiles,label"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyDataset);
  }
  try {
    search(setup().encoder, EncodedDataset{}, CVPlan{}, quick(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyDataset);
  }
}
