//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Pass criterion numbers as arguments to run
// a subset, e.g. `acceptance 1 2 3`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "clmw/datasets.hpp"
#include "clmw/encoder.hpp"
#include "clmw/experiment.hpp"
#include "clmw/finetune.hpp"
#include "clmw/metrics.hpp"
#include "clmw/pretrain.hpp"
#include "clmw/standardize.hpp"
#include "clmw/subword.hpp"
#include "clmw/toycorpus.hpp"
#include "gradcheck.hpp"
#include "metric_oracles.hpp"

using namespace clmw;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool near_rel(double a, double b, double rel) { return std::abs(a - b) <= rel * std::abs(b); }

// Rounds to the 4 decimal places the reference values are given at.
double r4(double v) { return std::round(v * 1e4) / 1e4; }

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("clmw_accept_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------

void pppl_identity(Outcome& o) {
  // (mean V-Loss, mean V-PPPL): seed battery Tiny/Small/Base, then BPE Tiny/Small/Base
  const std::pair<double, double> rows[] = {{0.4696, 1.5993}, {0.1836, 1.2016}, {0.1359, 1.1455},
                                            {0.4340, 1.5435}, {0.1614, 1.1752}, {0.1163, 1.1233}};
  double worst = 0;
  for (auto [loss, ppl] : rows) {
    const double rel = std::abs(pppl(loss) - ppl) / ppl;
    worst = std::max(worst, rel);
    o.require(rel <= 5e-4, "exp(" + fixed(loss, 4) + ")");
  }
  o.detail << "max relative error " << worst << " over 6 rows";
}

void ci_reproduction(Outcome& o) {
  const std::vector<double> tiny{0.4664, 0.4727, 0.4663, 0.4669, 0.4755};
  const std::vector<double> small{0.2352, 0.2359, 0.2353, 0.2359, 0.2342};
  const std::vector<double> base{0.1775, 0.1777, 0.1782, 0.1781};  // diverged seed excluded
  const auto t = summarize(tiny), s = summarize(small), b = summarize(base);
  o.require(r4(t.mean) == 0.4696 && r4(t.ci_half) == 0.0053, "Tiny");
  o.require(r4(s.mean) == 0.2353 && r4(s.ci_half) == 0.0009, "Small");
  o.require(r4(b.mean) == 0.1779 && r4(b.s_n) == 0.0003, "Base");
  o.detail << "Tiny " << fixed(t.mean, 4) << " +/- " << fixed(t.ci_half, 4) << ", Small " << fixed(s.mean, 4) << " +/- "
           << fixed(s.ci_half, 4) << ", Base " << fixed(b.mean, 4) << " s_N " << fixed(b.s_n, 4) << " (CI "
           << fixed(b.ci_half, 4) << ")";
}

void sn_reproduction(Outcome& o) {
  const auto s = summarize(std::vector<double>{0.5851, 0.5718, 0.5585});
  o.require(r4(s.mean) == 0.5718, "mean");
  o.require(r4(s.s_n) == 0.0133, "s_N");
  o.detail << "mean " << fixed(s.mean, 4) << " s_N " << fixed(s.s_n, 4);
}

void binning(Outcome& o) {
  const std::uint64_t expected[] = {2979620, 5959240, 11918480, 23836960, 47673920, 95347844};
  for (int k = 0; k <= 5; ++k) o.require(bin_size(k, kPubChemBinA, 5) == expected[k], "bin " + std::to_string(k));
  const auto g = noise_counts(5, 1.0, 95347844, 23836962, kPubChemBinA);
  o.require(g.np_train == 0, "N_P_train at tau=5");
  o.require(g.nc_valid == 23836962, "N_C_valid at nu=1");
  o.detail << "bins " << bin_size(0, kPubChemBinA, 5) << " .. " << bin_size(5, kPubChemBinA, 5) << ", N_P_train "
           << g.np_train << ", N_C_valid " << g.nc_valid;
}

void effective_batch_rows(Outcome& o) {
  const std::size_t rows[][4] = {{4, 4, 64, 1}, {2, 4, 64, 2}, {1, 8, 128, 1}};
  for (const auto& r : rows) {
    const auto b = effective_batch(r[0], r[1], r[2], r[3]);
    o.require(b == 1024, "row");
    o.detail << b << " ";
  }
}

void standardization(Outcome& o) {
  using namespace chem;
  const auto t0 = Clock::now();
  const std::pair<const char*, const char*> pairs[] = {{"CC(=O)[O-]", "CC(=O)O"},
                                                       {"O=[As]([O-])([O-])O", "O=[As](O)(O)O"},
                                                       {"[NH4+]", "N"},
                                                       {"[CH3-]", "C"},
                                                       {"CS(C)=O", "C[S+](C)[O-]"}};
  std::size_t golden = 0;
  for (auto [pub, chembl] : pairs) {
    const MolGraph g = parse_smiles(pub);
    const bool ok = graphs_equal(standardize(g, Protocol::PubChemLike), parse_smiles(pub)) &&
                    graphs_equal(standardize(g, Protocol::ChEMBLLike), parse_smiles(chembl));
    o.require(ok, pub);
    golden += ok;
  }
  const std::pair<const char*, const char*> rewrites[] = {{"CN(=O)=O", "C[N+](=O)[O-]"},
                                                          {"CN=N#N", "CN=[N+]=[N-]"},
                                                          {"C=P(=O)O", "C=[P+]([O-])O"},
                                                          {"O=Cl(=O)O", "[O-][Cl+2]([O-])O"}};
  for (auto [in, out] : rewrites) {
    const bool ok = graphs_equal(cleanup_rewrites(parse_smiles(in)), parse_smiles(out));
    o.require(ok, in);
    golden += ok;
  }
  const auto corpus = make_toy_corpus({.count = 1000, .seed = 1});
  std::size_t unstable = 0;
  for (Protocol p : {Protocol::PubChemLike, Protocol::ChEMBLLike})
    for (const auto& s : corpus) {
      const MolGraph once = standardize(parse_smiles(s), p);
      unstable += !graphs_equal(once, standardize(once, p));
    }
  const double secs = seconds_since(t0);
  o.require(unstable == 0, "idempotence");
  o.require(secs < 5.0, "runtime");
  o.detail << golden << "/9 golden, " << unstable << " non-idempotent of 2000, " << fixed(secs, 2) << " s";
}

void tokenizers(Outcome& o) {
  const auto corpus = make_toy_corpus({.count = 1000, .seed = 10});
  std::size_t mismatches = 0, over_cap = 0;
  for (tok::Algorithm a : {tok::Algorithm::BPE, tok::Algorithm::WordPiece}) {
    const auto d1 = scratch("tok1"), d2 = scratch("tok2");
    tok::train(a, corpus, {}).save(d1);
    tok::train(a, corpus, {}).save(d2);
    o.require(read_file((d1 / "vocab.txt").string()) == read_file((d2 / "vocab.txt").string()) &&
                  read_file((d1 / "merges.txt").string()) == read_file((d2 / "merges.txt").string()),
              std::string("deterministic ") + tok::algorithm_name(a));
    const auto m = tok::SubwordModel::load(d1);
    for (const auto& s : corpus) {
      const auto e = m.encode(s);
      const auto d = m.decode(e.ids);
      mismatches += d.text != s || d.lossy;
      for (int id : e.ids) mismatches += id == tok::kUnk;
    }
    std::string long_line;
    for (std::size_t i = 0; long_line.size() < 6000; ++i) long_line += corpus[i] + ".";
    const auto capped = m.encode(long_line);
    over_cap += capped.ids.size() != 512 || !capped.truncated || capped.ids.back() != tok::kSep;
    // every merge of a pair seen once would be admitted at min frequency 1
    const std::vector<std::string> rare{"AB", "CD"};
    o.require(tok::train(a, rare, {.vocab_size = 50, .min_frequency = 2}).merges.empty(),
              std::string("min frequency ") + tok::algorithm_name(a));
  }
  o.require(mismatches == 0, "round trip");
  o.require(over_cap == 0, "cap 512");
  o.detail << mismatches << " round-trip mismatches over 2x1000 lines, cap violations " << over_cap;
}

void gradient_check(Outcome& o) {
  const auto t0 = Clock::now();
  EncoderConfig c;
  c.hidden = 8;
  c.layers = 1;
  c.heads = 2;
  c.intermediate = 16;
  c.vocab_size = 20;
  c.max_positions = 16;
  c.hidden_dropout = c.attn_dropout = 0.0;
  c.init_std = 0.3;
  Encoder<double> enc(c, 8);
  const std::vector<int> ids{2, 4, 11, 4, 17, 3}, rows{1, 3, 4}, targets{9, 6, 12};
  auto loss = [&](const Encoder<double>& m, double* sink) {
    Rng rng(0);
    nn::Tape<double> t;
    auto h = m.hidden(t, ids, sink, false, rng);
    auto l = t.cross_entropy_masked(m.mlm_logits(t, h, rows, sink), targets);
    if (sink) t.backward(l);
    return t.scalar(l);
  };
  std::vector<double> grad(enc.params().size(), 0.0);
  loss(enc, grad.data());
  Encoder<double> probe = enc;
  const auto r = testing_oracles::finite_difference_check(
      [&](const std::vector<double>& p) {
        probe.params().values() = p;
        return loss(probe, nullptr);
      },
      enc.params().values(), grad, 64, 9);
  const double secs = seconds_since(t0);
  o.require(r.checked >= 50, "coordinates");
  o.require(r.max_rel_err < 1e-4, "relative error");
  o.require(secs < 30.0, "runtime");
  o.detail << r.checked << " coordinates, max relative error " << r.max_rel_err << ", " << fixed(secs, 2) << " s";
}

void parameter_counts(Outcome& o) {
  const double tiny = static_cast<double>(count_parameters(EncoderConfig::preset("tiny")));
  const double small = static_cast<double>(count_parameters(EncoderConfig::preset("small")));
  o.require(near_rel(tiny, 4.4e6, 0.02), "Tiny");
  o.require(near_rel(small, 28.5e6, 0.02), "Small");
  o.detail << "Tiny " << tiny << " (" << fixed(100 * (tiny / 4.4e6 - 1), 2) << "%), Small " << small << " ("
           << fixed(100 * (small / 28.5e6 - 1), 2) << "%)";
}

void masking(Outcome& o) {
  const auto corpus = make_toy_corpus({.count = 2000, .seed = 4});
  const auto tk = tok::train(tok::Algorithm::WordPiece, corpus, {.vocab_size = 80});
  std::vector<std::vector<int>> seqs;
  for (const auto& s : corpus) seqs.push_back(tk.encode(s).ids);

  std::size_t tokens = 0, masked = 0;
  for (std::size_t i = 0; tokens < 10000; ++i) {
    const auto p = make_mask(seqs[i], MaskPolicy{}, 17, 1, 0, i, tk.size());
    tokens += seqs[i].size() - 2;
    masked += p.positions.size();
  }
  const double rate = static_cast<double>(masked) / static_cast<double>(tokens);
  o.require(std::abs(rate - 0.15) <= 0.01, "mask rate");

  std::size_t long_seqs = 0, differ = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].size() - 2 < 20) continue;
    ++long_seqs;
    differ += make_mask(seqs[i], MaskPolicy{}, 4, 1, 0, i, tk.size()).positions !=
              make_mask(seqs[i], MaskPolicy{}, 4, 2, 0, i, tk.size()).positions;
  }
  const double dyn = long_seqs ? static_cast<double>(differ) / static_cast<double>(long_seqs) : 0.0;
  o.require(long_seqs >= 20 && dyn >= 0.95, "dynamic masking");

  EncoderConfig c = EncoderConfig::preset("toy");
  c.vocab_size = tk.size();
  Encoder<double> model(c, 2);
  std::vector<MaskPlan> plans;
  for (std::size_t i = 0; i < 16; ++i) plans.push_back(make_mask(seqs[i], MaskPolicy{}, 3, 1, 0, i, tk.size()));
  const auto st = mlm_step<double>(model, plans, nullptr, false, 0);
  double nll = 0;
  std::size_t cnt = 0;
  for (const auto& p : plans) {
    const auto lp = model.forward_mlm({p.input});
    for (std::size_t k = 0; k < p.positions.size(); ++k, ++cnt)
      nll -= lp.data[static_cast<std::size_t>(p.positions[k]) * tk.size() + static_cast<std::size_t>(p.targets[k])];
  }
  const double diff = std::abs(st.nll_sum / static_cast<double>(st.masked) - nll / static_cast<double>(cnt));
  o.require(st.masked == cnt && diff <= 1e-9, "batched loss");
  o.detail << "rate " << fixed(rate, 4) << " over " << tokens << " tokens, dynamic " << differ << "/" << long_seqs
           << ", batched vs scalar |diff| " << diff;
}

void metric_oracles(Outcome& o) {
  Rng rng(21);
  double worst = 0;
  for (int it = 0; it < 200; ++it) {
    const std::size_t k = 1 + rng.uniform_index(10), n = 1 + rng.uniform_index(150);
    MaskedEvalBatch b;
    for (std::size_t i = 0; i < n; ++i) {
      const int r = static_cast<int>(rng.uniform_index(k));
      b.ref.push_back(r);
      b.pred.push_back(rng.uniform01() < 0.6 ? r : static_cast<int>(rng.uniform_index(k)));
      b.ref_logp.push_back(-rng.uniform01());
    }
    std::size_t right = 0;
    for (std::size_t i = 0; i < n; ++i) right += b.pred[i] == b.ref[i];
    worst = std::max(worst, std::abs(weighted_f1(b) - testing_oracles::brute_weighted_f1(b.pred, b.ref)));
    worst = std::max(worst, std::abs(masked_accuracy(b) - static_cast<double>(right) / static_cast<double>(n)));

    const std::size_t m = 2 + rng.uniform_index(60);
    std::vector<double> p(m), y(m);
    for (std::size_t i = 0; i < m; ++i) {
      y[i] = rng.normal() * 3.0 + 1.0;
      p[i] = y[i] + rng.normal();
    }
    double ae = 0, se = 0, my = 0, mp = 0;
    for (std::size_t i = 0; i < m; ++i) {
      ae += std::abs(p[i] - y[i]);
      se += (p[i] - y[i]) * (p[i] - y[i]);
      my += y[i];
      mp += p[i];
    }
    my /= static_cast<double>(m);
    mp /= static_cast<double>(m);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < m; ++i) {
      sxy += (p[i] - mp) * (y[i] - my);
      sxx += (p[i] - mp) * (p[i] - mp);
      syy += (y[i] - my) * (y[i] - my);
    }
    const auto rep = regression_metrics(p, y);
    worst = std::max({worst, std::abs(rep.mae - ae / static_cast<double>(m)),
                      std::abs(rep.rmse - std::sqrt(se / static_cast<double>(m))),
                      std::abs(rep.pearson_r - sxy / std::sqrt(sxx * syy)), std::abs(rep.r2 - (1.0 - se / syy))});
  }
  o.require(worst <= 1e-12, "oracle agreement");
  o.detail << "max |diff| " << worst << " over 200 instances";
}

void training_smoke(Outcome& o) {
  const auto corpus = make_toy_corpus({.count = 500, .seed = 5});
  const auto tk = tok::train(tok::Algorithm::BPE, corpus, {.vocab_size = 60});
  EncoderConfig c = EncoderConfig::preset("toy");
  c.vocab_size = tk.size();
  Encoder<double> probe(c);
  const auto ids = encode_corpus(tk, probe, corpus);
  const std::vector<std::vector<int>> tr(ids.begin(), ids.begin() + 450), va(ids.begin() + 450, ids.end());

  Encoder<double> model(c, 1);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.b_gpu = 8;
  cfg.adam.lr = 2e-3;
  cfg.early_stop.patience = 10;
  const auto man = train_encoded(model, tr, va, cfg);
  std::vector<double> losses;
  for (const auto& r : man.records)
    if (r.split == "train") losses.push_back(r.loss);
  const double ratio = losses.size() == 5 ? losses.back() / losses.front() : 1.0;
  o.require(ratio <= 0.5, "loss drop >= 50%");

  // accumulation identity: 8x1 and 4x2 micro-batching must agree bit for bit
  EncoderConfig nd = c;
  nd.hidden_dropout = nd.attn_dropout = 0.0;
  auto run = [&](std::size_t b_gpu, std::size_t n_ga) {
    Encoder<double> m(nd, 1);
    TrainConfig t;
    t.epochs = 2;
    t.b_gpu = b_gpu;
    t.n_ga = n_ga;
    t.adam.lr = 1e-3;
    t.restore_best = false;
    const std::vector<std::vector<int>> a(tr.begin(), tr.begin() + 64), v(va.begin(), va.begin() + 16);
    train_encoded(m, a, v, t);
    return m.params().values();
  };
  const bool bitwise = run(8, 1) == run(4, 2);
  o.require(bitwise, "accumulation identity");
  o.detail << "train loss " << fixed(losses.front(), 4) << " -> " << fixed(losses.back(), 4) << " (ratio "
           << fixed(ratio, 3) << "), accumulation identity " << (bitwise ? "bitwise" : "differs");
}

void noise_grid(Outcome& o) {
  const auto t0 = Clock::now();
  const auto dir = scratch("grid");
  const auto c = make_aligned_corpora({.count = 2000, .seed = 3});
  write_lines((dir / "base.txt").string(), c.base);
  write_lines((dir / "alt.txt").string(), c.alt);
  const nlohmann::json j = {{"kind", "noise_grid"},
                            {"seeds", {1, 2}},
                            {"corpus", {{"base", "base.txt"}, {"alt", "alt.txt"}}},
                            {"tau", {0, 5}},
                            {"nu", {0, 1}},
                            {"tokenizer", {{"algorithm", "bpe"}, {"vocab_size", 60}}},
                            {"model", {{"preset", "toy"}, {"max_positions", 128}}},
                            {"train", {{"epochs", 25}, {"lr", 2e-3}, {"b_gpu", 8}, {"early_stop", {{"patience", 3}}}}}};
  run_experiment(experiment_from_json(j, dir), dir / "out");
  const auto sh = aggregate(dir / "out", "V-PPPL");
  const auto& aa = sh.at("tau=0", "nu=0");
  const auto& ab = sh.at("tau=0", "nu=1");
  const auto& bb = sh.at("tau=5", "nu=1");
  const double secs = seconds_since(t0);
  o.require(aa.n() == 2 && ab.n() == 2 && bb.n() == 2, "two completed seeds per cell");
  o.require(ab.mean > aa.mean, "(A,B) > (A,A)");
  o.require(std::abs(bb.mean - aa.mean) <= 0.25 * aa.mean, "(B,B) within 25% of (A,A)");
  o.require(secs < 900.0, "runtime");
  o.detail << "V-PPPL (A,A) " << fixed(aa.mean, 3) << ", (A,B) " << fixed(ab.mean, 3) << ", (B,B) " << fixed(bb.mean, 3)
           << " (" << fixed(100 * (bb.mean / aa.mean - 1), 1) << "% vs (A,A)), " << fixed(secs, 0) << " s";
}

struct PipelineResult {
  std::vector<TrialResult> ranked;
  FinetuneReport report;
  std::vector<double> refit_params;
};

void finetune_harness(Outcome& o) {
  const auto t0 = Clock::now();
  const auto lines = make_toy_corpus({.count = 600, .seed = 5});
  const auto tk = tok::train(tok::Algorithm::BPE, lines, {60, 2, 64});
  EncoderConfig c = EncoderConfig::preset("toy");
  c.vocab_size = tk.size();
  c.max_positions = 64;
  const Encoder<double> enc(c, 1);
  const auto ids = encode_corpus(tk, enc, lines);
  // synthetic label: linear in sequence length plus noise
  EncodedDataset d;
  Rng rng(9);
  for (std::size_t i = 0; i < 150; ++i) {
    d.ids.push_back(ids[i]);
    d.labels.push_back(0.2 * static_cast<double>(ids[i].size()) + 0.1 * rng.normal());
  }
  const auto plan = make_cv_plan(d.size(), 3);
  SearchOptions so;
  so.trials = 50;
  so.seed = 4;
  auto pipeline = [&] {
    PipelineResult r;
    r.ranked = search(enc, d, plan, so);
    RegressionModel<double> refit(enc, r.ranked.front().config, 0);
    r.report = refit_and_test(enc, r.ranked.front(), d, plan, 4, 20, &refit);
    r.refit_params = refit.head().values();
    return r;
  };
  const auto a = pipeline();
  const double once = seconds_since(t0);
  const auto b = pipeline();
  bool same = a.refit_params == b.refit_params && a.report.test_pred == b.report.test_pred;
  for (std::size_t i = 0; i < a.ranked.size() && same; ++i)
    same = a.ranked[i].index == b.ranked[i].index && a.ranked[i].config == b.ranked[i].config &&
           a.ranked[i].mean_r2 == b.ranked[i].mean_r2;
  o.require(a.ranked.size() == 50, "50 trials");
  o.require(a.report.test.r2 > 0.9, "test R2 > 0.9");
  o.require(same, "bit-reproducible");

  // freeze contract: encoder gradient buffer stays exactly zero
  HeadConfig frozen;
  frozen.freeze_base_model = true;
  frozen.batch_size = 8;
  frozen.learning_rate = 1e-3;
  auto m = attach_head(enc, frozen, 2);
  const auto before = m.encoder().params().values();
  FitHooks<double> hooks;
  std::size_t nonzero = 0, calls = 0;
  hooks.after_backward = [&](const std::vector<double>& ge, const std::vector<double>&) {
    ++calls;
    for (double g : ge) nonzero += g != 0.0;
  };
  fit(m, d, plan.train_all(), {}, FitOptions{2, 0, 5}, nullptr, hooks);
  o.require(calls > 0 && nonzero == 0 && m.encoder().params().values() == before, "freeze contract");
  const double secs = seconds_since(t0);
  o.require(once < 600.0, "runtime");
  const auto& best = a.ranked.front();
  o.detail << "best trial " << best.index << " cv R2 " << fixed(best.mean_r2, 4) << ", test R2 "
           << fixed(a.report.test.r2, 4) << ", reproducible " << (same ? "yes" : "no") << ", frozen grad nonzeros "
           << nonzero << " over " << calls << " steps, pipeline " << fixed(once, 0) << " s (" << fixed(secs, 0)
           << " s including the rerun)";
}

struct Criterion {
  int id;
  const char* name;
  void (*check)(Outcome&);
};

const Criterion kCriteria[] = {
    {1, "pppl identity", pppl_identity},
    {2, "confidence intervals", ci_reproduction},
    {3, "sample standard deviation", sn_reproduction},
    {4, "size bins and noise counts", binning},
    {5, "effective batch", effective_batch_rows},
    {6, "standardization", standardization},
    {7, "tokenizers", tokenizers},
    {8, "gradient check", gradient_check},
    {9, "parameter counts", parameter_counts},
    {10, "masking", masking},
    {11, "metric oracles", metric_oracles},
    {12, "training smoke", training_smoke},
    {13, "noise grid direction", noise_grid},
    {14, "fine-tuning harness", finetune_harness},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : kCriteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      c.check(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
