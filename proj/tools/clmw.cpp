//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 ok, 2 validation error, 3 every run
// of an experiment diverged.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clmw/common.hpp"
#include "clmw/datasets.hpp"
#include "clmw/encoder.hpp"
#include "clmw/experiment.hpp"
#include "clmw/finetune.hpp"
#include "clmw/metrics.hpp"
#include "clmw/optim.hpp"
#include "clmw/pretrain.hpp"
#include "clmw/standardize.hpp"
#include "clmw/subword.hpp"
#include "clmw/toycorpus.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace clmw;
using clmw::nn::load_checkpoint;
using clmw::nn::read_checkpoint_header;
using clmw::nn::save_checkpoint;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  bool float32 = false;
};

constexpr int kExitValidation = 2;
constexpr int kExitDiverged = 3;

/// Relative output paths are placed under $CLMW_RUN_DIR when it is set.
fs::path out_path(const std::string& p) {
  const char* root = std::getenv("CLMW_RUN_DIR");
  fs::path q(p);
  if (root && *root && q.is_relative()) return fs::path(root) / q;
  return q;
}

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

std::vector<std::string> nonempty_lines(const std::string& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::MissingCorpus, path + " does not exist");
  std::vector<std::string> out;
  for (auto& l : read_lines(path))
    if (!trim(l).empty()) out.push_back(trim(l));
  return out;
}

// ---------------------------------------------------------------------------
// Run directories: config.json, tokenizer/, model.ckpt

struct RunConfig {
  EncoderConfig model = EncoderConfig::preset("tiny");
  TrainConfig train;
  json tokenizer = json::object();  // trainer settings or {"path": dir}
};

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  try {
    if (j.contains("model")) c.model = j["model"].get<EncoderConfig>();
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    if (j.contains("tokenizer")) c.tokenizer = j["tokenizer"];
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("config: ") + e.what());
  }
  return c;
}

tok::TrainerOptions trainer_options(const json& t) {
  return {t.value("vocab_size", tok::kDefaultVocabSize), t.value("min_frequency", tok::kDefaultMinFrequency),
          t.value("max_len", tok::kDefaultMaxLen)};
}

template <class T>
Encoder<T> load_encoder(const fs::path& run, tok::SubwordModel& tk) {
  const RunConfig rc = parse_run_config(json::parse(read_file((run / "config.json").string())));
  tk = tok::SubwordModel::load(run / "tokenizer");
  EncoderConfig mc = rc.model;
  mc.vocab_size = tk.size();
  Encoder<T> enc(mc, 0);
  load_checkpoint((run / "model.ckpt").string(), enc.params());
  return enc;
}

bool checkpoint_is_float32(const fs::path& ckpt) {
  return read_checkpoint_header(ckpt.string()).value("dtype", "float64") == "float32";
}

// ---------------------------------------------------------------------------
// Verbs

int cmd_standardize(const std::string& protocol, const std::string& salts, const std::string& in,
                    const std::string& out) {
  const auto p = chem::parse_protocol(protocol);
  const chem::SaltList list = salts.empty() ? chem::SaltList::standard() : chem::SaltList::from_file(salts);
  const auto res = chem::standardize_corpus(read_lines(in), p, list);
  const fs::path o = out_path(out);
  if (o.has_parent_path()) fs::create_directories(o.parent_path());
  write_lines(o.string(), res.output);
  write_lines(o.string() + ".rejects.csv", chem::rejects_csv(res.rejects));
  emit({{"protocol", chem::protocol_name(p)},
        {"written", res.output.size()},
        {"rejected", res.rejects.size()},
        {"output_hash", hash_lines(res.output)}});
  return 0;
}

int cmd_bin_plan(std::uint64_t a, int k_max, std::optional<std::uint64_t> target) {
  const auto plan = make_bin_plan(a, k_max, target);
  emit({{"a", plan.a}, {"k_max", plan.k_max}, {"sizes", plan.sizes}});
  return 0;
}

int cmd_inject_noise(const Globals& g, int tau, double nu, const std::string& base_path, const std::string& alt_path,
                     double train_frac, std::optional<std::uint64_t> a, int k_max, bool prefix, const std::string& out) {
  const auto base = nonempty_lines(base_path), alt = nonempty_lines(alt_path);
  const std::uint64_t seed = g.seed.value_or(0);
  const auto split = make_split(base.size(), train_frac, seed);
  const auto grid = noise_counts(tau, nu, split.n_train, split.n_valid, a.value_or(first_bin_for(split.n_train, k_max)), k_max);
  const auto mixed = materialize_mixed_corpus(base, alt, grid, split, seed, prefix);
  emit(write_mixed_corpus(out_path(out), mixed, grid, split, seed));
  return 0;
}

int cmd_train_tokenizer(const std::string& algorithm, std::size_t vocab, std::size_t min_freq, std::size_t max_len,
                        const std::string& corpus, const std::string& out) {
  const auto lines = nonempty_lines(corpus);
  const auto m = tok::train(tok::parse_algorithm(algorithm), lines, {vocab, min_freq, max_len});
  emit(m.save(out_path(out)));
  return 0;
}

int cmd_encode(const std::string& tokenizer, const std::string& in, const std::string& out) {
  const auto m = tok::SubwordModel::load(tokenizer);
  std::vector<std::string> rows;
  for (const auto& line : nonempty_lines(in)) {
    std::string r;
    for (int id : m.encode(line).ids) r += (r.empty() ? "" : " ") + std::to_string(id);
    rows.push_back(r);
  }
  if (out.empty()) {
    for (const auto& r : rows) std::cout << r << "\n";
  } else {
    write_lines(out_path(out).string(), rows);
  }
  return 0;
}

template <class T>
int pretrain_impl(const Globals& g, const std::string& config, const std::string& train_path,
                  const std::string& valid_path, const std::string& out) {
  const json cfg_json = json::parse(read_file(config));
  RunConfig rc = parse_run_config(cfg_json);
  if (g.seed) rc.train.model_seed = rc.train.data_seed = *g.seed;
  rc.train.threads = g.threads;
  const auto train_lines = nonempty_lines(train_path), valid_lines = nonempty_lines(valid_path);
  const fs::path dir = out_path(out);
  fs::create_directories(dir / "checkpoints");
  tok::SubwordModel tk;
  if (rc.tokenizer.contains("path")) {
    tk = tok::SubwordModel::load(rc.tokenizer["path"].get<std::string>());
  } else {
    tk = tok::train(tok::parse_algorithm(rc.tokenizer.value("algorithm", "wordpiece")), train_lines,
                    trainer_options(rc.tokenizer));
  }
  tk.save(dir / "tokenizer");
  rc.model.vocab_size = tk.size();
  json saved = cfg_json;
  saved["model"] = rc.model;
  saved["train"] = rc.train;
  write_file((dir / "config.json").string(), saved.dump(2) + "\n");

  Encoder<T> model(rc.model, rc.train.model_seed);
  std::string csv = metrics_csv_header() + "\n";
  TrainHooks<T> hooks;
  hooks.on_record = [&](const MetricsRecord& r) {
    csv += to_csv(r) + "\n";
    std::cerr << to_csv(r) << "\n";
  };
  hooks.on_epoch = [&](std::size_t e, const Encoder<T>& m) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch-%03zu.ckpt", e);
    save_checkpoint((dir / "checkpoints" / name).string(), m.params(), rc.train.model_seed, e);
  };
  const RunManifest man = train(model, tk, train_lines, valid_lines, rc.train, hooks);
  write_file((dir / "metrics.csv").string(), csv);
  RunManifest out_man = man;
  out_man.config["train_file"] = train_path;
  out_man.config["valid_file"] = valid_path;
  out_man.config["float32"] = std::is_same_v<T, float>;
  write_file((dir / "manifest.json").string(), manifest_to_json(out_man).dump(2) + "\n");
  save_checkpoint((dir / "model.ckpt").string(), model.params(), rc.train.model_seed, man.optimizer_steps,
                  {{"best_epoch", man.best_epoch}});
  emit({{"stop_reason", man.stop_reason},
        {"epochs_run", man.epochs_run},
        {"best_epoch", man.best_epoch},
        {"best_valid_loss", man.best_valid_loss},
        {"out", dir.string()}});
  return man.stop_reason == "diverged" ? kExitDiverged : 0;
}

template <class T>
int evaluate_impl(const Globals& g, const fs::path& run, const std::string& data) {
  tok::SubwordModel tk;
  const Encoder<T> enc = load_encoder<T>(run, tk);
  const RunConfig rc = parse_run_config(json::parse(read_file((run / "config.json").string())));
  const auto seqs = encode_corpus(tk, enc, nonempty_lines(data));
  const auto rec = evaluate_encoded(enc, seqs, rc.train.mask, g.seed.value_or(rc.train.data_seed), g.threads, 0, "eval");
  emit({{"loss", rec.loss}, {"acc", rec.acc}, {"wf1", rec.wf1}, {"pppl", rec.pppl}, {"sequences", seqs.size()}});
  return 0;
}

struct FinetuneArgs {
  std::string run, preset = "toy", data, out;
  std::size_t trials = 50, max_epochs = 100, patience = 5, refit_epochs = 20, vocab = 60;
  bool random_search = false, log10 = false;
};

template <class T>
int finetune_impl(const Globals& g, const FinetuneArgs& a) {
  const auto data = load_regression_csv(a.data, a.log10);
  tok::SubwordModel tk;
  Encoder<T> enc;
  if (!a.run.empty()) {
    enc = load_encoder<T>(a.run, tk);
  } else {
    tk = tok::train(tok::Algorithm::BPE, data.smiles, {a.vocab, 2, tok::kDefaultMaxLen});
    EncoderConfig mc = EncoderConfig::preset(a.preset);
    mc.vocab_size = tk.size();
    enc = Encoder<T>(mc, g.seed.value_or(0));
  }
  const auto ed = encode_dataset(tk, enc, data);
  const std::uint64_t seed = g.seed.value_or(0);
  const auto plan = make_cv_plan(ed.size(), seed);
  SearchOptions so;
  so.trials = a.trials;
  so.max_epochs = a.max_epochs;
  so.patience = a.patience;
  so.random_search = a.random_search;
  so.threads = g.threads;
  so.seed = seed;
  const auto ranked = search(enc, ed, plan, so, [](const TrialResult& t) {
    std::cerr << "trial " << t.index << " mean_r2 " << (t.diverged ? std::string("diverged") : exact(t.mean_r2)) << "\n";
  });
  const auto rep = refit_and_test(enc, ranked.front(), ed, plan, seed, a.refit_epochs);
  const fs::path dir = out_path(a.out);
  fs::create_directories(dir);
  json ledger = json::array();
  for (const auto& t : ranked) ledger.push_back(trial_to_json(t));
  write_file((dir / "plan.json").string(), plan_to_json(plan).dump(2) + "\n");
  write_file((dir / "trials.json").string(), ledger.dump(2) + "\n");
  write_file((dir / "report.csv").string(), report_csv(rep));
  const json summary = {{"best", trial_to_json(ranked.front())},
                        {"test", {{"mae", rep.test.mae}, {"rmse", rep.test.rmse}, {"pearson_r", rep.test.pearson_r}, {"r2", rep.test.r2}}}};
  write_file((dir / "report.json").string(), summary.dump(2) + "\n");
  emit(summary);
  return 0;
}

/// Values of `col` from metric CSVs. A literal header column is read from
/// every row; "T-<m>" / "V-<m>" picks the best-validation-epoch row of each
/// metrics.csv file.
std::vector<double> collect_column(const std::string& col, const std::vector<std::string>& files) {
  std::vector<double> out;
  for (const auto& f : files) {
    const auto lines = nonempty_lines(f);
    if (lines.empty()) throw Error(ErrorCode::EmptyInput, f + " is empty");
    const auto header = split(lines[0], ',');
    auto find = [&](const std::string& name) -> std::optional<std::size_t> {
      for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
      return std::nullopt;
    };
    auto num = [&](const std::string& s) {
      try {
        return std::stod(s);
      } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidArgument, f + ": non-numeric value '" + s + "'");
      }
    };
    if (auto c = find(col)) {
      for (std::size_t r = 1; r < lines.size(); ++r) out.push_back(num(split(lines[r], ',').at(*c)));
      continue;
    }
    const auto dash = col.find('-');
    const auto split_col = find("split"), epoch_col = find("epoch"), loss_col = find("loss");
    if (dash == std::string::npos || !split_col || !epoch_col || !loss_col)
      throw Error(ErrorCode::InvalidArgument, f + " has no column '" + col + "'");
    std::string metric = col.substr(dash + 1);
    for (auto& ch : metric) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    const auto mcol = find(metric);
    if (!mcol) throw Error(ErrorCode::InvalidArgument, f + " has no metric '" + metric + "'");
    const std::string want = col[0] == 'T' ? "train" : "valid";
    std::string best_epoch;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t r = 1; r < lines.size(); ++r) {
      const auto v = split(lines[r], ',');
      if (v.at(*split_col) == "valid" && num(v.at(*loss_col)) < best) {
        best = num(v.at(*loss_col));
        best_epoch = v.at(*epoch_col);
      }
    }
    for (std::size_t r = 1; r < lines.size(); ++r) {
      const auto v = split(lines[r], ',');
      if (v.at(*split_col) == want && v.at(*epoch_col) == best_epoch) out.push_back(num(v.at(*mcol)));
    }
  }
  return out;
}

int cmd_stats(const std::string& col, const std::vector<std::string>& files) {
  const auto values = collect_column(col, files);
  if (values.size() == 1) {
    emit({{"n", 1}, {"mean", values[0]}, {"s_N", nullptr}, {"t", nullptr}, {"ci_half", nullptr}});
    return 0;
  }
  const auto s = summarize(values);
  emit({{"n", s.n}, {"mean", s.mean}, {"s_N", s.s_n}, {"t", s.t_crit}, {"ci_half", s.ci_half}});
  return 0;
}

int cmd_experiment(const Globals& g, const std::string& spec_path, const std::string& out) {
  const json j = json::parse(read_file(spec_path));
  const auto spec = experiment_from_json(j, fs::path(spec_path).parent_path());
  RunOptions ro;
  ro.threads = g.threads;
  ro.float32 = g.float32;
  ro.log = [](const std::string& m) { std::cerr << m << "\n"; };
  const fs::path dir = out_path(out.empty() ? "runs/" + spec.name : out);
  const auto sum = run_experiment(spec, dir, ro);
  emit({{"out", dir.string()}, {"runs", sum.runs.size()}, {"trained", sum.trained}, {"skipped", sum.skipped},
        {"diverged", sum.diverged}});
  return !sum.runs.empty() && sum.diverged == sum.runs.size() ? kExitDiverged : 0;
}

int cmd_report(const std::string& dir, const std::string& metric, const std::string& format, const std::string& out) {
  const auto text = render(aggregate(dir, metric), format);
  if (out.empty()) {
    std::cout << text;
  } else {
    write_file(out_path(out).string(), text);
  }
  return 0;
}

int cmd_toy(const Globals& g, std::size_t count, const std::string& out) {
  ToyCorpusOptions o;
  o.count = count;
  o.seed = g.seed.value_or(0);
  const auto c = make_aligned_corpora(o);
  const fs::path dir = out_path(out);
  fs::create_directories(dir);
  write_lines((dir / "raw.txt").string(), c.raw);
  write_lines((dir / "base.txt").string(), c.base);
  write_lines((dir / "alt.txt").string(), c.alt);
  // 80/20 split of the base corpus and a synthetic regression target
  const auto split = make_split(c.base.size(), 0.8, o.seed);
  std::vector<std::string> train, valid, labels{"smiles,label"};
  for (auto i : split.train_indices) train.push_back(c.base[i]);
  for (auto i : split.valid_indices) valid.push_back(c.base[i]);
  for (const auto& s : c.base) {
    const double y = 0.05 * static_cast<double>(s.size()) + 0.3 * static_cast<double>(std::count(s.begin(), s.end(), 'O')) +
                     0.5 * static_cast<double>(std::count(s.begin(), s.end(), 'N'));
    labels.push_back(s + "," + exact(y));
  }
  write_lines((dir / "train.txt").string(), train);
  write_lines((dir / "valid.txt").string(), valid);
  write_lines((dir / "labels.csv").string(), labels);
  emit({{"count", c.raw.size()},
        {"files",
         {{"raw.txt", hash_lines(c.raw)},
          {"base.txt", hash_lines(c.base)},
          {"alt.txt", hash_lines(c.alt)},
          {"train.txt", hash_lines(train)},
          {"valid.txt", hash_lines(valid)},
          {"labels.csv", hash_lines(labels)}}}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clmw - chemical language model workbench"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Random seed")->expected(1);
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--float32", g.float32, "Train and evaluate in 32-bit floats");
  app.fallthrough();

  std::function<int()> run;

  // standardize
  std::string protocol = "chembl", salts, in, out;
  auto* st = app.add_subcommand("standardize", "Standardize a SMILES corpus");
  st->add_option("--protocol", protocol)->check(CLI::IsMember({"pubchem", "chembl"}));
  st->add_option("--salts", salts, "Salt list (one SMILES per line)");
  st->add_option("input", in)->required();
  st->add_option("output", out)->required();
  st->callback([&] { run = [&] { return cmd_standardize(protocol, salts, in, out); }; });

  // bin-plan
  std::uint64_t bin_a = kPubChemBinA;
  int k_max = kPubChemKMax;
  std::optional<std::uint64_t> target;
  auto* bp = app.add_subcommand("bin-plan", "Dataset size bins a * 2^k (+ b)");
  bp->add_option("--a", bin_a);
  bp->add_option("--kmax", k_max);
  bp->add_option("--target", target, "Exact size of the last bin");
  bp->callback([&] { run = [&] { return cmd_bin_plan(bin_a, k_max, target); }; });

  // inject-noise
  int tau = 0;
  double nu = 0.0, train_frac = 0.8;
  std::string base_file, alt_file;
  std::optional<std::uint64_t> noise_a;
  bool prefix = false;
  std::string noise_out = "noise";
  auto* inj = app.add_subcommand("inject-noise", "Mix alternate-protocol lines into a split corpus");
  inj->add_option("--tau", tau)->required();
  inj->add_option("--nu", nu)->required();
  inj->add_option("--base", base_file)->required();
  inj->add_option("--alt", alt_file)->required();
  inj->add_option("--train-frac", train_frac);
  inj->add_option("--a", noise_a, "Bin unit (default n_train / 2^kmax)");
  inj->add_option("--kmax", k_max);
  inj->add_flag("--prefix", prefix, "Replace a contiguous prefix instead of shuffled positions");
  inj->add_option("--out", noise_out);
  inj->callback([&] {
    run = [&] { return cmd_inject_noise(g, tau, nu, base_file, alt_file, train_frac, noise_a, k_max, prefix, noise_out); };
  });

  // train-tokenizer
  std::string algorithm = "wordpiece", corpus, tk_out = "tokenizer";
  std::size_t vocab = tok::kDefaultVocabSize, min_freq = tok::kDefaultMinFrequency, max_len = tok::kDefaultMaxLen;
  auto* tt = app.add_subcommand("train-tokenizer", "Train a WordPiece or BPE tokenizer");
  tt->add_option("--algorithm", algorithm)->check(CLI::IsMember({"wordpiece", "bpe"}));
  tt->add_option("--vocab-size", vocab);
  tt->add_option("--min-frequency", min_freq);
  tt->add_option("--max-len", max_len);
  tt->add_option("--out", tk_out);
  tt->add_option("corpus", corpus)->required();
  tt->callback([&] { run = [&] { return cmd_train_tokenizer(algorithm, vocab, min_freq, max_len, corpus, tk_out); }; });

  // encode
  std::string tk_dir, enc_in, enc_out;
  auto* en = app.add_subcommand("encode", "Encode lines to token ids");
  en->add_option("--tokenizer", tk_dir)->required();
  en->add_option("--out", enc_out);
  en->add_option("input", enc_in)->required();
  en->callback([&] { run = [&] { return cmd_encode(tk_dir, enc_in, enc_out); }; });

  // pretrain
  std::string config, train_file, valid_file, run_out = "pretrain";
  auto* pt = app.add_subcommand("pretrain", "Masked-LM pretraining");
  pt->add_option("--config", config)->required();
  pt->add_option("--train", train_file)->required();
  pt->add_option("--valid", valid_file)->required();
  pt->add_option("--out", run_out);
  pt->callback([&] {
    run = [&] {
      return g.float32 ? pretrain_impl<float>(g, config, train_file, valid_file, run_out)
                       : pretrain_impl<double>(g, config, train_file, valid_file, run_out);
    };
  });

  // evaluate
  std::string eval_run, eval_data;
  auto* ev = app.add_subcommand("evaluate", "Masked-LM metrics of a pretrained run on a corpus");
  ev->add_option("--run", eval_run)->required();
  ev->add_option("--data", eval_data)->required();
  ev->callback([&] {
    run = [&] {
      return checkpoint_is_float32(fs::path(eval_run) / "model.ckpt") ? evaluate_impl<float>(g, eval_run, eval_data)
                                                                       : evaluate_impl<double>(g, eval_run, eval_data);
    };
  });

  // finetune
  FinetuneArgs fa;
  fa.out = "finetune";
  auto* ft = app.add_subcommand("finetune", "Cross-validated regression fine-tuning");
  ft->add_option("--run", fa.run, "Pretrained run directory (otherwise a fresh encoder)");
  ft->add_option("--preset", fa.preset, "Encoder preset when no --run is given");
  ft->add_option("--vocab-size", fa.vocab, "Tokenizer size when no --run is given");
  ft->add_option("--data", fa.data, "CSV with columns smiles,label")->required();
  ft->add_option("--out", fa.out);
  ft->add_option("--trials", fa.trials);
  ft->add_option("--max-epochs", fa.max_epochs);
  ft->add_option("--patience", fa.patience);
  ft->add_option("--refit-epochs", fa.refit_epochs);
  ft->add_flag("--random-search", fa.random_search, "Uniform random suggestions only");
  ft->add_flag("--log10", fa.log10, "Fit log10 of the labels");
  ft->callback([&] {
    run = [&] {
      const bool f32 = fa.run.empty() ? g.float32 : checkpoint_is_float32(fs::path(fa.run) / "model.ckpt");
      return f32 ? finetune_impl<float>(g, fa) : finetune_impl<double>(g, fa);
    };
  });

  // stats summarize
  std::string col;
  std::vector<std::string> stat_files;
  auto* stats = app.add_subcommand("stats", "Summary statistics");
  stats->require_subcommand(1);
  auto* summ = stats->add_subcommand("summarize", "Mean, s_N and 95% CI of a column across files");
  summ->add_option("--col", col)->required();
  summ->add_option("files", stat_files)->required();
  summ->callback([&] { run = [&] { return cmd_stats(col, stat_files); }; });

  // experiment
  std::string spec_file, exp_out;
  auto* ex = app.add_subcommand("experiment", "Run every axis point x seed of an experiment spec");
  ex->add_option("spec", spec_file)->required();
  ex->add_option("--out", exp_out);
  ex->callback([&] { run = [&] { return cmd_experiment(g, spec_file, exp_out); }; });

  // report
  std::string rep_dir, metric = "V-PPPL", format = "csv", rep_out;
  auto* rp = app.add_subcommand("report", "Aggregate an experiment directory into a sheet");
  rp->add_option("dir", rep_dir)->required();
  rp->add_option("--metric", metric);
  rp->add_option("--format", format);
  rp->add_option("--out", rep_out);
  rp->callback([&] { run = [&] { return cmd_report(rep_dir, metric, format, rep_out); }; });

  // make-toy-corpus
  std::size_t toy_count = 1000;
  std::string toy_out = "toy";
  auto* mk = app.add_subcommand("make-toy-corpus", "Write raw / base / alt toy SMILES corpora");
  mk->add_option("--count", toy_count);
  mk->add_option("--out", toy_out);
  mk->callback([&] { run = [&] { return cmd_toy(g, toy_count, toy_out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }
  if (*seed_opt) g.seed = seed_value;
  try {
    return run ? run() : kExitValidation;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}
