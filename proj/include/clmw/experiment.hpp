//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Experiment orchestration (seed batteries, noise grids, size sweeps,
// tokenizer comparisons, fine-tuning sweeps), aggregation of run manifests
// into summary sheets, and CSV / JSON / SVG rendering.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clmw/common.hpp"
#include "clmw/datasets.hpp"
#include "clmw/encoder.hpp"
#include "clmw/finetune.hpp"
#include "clmw/metrics.hpp"
#include "clmw/optim.hpp"
#include "clmw/pretrain.hpp"
#include "clmw/subword.hpp"

namespace clmw {

namespace fs = std::filesystem;

enum class ExperimentKind { SeedBattery, NoiseGrid, SizeSweep, TokenizerAB, FinetuneSweep };

inline const char* kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::SeedBattery: return "seed_battery";
    case ExperimentKind::NoiseGrid: return "noise_grid";
    case ExperimentKind::SizeSweep: return "size_sweep";
    case ExperimentKind::TokenizerAB: return "tokenizer_ab";
    case ExperimentKind::FinetuneSweep: return "finetune_sweep";
  }
  return "";
}

inline ExperimentKind parse_kind(const std::string& s) {
  for (auto k : {ExperimentKind::SeedBattery, ExperimentKind::NoiseGrid, ExperimentKind::SizeSweep,
                 ExperimentKind::TokenizerAB, ExperimentKind::FinetuneSweep})
    if (s == kind_name(k)) return k;
  throw Error(ErrorCode::InvalidArgument, "unknown experiment kind '" + s + "'");
}

struct TokenizerSpec {
  tok::Algorithm algorithm = tok::Algorithm::WordPiece;
  std::size_t vocab_size = tok::kDefaultVocabSize;
  std::size_t min_frequency = tok::kDefaultMinFrequency;
  std::size_t max_len = tok::kDefaultMaxLen;
};

struct FinetuneSpec {
  std::string dataset;
  std::string checkpoint;  // encoder weights; empty = random initialization
  std::string tokenizer;   // tokenizer directory; empty = train on the dataset SMILES
  SearchOptions search;
  std::size_t refit_epochs = 20;
  bool log10_labels = false;
};

/// One experiment. Paths are resolved relative to `base_dir`.
struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::SeedBattery;
  std::string name = "experiment";
  fs::path base_dir = ".";
  std::vector<std::uint64_t> seeds;
  // corpora
  std::string train_path, valid_path;  // seed_battery, size_sweep, tokenizer_ab
  std::string base_path, alt_path;     // noise_grid (line-aligned)
  double train_frac = 0.8;
  std::uint64_t split_seed = 0;
  // axes
  std::vector<int> tau;
  std::vector<double> nu;
  std::vector<int> k;
  std::optional<std::uint64_t> a;
  int k_max = kPubChemKMax;
  std::vector<tok::Algorithm> algorithms;
  // shared settings
  TokenizerSpec tokenizer;
  EncoderConfig model = EncoderConfig::preset("tiny");
  TrainConfig train;
  FinetuneSpec finetune;

  void validate() const {
    if (seeds.empty()) throw Error(ErrorCode::InvalidArgument, "experiment needs at least one seed");
    if (kind == ExperimentKind::NoiseGrid && (tau.empty() || nu.empty()))
      throw Error(ErrorCode::InvalidArgument, "noise_grid needs non-empty tau and nu axes");
    if (kind == ExperimentKind::SizeSweep && k.empty()) throw Error(ErrorCode::InvalidArgument, "size_sweep needs k");
    if (kind == ExperimentKind::TokenizerAB && algorithms.empty())
      throw Error(ErrorCode::InvalidArgument, "tokenizer_ab needs algorithms");
    auto unique = [](auto v) {
      std::sort(v.begin(), v.end());
      return std::adjacent_find(v.begin(), v.end()) == v.end();
    };
    if (!unique(seeds) || !unique(tau) || !unique(nu) || !unique(k) || !unique(algorithms))
      throw Error(ErrorCode::InvalidArgument, "axis values must be unique");
    model.validate();
    train.validate();
  }

  fs::path resolve(const std::string& p) const {
    fs::path q(p);
    return q.is_absolute() ? q : base_dir / q;
  }
};

inline ExperimentSpec experiment_from_json(const nlohmann::json& j, const fs::path& base_dir = ".") {
  ExperimentSpec s;
  try {
    s.kind = parse_kind(j.at("kind").get<std::string>());
    s.name = j.value("name", s.name);
    s.base_dir = base_dir;
    s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("corpus")) {
      const auto& c = j["corpus"];
      s.train_path = c.value("train", "");
      s.valid_path = c.value("valid", "");
      s.base_path = c.value("base", "");
      s.alt_path = c.value("alt", "");
      s.train_frac = c.value("train_frac", s.train_frac);
      s.split_seed = c.value("split_seed", s.split_seed);
    }
    s.tau = j.value("tau", std::vector<int>{});
    s.nu = j.value("nu", std::vector<double>{});
    s.k = j.value("k", std::vector<int>{});
    if (j.contains("a")) s.a = j["a"].get<std::uint64_t>();
    s.k_max = j.value("k_max", s.k_max);
    for (const auto& a : j.value("algorithms", std::vector<std::string>{})) s.algorithms.push_back(tok::parse_algorithm(a));
    if (j.contains("tokenizer")) {
      const auto& t = j["tokenizer"];
      s.tokenizer.algorithm = tok::parse_algorithm(t.value("algorithm", "wordpiece"));
      s.tokenizer.vocab_size = t.value("vocab_size", s.tokenizer.vocab_size);
      s.tokenizer.min_frequency = t.value("min_frequency", s.tokenizer.min_frequency);
      s.tokenizer.max_len = t.value("max_len", s.tokenizer.max_len);
    }
    if (j.contains("model")) s.model = j["model"].get<EncoderConfig>();
    if (j.contains("train")) s.train = j["train"].get<TrainConfig>();
    if (j.contains("finetune")) {
      const auto& f = j["finetune"];
      s.finetune.dataset = f.value("dataset", "");
      s.finetune.checkpoint = f.value("checkpoint", "");
      s.finetune.tokenizer = f.value("tokenizer", "");
      s.finetune.search.trials = f.value("trials", s.finetune.search.trials);
      s.finetune.search.startup = f.value("startup", s.finetune.search.startup);
      s.finetune.search.max_epochs = f.value("max_epochs", s.finetune.search.max_epochs);
      s.finetune.search.patience = f.value("patience", s.finetune.search.patience);
      s.finetune.search.random_search = f.value("random_search", false);
      s.finetune.refit_epochs = f.value("refit_epochs", s.finetune.refit_epochs);
      s.finetune.log10_labels = f.value("log10_labels", false);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("experiment spec: ") + e.what());
  }
  s.validate();
  return s;
}

/// The shared settings that determine a run's outcome, used for run keys.
inline nlohmann::json shared_settings(const ExperimentSpec& s) {
  nlohmann::json j;
  j["kind"] = kind_name(s.kind);
  j["model"] = s.model;
  j["train"] = s.train;
  j["tokenizer"] = {{"algorithm", tok::algorithm_name(s.tokenizer.algorithm)},
                    {"vocab_size", s.tokenizer.vocab_size},
                    {"min_frequency", s.tokenizer.min_frequency},
                    {"max_len", s.tokenizer.max_len}};
  j["split"] = {{"train_frac", s.train_frac}, {"split_seed", s.split_seed}};
  if (s.kind == ExperimentKind::FinetuneSweep)
    j["finetune"] = {{"trials", s.finetune.search.trials},         {"startup", s.finetune.search.startup},
                     {"max_epochs", s.finetune.search.max_epochs}, {"patience", s.finetune.search.patience},
                     {"random_search", s.finetune.search.random_search}, {"refit_epochs", s.finetune.refit_epochs},
                     {"log10_labels", s.finetune.log10_labels}};
  return j;
}

/// One axis point of an experiment: a row and column label plus the values
/// that define it.
struct AxisPoint {
  std::string row, col;
  nlohmann::json values;
};

inline std::string axis_label(double v) {
  std::string s = fixed(v, 6);
  while (s.size() > 1 && s.back() == '0') s.pop_back();
  if (s.back() == '.') s.pop_back();
  return s;
}

/// Axis points in row-major order.
inline std::vector<AxisPoint> axis_points(const ExperimentSpec& s) {
  std::vector<AxisPoint> pts;
  switch (s.kind) {
    case ExperimentKind::SeedBattery:
    case ExperimentKind::FinetuneSweep: pts.push_back({"all", "", nlohmann::json::object()}); break;
    case ExperimentKind::NoiseGrid:
      for (int t : s.tau)
        for (double n : s.nu) pts.push_back({"tau=" + std::to_string(t), "nu=" + axis_label(n), {{"tau", t}, {"nu", n}}});
      break;
    case ExperimentKind::SizeSweep:
      for (int k : s.k) pts.push_back({"k=" + std::to_string(k), "", {{"k", k}}});
      break;
    case ExperimentKind::TokenizerAB:
      for (auto a : s.algorithms) pts.push_back({tok::algorithm_name(a), "", {{"algorithm", tok::algorithm_name(a)}}});
      break;
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Running

struct RunRecord {
  std::string key;
  std::string kind;
  AxisPoint point;
  std::size_t point_index = 0;
  std::uint64_t seed = 0;
  std::string status;  // completed, early_stopped, diverged
  std::map<std::string, double> metrics;
  nlohmann::json detail;
};

inline nlohmann::json run_to_json(const RunRecord& r) {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [k, v] : r.metrics) m[k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  return {{"key", r.key},       {"kind", r.kind},       {"row", r.point.row}, {"col", r.point.col},
          {"point", r.point.values}, {"point_index", r.point_index}, {"seed", r.seed}, {"status", r.status}, {"metrics", m},
          {"detail", r.detail}};
}

inline RunRecord run_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.key = j.at("key").get<std::string>();
  r.kind = j.at("kind").get<std::string>();
  r.point.row = j.at("row").get<std::string>();
  r.point.col = j.at("col").get<std::string>();
  r.point.values = j.at("point");
  r.point_index = j.value("point_index", std::size_t{0});
  r.seed = j.at("seed").get<std::uint64_t>();
  r.status = j.at("status").get<std::string>();
  for (const auto& [k, v] : j.at("metrics").items())
    r.metrics[k] = v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  r.detail = j.value("detail", nlohmann::json::object());
  return r;
}

inline RunRecord read_run(const fs::path& manifest) {
  try {
    return run_from_json(nlohmann::json::parse(read_file(manifest.string())));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptManifest, manifest.string() + ": " + e.what());
  }
}

struct ExperimentSummary {
  std::vector<RunRecord> runs;
  std::size_t trained = 0;
  std::size_t skipped = 0;
  std::size_t diverged = 0;
};

struct RunOptions {
  std::size_t threads = 1;
  bool float32 = false;
  std::function<void(const std::string&)> log;
};

namespace detail {

inline std::vector<std::string> require_lines(const fs::path& p) {
  if (!fs::exists(p)) throw Error(ErrorCode::MissingCorpus, p.string() + " does not exist");
  auto lines = read_lines(p.string());
  std::vector<std::string> out;
  for (auto& l : lines)
    if (!trim(l).empty()) out.push_back(trim(l));
  if (out.empty()) throw Error(ErrorCode::EmptyCorpus, p.string() + " is empty");
  return out;
}

inline std::map<std::string, double> pretrain_metrics(const RunManifest& m) {
  std::map<std::string, double> out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out["V-Loss"] = out["V-PPPL"] = out["V-Acc"] = out["V-WF1"] = out["T-Loss"] = nan;
  if (const auto* v = m.best_valid()) {
    out["V-Loss"] = v->loss;
    out["V-PPPL"] = v->pppl;
    out["V-Acc"] = v->acc;
    out["V-WF1"] = v->wf1;
    for (const auto& r : m.records)
      if (r.split == "train" && r.epoch == v->epoch) out["T-Loss"] = r.loss;
  }
  return out;
}

/// Trains one encoder and writes manifest + metrics + checkpoint into `dir`.
template <class T>
RunManifest pretrain_run(const ExperimentSpec& s, std::uint64_t seed, const tok::SubwordModel& tk,
                         const std::vector<std::string>& train, const std::vector<std::string>& valid,
                         const fs::path& dir, std::size_t threads) {
  EncoderConfig mc = s.model;
  mc.vocab_size = tk.size();
  TrainConfig tc = s.train;
  tc.model_seed = seed;
  tc.data_seed = seed;
  tc.threads = threads;
  Encoder<T> model(mc, seed);
  fs::create_directories(dir);
  std::string csv = metrics_csv_header() + "\n";
  TrainHooks<T> hooks;
  hooks.on_record = [&](const MetricsRecord& r) { csv += to_csv(r) + "\n"; };
  RunManifest man = clmw::train(model, tk, train, valid, tc, hooks);
  write_file((dir / "metrics.csv").string(), csv);
  write_file((dir / "train_manifest.json").string(), manifest_to_json(man).dump(2) + "\n");
  if (man.stop_reason != "diverged") save_checkpoint((dir / "model.ckpt").string(), model.params(), seed, man.optimizer_steps);
  return man;
}

template <class T>
RunRecord finetune_run(const ExperimentSpec& s, std::uint64_t seed, const fs::path& dir, std::size_t threads) {
  const auto data = load_regression_csv(s.resolve(s.finetune.dataset).string(), s.finetune.log10_labels);
  tok::SubwordModel tk;
  if (!s.finetune.tokenizer.empty())
    tk = tok::SubwordModel::load(s.resolve(s.finetune.tokenizer));
  else
    tk = tok::train(s.tokenizer.algorithm, data.smiles,
                    {s.tokenizer.vocab_size, s.tokenizer.min_frequency, s.tokenizer.max_len});
  EncoderConfig mc = s.model;
  mc.vocab_size = tk.size();
  Encoder<T> enc(mc, seed);
  if (!s.finetune.checkpoint.empty()) load_checkpoint(s.resolve(s.finetune.checkpoint).string(), enc.params());
  const auto ed = encode_dataset(tk, enc, data);
  const auto plan = make_cv_plan(ed.size(), seed);
  SearchOptions so = s.finetune.search;
  so.seed = seed;
  so.threads = threads;
  const auto ranked = search(enc, ed, plan, so);
  const auto rep = refit_and_test(enc, ranked.front(), ed, plan, seed, s.finetune.refit_epochs);
  fs::create_directories(dir);
  nlohmann::json ledger = nlohmann::json::array();
  for (const auto& t : ranked) ledger.push_back(trial_to_json(t));
  write_file((dir / "plan.json").string(), plan_to_json(plan).dump(2) + "\n");
  write_file((dir / "trials.json").string(), ledger.dump(2) + "\n");
  write_file((dir / "report.csv").string(), report_csv(rep));
  RunRecord r;
  r.status = "completed";
  r.metrics = {{"test_MAE", rep.test.mae},
               {"test_RMSE", rep.test.rmse},
               {"test_Pearson", rep.test.pearson_r},
               {"test_R2", rep.test.r2},
               {"cv_R2", ranked.front().mean_r2}};
  r.detail = {{"best_trial", trial_to_json(ranked.front())}};
  return r;
}

}  // namespace detail

/// Executes every axis point x seed. Completed runs (manifest present with
/// the same key) are skipped.
inline ExperimentSummary run_experiment(const ExperimentSpec& s, const fs::path& out, const RunOptions& opt = {}) {
  s.validate();
  auto say = [&](const std::string& m) {
    if (opt.log) opt.log(m);
  };
  const nlohmann::json shared = shared_settings(s);

  // Corpora and their content hashes.
  std::vector<std::string> train_lines, valid_lines, base, alt;
  SplitPlan split;
  std::string corpus_hash;
  if (s.kind == ExperimentKind::NoiseGrid) {
    base = detail::require_lines(s.resolve(s.base_path));
    alt = detail::require_lines(s.resolve(s.alt_path));
    if (base.size() != alt.size())
      throw Error(ErrorCode::AlignmentError, "base and alt corpora differ in length");
    split = make_split(base.size(), s.train_frac, s.split_seed);
    corpus_hash = hash_lines(base) + hash_lines(alt);
  } else if (s.kind == ExperimentKind::FinetuneSweep) {
    const fs::path d = s.resolve(s.finetune.dataset);
    if (!fs::exists(d)) throw Error(ErrorCode::MissingCorpus, d.string() + " does not exist");
    corpus_hash = hash_lines(read_lines(d.string()));
    if (!s.finetune.checkpoint.empty()) {
      const fs::path c = s.resolve(s.finetune.checkpoint);
      if (!fs::exists(c)) throw Error(ErrorCode::MissingCorpus, c.string() + " does not exist");
      corpus_hash += hex64(fnv1a64(read_file(c.string())));
    }
  } else {
    train_lines = detail::require_lines(s.resolve(s.train_path));
    valid_lines = detail::require_lines(s.resolve(s.valid_path));
    corpus_hash = hash_lines(train_lines) + hash_lines(valid_lines);
  }

  // Shared tokenizer (all cells of one experiment see the same vocabulary,
  // except tokenizer_ab which trains one per algorithm).
  std::optional<tok::SubwordModel> shared_tk;
  auto tk_opts = [&] { return tok::TrainerOptions{s.tokenizer.vocab_size, s.tokenizer.min_frequency, s.tokenizer.max_len}; };
  auto get_shared_tk = [&]() -> const tok::SubwordModel& {
    if (!shared_tk) {
      std::vector<std::string> corpus;
      if (s.kind == ExperimentKind::NoiseGrid) {
        for (auto i : split.train_indices) corpus.push_back(base[i]);
        for (auto i : split.train_indices) corpus.push_back(alt[i]);
      } else {
        corpus = train_lines;
      }
      shared_tk = tok::train(s.tokenizer.algorithm, corpus, tk_opts());
      shared_tk->save(out / "tokenizer");
    }
    return *shared_tk;
  };

  ExperimentSummary sum;
  const auto points = axis_points(s);
  for (std::size_t pi = 0; pi < points.size(); ++pi) {
    const AxisPoint& pt = points[pi];
    for (std::uint64_t seed : s.seeds) {
      nlohmann::json key_src = {{"shared", shared}, {"point", pt.values}, {"seed", seed}, {"corpus", corpus_hash},
                                {"float32", opt.float32}};
      const std::string key = hex64(fnv1a64(key_src.dump()));
      std::string label = std::string(kind_name(s.kind)) + "-" + pt.row + (pt.col.empty() ? "" : "-" + pt.col) +
                          "-s" + std::to_string(seed) + "-" + key.substr(0, 8);
      std::erase(label, '=');
      const fs::path dir = out / "runs" / label;
      const fs::path mpath = dir / "manifest.json";
      if (fs::exists(mpath)) {
        RunRecord prev = read_run(mpath);
        if (prev.key == key) {
          ++sum.skipped;
          if (prev.status == "diverged") ++sum.diverged;
          sum.runs.push_back(std::move(prev));
          continue;
        }
      }
      say("run " + label);
      RunRecord rec;
      if (s.kind == ExperimentKind::FinetuneSweep) {
        rec = opt.float32 ? detail::finetune_run<float>(s, seed, dir, opt.threads)
                          : detail::finetune_run<double>(s, seed, dir, opt.threads);
      } else {
        std::vector<std::string> tr = train_lines, va = valid_lines;
        const tok::SubwordModel* tk = nullptr;
        std::optional<tok::SubwordModel> own_tk;
        if (s.kind == ExperimentKind::NoiseGrid) {
          const auto grid = noise_counts(pt.values["tau"].get<int>(), pt.values["nu"].get<double>(), split.n_train,
                                         split.n_valid, s.a.value_or(first_bin_for(split.n_train, s.k_max)), s.k_max);
          auto mixed = materialize_mixed_corpus(base, alt, grid, split, s.split_seed);
          tr = std::move(mixed.train);
          va = std::move(mixed.valid);
          rec.detail["grid"] = grid_to_json(grid);
          tk = &get_shared_tk();
        } else if (s.kind == ExperimentKind::SizeSweep) {
          const auto a = s.a.value_or(first_bin_for(train_lines.size(), s.k_max));
          const auto n = bin_size(pt.values["k"].get<int>(), a, s.k_max,
                                  s.a ? std::nullopt : std::optional<std::uint64_t>(train_lines.size()));
          if (n > train_lines.size()) throw Error(ErrorCode::Overflow, "bin larger than training corpus");
          tr.assign(train_lines.begin(), train_lines.begin() + static_cast<std::ptrdiff_t>(n));
          rec.detail["n_train"] = n;
          tk = &get_shared_tk();
        } else if (s.kind == ExperimentKind::TokenizerAB) {
          own_tk = tok::train(tok::parse_algorithm(pt.values["algorithm"].get<std::string>()), train_lines, tk_opts());
          own_tk->save(dir / "tokenizer");
          tk = &*own_tk;
        } else {
          tk = &get_shared_tk();
        }
        const RunManifest man = opt.float32 ? detail::pretrain_run<float>(s, seed, *tk, tr, va, dir, opt.threads)
                                            : detail::pretrain_run<double>(s, seed, *tk, tr, va, dir, opt.threads);
        rec.status = man.stop_reason;
        rec.metrics = detail::pretrain_metrics(man);
        rec.detail["epochs_run"] = man.epochs_run;
        rec.detail["best_epoch"] = man.best_epoch;
        rec.detail["vocab_size"] = tk->size();
      }
      rec.key = key;
      rec.kind = kind_name(s.kind);
      rec.point = pt;
      rec.point_index = pi;
      rec.seed = seed;
      fs::create_directories(dir);
      write_file(mpath.string(), run_to_json(rec).dump(2) + "\n");
      ++sum.trained;
      if (rec.status == "diverged") ++sum.diverged;
      sum.runs.push_back(std::move(rec));
    }
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Aggregation

struct SheetCell {
  std::string row, col;
  std::vector<double> values;  // non-diverged runs only
  std::size_t diverged = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double s_n = std::numeric_limits<double>::quiet_NaN();
  double t_crit = std::numeric_limits<double>::quiet_NaN();
  double ci_half = std::numeric_limits<double>::quiet_NaN();
  std::size_t n() const { return values.size(); }
};

struct Sheet {
  std::string kind, metric;
  std::vector<std::string> rows, cols;
  std::vector<SheetCell> cells;  // row-major

  const SheetCell& at(const std::string& r, const std::string& c) const {
    for (const auto& x : cells)
      if (x.row == r && x.col == c) return x;
    throw Error(ErrorCode::IndexOutOfRange, "no cell " + r + "/" + c);
  }
};

/// Summarizes one metric per axis cell. Diverged runs are counted but never
/// contribute; cells with one surviving run have an undefined (NaN) spread.
inline Sheet aggregate_runs(const std::vector<RunRecord>& runs, const std::string& metric) {
  if (runs.empty()) throw Error(ErrorCode::EmptyDirectory, "no runs to aggregate");
  Sheet sh;
  sh.kind = runs.front().kind;
  sh.metric = metric;
  // Rows and columns follow the experiment's axis order.
  auto ordered = [&](bool row) {
    std::vector<std::pair<std::size_t, std::string>> seen;
    for (const auto& r : runs) {
      const std::string& lab = row ? r.point.row : r.point.col;
      auto it = std::find_if(seen.begin(), seen.end(), [&](const auto& p) { return p.second == lab; });
      if (it == seen.end()) seen.emplace_back(r.point_index, lab);
      else it->first = std::min(it->first, r.point_index);
    }
    std::stable_sort(seen.begin(), seen.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::string> out;
    for (const auto& p : seen) out.push_back(p.second);
    return out;
  };
  sh.rows = ordered(true);
  sh.cols = ordered(false);
  for (const auto& r : sh.rows)
    for (const auto& c : sh.cols) {
      SheetCell cell;
      cell.row = r;
      cell.col = c;
      for (const auto& run : runs) {
        if (run.point.row != r || run.point.col != c) continue;
        if (run.status == "diverged") {
          ++cell.diverged;
          continue;
        }
        auto it = run.metrics.find(metric);
        if (it == run.metrics.end()) throw Error(ErrorCode::InvalidArgument, "metric '" + metric + "' not recorded");
        if (std::isfinite(it->second)) cell.values.push_back(it->second);
      }
      if (cell.n() >= 2) {
        const auto st = summarize(cell.values);
        cell.mean = st.mean;
        cell.s_n = st.s_n;
        cell.t_crit = st.t_crit;
        cell.ci_half = st.ci_half;
      } else if (cell.n() == 1) {
        cell.mean = cell.values[0];
      }
      sh.cells.push_back(std::move(cell));
    }
  return sh;
}

inline std::vector<RunRecord> load_runs(const fs::path& dir) {
  std::vector<RunRecord> runs;
  const fs::path root = fs::exists(dir / "runs") ? dir / "runs" : dir;
  if (!fs::is_directory(root)) throw Error(ErrorCode::EmptyDirectory, root.string() + " is not a directory");
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) paths.push_back(e.path() / "manifest.json");
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) runs.push_back(read_run(p));
  if (runs.empty()) throw Error(ErrorCode::EmptyDirectory, root.string() + " holds no run manifests");
  return runs;
}

inline Sheet aggregate(const fs::path& dir, const std::string& metric) { return aggregate_runs(load_runs(dir), metric); }

// ---------------------------------------------------------------------------
// Rendering

namespace detail {
inline std::string num(double v) { return std::isfinite(v) ? exact(v) : "NaN"; }
inline nlohmann::json jnum(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else if (c == '"') o += "&quot;";
    else o += c;
  }
  return o;
}
}  // namespace detail

inline std::string render_csv(const Sheet& sh) {
  std::string out = "row,col,n,diverged,mean,s_n,t,ci_half\n";
  for (const auto& c : sh.cells)
    out += c.row + "," + c.col + "," + std::to_string(c.n()) + "," + std::to_string(c.diverged) + "," +
           detail::num(c.mean) + "," + detail::num(c.s_n) + "," + detail::num(c.t_crit) + "," +
           detail::num(c.ci_half) + "\n";
  return out;
}

inline nlohmann::json render_json(const Sheet& sh) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : sh.cells)
    cells.push_back({{"row", c.row},
                     {"col", c.col},
                     {"n", c.n()},
                     {"diverged", c.diverged},
                     {"mean", detail::jnum(c.mean)},
                     {"s_n", detail::jnum(c.s_n)},
                     {"t", detail::jnum(c.t_crit)},
                     {"ci_half", detail::jnum(c.ci_half)}});
  return {{"kind", sh.kind}, {"metric", sh.metric}, {"rows", sh.rows}, {"cols", sh.cols}, {"cells", cells}};
}

/// Heatmap with one rect per cell, a linear colour scale between the sheet's
/// min and max mean, value labels, "n=1" badges and a dagger for cells with
/// diverged runs.
inline std::string render_svg(const Sheet& sh) {
  const int cw = 110, ch = 44, left = 90, top = 40;
  const int w = left + cw * static_cast<int>(sh.cols.size()) + 20;
  const int h = top + ch * static_cast<int>(sh.rows.size()) + 50;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& c : sh.cells)
    if (std::isfinite(c.mean)) {
      lo = std::min(lo, c.mean);
      hi = std::max(hi, c.mean);
    }
  auto colour = [&](double v) {
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    const int r = static_cast<int>(std::lround(255 * t)), b = static_cast<int>(std::lround(255 * (1 - t)));
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, 96, b);
    return std::string(buf);
  };
  std::string o = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
                  std::to_string(h) + "\" font-family=\"monospace\" font-size=\"12\">\n";
  o += "<text x=\"4\" y=\"16\">" + detail::xml_escape(sh.kind + " " + sh.metric) + "</text>\n";
  for (std::size_t j = 0; j < sh.cols.size(); ++j)
    o += "<text x=\"" + std::to_string(left + cw * static_cast<int>(j) + 4) + "\" y=\"" + std::to_string(top - 6) +
         "\">" + detail::xml_escape(sh.cols[j]) + "</text>\n";
  for (std::size_t i = 0; i < sh.rows.size(); ++i) {
    const int y = top + ch * static_cast<int>(i);
    o += "<text x=\"4\" y=\"" + std::to_string(y + ch / 2 + 4) + "\">" + detail::xml_escape(sh.rows[i]) + "</text>\n";
    for (std::size_t j = 0; j < sh.cols.size(); ++j) {
      const SheetCell& c = sh.cells[i * sh.cols.size() + j];
      const int x = left + cw * static_cast<int>(j);
      const bool blank = c.n() < 2;
      o += "<rect class=\"cell\" x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
           std::to_string(cw - 2) + "\" height=\"" + std::to_string(ch - 2) + "\" fill=\"" +
           (blank ? std::string("#ffffff") : colour(c.mean)) + "\" stroke=\"#444\"/>\n";
      std::string label;
      if (c.n() >= 2)
        label = fixed(c.mean, 4) + " \xC2\xB1 " + fixed(c.ci_half, 4);
      else if (c.n() == 1)
        label = "n=1";
      else
        label = "empty";
      if (c.diverged) label += " \xE2\x80\xA0" + std::to_string(c.diverged);
      o += "<text x=\"" + std::to_string(x + 4) + "\" y=\"" + std::to_string(y + ch / 2 + 4) + "\">" +
           detail::xml_escape(label) + "</text>\n";
    }
  }
  const int ly = top + ch * static_cast<int>(sh.rows.size()) + 24;
  o += "<text x=\"4\" y=\"" + std::to_string(ly) + "\">linear scale: min " + detail::num(lo) + " max " +
       detail::num(hi) + "</text>\n";
  o += "</svg>\n";
  return o;
}

inline std::string render(const Sheet& sh, const std::string& format) {
  if (format == "csv") return render_csv(sh);
  if (format == "json") return render_json(sh).dump(2) + "\n";
  if (format == "svg") return render_svg(sh);
  throw Error(ErrorCode::UnknownFormat, "unknown report format '" + format + "'");
}

}  // namespace clmw
