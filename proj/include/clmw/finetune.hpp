//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Regression fine-tuning: a dense head on the first-position hidden state,
// 3-fold cross-validated hyperparameter search, refit and held-out test.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "clmw/common.hpp"
#include "clmw/encoder.hpp"
#include "clmw/metrics.hpp"
#include "clmw/optim.hpp"
#include "clmw/pretrain.hpp"
#include "clmw/subword.hpp"

namespace clmw {

// ---------------------------------------------------------------------------
// Search space

namespace head_grid {
inline const std::vector<double> kDepth = {0, 1, 2, 3, 4, 5};
inline const std::vector<double> kDropout = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
inline const std::vector<double> kBatch = {8, 16, 32, 64, 128, 256, 512};
inline const std::vector<double> kLearningRate = {1e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3};
inline const std::vector<double> kWeightDecay = {0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1};
inline const std::vector<double> kFreeze = {0, 1};
inline const std::array<const std::vector<double>*, 6> kAxes = {&kDepth,        &kDropout,     &kBatch,
                                                                &kLearningRate, &kWeightDecay, &kFreeze};
}  // namespace head_grid

struct HeadConfig {
  std::size_t stack_depth = 0;
  double dropout = 0.1;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  bool freeze_base_model = false;

  /// Grid index of each field, in head_grid::kAxes order.
  std::array<std::size_t, 6> indices() const {
    const std::array<double, 6> v = {static_cast<double>(stack_depth), dropout, static_cast<double>(batch_size),
                                     learning_rate, weight_decay, freeze_base_model ? 1.0 : 0.0};
    std::array<std::size_t, 6> out{};
    for (std::size_t a = 0; a < 6; ++a) {
      const auto& ax = *head_grid::kAxes[a];
      std::size_t k = 0;
      while (k < ax.size() && std::abs(ax[k] - v[a]) > 1e-12 * std::max(1.0, std::abs(v[a]))) ++k;
      if (k == ax.size()) throw Error(ErrorCode::InvalidArgument, "head config value " + exact(v[a]) + " is off-grid");
      out[a] = k;
    }
    return out;
  }
  void validate() const { (void)indices(); }

  static HeadConfig from_indices(const std::array<std::size_t, 6>& ix) {
    HeadConfig c;
    c.stack_depth = static_cast<std::size_t>(head_grid::kDepth.at(ix[0]));
    c.dropout = head_grid::kDropout.at(ix[1]);
    c.batch_size = static_cast<std::size_t>(head_grid::kBatch.at(ix[2]));
    c.learning_rate = head_grid::kLearningRate.at(ix[3]);
    c.weight_decay = head_grid::kWeightDecay.at(ix[4]);
    c.freeze_base_model = head_grid::kFreeze.at(ix[5]) != 0.0;
    return c;
  }

  bool operator==(const HeadConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = {{"stack_depth", c.stack_depth},     {"dropout", c.dropout},           {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay}, {"freeze_base_model", c.freeze_base_model}};
}
inline void from_json(const nlohmann::json& j, HeadConfig& c) {
  c = HeadConfig{};
  c.stack_depth = j.value("stack_depth", c.stack_depth);
  c.dropout = j.value("dropout", c.dropout);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.freeze_base_model = j.value("freeze_base_model", c.freeze_base_model);
  c.validate();
}

inline std::uint64_t head_parameter_count(std::size_t hidden, std::size_t depth) {
  return depth * (hidden * hidden + hidden) + hidden + 1;
}

// ---------------------------------------------------------------------------
// Data

struct RegressionDataset {
  std::vector<std::string> smiles;
  std::vector<double> labels;
  std::size_t size() const { return labels.size(); }
};

/// Parses "smiles,label" CSV (header optional). With `log10_labels` the
/// labels are replaced by their base-10 logarithm.
inline RegressionDataset parse_regression_csv(const std::vector<std::string>& lines, bool log10_labels = false) {
  RegressionDataset d;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string line = trim(lines[i]);
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos)
      throw Error(ErrorCode::NonNumericLabels, "line " + std::to_string(i + 1) + " has no label column");
    const std::string smi = trim(line.substr(0, comma)), lab = trim(line.substr(comma + 1));
    if (d.size() == 0 && i == 0 && smi == "smiles" && lab == "label") continue;
    double v = 0.0;
    const auto r = std::from_chars(lab.data(), lab.data() + lab.size(), v);
    if (r.ec != std::errc() || r.ptr != lab.data() + lab.size() || !std::isfinite(v))
      throw Error(ErrorCode::NonNumericLabels, "line " + std::to_string(i + 1) + ": label '" + lab + "'");
    if (smi.empty()) throw Error(ErrorCode::InvalidArgument, "line " + std::to_string(i + 1) + ": empty SMILES");
    if (log10_labels) {
      if (v <= 0.0) throw Error(ErrorCode::InvalidArgument, "log10 of non-positive label on line " + std::to_string(i + 1));
      v = std::log10(v);
    }
    d.smiles.push_back(smi);
    d.labels.push_back(v);
  }
  if (d.size() == 0) throw Error(ErrorCode::EmptyDataset, "dataset has no rows");
  return d;
}

inline RegressionDataset load_regression_csv(const std::string& path, bool log10_labels = false) {
  return parse_regression_csv(read_lines(path), log10_labels);
}

struct EncodedDataset {
  std::vector<std::vector<int>> ids;
  std::vector<double> labels;
  std::size_t size() const { return labels.size(); }
};

template <class T>
EncodedDataset encode_dataset(const tok::SubwordModel& tokenizer, const Encoder<T>& encoder,
                              const RegressionDataset& d) {
  if (d.size() == 0) throw Error(ErrorCode::EmptyDataset, "dataset has no rows");
  EncodedDataset e;
  e.ids = encode_corpus(tokenizer, encoder, d.smiles);
  e.labels = d.labels;
  if (e.ids.size() != e.labels.size()) throw Error(ErrorCode::InvalidArgument, "dataset contains empty SMILES");
  return e;
}

// ---------------------------------------------------------------------------
// Cross-validation plan

struct CVPlan {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::vector<std::size_t> test;
  std::array<std::vector<std::size_t>, 3> folds;

  /// All non-test indices (the three folds), sorted.
  std::vector<std::size_t> train_all() const {
    std::vector<std::size_t> v;
    for (const auto& f : folds) v.insert(v.end(), f.begin(), f.end());
    std::sort(v.begin(), v.end());
    return v;
  }
  std::vector<std::size_t> train_for(std::size_t rotation) const {
    std::vector<std::size_t> v;
    for (std::size_t f = 0; f < 3; ++f)
      if (f != rotation) v.insert(v.end(), folds[f].begin(), folds[f].end());
    std::sort(v.begin(), v.end());
    return v;
  }
};

inline CVPlan make_cv_plan(std::size_t n, std::uint64_t seed) {
  if (n < 15) throw Error(ErrorCode::TooFewSamples, "cross-validation needs at least 15 samples, got " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed({seed, 0xC5}));
  rng.shuffle(idx);
  CVPlan p;
  p.seed = seed;
  p.n = n;
  const std::size_t n_test = static_cast<std::size_t>(round_half_up(0.2 * static_cast<double>(n)));
  p.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::sort(p.test.begin(), p.test.end());
  const std::size_t rest = n - n_test;
  std::size_t at = n_test;
  for (std::size_t f = 0; f < 3; ++f) {
    const std::size_t sz = rest / 3 + (f < rest % 3 ? 1 : 0);
    p.folds[f].assign(idx.begin() + static_cast<std::ptrdiff_t>(at), idx.begin() + static_cast<std::ptrdiff_t>(at + sz));
    std::sort(p.folds[f].begin(), p.folds[f].end());
    at += sz;
  }
  return p;
}

inline nlohmann::json plan_to_json(const CVPlan& p) {
  return {{"seed", p.seed}, {"n", p.n}, {"test", p.test}, {"folds", {p.folds[0], p.folds[1], p.folds[2]}}};
}
inline CVPlan plan_from_json(const nlohmann::json& j) {
  CVPlan p;
  p.seed = j.at("seed").get<std::uint64_t>();
  p.n = j.at("n").get<std::size_t>();
  p.test = j.at("test").get<std::vector<std::size_t>>();
  for (std::size_t f = 0; f < 3; ++f) p.folds[f] = j.at("folds").at(f).get<std::vector<std::size_t>>();
  return p;
}

// ---------------------------------------------------------------------------
// Model

/// Encoder plus regression head. Targets are standardized with the
/// training-split mean and deviation; predictions are mapped back.
template <class T>
class RegressionModel {
 public:
  RegressionModel(const Encoder<T>& encoder, const HeadConfig& cfg, std::uint64_t seed)
      : encoder_(encoder), cfg_(cfg) {
    cfg_.validate();
    const std::size_t H = encoder_.config().hidden;
    for (std::size_t d = 0; d < cfg_.stack_depth; ++d) {
      dense_.push_back(head_.add("head.dense" + std::to_string(d) + ".weight", H, H));
      head_.add("head.dense" + std::to_string(d) + ".bias", 1, H);
    }
    out_ = head_.add("head.out.weight", H, 1);
    head_.add("head.out.bias", 1, 1);
    Rng rng(derive_seed({seed, 0x4EAD}));
    const double std = encoder_.config().init_std;
    for (std::size_t i = 0; i < head_.entries().size(); ++i) {
      const auto& e = head_.entry(i);
      const bool bias = e.name.ends_with(".bias");
      T* p = head_.ptr(i);
      for (std::size_t k = 0; k < e.size(); ++k) p[k] = bias ? T(0) : static_cast<T>(rng.normal() * std);
    }
  }

  const Encoder<T>& encoder() const { return encoder_; }
  Encoder<T>& encoder() { return encoder_; }
  const nn::ParamStore<T>& head() const { return head_; }
  nn::ParamStore<T>& head() { return head_; }
  const HeadConfig& config() const { return cfg_; }

  double label_mean = 0.0, label_scale = 1.0;

  void fit_scaler(const std::vector<double>& labels, const std::vector<std::size_t>& idx) {
    double m = 0.0;
    for (auto i : idx) m += labels[i];
    m /= static_cast<double>(idx.size());
    double ss = 0.0;
    for (auto i : idx) ss += (labels[i] - m) * (labels[i] - m);
    const double s = idx.size() > 1 ? std::sqrt(ss / static_cast<double>(idx.size() - 1)) : 0.0;
    label_mean = m;
    label_scale = s > 0.0 ? s : 1.0;
  }

  /// First-position hidden state in evaluation mode.
  std::vector<T> features(std::span<const int> ids) const {
    nn::Tape<T> t;
    Rng unused(0);
    auto h = encoder_.hidden(t, ids, nullptr, false, unused);
    const T* v = t.value(h);
    return std::vector<T>(v, v + encoder_.config().hidden);
  }

  /// Standardized prediction for one sample. `feature` (when non-null)
  /// replaces the encoder pass; `enc_sink` null keeps the encoder constant.
  nn::Var forward(nn::Tape<T>& t, std::span<const int> ids, const std::vector<T>* feature, T* enc_sink,
                  T* head_sink, bool train, Rng& rng) const {
    const std::size_t H = encoder_.config().hidden;
    nn::Var x;
    if (feature) {
      x = t.constant(1, H, *feature);
    } else {
      auto h = encoder_.hidden(t, ids, enc_sink, train, rng);
      const int first = 0;
      x = t.gather_rows(h, std::span<const int>(&first, 1));
    }
    const double p = train ? cfg_.dropout : 0.0;
    for (std::size_t d = 0; d < cfg_.stack_depth; ++d) {
      auto w = param(t, dense_[d], head_sink), b = param(t, dense_[d] + 1, head_sink);
      x = t.dropout(t.gelu(t.add_bias(t.matmul(x, w), b)), p, rng);
    }
    return t.add_bias(t.matmul(x, param(t, out_, head_sink)), param(t, out_ + 1, head_sink));
  }

  double predict(std::span<const int> ids, const std::vector<T>* feature = nullptr) const {
    nn::Tape<T> t;
    Rng unused(0);
    const auto y = forward(t, ids, feature, nullptr, nullptr, false, unused);
    return static_cast<double>(t.scalar(y)) * label_scale + label_mean;
  }

 private:
  nn::Var param(nn::Tape<T>& t, std::size_t i, T* sink) const {
    const auto& e = head_.entry(i);
    return t.param(head_.ptr(i), e.rows, e.cols, sink ? sink + e.offset : nullptr);
  }

  Encoder<T> encoder_;
  nn::ParamStore<T> head_;
  HeadConfig cfg_;
  std::vector<std::size_t> dense_;
  std::size_t out_ = 0;
};

template <class T>
RegressionModel<T> attach_head(const Encoder<T>& encoder, const HeadConfig& cfg, std::uint64_t seed) {
  return RegressionModel<T>(encoder, cfg, seed);
}

// ---------------------------------------------------------------------------
// Training

struct FitOptions {
  std::size_t max_epochs = 100;
  std::size_t patience = 5;  // 0 disables early stopping
  std::uint64_t seed = 0;
};

struct FitResult {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  std::optional<RegressionReport> valid;  // at the best epoch
  std::size_t steps = 0;
  bool diverged = false;
};

template <class T>
struct FitHooks {
  /// Called after each step's gradients are formed, before the update.
  std::function<void(const std::vector<T>& enc_grad, const std::vector<T>& head_grad)> after_backward;
};

/// Eval-mode features for every sample (used when the encoder is frozen).
template <class T>
std::vector<std::vector<T>> cache_features(const RegressionModel<T>& m, const EncodedDataset& d) {
  std::vector<std::vector<T>> f(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) f[i] = m.features(d.ids[i]);
  return f;
}

/// Trains on `train_idx`, validating on `valid_idx` after every epoch (MSE
/// in standardized units, early stopping with the given patience). With an
/// empty `valid_idx` it trains for max_epochs and reports nothing.
template <class T>
FitResult fit(RegressionModel<T>& m, const EncodedDataset& d, const std::vector<std::size_t>& train_idx,
              const std::vector<std::size_t>& valid_idx, const FitOptions& opt,
              const std::type_identity_t<std::vector<std::vector<T>>>* cached = nullptr,
              const FitHooks<T>& hooks = {}) {
  if (train_idx.empty()) throw Error(ErrorCode::EmptyDataset, "no training samples");
  const HeadConfig& hc = m.config();
  const bool frozen = hc.freeze_base_model;
  std::vector<std::vector<T>> own;
  if (frozen && !cached) {
    own = cache_features(m, d);
    cached = &own;
  }
  m.fit_scaler(d.labels, train_idx);
  nn::AdamWConfig acfg;
  acfg.lr = hc.learning_rate;
  acfg.weight_decay = hc.weight_decay;
  const std::size_t PE = m.encoder().params().size(), PH = m.head().size();
  nn::AdamW<T> opt_head(PH, acfg);
  std::optional<nn::AdamW<T>> opt_enc;
  if (!frozen) opt_enc.emplace(PE, acfg);
  std::vector<T> g_head(PH), g_enc(PE);
  const auto enc_mask = m.encoder().params().trainable_mask();

  auto z = [&](std::size_t i) { return static_cast<T>((d.labels[i] - m.label_mean) / m.label_scale); };
  auto feat = [&](std::size_t i) -> const std::vector<T>* { return cached ? &(*cached)[i] : nullptr; };

  FitResult res;
  std::vector<std::size_t> order = train_idx;
  const std::size_t B = hc.batch_size;
  for (std::size_t e = 1; e <= opt.max_epochs; ++e) {
    Rng shuf(derive_seed({opt.seed, e, 0x5F}));
    shuf.shuffle(order);
    const std::size_t steps = (order.size() + B - 1) / B;
    for (std::size_t s = 0; s < steps; ++s) {
      std::fill(g_head.begin(), g_head.end(), T(0));
      if (!frozen) std::fill(g_enc.begin(), g_enc.end(), T(0));
      const std::size_t lo = s * B, hi = std::min(order.size(), lo + B);
      const T norm = static_cast<T>(hi - lo);
      bool finite = true;
      for (std::size_t j = lo; j < hi; ++j) {
        const std::size_t i = order[j];
        Rng rng(derive_seed({opt.seed, e, s, j - lo, 0xD7}));
        nn::Tape<T> t;
        auto y = m.forward(t, d.ids[i], feat(i), frozen ? nullptr : g_enc.data(), g_head.data(), true, rng);
        const T target = z(i);
        auto loss = t.scale(t.mse(y, std::span<const T>(&target, 1)), T(1) / norm);
        finite = finite && std::isfinite(static_cast<double>(t.scalar(loss)));
        t.backward(loss);
      }
      if (hooks.after_backward) hooks.after_backward(g_enc, g_head);
      for (T g : g_head) finite = finite && std::isfinite(static_cast<double>(g));
      for (std::size_t k = 0; !frozen && finite && k < PE; ++k) finite = std::isfinite(static_cast<double>(g_enc[k]));
      if (!finite) {
        res.diverged = true;
        return res;
      }
      opt_head.step(m.head().values(), g_head);
      if (opt_enc) opt_enc->step(m.encoder().params().values(), g_enc, enc_mask);
      ++res.steps;
    }
    res.epochs_run = e;
    if (valid_idx.empty()) continue;
    std::vector<double> pred, ref;
    double mse = 0.0;
    for (auto i : valid_idx) {
      pred.push_back(m.predict(d.ids[i], feat(i)));
      ref.push_back(d.labels[i]);
      const double r = (pred.back() - ref.back()) / m.label_scale;
      mse += r * r;
    }
    mse /= static_cast<double>(valid_idx.size());
    if (!std::isfinite(mse)) {
      res.diverged = true;
      return res;
    }
    if (mse < res.best_valid_loss) {
      res.best_valid_loss = mse;
      res.best_epoch = e;
      res.valid = regression_metrics(pred, ref);
    } else if (opt.patience > 0 && e - res.best_epoch >= opt.patience) {
      break;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Search

struct TrialResult {
  std::size_t index = 0;
  HeadConfig config;
  std::array<RegressionReport, 3> folds{};
  std::array<std::size_t, 3> best_epochs{};
  double mean_r2 = -std::numeric_limits<double>::infinity();
  std::size_t rank = 0;
  bool diverged = false;
};

struct SearchOptions {
  std::size_t trials = 50;
  std::size_t startup = 15;
  std::size_t candidates = 24;
  double gamma = 0.25;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  bool random_search = false;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

namespace detail {

/// Smoothed per-axis frequencies of the grid indices in `obs`: each
/// observation puts weight 1 on its index and 0.5 on ordinal neighbours, on
/// top of a uniform prior of 1.
inline std::array<std::vector<double>, 6> parzen(const std::vector<std::array<std::size_t, 6>>& obs) {
  std::array<std::vector<double>, 6> w;
  for (std::size_t a = 0; a < 6; ++a) {
    const std::size_t k = head_grid::kAxes[a]->size();
    w[a].assign(k, 1.0);
    for (const auto& o : obs) {
      w[a][o[a]] += 1.0;
      if (o[a] > 0) w[a][o[a] - 1] += 0.5;
      if (o[a] + 1 < k) w[a][o[a] + 1] += 0.5;
    }
    double s = 0;
    for (double v : w[a]) s += v;
    for (double& v : w[a]) v /= s;
  }
  return w;
}

inline std::size_t draw(const std::vector<double>& p, Rng& rng) {
  double u = rng.uniform01(), c = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (u < (c += p[i])) return i;
  return p.size() - 1;
}

inline std::array<std::size_t, 6> random_indices(Rng& rng) {
  std::array<std::size_t, 6> ix{};
  for (std::size_t a = 0; a < 6; ++a) ix[a] = rng.uniform_index(head_grid::kAxes[a]->size());
  return ix;
}

}  // namespace detail

/// Next configuration given completed trials. The first `startup` trials are
/// uniform; later ones split history at the gamma quantile of mean R²,
/// sample candidates from the good-set density and keep the one maximizing
/// good/bad density ratio. Only ranks of mean R² matter.
inline HeadConfig suggest(const std::vector<TrialResult>& history, const SearchOptions& opt, std::size_t trial) {
  Rng rng(derive_seed({opt.seed, trial, 0x7E5}));
  if (opt.random_search || trial < opt.startup || history.size() < 2)
    return HeadConfig::from_indices(detail::random_indices(rng));
  std::vector<std::size_t> order(history.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return history[a].mean_r2 > history[b].mean_r2; });
  const std::size_t n_good =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(opt.gamma * static_cast<double>(history.size()))));
  std::vector<std::array<std::size_t, 6>> good, bad;
  for (std::size_t r = 0; r < order.size(); ++r)
    (r < n_good ? good : bad).push_back(history[order[r]].config.indices());
  const auto l = detail::parzen(good), g = detail::parzen(bad);
  std::array<std::size_t, 6> best{};
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < opt.candidates; ++c) {
    std::array<std::size_t, 6> ix{};
    double score = 0;
    for (std::size_t a = 0; a < 6; ++a) {
      ix[a] = detail::draw(l[a], rng);
      score += std::log(l[a][ix[a]]) - std::log(g[a][ix[a]]);
    }
    if (score > best_score) {
      best_score = score;
      best = ix;
    }
  }
  return HeadConfig::from_indices(best);
}

/// Assigns ranks by descending mean R²; earlier trials win ties.
inline std::vector<TrialResult> rank_trials(std::vector<TrialResult> trials) {
  std::stable_sort(trials.begin(), trials.end(), [](const TrialResult& a, const TrialResult& b) {
    if (a.mean_r2 != b.mean_r2) return a.mean_r2 > b.mean_r2;
    return a.index < b.index;
  });
  for (std::size_t r = 0; r < trials.size(); ++r) trials[r].rank = r + 1;
  return trials;
}

template <class T>
TrialResult run_trial(const Encoder<T>& encoder, const EncodedDataset& d, const CVPlan& plan, const HeadConfig& cfg,
                      std::size_t index, const SearchOptions& opt, const std::vector<std::vector<T>>* cached) {
  TrialResult tr;
  tr.index = index;
  tr.config = cfg;
  std::array<FitResult, 3> fits;
  ordered_parallel(
      3, opt.threads,
      [&](std::size_t r, std::size_t) {
        const std::uint64_t s = derive_seed({opt.seed, index, r, 0x7A1});
        RegressionModel<T> m(encoder, cfg, s);
        fits[r] = fit(m, d, plan.train_for(r), plan.folds[r], FitOptions{opt.max_epochs, opt.patience, s},
                      cfg.freeze_base_model ? cached : nullptr);
      },
      [](std::size_t, std::size_t) {});
  double s = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    if (fits[r].diverged || !fits[r].valid) {
      tr.diverged = true;
      tr.mean_r2 = -std::numeric_limits<double>::infinity();
      return tr;
    }
    tr.folds[r] = *fits[r].valid;
    tr.best_epochs[r] = fits[r].best_epoch;
    s += tr.folds[r].r2;
  }
  tr.mean_r2 = s / 3.0;
  return tr;
}

/// Runs the sequential search and returns the trials ranked (rank 1 first).
template <class T>
std::vector<TrialResult> search(const Encoder<T>& encoder, const EncodedDataset& d, const CVPlan& plan,
                                const SearchOptions& opt,
                                const std::function<void(const TrialResult&)>& on_trial = {}) {
  if (d.size() == 0) throw Error(ErrorCode::EmptyDataset, "dataset has no rows");
  if (plan.n != d.size()) throw Error(ErrorCode::ShapeMismatch, "plan covers " + std::to_string(plan.n) +
                                                                    " samples, dataset has " + std::to_string(d.size()));
  if (opt.trials == 0) throw Error(ErrorCode::InvalidArgument, "trials must be >= 1");
  for (double y : d.labels)
    if (!std::isfinite(y)) throw Error(ErrorCode::NonNumericLabels, "non-finite label");
  RegressionModel<T> probe(encoder, HeadConfig{}, 0);
  const auto cached = cache_features(probe, d);
  std::vector<TrialResult> history;
  for (std::size_t k = 0; k < opt.trials; ++k) {
    const HeadConfig cfg = suggest(history, opt, k);
    history.push_back(run_trial(encoder, d, plan, cfg, k, opt, &cached));
    if (on_trial) on_trial(history.back());
  }
  return rank_trials(std::move(history));
}

inline nlohmann::json trial_to_json(const TrialResult& t) {
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t r = 0; r < 3; ++r)
    folds.push_back({{"r2", t.folds[r].r2},
                     {"mae", t.folds[r].mae},
                     {"rmse", t.folds[r].rmse},
                     {"pearson_r", t.folds[r].pearson_r},
                     {"best_epoch", t.best_epochs[r]}});
  return {{"index", t.index},     {"rank", t.rank},
          {"config", t.config},   {"folds", folds},
          {"mean_r2", t.diverged ? nlohmann::json(nullptr) : nlohmann::json(t.mean_r2)},
          {"diverged", t.diverged}};
}

// ---------------------------------------------------------------------------
// Refit and report

struct FinetuneReport {
  HeadConfig config;
  RegressionReport test;
  std::array<SummaryStat, 4> cv{};  // MAE, RMSE, Pearson R, R² over the 3 folds
  std::vector<double> test_pred, test_ref;
};

/// Trains the chosen head on all non-test samples for `epochs` epochs and
/// evaluates once on the test split. The cross-validation summary comes
/// from the folds of `best`.
template <class T>
FinetuneReport refit_and_test(const Encoder<T>& encoder, const TrialResult& best, const EncodedDataset& d,
                              const CVPlan& plan, std::uint64_t seed, std::size_t epochs = 20,
                              RegressionModel<T>* out_model = nullptr) {
  RegressionModel<T> m(encoder, best.config, derive_seed({seed, 0x2EF17}));
  fit(m, d, plan.train_all(), {}, FitOptions{epochs, 0, derive_seed({seed, 0x2EF17})});
  FinetuneReport rep;
  rep.config = best.config;
  for (auto i : plan.test) {
    rep.test_pred.push_back(m.predict(d.ids[i]));
    rep.test_ref.push_back(d.labels[i]);
  }
  rep.test = regression_metrics(rep.test_pred, rep.test_ref);
  std::array<std::vector<double>, 4> cols;
  for (const auto& f : best.folds) {
    cols[0].push_back(f.mae);
    cols[1].push_back(f.rmse);
    cols[2].push_back(f.pearson_r);
    cols[3].push_back(f.r2);
  }
  for (std::size_t k = 0; k < 4; ++k) rep.cv[k] = summarize(cols[k]);
  if (out_model) *out_model = std::move(m);
  return rep;
}

/// One row per metric: metric,cv_mean,cv_s_n,test,cell.
inline std::string report_csv(const FinetuneReport& r, int decimals = 3) {
  static const char* names[4] = {"MAE", "RMSE", "Pearson R", "R2"};
  const double test[4] = {r.test.mae, r.test.rmse, r.test.pearson_r, r.test.r2};
  std::string out = "metric,cv_mean,cv_s_n,test,cell\n";
  for (std::size_t k = 0; k < 4; ++k)
    out += std::string(names[k]) + "," + exact(r.cv[k].mean) + "," + exact(r.cv[k].s_n) + "," + exact(test[k]) + "," +
           format_cv_cell(r.cv[k].mean, r.cv[k].s_n, test[k], decimals) + "\n";
  return out;
}

}  // namespace clmw
