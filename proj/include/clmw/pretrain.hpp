//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Masked-language-model pretraining with dynamic masking and simulated
// data-parallel gradient accumulation.
//
// Each optimizer step covers B_eff = N_nodes * N_GPU * B_GPU * N_GA
// sequences. Gradients are computed per sequence into a zeroed buffer and
// summed in global sequence order, so the result does not depend on how the
// step is split into micro-batches or on the number of threads.

#include <algorithm>
#include <cmath>
#include <functional>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "clmw/common.hpp"
#include "clmw/encoder.hpp"
#include "clmw/metrics.hpp"
#include "clmw/optim.hpp"
#include "clmw/subword.hpp"

namespace clmw {

inline std::uint64_t effective_batch(std::uint64_t n_nodes, std::uint64_t n_gpu, std::uint64_t b_gpu,
                                     std::uint64_t n_ga) {
  if (n_nodes == 0 || n_gpu == 0 || b_gpu == 0 || n_ga == 0)
    throw Error(ErrorCode::InvalidArgument, "batch factors must be >= 1");
  return n_nodes * n_gpu * b_gpu * n_ga;
}

// ---------------------------------------------------------------------------
// Masking

enum class MaskAction { Mask, Random, Keep };

/// Fractions for the mask / random / keep actions; must sum to 1.
struct MaskPolicy {
  double rate = 0.15;
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;

  void validate() const {
    if (!(rate > 0.0 && rate <= 1.0)) throw Error(ErrorCode::InvalidFraction, "mask rate must lie in (0, 1]");
    if (p_mask < 0 || p_random < 0 || p_keep < 0 || std::abs(p_mask + p_random + p_keep - 1.0) > 1e-9)
      throw Error(ErrorCode::InvalidFraction, "mask action fractions must be non-negative and sum to 1");
  }
};

struct MaskPlan {
  std::vector<int> positions;  // ascending
  std::vector<MaskAction> actions;
  std::vector<int> targets;  // original ids at `positions`
  std::vector<int> input;    // sequence after applying the actions
};

inline bool maskable(int id) { return id != tok::kPad && id != tok::kCls && id != tok::kSep; }

/// max(1, round-half-up(rate * eligible)).
inline std::size_t mask_count(std::size_t eligible, double rate) {
  return std::max<std::size_t>(1, round_half_up(rate * static_cast<double>(eligible)));
}

/// Pure function of (seed, epoch, step, index). Positions are sampled
/// uniformly without replacement among non-special tokens; random
/// replacements are drawn from the non-special vocabulary.
inline MaskPlan make_mask(std::span<const int> seq, const MaskPolicy& policy, std::uint64_t seed, std::uint64_t epoch,
                          std::uint64_t step, std::uint64_t index = 0, std::size_t vocab_size = 0) {
  std::vector<int> eligible;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (maskable(seq[i])) eligible.push_back(static_cast<int>(i));
  if (eligible.empty()) throw Error(ErrorCode::NoEligiblePositions, "sequence has no maskable tokens");
  const std::size_t k = std::min(eligible.size(), mask_count(eligible.size(), policy.rate));
  Rng rng(derive_seed({seed, epoch, step, index, 0x3A5C}));
  // partial Fisher-Yates
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.uniform_index(eligible.size() - i);
    std::swap(eligible[i], eligible[j]);
  }
  std::sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k));
  MaskPlan p;
  p.input.assign(seq.begin(), seq.end());
  for (std::size_t i = 0; i < k; ++i) {
    const int pos = eligible[i];
    p.positions.push_back(pos);
    p.targets.push_back(seq[static_cast<std::size_t>(pos)]);
    const double u = rng.uniform01();
    MaskAction a = u < policy.p_mask ? MaskAction::Mask : u < policy.p_mask + policy.p_random ? MaskAction::Random
                                                                                            : MaskAction::Keep;
    if (a == MaskAction::Random && vocab_size <= static_cast<std::size_t>(tok::kNumSpecials)) a = MaskAction::Mask;
    p.actions.push_back(a);
    if (a == MaskAction::Mask) {
      p.input[static_cast<std::size_t>(pos)] = tok::kMask;
    } else if (a == MaskAction::Random) {
      p.input[static_cast<std::size_t>(pos)] =
          tok::kNumSpecials + static_cast<int>(rng.uniform_index(vocab_size - tok::kNumSpecials));
    }
  }
  return p;
}

inline MaskPlan make_mask(std::span<const int> seq, double rate, std::uint64_t seed, std::uint64_t epoch,
                          std::uint64_t step) {
  MaskPolicy p;
  p.rate = rate;
  return make_mask(seq, p, seed, epoch, step);
}

// ---------------------------------------------------------------------------
// Configuration and manifest

struct EarlyStopConfig {
  std::size_t patience = 3;
  double min_delta = 1e-4;
};

struct TrainConfig {
  std::size_t epochs = 10;
  nn::AdamWConfig adam;
  std::size_t n_nodes = 1;
  std::size_t n_gpu = 1;
  std::size_t b_gpu = 8;
  std::size_t n_ga = 1;
  std::optional<std::size_t> b_eff_target;  // checked against the product when set
  std::uint64_t model_seed = 0;
  std::uint64_t data_seed = 0;
  EarlyStopConfig early_stop;
  MaskPolicy mask;
  double divergence_factor = 5.0;
  std::size_t threads = 1;
  bool restore_best = true;

  std::size_t b_eff() const { return effective_batch(n_nodes, n_gpu, b_gpu, n_ga); }

  void validate() const {
    if (epochs == 0) throw Error(ErrorCode::InvalidArgument, "epochs must be >= 1");
    if (early_stop.patience == 0) throw Error(ErrorCode::InvalidArgument, "patience must be >= 1");
    if (b_eff_target && *b_eff_target != b_eff())
      throw Error(ErrorCode::InvalidArgument, "B_eff " + std::to_string(*b_eff_target) + " != N_nodes*N_GPU*B_GPU*N_GA = " +
                                                  std::to_string(b_eff()));
    if (threads == 0) throw Error(ErrorCode::InvalidArgument, "threads must be >= 1");
    mask.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"lr", c.adam.lr},
       {"weight_decay", c.adam.weight_decay},
       {"betas", {c.adam.beta1, c.adam.beta2}},
       {"eps", c.adam.eps},
       {"n_nodes", c.n_nodes},
       {"n_gpu", c.n_gpu},
       {"b_gpu", c.b_gpu},
       {"n_ga", c.n_ga},
       {"b_eff", c.b_eff()},
       {"model_seed", c.model_seed},
       {"data_seed", c.data_seed},
       {"early_stop", {{"monitor", "valid_loss"}, {"patience", c.early_stop.patience}, {"min_delta", c.early_stop.min_delta}}},
       {"mask", {{"rate", c.mask.rate}, {"mask", c.mask.p_mask}, {"random", c.mask.p_random}, {"keep", c.mask.p_keep}}},
       {"divergence_factor", c.divergence_factor},
       {"restore_best", c.restore_best}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
  if (j.contains("betas")) {
    c.adam.beta1 = j.at("betas").at(0);
    c.adam.beta2 = j.at("betas").at(1);
  }
  c.adam.eps = j.value("eps", c.adam.eps);
  c.n_nodes = j.value("n_nodes", c.n_nodes);
  c.n_gpu = j.value("n_gpu", c.n_gpu);
  c.b_gpu = j.value("b_gpu", c.b_gpu);
  c.n_ga = j.value("n_ga", c.n_ga);
  if (j.contains("b_eff")) c.b_eff_target = j.at("b_eff").get<std::size_t>();
  c.model_seed = j.value("model_seed", c.model_seed);
  c.data_seed = j.value("data_seed", c.data_seed);
  if (j.contains("early_stop")) {
    c.early_stop.patience = j["early_stop"].value("patience", c.early_stop.patience);
    c.early_stop.min_delta = j["early_stop"].value("min_delta", c.early_stop.min_delta);
  }
  if (j.contains("mask")) {
    const auto& m = j["mask"];
    c.mask.rate = m.value("rate", c.mask.rate);
    c.mask.p_mask = m.value("mask", c.mask.p_mask);
    c.mask.p_random = m.value("random", c.mask.p_random);
    c.mask.p_keep = m.value("keep", c.mask.p_keep);
  }
  c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
  c.restore_best = j.value("restore_best", c.restore_best);
  c.validate();
}

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "valid"
  double loss = 0.0;
  double acc = 0.0;
  double wf1 = 0.0;
  double pppl = 0.0;
};

inline std::string metrics_csv_header() { return "epoch,split,loss,acc,wf1,pppl"; }
inline std::string to_csv(const MetricsRecord& r) {
  return std::to_string(r.epoch) + "," + r.split + "," + exact(r.loss) + "," + exact(r.acc) + "," + exact(r.wf1) +
         "," + exact(r.pppl);
}

inline MetricsRecord record_from(const MaskedEvalBatch& b, std::size_t epoch, const std::string& split) {
  MetricsRecord r;
  r.epoch = epoch;
  r.split = split;
  r.loss = masked_loss(b);
  r.acc = masked_accuracy(b);
  r.wf1 = weighted_f1(b);
  r.pppl = pppl(r.loss);
  return r;
}

struct RunManifest {
  nlohmann::json config;
  std::uint64_t model_seed = 0;
  std::uint64_t data_seed = 0;
  std::string train_hash;
  std::string valid_hash;
  std::vector<MetricsRecord> records;
  std::string stop_reason = "completed";  // completed | early_stopped | diverged
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  std::uint64_t optimizer_steps = 0;

  /// Validation record of the best epoch (the last one if none is marked).
  const MetricsRecord* best_valid() const {
    const MetricsRecord* last = nullptr;
    for (const auto& r : records)
      if (r.split == "valid") {
        if (r.epoch == best_epoch) return &r;
        last = &r;
      }
    return last;
  }
};

inline nlohmann::json manifest_to_json(const RunManifest& m) {
  nlohmann::json rec = nlohmann::json::array();
  for (const auto& r : m.records)
    rec.push_back({{"epoch", r.epoch}, {"split", r.split}, {"loss", r.loss}, {"acc", r.acc}, {"wf1", r.wf1}, {"pppl", r.pppl}});
  return {{"config", m.config},
          {"seeds", {{"model", m.model_seed}, {"data", m.data_seed}}},
          {"corpus_hashes", {{"train", m.train_hash}, {"valid", m.valid_hash}}},
          {"records", rec},
          {"stop_reason", m.stop_reason},
          {"epochs_run", m.epochs_run},
          {"best_epoch", m.best_epoch},
          {"best_valid_loss", m.best_valid_loss},
          {"optimizer_steps", m.optimizer_steps}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.config = j.at("config");
  m.model_seed = j.at("seeds").at("model");
  m.data_seed = j.at("seeds").at("data");
  m.train_hash = j.at("corpus_hashes").at("train");
  m.valid_hash = j.at("corpus_hashes").at("valid");
  for (const auto& r : j.at("records"))
    m.records.push_back({r.at("epoch"), r.at("split"), r.at("loss"), r.at("acc"), r.at("wf1"), r.at("pppl")});
  m.stop_reason = j.at("stop_reason");
  m.epochs_run = j.at("epochs_run");
  m.best_epoch = j.at("best_epoch");
  m.best_valid_loss = j.at("best_valid_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                        : j.at("best_valid_loss").get<double>();
  m.optimizer_steps = j.value("optimizer_steps", std::uint64_t{0});
  return m;
}

// ---------------------------------------------------------------------------
// Per-step computation

/// Runs `work(i, slot)` for i in [0, n) using up to `threads` workers, each
/// with its own slot, and calls `commit(i, slot)` in increasing i.
template <class Work, class Commit>
void ordered_parallel(std::size_t n, std::size_t threads, Work&& work, Commit&& commit) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  for (std::size_t base = 0; base < n; base += threads) {
    const std::size_t w = std::min(threads, n - base);
    if (w == 1) {
      work(base, std::size_t{0});
    } else {
      std::vector<std::thread> pool;
      std::exception_ptr err;
      std::mutex mu;
      for (std::size_t s = 1; s < w; ++s)
        pool.emplace_back([&, s] {
          try {
            work(base + s, s);
          } catch (...) {
            std::lock_guard<std::mutex> lk(mu);
            if (!err) err = std::current_exception();
          }
        });
      try {
        work(base, std::size_t{0});
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu);
        if (!err) err = std::current_exception();
      }
      for (auto& t : pool) t.join();
      if (err) std::rethrow_exception(err);
    }
    for (std::size_t s = 0; s < w; ++s) commit(base + s, s);
  }
}

struct StepStats {
  double nll_sum = 0.0;
  std::size_t masked = 0;
  MaskedEvalBatch eval;
};

/// Masked-LM loss over a set of masked sequences, normalized by the total
/// masked count. With `grad` set, gradients of that loss are added into
/// it (sequence by sequence, in order). `dropout_seed` seeds one stream per
/// sequence index.
template <class T>
StepStats mlm_step(const Encoder<T>& model, const std::vector<MaskPlan>& plans, T* grad, bool train,
                   std::uint64_t dropout_seed, std::size_t threads = 1) {
  StepStats st;
  for (const auto& p : plans) st.masked += p.positions.size();
  if (st.masked == 0) throw Error(ErrorCode::NoMaskedPositions, "step has no masked positions");
  const std::size_t P = model.params().size();
  const std::size_t V = model.config().vocab_size;
  const double norm = static_cast<double>(st.masked);
  std::vector<std::vector<T>> bufs(grad ? std::min(threads, plans.size()) : 0, std::vector<T>(grad ? P : 0));
  std::vector<MaskedEvalBatch> evals(std::min(threads, plans.size()));
  std::vector<double> nll(std::min(threads, plans.size()));
  ordered_parallel(
      plans.size(), threads,
      [&](std::size_t i, std::size_t slot) {
        const MaskPlan& p = plans[i];
        T* sink = nullptr;
        if (grad) {
          std::fill(bufs[slot].begin(), bufs[slot].end(), T(0));
          sink = bufs[slot].data();
        }
        Rng rng(derive_seed({dropout_seed, i, 0xD50}));
        nn::Tape<T> t;
        t.reserve(64 + 48 * model.config().layers);
        auto h = model.hidden(t, p.input, sink, train, rng);
        auto logits = model.mlm_logits(t, h, p.positions, sink);
        auto loss = t.cross_entropy_masked(logits, p.targets, norm);
        if (grad) t.backward(loss);
        const auto lp = nn::log_softmax_rows(t.value(logits), p.positions.size(), V);
        MaskedEvalBatch& e = evals[slot];
        e = MaskedEvalBatch{};
        double s = 0.0;
        for (std::size_t r = 0; r < p.positions.size(); ++r) {
          const T* row = lp.data() + r * V;
          const double l = static_cast<double>(row[p.targets[r]]);
          e.ref_logp.push_back(l);
          e.ref.push_back(p.targets[r]);
          e.pred.push_back(static_cast<int>(std::max_element(row, row + V) - row));
          s -= l;
        }
        nll[slot] = s;
      },
      [&](std::size_t, std::size_t slot) {
        if (grad) {
          const T* b = bufs[slot].data();
          for (std::size_t k = 0; k < P; ++k) grad[k] += b[k];
        }
        st.nll_sum += nll[slot];
        st.eval.append(evals[slot]);
      });
  return st;
}

/// Fixed masks for a validation set (identical in every epoch).
template <class Seqs>
std::vector<MaskPlan> validation_masks(const Seqs& seqs, const MaskPolicy& policy, std::uint64_t seed,
                                       std::size_t vocab_size) {
  std::vector<MaskPlan> plans;
  plans.reserve(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i)
    plans.push_back(make_mask(seqs[i], policy, derive_seed({seed, 0x7A11D}), 0, 0, i, vocab_size));
  return plans;
}

/// Masked-LM metrics of `model` on pre-encoded sequences in evaluation mode.
template <class T>
MetricsRecord evaluate_encoded(const Encoder<T>& model, const std::vector<std::vector<int>>& seqs,
                               const MaskPolicy& policy, std::uint64_t seed, std::size_t threads = 1,
                               std::size_t epoch = 0, const std::string& split = "valid") {
  if (seqs.empty()) throw Error(ErrorCode::EmptyCorpus, "evaluation corpus is empty");
  const auto plans = validation_masks(seqs, policy, seed, model.config().vocab_size);
  MaskedEvalBatch all;
  const std::size_t chunk = 256;
  for (std::size_t b = 0; b < plans.size(); b += chunk) {
    std::vector<MaskPlan> part(plans.begin() + static_cast<std::ptrdiff_t>(b),
                               plans.begin() + static_cast<std::ptrdiff_t>(std::min(plans.size(), b + chunk)));
    all.append(mlm_step<T>(model, part, nullptr, false, 0, threads).eval);
  }
  return record_from(all, epoch, split);
}

/// Token ids for each line, truncated to the model's position budget.
template <class T>
std::vector<std::vector<int>> encode_corpus(const tok::SubwordModel& tokenizer, const Encoder<T>& model,
                                            const std::vector<std::string>& lines) {
  if (tokenizer.size() != model.config().vocab_size)
    throw Error(ErrorCode::VocabMismatch, "tokenizer has " + std::to_string(tokenizer.size()) +
                                              " tokens, model expects " + std::to_string(model.config().vocab_size));
  std::vector<std::vector<int>> out;
  out.reserve(lines.size());
  const std::size_t cap = model.config().max_positions;
  for (const auto& l : lines) {
    if (l.empty()) continue;
    auto ids = tokenizer.encode(l).ids;
    if (ids.size() > cap) {
      ids.resize(cap);
      ids.back() = tok::kSep;
    }
    out.push_back(std::move(ids));
  }
  return out;
}

template <class T>
struct TrainHooks {
  /// Called after gradients of a step are reduced, before the update.
  std::function<void(std::vector<T>& grad, std::size_t epoch, std::size_t step)> after_backward;
  std::function<void(const MetricsRecord&)> on_record;
  /// Called after each epoch with the current model (for checkpoints).
  std::function<void(std::size_t epoch, const Encoder<T>&)> on_epoch;
};

template <class T>
RunManifest train_encoded(Encoder<T>& model, const std::vector<std::vector<int>>& train_seqs,
                          const std::vector<std::vector<int>>& valid_seqs, const TrainConfig& cfg,
                          const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (train_seqs.empty()) throw Error(ErrorCode::EmptyCorpus, "training corpus is empty");
  if (valid_seqs.empty()) throw Error(ErrorCode::EmptyCorpus, "validation corpus is empty");
  for (const auto& s : train_seqs) model.check_input(s);
  for (const auto& s : valid_seqs) model.check_input(s);

  RunManifest man;
  man.config = cfg;
  man.config["model"] = model.config();
  man.model_seed = cfg.model_seed;
  man.data_seed = cfg.data_seed;
  auto hash_ids = [](const std::vector<std::vector<int>>& seqs) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& s : seqs) {
      for (int id : s) h = fnv1a64(std::to_string(id) + " ", h);
      h = fnv1a64("\n", h);
    }
    return hex64(h);
  };
  man.train_hash = hash_ids(train_seqs);
  man.valid_hash = hash_ids(valid_seqs);

  const std::size_t V = model.config().vocab_size;
  const std::size_t P = model.params().size();
  const std::size_t B = cfg.b_eff();
  const auto trainable = model.params().trainable_mask();
  nn::AdamW<T> opt(P, cfg.adam);
  std::vector<T> grad(P);
  std::vector<T> best_params = model.params().values();
  std::optional<double> first_valid;
  std::size_t wait = 0;
  auto emit = [&](const MetricsRecord& r) {
    man.records.push_back(r);
    if (hooks.on_record) hooks.on_record(r);
  };

  std::vector<std::size_t> order(train_seqs.size());
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuf(derive_seed({cfg.data_seed, e, 0x5F}));
    shuf.shuffle(order);
    MaskedEvalBatch train_eval;
    bool diverged = false;
    const std::size_t steps = (order.size() + B - 1) / B;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<MaskPlan> plans;
      for (std::size_t j = s * B; j < std::min(order.size(), (s + 1) * B); ++j)
        plans.push_back(make_mask(train_seqs[order[j]], cfg.mask, cfg.data_seed, e, s, j - s * B, V));
      std::fill(grad.begin(), grad.end(), T(0));
      auto st = mlm_step<T>(model, plans, grad.data(), true, derive_seed({cfg.data_seed, e, s, 0xD0}), cfg.threads);
      if (hooks.after_backward) hooks.after_backward(grad, e, s);
      const double step_loss = st.nll_sum / static_cast<double>(st.masked);
      bool finite = std::isfinite(step_loss);
      for (std::size_t k = 0; finite && k < P; ++k) finite = std::isfinite(static_cast<double>(grad[k]));
      if (!finite) {
        diverged = true;
        break;
      }
      opt.step(model.params().values(), grad, trainable);
      ++man.optimizer_steps;
      train_eval.append(st.eval);
    }
    man.epochs_run = e;
    if (diverged) {
      man.stop_reason = "diverged";
      break;
    }
    emit(record_from(train_eval, e, "train"));
    const MetricsRecord v = evaluate_encoded(model, valid_seqs, cfg.mask, cfg.data_seed, cfg.threads, e, "valid");
    emit(v);
    if (hooks.on_epoch) hooks.on_epoch(e, model);
    if (!first_valid) first_valid = v.loss;
    if (!std::isfinite(v.loss) || v.loss > cfg.divergence_factor * *first_valid) {
      man.stop_reason = "diverged";
      break;
    }
    if (v.loss < man.best_valid_loss - cfg.early_stop.min_delta) {
      man.best_valid_loss = v.loss;
      man.best_epoch = e;
      best_params = model.params().values();
      wait = 0;
    } else if (++wait >= cfg.early_stop.patience) {
      man.stop_reason = "early_stopped";
      break;
    }
  }
  if (cfg.restore_best && man.stop_reason != "diverged" && man.best_epoch > 0) model.params().values() = best_params;
  return man;
}

template <class T>
RunManifest train(Encoder<T>& model, const tok::SubwordModel& tokenizer, const std::vector<std::string>& train_lines,
                  const std::vector<std::string>& valid_lines, const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  auto tr = encode_corpus(tokenizer, model, train_lines);
  auto va = encode_corpus(tokenizer, model, valid_lines);
  if (tr.empty()) throw Error(ErrorCode::EmptyCorpus, "training corpus is empty");
  if (va.empty()) throw Error(ErrorCode::EmptyCorpus, "validation corpus is empty");
  return train_encoded(model, tr, va, cfg, hooks);
}

}  // namespace clmw
