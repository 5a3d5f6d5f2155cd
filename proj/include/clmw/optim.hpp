//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Named flat parameter storage, AdamW and binary checkpoints.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "clmw/common.hpp"

namespace clmw::nn {

struct ParamEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool trainable = true;
  std::size_t size() const { return rows * cols; }
};

/// All parameters of a model in one contiguous buffer, so that gradients,
/// optimizer moments and checkpoints are plain vectors of the same length.
template <class T>
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols) {
    if (index_.count(name)) throw Error(ErrorCode::InvalidArgument, "duplicate parameter " + name);
    ParamEntry e{name, data_.size(), rows, cols, true};
    data_.resize(data_.size() + e.size(), T(0));
    index_[name] = entries_.size();
    entries_.push_back(e);
    return entries_.size() - 1;
  }

  const ParamEntry& entry(std::size_t i) const { return entries_.at(i); }
  const ParamEntry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::IndexOutOfRange, "unknown parameter " + name);
    return entries_[it->second];
  }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  void set_trainable(std::size_t i, bool t) { entries_.at(i).trainable = t; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }
  std::size_t size() const { return data_.size(); }

  T* ptr(std::size_t i) { return data_.data() + entries_.at(i).offset; }
  const T* ptr(std::size_t i) const { return data_.data() + entries_.at(i).offset; }

  /// 1 for every coordinate of a trainable entry, 0 otherwise.
  std::vector<std::uint8_t> trainable_mask() const {
    std::vector<std::uint8_t> m(data_.size(), 0);
    for (const auto& e : entries_)
      if (e.trainable) std::fill(m.begin() + static_cast<std::ptrdiff_t>(e.offset),
                                 m.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size()), 1);
    return m;
  }

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::vector<T> data_;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::size_t n, AdamWConfig cfg) : cfg_(cfg), m_(n, T(0)), v_(n, T(0)) {}

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<T>& first_moment() const { return m_; }
  const std::vector<T>& second_moment() const { return v_; }

  /// One update. Coordinates with mask 0 are left untouched (their moments
  /// too), which is how frozen blocks are kept exactly fixed.
  void step(std::span<T> params, std::span<const T> grads, std::span<const std::uint8_t> mask = {}) {
    if (params.size() != m_.size() || grads.size() != m_.size() || (!mask.empty() && mask.size() != m_.size()))
      throw Error(ErrorCode::ShapeMismatch, "adamw: " + std::to_string(params.size()) + " params, " +
                                                std::to_string(grads.size()) + " grads, state of " +
                                                std::to_string(m_.size()));
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps), wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!mask.empty() && !mask[i]) continue;
      const T g = grads[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
      const T mhat = m_[i] / c1;
      const T vhat = v_[i] / c2;
      const T p = params[i];
      params[i] = p - lr * mhat / (std::sqrt(vhat) + eps) - lr * wd * p;
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<T> m_;
  std::vector<T> v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "CLMWCKPT", u64 little-endian header length, JSON header,
// then the raw parameter buffer.

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'M', 'W', 'C', 'K', 'P', 'T'};

template <class T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "float32" : "float64";
}

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store, std::uint64_t seed, std::uint64_t step,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json h;
  h["dtype"] = dtype_name<T>();
  h["seed"] = seed;
  h["step"] = step;
  h["extra"] = extra;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : store.entries())
    params.push_back({{"name", e.name}, {"shape", {e.rows, e.cols}}, {"offset", e.offset}});
  h["params"] = params;
  const std::string header = h.dump();
  std::string blob(kCheckpointMagic, 8);
  const std::uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  blob += header;
  blob.append(reinterpret_cast<const char*>(store.data()), store.size() * sizeof(T));
  write_file(path, blob);
}

struct CheckpointInfo {
  std::string dtype;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  nlohmann::json extra;
};

/// Loads into a store whose layout must match the header exactly.
template <class T>
CheckpointInfo load_checkpoint(const std::string& path, ParamStore<T>& store) {
  const std::string blob = read_file(path);
  if (blob.size() < 16 || std::memcmp(blob.data(), kCheckpointMagic, 8) != 0)
    throw Error(ErrorCode::CheckpointMismatch, path + " is not a checkpoint");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[8 + i])) << (8 * i);
  if (16 + len > blob.size()) throw Error(ErrorCode::CheckpointMismatch, path + " header truncated");
  const auto h = nlohmann::json::parse(blob.substr(16, len));
  CheckpointInfo info{h.at("dtype"), h.at("seed"), h.at("step"), h.value("extra", nlohmann::json::object())};
  if (info.dtype != dtype_name<T>())
    throw Error(ErrorCode::CheckpointMismatch, "checkpoint dtype " + info.dtype + ", expected " + dtype_name<T>());
  const auto& ps = h.at("params");
  if (ps.size() != store.entries().size())
    throw Error(ErrorCode::CheckpointMismatch, "checkpoint has " + std::to_string(ps.size()) + " tensors, model has " +
                                                   std::to_string(store.entries().size()));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& e = store.entry(i);
    if (ps[i].at("name") != e.name || ps[i].at("shape")[0] != e.rows || ps[i].at("shape")[1] != e.cols)
      throw Error(ErrorCode::CheckpointMismatch, "tensor " + ps[i].at("name").get<std::string>() + " does not match " +
                                                     e.name);
  }
  if (blob.size() != 16 + len + store.size() * sizeof(T))
    throw Error(ErrorCode::CheckpointMismatch, path + " payload size mismatch");
  std::memcpy(store.data(), blob.data() + 16 + len, store.size() * sizeof(T));
  return info;
}

/// Reads only the JSON header.
inline nlohmann::json read_checkpoint_header(const std::string& path) {
  const std::string blob = read_file(path);
  if (blob.size() < 16 || std::memcmp(blob.data(), kCheckpointMagic, 8) != 0)
    throw Error(ErrorCode::CheckpointMismatch, path + " is not a checkpoint");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[8 + i])) << (8 * i);
  if (16 + len > blob.size()) throw Error(ErrorCode::CheckpointMismatch, path + " header truncated");
  return nlohmann::json::parse(blob.substr(16, len));
}

}  // namespace clmw::nn
