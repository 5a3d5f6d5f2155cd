//
// clmw - chemical language model workbench
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

// Dense row-major tensors and a reverse-mode tape.
//
// Every value on the tape is a matrix (rows x cols); vectors are 1 x n and
// scalars 1 x 1. Parameters enter the tape by pointer: their values are read
// in place and their gradients are accumulated into a caller-owned sink, so
// a forward pass never copies the parameter store.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clmw/common.hpp"

namespace clmw::nn {

template <class T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size()) throw Error(ErrorCode::ShapeMismatch, "data length does not match shape");
  }
  static Tensor zeros(std::vector<std::size_t> s) {
    const std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<T>(n, T(0)));
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() < 2 ? 1 : shape[0]; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

struct Var {
  std::size_t id = 0;
};

template <class T>
class Tape {
 public:
  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> value;
    const T* ext = nullptr;  // value held outside the tape
    std::vector<T> grad;
    T* sink = nullptr;  // gradient accumulator for parameters
    bool requires_grad = false;
    std::function<void(Tape&, std::size_t)> backward;

    const T* val() const { return ext ? ext : value.data(); }
    std::size_t size() const { return rows * cols; }
  };

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  // -- leaves ---------------------------------------------------------------

  Var constant(std::size_t rows, std::size_t cols, std::vector<T> data) {
    if (data.size() != rows * cols) throw Error(ErrorCode::ShapeMismatch, "constant data length");
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.value = std::move(data);
    return push(std::move(n));
  }
  Var constant(const Tensor<T>& t) { return constant(t.rows(), t.cols(), t.data); }

  /// A value read in place; no gradient flows to it.
  Var constant_ref(const T* data, std::size_t rows, std::size_t cols) { return param(data, rows, cols, nullptr); }

  /// A parameter read in place whose gradient is added into `sink`. A null
  /// sink makes it a constant.
  Var param(const T* data, std::size_t rows, std::size_t cols, T* sink) {
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.ext = data;
    n.sink = sink;
    n.requires_grad = sink != nullptr;
    return push(std::move(n));
  }

  /// A differentiable leaf owning its value; its gradient is read with grad().
  Var leaf(std::size_t rows, std::size_t cols, std::vector<T> data) {
    Var v = constant(rows, cols, std::move(data));
    nodes_[v.id].requires_grad = true;
    return v;
  }
  Var leaf(const Tensor<T>& t) { return leaf(t.rows(), t.cols(), t.data); }

  // -- access ---------------------------------------------------------------

  std::size_t rows(Var v) const { return node(v).rows; }
  std::size_t cols(Var v) const { return node(v).cols; }
  const T* value(Var v) const { return node(v).val(); }
  T scalar(Var v) const { return node(v).val()[0]; }
  Tensor<T> tensor(Var v) const {
    const Node& n = node(v);
    return Tensor<T>({n.rows, n.cols}, std::vector<T>(n.val(), n.val() + n.size()));
  }

  /// Gradient of a leaf or intermediate (zeros when none flowed).
  std::vector<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.sink) return std::vector<T>(n.sink, n.sink + n.size());
    if (n.grad.empty()) return std::vector<T>(n.size(), T(0));
    return n.grad;
  }

  // -- differentiation -------------------------------------------------------

  void backward(Var loss) {
    Node& l = node(loss);
    if (l.rows != 1 || l.cols != 1)
      throw Error(ErrorCode::NotScalarLoss, "backward needs a 1x1 loss, got " + shape_str(l.rows, l.cols));
    if (!l.requires_grad) return;
    gbuf(loss.id)[0] += T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward && (n.sink || !n.grad.empty())) n.backward(*this, i);
    }
  }

  // -- operations -----------------------------------------------------------

  Var matmul(Var a, Var b) {
    const std::size_t n = rows(a), k = cols(a), m = cols(b);
    if (rows(b) != k)
      throw Error(ErrorCode::ShapeMismatch, "matmul " + shape_str(n, k) + " x " + shape_str(rows(b), m));
    std::vector<T> out(n * m, T(0));
    const T* A = value(a);
    const T* B = value(b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = A[i * k + p];
        const T* brow = B + p * m;
        T* orow = out.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
      }
    return op(n, m, std::move(out), {a, b}, [a, b, n, k, m](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      if (t.needs(a)) {
        T* dA = t.gbuf(a.id);
        const T* B = t.value(b);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T s = T(0);
            for (std::size_t j = 0; j < m; ++j) s += G[i * m + j] * B[p * m + j];
            dA[i * k + p] += s;
          }
      }
      if (t.needs(b)) {
        T* dB = t.gbuf(b.id);
        const T* A = t.value(a);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = A[i * k + p];
            for (std::size_t j = 0; j < m; ++j) dB[p * m + j] += aip * G[i * m + j];
          }
      }
    });
  }

  /// a (n x k) times the transpose of b (m x k).
  Var matmul_bt(Var a, Var b) {
    const std::size_t n = rows(a), k = cols(a), m = rows(b);
    if (cols(b) != k)
      throw Error(ErrorCode::ShapeMismatch, "matmul_bt " + shape_str(n, k) + " x " + shape_str(m, cols(b)) + "^T");
    std::vector<T> out(n * m, T(0));
    const T* A = value(a);
    const T* B = value(b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        T s = T(0);
        for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
        out[i * m + j] = s;
      }
    return op(n, m, std::move(out), {a, b}, [a, b, n, k, m](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      if (t.needs(a)) {
        T* dA = t.gbuf(a.id);
        const T* B = t.value(b);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const T g = G[i * m + j];
            for (std::size_t p = 0; p < k; ++p) dA[i * k + p] += g * B[j * k + p];
          }
      }
      if (t.needs(b)) {
        T* dB = t.gbuf(b.id);
        const T* A = t.value(a);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const T g = G[i * m + j];
            for (std::size_t p = 0; p < k; ++p) dB[j * k + p] += g * A[i * k + p];
          }
      }
    });
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    const std::size_t n = node(a).size();
    std::vector<T> out(n);
    const T* A = value(a);
    const T* B = value(b);
    for (std::size_t i = 0; i < n; ++i) out[i] = A[i] + B[i];
    return op(rows(a), cols(a), std::move(out), {a, b}, [a, b, n](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      for (Var v : {a, b})
        if (t.needs(v)) {
          T* d = t.gbuf(v.id);
          for (std::size_t i = 0; i < n; ++i) d[i] += G[i];
        }
    });
  }

  /// Adds a 1 x m row vector to every row of a (n x m).
  Var add_bias(Var a, Var b) {
    const std::size_t n = rows(a), m = cols(a);
    if (rows(b) != 1 || cols(b) != m)
      throw Error(ErrorCode::ShapeMismatch, "add_bias " + shape_str(n, m) + " + " + shape_str(rows(b), cols(b)));
    std::vector<T> out(n * m);
    const T* A = value(a);
    const T* B = value(b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] = A[i * m + j] + B[j];
    return op(n, m, std::move(out), {a, b}, [a, b, n, m](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      if (t.needs(a)) {
        T* d = t.gbuf(a.id);
        for (std::size_t i = 0; i < n * m; ++i) d[i] += G[i];
      }
      if (t.needs(b)) {
        T* d = t.gbuf(b.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) d[j] += G[i * m + j];
      }
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    const std::size_t n = node(a).size();
    std::vector<T> out(n);
    const T* A = value(a);
    const T* B = value(b);
    for (std::size_t i = 0; i < n; ++i) out[i] = A[i] * B[i];
    return op(rows(a), cols(a), std::move(out), {a, b}, [a, b, n](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      if (t.needs(a)) {
        T* d = t.gbuf(a.id);
        const T* B = t.value(b);
        for (std::size_t i = 0; i < n; ++i) d[i] += G[i] * B[i];
      }
      if (t.needs(b)) {
        T* d = t.gbuf(b.id);
        const T* A = t.value(a);
        for (std::size_t i = 0; i < n; ++i) d[i] += G[i] * A[i];
      }
    });
  }

  Var scale(Var a, T s) {
    const std::size_t n = node(a).size();
    std::vector<T> out(n);
    const T* A = value(a);
    for (std::size_t i = 0; i < n; ++i) out[i] = A[i] * s;
    return op(rows(a), cols(a), std::move(out), {a}, [a, n, s](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      T* d = t.gbuf(a.id);
      for (std::size_t i = 0; i < n; ++i) d[i] += G[i] * s;
    });
  }

  Var softmax_rows(Var a) {
    const std::size_t n = rows(a), m = cols(a);
    std::vector<T> out(n * m);
    const T* A = value(a);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = A + i * m;
      const T mx = *std::max_element(row, row + m);
      T z = T(0);
      for (std::size_t j = 0; j < m; ++j) {
        out[i * m + j] = std::exp(row[j] - mx);
        z += out[i * m + j];
      }
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
    }
    return op(n, m, std::move(out), {a}, [a, n, m](Tape& t, std::size_t self) {
      const Node& s = t.nodes_[self];
      const T* G = s.grad.data();
      const T* Y = s.value.data();
      T* d = t.gbuf(a.id);
      for (std::size_t i = 0; i < n; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < m; ++j) dot += G[i * m + j] * Y[i * m + j];
        for (std::size_t j = 0; j < m; ++j) d[i * m + j] += Y[i * m + j] * (G[i * m + j] - dot);
      }
    });
  }

  /// Row-wise normalization followed by the affine map gamma * x + beta
  /// (both 1 x m).
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-12)) {
    const std::size_t n = rows(x), m = cols(x);
    if (rows(gamma) != 1 || cols(gamma) != m || rows(beta) != 1 || cols(beta) != m)
      throw Error(ErrorCode::ShapeMismatch, "layer_norm " + shape_str(n, m) + " with gamma " +
                                                shape_str(rows(gamma), cols(gamma)));
    std::vector<T> xhat(n * m), inv(n), out(n * m);
    const T* X = value(x);
    const T* Gm = value(gamma);
    const T* Bt = value(beta);
    for (std::size_t i = 0; i < n; ++i) {
      T mu = T(0);
      for (std::size_t j = 0; j < m; ++j) mu += X[i * m + j];
      mu /= static_cast<T>(m);
      T var = T(0);
      for (std::size_t j = 0; j < m; ++j) var += (X[i * m + j] - mu) * (X[i * m + j] - mu);
      var /= static_cast<T>(m);
      inv[i] = T(1) / std::sqrt(var + eps);
      for (std::size_t j = 0; j < m; ++j) {
        xhat[i * m + j] = (X[i * m + j] - mu) * inv[i];
        out[i * m + j] = Gm[j] * xhat[i * m + j] + Bt[j];
      }
    }
    return op(n, m, std::move(out), {x, gamma, beta},
              [x, gamma, beta, n, m, xhat = std::move(xhat), inv = std::move(inv)](Tape& t, std::size_t self) {
                const T* G = t.nodes_[self].grad.data();
                if (t.needs(gamma)) {
                  T* d = t.gbuf(gamma.id);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) d[j] += G[i * m + j] * xhat[i * m + j];
                }
                if (t.needs(beta)) {
                  T* d = t.gbuf(beta.id);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) d[j] += G[i * m + j];
                }
                if (t.needs(x)) {
                  T* d = t.gbuf(x.id);
                  const T* Gm = t.value(gamma);
                  for (std::size_t i = 0; i < n; ++i) {
                    T mean_g = T(0), mean_gx = T(0);
                    for (std::size_t j = 0; j < m; ++j) {
                      const T gh = G[i * m + j] * Gm[j];
                      mean_g += gh;
                      mean_gx += gh * xhat[i * m + j];
                    }
                    mean_g /= static_cast<T>(m);
                    mean_gx /= static_cast<T>(m);
                    for (std::size_t j = 0; j < m; ++j) {
                      const T gh = G[i * m + j] * Gm[j];
                      d[i * m + j] += inv[i] * (gh - mean_g - xhat[i * m + j] * mean_gx);
                    }
                  }
                }
              });
  }

  /// x * Phi(x) with the exact normal CDF.
  Var gelu(Var a) {
    const std::size_t n = node(a).size();
    std::vector<T> out(n);
    const T* A = value(a);
    for (std::size_t i = 0; i < n; ++i) out[i] = A[i] * normal_cdf(A[i]);
    return op(rows(a), cols(a), std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      const T* A = t.value(a);
      T* d = t.gbuf(a.id);
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      for (std::size_t i = 0; i < n; ++i) {
        const T x = A[i];
        const T pdf = static_cast<T>(kInvSqrt2Pi) * std::exp(-x * x / T(2));
        d[i] += G[i] * (normal_cdf(x) + x * pdf);
      }
    });
  }

  /// Rows of `table` selected by `ids`.
  Var embedding(Var table, std::span<const int> ids) {
    const std::size_t v = rows(table), h = cols(table);
    std::vector<T> out(ids.size() * h);
    const T* E = value(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
        throw Error(ErrorCode::IndexOutOfRange, "embedding id " + std::to_string(ids[i]) + " for table of " +
                                                    std::to_string(v) + " rows");
      std::copy(E + static_cast<std::size_t>(ids[i]) * h, E + static_cast<std::size_t>(ids[i] + 1) * h,
                out.begin() + static_cast<std::ptrdiff_t>(i * h));
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return op(ids.size(), h, std::move(out), {table}, [table, h, idx = std::move(idx)](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      T* d = t.gbuf(table.id);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < h; ++j) d[static_cast<std::size_t>(idx[i]) * h + j] += G[i * h + j];
    });
  }

  Var gather_rows(Var a, std::span<const int> idx) { return embedding(a, idx); }

  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const std::size_t n = rows(a), m = cols(a);
    if (c0 > c1 || c1 > m) throw Error(ErrorCode::ShapeMismatch, "slice_cols out of range for " + shape_str(n, m));
    const std::size_t w = c1 - c0;
    std::vector<T> out(n * w);
    const T* A = value(a);
    for (std::size_t i = 0; i < n; ++i) std::copy(A + i * m + c0, A + i * m + c1, out.begin() + static_cast<std::ptrdiff_t>(i * w));
    return op(n, w, std::move(out), {a}, [a, n, m, c0, w](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      T* d = t.gbuf(a.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) d[i * m + c0 + j] += G[i * w + j];
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_cols of nothing");
    const std::size_t n = rows(parts[0]);
    std::size_t m = 0;
    for (Var p : parts) {
      if (rows(p) != n) throw Error(ErrorCode::ShapeMismatch, "concat_cols row mismatch");
      m += cols(p);
    }
    std::vector<T> out(n * m);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t w = cols(p);
      const T* P = value(p);
      for (std::size_t i = 0; i < n; ++i) std::copy(P + i * w, P + (i + 1) * w, out.begin() + static_cast<std::ptrdiff_t>(i * m + off));
      off += w;
    }
    return op(n, m, std::move(out), parts, [parts, n, m](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t w = t.cols(p);
        if (t.needs(p)) {
          T* d = t.gbuf(p.id);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) d[i * w + j] += G[i * m + off + j];
        }
        off += w;
      }
    });
  }

  /// Inverted dropout; identity when p == 0.
  Var dropout(Var a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    if (p >= 1.0) throw Error(ErrorCode::InvalidArgument, "dropout probability must be < 1");
    const std::size_t n = node(a).size();
    std::vector<T> keep(n);
    const T s = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < n; ++i) keep[i] = rng.uniform01() < p ? T(0) : s;
    std::vector<T> out(n);
    const T* A = value(a);
    for (std::size_t i = 0; i < n; ++i) out[i] = A[i] * keep[i];
    return op(rows(a), cols(a), std::move(out), {a}, [a, n, keep = std::move(keep)](Tape& t, std::size_t self) {
      const T* G = t.nodes_[self].grad.data();
      T* d = t.gbuf(a.id);
      for (std::size_t i = 0; i < n; ++i) d[i] += G[i] * keep[i];
    });
  }

  /// Sum over rows with target >= 0 of -log softmax(logits_i)[target_i],
  /// divided by `normalizer` (default: the number of such rows).
  Var cross_entropy_masked(Var logits, std::span<const int> targets, std::optional<double> normalizer = std::nullopt) {
    const std::size_t n = rows(logits), v = cols(logits);
    if (targets.size() != n)
      throw Error(ErrorCode::ShapeMismatch, "cross_entropy_masked: " + std::to_string(targets.size()) +
                                                " targets for " + shape_str(n, v) + " logits");
    std::size_t active = 0;
    for (int y : targets) {
      if (y >= static_cast<int>(v)) throw Error(ErrorCode::IndexOutOfRange, "target id " + std::to_string(y));
      active += y >= 0;
    }
    const double norm = normalizer.value_or(static_cast<double>(active));
    if (active == 0 || !(norm > 0.0)) throw Error(ErrorCode::NoMaskedPositions, "no masked positions in loss");
    std::vector<T> probs(n * v);
    const T* L = value(logits);
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = L + i * v;
      const T mx = *std::max_element(row, row + v);
      T z = T(0);
      for (std::size_t j = 0; j < v; ++j) {
        probs[i * v + j] = std::exp(row[j] - mx);
        z += probs[i * v + j];
      }
      for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
      if (targets[i] >= 0) total += -(row[targets[i]] - mx - std::log(z));
    }
    const T inv_norm = static_cast<T>(1.0 / norm);
    std::vector<int> tg(targets.begin(), targets.end());
    return op(1, 1, {total * inv_norm}, {logits},
              [logits, n, v, inv_norm, tg = std::move(tg), probs = std::move(probs)](Tape& t, std::size_t self) {
                const T g = t.nodes_[self].grad[0] * inv_norm;
                T* d = t.gbuf(logits.id);
                for (std::size_t i = 0; i < n; ++i) {
                  if (tg[i] < 0) continue;
                  for (std::size_t j = 0; j < v; ++j) d[i * v + j] += g * probs[i * v + j];
                  d[i * v + static_cast<std::size_t>(tg[i])] -= g;
                }
              });
  }

  /// Mean squared error between an n x 1 prediction and n targets.
  Var mse(Var pred, std::span<const T> target) {
    const std::size_t n = node(pred).size();
    if (target.size() != n) throw Error(ErrorCode::ShapeMismatch, "mse target length");
    const T* P = value(pred);
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += (P[i] - target[i]) * (P[i] - target[i]);
    std::vector<T> y(target.begin(), target.end());
    return op(1, 1, {s / static_cast<T>(n)}, {pred}, [pred, n, y = std::move(y)](Tape& t, std::size_t self) {
      const T g = t.nodes_[self].grad[0] * T(2) / static_cast<T>(n);
      const T* P = t.value(pred);
      T* d = t.gbuf(pred.id);
      for (std::size_t i = 0; i < n; ++i) d[i] += g * (P[i] - y[i]);
    });
  }

  Var sum(Var a) {
    const std::size_t n = node(a).size();
    const T* A = value(a);
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += A[i];
    return op(1, 1, {s}, {a}, [a, n](Tape& t, std::size_t self) {
      const T g = t.nodes_[self].grad[0];
      T* d = t.gbuf(a.id);
      for (std::size_t i = 0; i < n; ++i) d[i] += g;
    });
  }

  static T normal_cdf(T x) { return T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2)))); }

 private:
  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw Error(ErrorCode::IndexOutOfRange, "tape variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw Error(ErrorCode::IndexOutOfRange, "tape variable");
    return nodes_[v.id];
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer of node `i`: the sink for parameters, otherwise an
  /// owned zero-initialized vector.
  T* gbuf(std::size_t i) {
    Node& n = nodes_[i];
    if (n.sink) return n.sink;
    if (n.grad.empty()) n.grad.assign(n.size(), T(0));
    return n.grad.data();
  }

  void same_shape(Var a, Var b, const char* what) const {
    if (rows(a) != rows(b) || cols(a) != cols(b))
      throw Error(ErrorCode::ShapeMismatch, std::string(what) + " " + shape_str(rows(a), cols(a)) + " vs " +
                                                shape_str(rows(b), cols(b)));
  }

  template <class F>
  Var op(std::size_t r, std::size_t c, std::vector<T> value, std::initializer_list<Var> inputs, F&& back) {
    return op(r, c, std::move(value), std::vector<Var>(inputs), std::forward<F>(back));
  }

  template <class F>
  Var op(std::size_t r, std::size_t c, std::vector<T> value, const std::vector<Var>& inputs, F&& back) {
    Node n;
    n.rows = r;
    n.cols = c;
    n.value = std::move(value);
    for (Var v : inputs) n.requires_grad |= nodes_[v.id].requires_grad;
    if (n.requires_grad) n.backward = std::forward<F>(back);
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
};

/// Row-wise log-softmax outside any tape.
template <class T>
std::vector<T> log_softmax_rows(const T* x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = x + i * cols;
    const T mx = *std::max_element(row, row + cols);
    T z = T(0);
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
    const T lz = std::log(z) + mx;
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = row[j] - lz;
  }
  return out;
}

}  // namespace clmw::nn
