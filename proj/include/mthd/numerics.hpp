#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mthd/error.hpp"

namespace mthd::nn {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array of doubles. A scalar has an empty shape.
class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    if (values_.size() != shape_size(shape_)) {
      throw DimensionError("tensor of shape " + shape_string(shape_) +
                           " cannot hold " + std::to_string(values_.size()) +
                           " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != cols) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return matrix(rows.size(), cols, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  const double& at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }
  double item() const { return values_.front(); }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(values_).subspan(r * cols(), cols());
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  // Bit-level equality; NaN payloads compare by value which is what
  // determinism checks want.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("zero dimension in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

struct Parameter {
  std::string id;
  Tensor value;
  Tensor gradient;

  Parameter() = default;
  Parameter(std::string name, Tensor initial)
      : id(std::move(name)), value(std::move(initial)), gradient(value.shape()) {}
};

/// Ordered, id-addressable collection of parameters. Order is the
/// serialization order.
class ParameterSet {
 public:
  std::size_t add(std::string id, Tensor value) {
    if (index_.count(id)) throw ConfigError("duplicate parameter id '" + id + "'");
    index_.emplace(id, params_.size());
    params_.emplace_back(std::move(id), std::move(value));
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  const Parameter& get(const std::string& id) const { return params_[index_of(id)]; }
  Parameter& get(const std::string& id) { return params_[index_of(id)]; }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw IndexError("unknown parameter '" + id + "'");
    return it->second;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_gradients() {
    for (auto& p : params_) p.gradient.fill(0.0);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  bool values_equal(const ParameterSet& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (params_[i].id != other.params_[i].id || !(params_[i].value == other.params_[i].value))
        return false;
    }
    return true;
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Random numbers: splitmix64 seeding a xoshiro256** generator.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    for (auto& s : state_) s = splitmix64(seed);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in the open interval (0, 1).
  double uniform() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[below(i)]);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4]{};
};

// ---------------------------------------------------------------------------
// Kernels.

namespace kernel {

// Four independent accumulators so the compiler can vectorize without
// reassociation flags; the summation order is fixed, hence deterministic.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Computation record.

class Graph;

/// Handle to a node of a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of executed ops. Nodes are appended as ops execute, so
/// operands always precede their consumers and the reverse index order is a
/// valid reverse topological order.
///
/// A recording graph keeps the local-gradient rule of every op whose inputs
/// depend on a parameter; a non-recording graph only computes values, which
/// is what decoding uses.
class Graph {
 public:
  using BackwardRule = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Parameters are referenced, not copied; they must outlive the graph.
  Var param(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Node n;
    n.param = &p;
    n.requires_grad = recording_;
    Var v = push(std::move(n));
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param ? n.param->value : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator of a node, allocated on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Appends the result of an op. The rule is kept only when recording and
  /// at least one input depends on a parameter.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardRule rule) {
    Node n;
    n.value = std::move(value);
    if (recording_) {
      for (const Var& in : inputs) {
        check_owner(in);
        if (nodes_[in.id()].requires_grad) n.requires_grad = true;
      }
      if (n.requires_grad) n.backward = std::move(rule);
    }
    return push(std::move(n));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardRule rule) {
    Node n;
    n.value = std::move(value);
    if (recording_) {
      for (const Var& in : inputs) {
        check_owner(in);
        if (nodes_[in.id()].requires_grad) n.requires_grad = true;
      }
      if (n.requires_grad) n.backward = std::move(rule);
    }
    return push(std::move(n));
  }

  /// Reverse pass from a scalar loss. Every node is visited at most once;
  /// resulting parameter gradients are added into the matching entries of
  /// `params` (matched by identity).
  void backward(const Var& loss, ParameterSet& params) {
    check_owner(loss);
    if (value(loss.id()).size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_string(value(loss.id()).shape()));
    }
    if (!recording_) throw ContractError("backward on a non-recording graph");
    if (backward_done_) throw ContractError("backward already ran on this record");
    backward_done_ = true;

    grad(loss.id()).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, i);
    }
    for (auto& p : params) {
      auto it = param_nodes_.find(&p);
      if (it == param_nodes_.end()) continue;
      const Node& n = nodes_[it->second];
      if (!n.has_grad) continue;
      kernel::axpy(1.0, n.grad.data(), p.gradient.data(), p.gradient.size());
    }
  }

  /// Gradient of a parameter leaf after backward (zero tensor if unreached).
  Tensor param_grad(const Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end() || !nodes_[it->second].has_grad) return Tensor(p.value.shape());
    return nodes_[it->second].grad;
  }

 private:
  struct Node {
    Tensor value;
    const Parameter* param = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardRule backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(const Var& v) const {
    if (&v.graph() != this || v.id() >= nodes_.size())
      throw ContractError("variable belongs to a different computation record");
  }

  bool recording_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

// ---------------------------------------------------------------------------
// Ops.

namespace impl {

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

inline void require_rank(const char* op, const Var& a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(a.shape()));
  }
}

inline void accumulate_if(Graph& g, const Var& v, const Tensor& delta) {
  if (!g.requires_grad(v.id())) return;
  Tensor& gr = g.grad(v.id());
  kernel::axpy(1.0, delta.data(), gr.data(), gr.size());
}

template <typename F, typename D>
Var unary(const Var& a, F f, D dfdx_from_y) {
  Graph& g = a.graph();
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return g.record(std::move(y), {a}, [a, dfdx_from_y](Graph& g, std::size_t self) {
    if (!g.requires_grad(a.id())) return;
    const Tensor& y = g.value(self);
    const Tensor& gy = g.grad(self);
    Tensor& ga = g.grad(a.id());
    for (std::size_t i = 0; i < y.size(); ++i) ga[i] += gy[i] * dfdx_from_y(y[i]);
  });
}

}  // namespace impl

/// General matrix product of an m×k and a k×n matrix.
inline Var matmul(const Var& a, const Var& b) {
  impl::require_rank("matmul", a, 2);
  impl::require_rank("matmul", b, 2);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
  if (B.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(A.shape()) +
                         " x " + shape_string(B.shape()));
  }
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) kernel::axpy(A.at(i, p), &B.at(p, 0), &C.at(i, 0), n);
  return a.graph().record(std::move(C), {a, b}, [a, b, m, k, n](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    const Tensor& A = g.value(a.id());
    const Tensor& B = g.value(b.id());
    if (g.requires_grad(a.id())) {
      Tensor& GA = g.grad(a.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) GA.at(i, p) += kernel::dot(&G.at(i, 0), &B.at(p, 0), n);
    }
    if (g.requires_grad(b.id())) {
      Tensor& GB = g.grad(b.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) kernel::axpy(A.at(i, p), &G.at(i, 0), &GB.at(p, 0), n);
    }
  });
}

/// a · bᵀ for an m×k and an n×k matrix.
inline Var matmul_bt(const Var& a, const Var& b) {
  impl::require_rank("matmul_bt", a, 2);
  impl::require_rank("matmul_bt", b, 2);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[0];
  if (B.shape()[1] != k) {
    throw DimensionError("matmul_bt: inner dimensions disagree for " + shape_string(A.shape()) +
                         " x " + shape_string(B.shape()) + "^T");
  }
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.at(i, j) = kernel::dot(&A.at(i, 0), &B.at(j, 0), k);
  return a.graph().record(std::move(C), {a, b}, [a, b, m, k, n](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    const Tensor& A = g.value(a.id());
    const Tensor& B = g.value(b.id());
    if (g.requires_grad(a.id())) {
      Tensor& GA = g.grad(a.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) kernel::axpy(G.at(i, j), &B.at(j, 0), &GA.at(i, 0), k);
    }
    if (g.requires_grad(b.id())) {
      Tensor& GB = g.grad(b.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) kernel::axpy(G.at(i, j), &A.at(i, 0), &GB.at(j, 0), k);
    }
  });
}

/// W·x for an m×n matrix and a length-n vector.
inline Var matvec(const Var& w, const Var& x) {
  impl::require_rank("matvec", w, 2);
  const Tensor& W = w.value();
  const Tensor& X = x.value();
  const std::size_t m = W.shape()[0], n = W.shape()[1];
  if (X.size() != n || X.rank() != 1) {
    throw DimensionError("matvec: " + shape_string(W.shape()) + " cannot multiply " +
                         shape_string(X.shape()));
  }
  Tensor y({m});
  for (std::size_t i = 0; i < m; ++i) y[i] = kernel::dot(&W.at(i, 0), X.data(), n);
  return w.graph().record(std::move(y), {w, x}, [w, x, m, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.requires_grad(w.id())) {
      const Tensor& X = g.value(x.id());
      Tensor& GW = g.grad(w.id());
      for (std::size_t i = 0; i < m; ++i) kernel::axpy(gy[i], X.data(), &GW.at(i, 0), n);
    }
    if (g.requires_grad(x.id())) {
      const Tensor& W = g.value(w.id());
      Tensor& GX = g.grad(x.id());
      for (std::size_t i = 0; i < m; ++i) kernel::axpy(gy[i], &W.at(i, 0), GX.data(), n);
    }
  });
}

/// xᵀ·M for a length-m vector and an m×n matrix.
inline Var vecmat(const Var& x, const Var& m_) {
  impl::require_rank("vecmat", m_, 2);
  const Tensor& M = m_.value();
  const Tensor& X = x.value();
  const std::size_t m = M.shape()[0], n = M.shape()[1];
  if (X.size() != m || X.rank() != 1) {
    throw DimensionError("vecmat: " + shape_string(X.shape()) + " cannot multiply " +
                         shape_string(M.shape()));
  }
  Tensor y({n});
  for (std::size_t i = 0; i < m; ++i) kernel::axpy(X[i], &M.at(i, 0), y.data(), n);
  return x.graph().record(std::move(y), {x, m_}, [x, m_, m, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.requires_grad(x.id())) {
      const Tensor& M = g.value(m_.id());
      Tensor& GX = g.grad(x.id());
      for (std::size_t i = 0; i < m; ++i) GX[i] += kernel::dot(&M.at(i, 0), gy.data(), n);
    }
    if (g.requires_grad(m_.id())) {
      const Tensor& X = g.value(x.id());
      Tensor& GM = g.grad(m_.id());
      for (std::size_t i = 0; i < m; ++i) kernel::axpy(X[i], gy.data(), &GM.at(i, 0), n);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  impl::require_same_shape("add", a, b);
  Tensor y = a.value();
  kernel::axpy(1.0, b.value().data(), y.data(), y.size());
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    impl::accumulate_if(g, a, gy);
    impl::accumulate_if(g, b, gy);
  });
}

inline Var add(const Var& a, const Var& b, const Var& c) { return add(add(a, b), c); }

inline Var sub(const Var& a, const Var& b) {
  impl::require_same_shape("sub", a, b);
  Tensor y = a.value();
  kernel::axpy(-1.0, b.value().data(), y.data(), y.size());
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    impl::accumulate_if(g, a, gy);
    if (g.requires_grad(b.id())) kernel::axpy(-1.0, gy.data(), g.grad(b.id()).data(), gy.size());
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  impl::require_same_shape("mul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor y(A.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = A[i] * B[i];
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.requires_grad(a.id())) {
      const Tensor& B = g.value(b.id());
      Tensor& ga = g.grad(a.id());
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * B[i];
    }
    if (g.requires_grad(b.id())) {
      const Tensor& A = g.value(a.id());
      Tensor& gb = g.grad(b.id());
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * A[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor y = a.value();
  for (auto& v : y.values()) v *= c;
  return a.graph().record(std::move(y), {a}, [a, c](Graph& g, std::size_t self) {
    if (g.requires_grad(a.id())) {
      const Tensor& gy = g.grad(self);
      kernel::axpy(c, gy.data(), g.grad(a.id()).data(), gy.size());
    }
  });
}

/// 1 − a, elementwise.
inline Var one_minus(const Var& a) {
  Tensor y = a.value();
  for (auto& v : y.values()) v = 1.0 - v;
  return a.graph().record(std::move(y), {a}, [a](Graph& g, std::size_t self) {
    if (g.requires_grad(a.id())) {
      const Tensor& gy = g.grad(self);
      kernel::axpy(-1.0, gy.data(), g.grad(a.id()).data(), gy.size());
    }
  });
}

inline Var sigmoid(const Var& a) {
  return impl::unary(
      a,
      [](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return impl::unary(a, [](double x) { return std::tanh(x); },
                       [](double y) { return 1.0 - y * y; });
}

inline Var dot(const Var& a, const Var& b) {
  impl::require_same_shape("dot", a, b);
  Tensor y = Tensor::scalar(kernel::dot(a.value().data(), b.value().data(), a.size()));
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const double gy = g.grad(self).item();
    if (g.requires_grad(a.id()))
      kernel::axpy(gy, g.value(b.id()).data(), g.grad(a.id()).data(), a.size());
    if (g.requires_grad(b.id()))
      kernel::axpy(gy, g.value(a.id()).data(), g.grad(b.id()).data(), b.size());
  });
}

inline Var sum(const Var& a) {
  double s = 0;
  for (double v : a.value().values()) s += v;
  return a.graph().record(Tensor::scalar(s), {a}, [a](Graph& g, std::size_t self) {
    if (!g.requires_grad(a.id())) return;
    const double gy = g.grad(self).item();
    for (auto& v : g.grad(a.id()).values()) v += gy;
  });
}

/// Sum of scalars, recorded as a single node.
inline Var sum(const std::vector<Var>& terms) {
  if (terms.empty()) throw DimensionError("sum: no terms");
  double s = 0;
  for (const Var& t : terms) {
    if (t.size() != 1) throw DimensionError("sum: term of shape " + shape_string(t.shape()));
    s += t.value().item();
  }
  return terms.front().graph().record(Tensor::scalar(s), terms, [terms](Graph& g, std::size_t self) {
    const double gy = g.grad(self).item();
    for (const Var& t : terms)
      if (g.requires_grad(t.id())) g.grad(t.id())[0] += gy;
  });
}

/// Concatenation of rank-1 tensors.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  std::vector<double> values;
  for (const Var& p : parts) {
    impl::require_rank("concat", p, 1);
    auto s = p.value().values();
    values.insert(values.end(), s.begin(), s.end());
  }
  return parts.front().graph().record(Tensor::vector(std::move(values)), parts,
                                      [parts](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t n = p.size();
      if (g.requires_grad(p.id())) kernel::axpy(1.0, gy.data() + offset, g.grad(p.id()).data(), n);
      offset += n;
    }
  });
}

/// Stacks equal-length rank-1 tensors into the rows of a matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  const std::size_t n = rows.front().size();
  std::vector<double> values;
  values.reserve(rows.size() * n);
  for (const Var& r : rows) {
    impl::require_rank("stack_rows", r, 1);
    if (r.size() != n) throw DimensionError("stack_rows: ragged rows");
    auto s = r.value().values();
    values.insert(values.end(), s.begin(), s.end());
  }
  return rows.front().graph().record(Tensor::matrix(rows.size(), n, std::move(values)), rows,
                                     [rows, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (g.requires_grad(rows[i].id()))
        kernel::axpy(1.0, &gy.at(i, 0), g.grad(rows[i].id()).data(), n);
  });
}

inline Var mean_rows(const Var& m_) {
  impl::require_rank("mean_rows", m_, 2);
  const Tensor& M = m_.value();
  const std::size_t r = M.shape()[0], c = M.shape()[1];
  Tensor y({c});
  const double inv = 1.0 / static_cast<double>(r);
  for (std::size_t i = 0; i < r; ++i) kernel::axpy(inv, &M.at(i, 0), y.data(), c);
  return m_.graph().record(std::move(y), {m_}, [m_, r, c, inv](Graph& g, std::size_t self) {
    if (!g.requires_grad(m_.id())) return;
    const Tensor& gy = g.grad(self);
    Tensor& gm = g.grad(m_.id());
    for (std::size_t i = 0; i < r; ++i) kernel::axpy(inv, gy.data(), &gm.at(i, 0), c);
  });
}

/// Adds a length-c vector to every row of an r×c matrix.
inline Var add_to_rows(const Var& m_, const Var& v) {
  impl::require_rank("add_to_rows", m_, 2);
  const Tensor& M = m_.value();
  const std::size_t r = M.shape()[0], c = M.shape()[1];
  if (v.size() != c) {
    throw DimensionError("add_to_rows: " + shape_string(v.shape()) + " vs rows of " +
                         shape_string(M.shape()));
  }
  Tensor y = M;
  for (std::size_t i = 0; i < r; ++i) kernel::axpy(1.0, v.value().data(), &y.at(i, 0), c);
  return m_.graph().record(std::move(y), {m_, v}, [m_, v, r, c](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    impl::accumulate_if(g, m_, gy);
    if (g.requires_grad(v.id())) {
      Tensor& gv = g.grad(v.id());
      for (std::size_t i = 0; i < r; ++i) kernel::axpy(1.0, &gy.at(i, 0), gv.data(), c);
    }
  });
}

/// Row `index` of a matrix (embedding lookup).
inline Var lookup(const Var& table, std::size_t index) {
  impl::require_rank("lookup", table, 2);
  const Tensor& T = table.value();
  if (index >= T.shape()[0]) {
    throw IndexError("lookup: row " + std::to_string(index) + " out of range for " +
                     shape_string(T.shape()));
  }
  const std::size_t c = T.shape()[1];
  auto row = T.row(index);
  Tensor y = Tensor::vector(std::vector<double>(row.begin(), row.end()));
  return table.graph().record(std::move(y), {table}, [table, index, c](Graph& g, std::size_t self) {
    if (!g.requires_grad(table.id())) return;
    kernel::axpy(1.0, g.grad(self).data(), &g.grad(table.id()).at(index, 0), c);
  });
}

namespace impl {

inline std::vector<double> log_softmax_values(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0;
  for (double x : v) total += std::exp(x - mx);
  const double log_z = mx + std::log(total);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - log_z;
  return out;
}

inline void require_nonempty_vector(const char* op, const Var& v) {
  if (v.value().rank() != 1) {
    throw DimensionError(std::string(op) + ": expected a vector, got shape " +
                         shape_string(v.shape()));
  }
}

}  // namespace impl

inline Var softmax(const Var& v) {
  impl::require_nonempty_vector("softmax", v);
  auto logp = impl::log_softmax_values(v.value().values());
  std::vector<double> p(logp.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logp[i]);
  return v.graph().record(Tensor::vector(std::move(p)), {v}, [v](Graph& g, std::size_t self) {
    if (!g.requires_grad(v.id())) return;
    const Tensor& y = g.value(self);
    const Tensor& gy = g.grad(self);
    const double inner = kernel::dot(y.data(), gy.data(), y.size());
    Tensor& gv = g.grad(v.id());
    for (std::size_t i = 0; i < y.size(); ++i) gv[i] += y[i] * (gy[i] - inner);
  });
}

inline Var log_softmax(const Var& v) {
  impl::require_nonempty_vector("log_softmax", v);
  Tensor y = Tensor::vector(impl::log_softmax_values(v.value().values()));
  return v.graph().record(std::move(y), {v}, [v](Graph& g, std::size_t self) {
    if (!g.requires_grad(v.id())) return;
    const Tensor& y = g.value(self);
    const Tensor& gy = g.grad(self);
    double total = 0;
    for (double x : gy.values()) total += x;
    Tensor& gv = g.grad(v.id());
    for (std::size_t i = 0; i < y.size(); ++i) gv[i] += gy[i] - std::exp(y[i]) * total;
  });
}

/// −log softmax(logits)[target].
inline Var cross_entropy(const Var& logits, std::size_t target) {
  impl::require_nonempty_vector("cross_entropy", logits);
  if (target >= logits.size()) {
    throw IndexError("cross_entropy: target " + std::to_string(target) +
                     " out of range for vocabulary of " + std::to_string(logits.size()));
  }
  auto logp = impl::log_softmax_values(logits.value().values());
  // Clamp tiny negative rounding so the loss is never below zero; NaN must
  // pass through so callers can detect divergence.
  double loss = -logp[target];
  if (loss < 0) loss = 0;
  return logits.graph().record(
      Tensor::scalar(loss), {logits},
      [logits, target, logp = std::move(logp)](Graph& g, std::size_t self) {
        if (!g.requires_grad(logits.id())) return;
        const double gy = g.grad(self).item();
        Tensor& gl = g.grad(logits.id());
        for (std::size_t i = 0; i < logp.size(); ++i)
          gl[i] += gy * (std::exp(logp[i]) - (i == target ? 1.0 : 0.0));
      });
}

// ---------------------------------------------------------------------------
// Optimization.

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_gradient_norm(ParameterSet& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (double v : p.gradient.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double factor = max_norm / norm;
    for (auto& p : params)
      for (auto& v : p.gradient.values()) v *= factor;
  }
  return norm;
}

struct SgdOptions {
  double learning_rate = 0.1;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

/// value ← value − lr·gradient (after global-norm clipping), then gradients
/// are zeroed.
inline void sgd_step(ParameterSet& params, const SgdOptions& options) {
  if (!(options.learning_rate > 0) || !std::isfinite(options.learning_rate)) {
    throw ConfigError("learning rate must be positive, got " +
                      std::to_string(options.learning_rate));
  }
  if (options.clip_norm > 0) clip_gradient_norm(params, options.clip_norm);
  for (auto& p : params) {
    kernel::axpy(-options.learning_rate, p.gradient.data(), p.value.data(), p.value.size());
    p.gradient.fill(0.0);
  }
}

inline void sgd_step(ParameterSet& params, double learning_rate) {
  sgd_step(params, SgdOptions{learning_rate, 5.0});
}

}  // namespace mthd::nn
