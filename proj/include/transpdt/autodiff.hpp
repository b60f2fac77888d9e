#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "transpdt/errors.hpp"
#include "transpdt/tensor.hpp"

namespace transpdt {

using Mask = std::vector<bool>;

inline std::size_t count_valid(const Mask& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
}

// Named learnable tensor. Order of registration fixes checkpoint order.
struct Parameter {
  std::string name;
  Tensor value;
};

class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(value)});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }
  Parameter& get(const std::string& name) { return params_[index_of(name)]; }
  const Parameter& get(const std::string& name) const { return params_[index_of(name)]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// One gradient slot per parameter, aligned with ParameterStore indices.
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(const ParameterStore& store) {
    grads_.reserve(store.size());
    for (const auto& p : store) grads_.emplace_back(p.value.shape());
  }

  std::size_t size() const { return grads_.size(); }
  Tensor& operator[](std::size_t i) { return grads_[i]; }
  const Tensor& operator[](std::size_t i) const { return grads_[i]; }

  void zero() {
    for (auto& g : grads_) g.fill(0.0);
  }
  void scale(double s) {
    for (auto& g : grads_)
      for (auto& v : g.data()) v *= s;
  }
  void add(const GradientSet& o) {
    for (std::size_t i = 0; i < grads_.size(); ++i)
      for (std::size_t j = 0; j < grads_[i].size(); ++j) grads_[i][j] += o.grads_[i][j];
  }
  double global_norm() const {
    double s = 0.0;
    for (const auto& g : grads_)
      for (double v : g.data()) s += v * v;
    return std::sqrt(s);
  }

 private:
  std::vector<Tensor> grads_;
};

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Append-only record of a forward computation. Node inputs always precede the
// node, so a reverse sweep is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) { return push(std::move(t), false, nullptr); }

  Var param(const ParameterStore& store, std::size_t index) {
    Node n;
    n.ref = &store[index].value;
    n.requires_grad = grad_enabled_;
    n.param_index = static_cast<std::ptrdiff_t>(index);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }
  Var param(const ParameterStore& store, const std::string& name) { return param(store, store.index_of(name)); }

  const Tensor& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, allocated on first touch.
  Tensor& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(id).shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  // Records an op result. `backward` runs only if some input needs a gradient.
  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  // Reverse sweep from a scalar loss. Parameter-leaf gradients are added into
  // `out` at their store index.
  void backward(Var loss, GradientSet& out) {
    if (loss.tape != this) throw ContractError("loss belongs to a different tape");
    if (value(loss.id).size() != 1)
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(value(loss.id).shape()));
    if (!grad_enabled_) throw ContractError("backward on a tape recorded without gradients");
    grad(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param_index >= 0) {
        auto& dst = out[static_cast<std::size_t>(n.param_index)];
        if (dst.size() != n.grad.size()) throw DimensionError("gradient slot shape mismatch");
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    Tensor grad;
    BackwardFn backward;
    std::ptrdiff_t param_index = -1;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace ops {

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return *a.tape;
}

inline bool any_grad(std::initializer_list<Var> vs) {
  for (auto v : vs)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}

inline void add_into(Tape& t, std::size_t id, const Tensor& g) {
  if (!t.requires_grad(id)) return;
  auto& dst = t.grad(id);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

enum class Broadcast { Same, Row, Scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.size() == 1) return Broadcast::Scalar;
  if (b.size() == a.cols() && b.rows() == 1) return Broadcast::Row;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                       shape_str(a.shape()));
}

inline std::size_t bidx(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::Same:
      return i;
    case Broadcast::Row:
      return i % cols;
    case Broadcast::Scalar:
      return 0;
  }
  return i;
}

template <typename F, typename D>
Var unary(Var a, F f, D dfdx) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id;
  return t.push(std::move(y), any_grad({a}), [ia, dfdx](Tape& tp, std::size_t self) {
    const Tensor& x = tp.value(ia);
    const Tensor& y = tp.value(self);
    const Tensor& g = tp.grad(self);
    auto& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace detail

// C = A·B. Rank-1 operands act as a single row.
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() > 2 || B.rank() > 2) throw DimensionError("matmul expects rank <= 2 operands");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k)
    throw DimensionError("matmul inner dimensions differ: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor C({m, n});
  gemm_accumulate(A.ptr(), B.ptr(), C.ptr(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(C), detail::any_grad({a, b}), [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    if (tp.requires_grad(ia)) {
      const Tensor& B = tp.value(ib);
      auto& gA = tp.grad(ia);
      // dA = G · Bᵀ
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = G.ptr() + i * n;
          const double* brow = B.ptr() + p * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          gA[i * k + p] += s;
        }
    }
    if (tp.requires_grad(ib)) {
      const Tensor& A = tp.value(ia);
      auto& gB = tp.grad(ib);
      // dB = Aᵀ · G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          const double* grow = G.ptr() + i * n;
          double* gbrow = gB.ptr() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Tensor T({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) T[j * m + i] = A[i * n + j];
  const std::size_t ia = a.id;
  return t.push(std::move(T), detail::any_grad({a}), [ia, m, n](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gA[i * n + j] += G[j * m + i];
  });
}

// Elementwise a + b; b may be a same-shape tensor, a row broadcast over a's rows, or a scalar.
inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail::broadcast_kind(A, B, "add");
  const std::size_t cols = A.cols();
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] + B[detail::bidx(kind, i, cols)];
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(C), detail::any_grad({a, b}), [ia, ib, kind, cols](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    detail::add_into(tp, ia, G);
    if (tp.requires_grad(ib)) {
      auto& gB = tp.grad(ib);
      for (std::size_t i = 0; i < G.size(); ++i) gB[detail::bidx(kind, i, cols)] += G[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail::broadcast_kind(A, B, "sub");
  const std::size_t cols = A.cols();
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] - B[detail::bidx(kind, i, cols)];
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(C), detail::any_grad({a, b}), [ia, ib, kind, cols](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    detail::add_into(tp, ia, G);
    if (tp.requires_grad(ib)) {
      auto& gB = tp.grad(ib);
      for (std::size_t i = 0; i < G.size(); ++i) gB[detail::bidx(kind, i, cols)] -= G[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail::broadcast_kind(A, B, "mul");
  const std::size_t cols = A.cols();
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] * B[detail::bidx(kind, i, cols)];
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(C), detail::any_grad({a, b}), [ia, ib, kind, cols](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    const Tensor& A = tp.value(ia);
    const Tensor& B = tp.value(ib);
    if (tp.requires_grad(ia)) {
      auto& gA = tp.grad(ia);
      for (std::size_t i = 0; i < G.size(); ++i) gA[i] += G[i] * B[detail::bidx(kind, i, cols)];
    }
    if (tp.requires_grad(ib)) {
      auto& gB = tp.grad(ib);
      for (std::size_t i = 0; i < G.size(); ++i) gB[detail::bidx(kind, i, cols)] += G[i] * A[i];
    }
  });
}

inline Var scale(Var a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Var sigmoid(Var a) {
  return detail::unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline double softplus_scalar(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// log(1 + exp(x)), the smooth positive transform.
inline Var softplus(Var a) {
  return detail::unary(a, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
}

// log(max(x, floor)); the gradient is zero where the floor is active.
inline Var log_floor(Var a, double floor) {
  return detail::unary(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id;
  return t.push(Tensor::scalar(s), detail::any_grad({a}), [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (auto& v : tp.grad(ia).data()) v += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var dot(Var a, Var b) { return sum(mul(a, b)); }

// Single element as a scalar tensor.
inline Var pick(Var a, std::size_t index) {
  Tape& t = *a.tape;
  if (index >= a.value().size()) throw DimensionError("pick index out of range");
  const std::size_t ia = a.id;
  return t.push(Tensor::scalar(a.value()[index]), detail::any_grad({a}), [ia, index](Tape& tp, std::size_t self) {
    tp.grad(ia)[index] += tp.grad(self)[0];
  });
}

// Row `r` as a 1×n tensor (embedding-row lookup).
inline Var row(Var a, std::size_t r) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (r >= A.rows()) throw DimensionError("row index " + std::to_string(r) + " out of range for " + shape_str(A.shape()));
  const std::size_t n = A.cols();
  std::vector<double> v(A.ptr() + r * n, A.ptr() + (r + 1) * n);
  const std::size_t ia = a.id;
  return t.push(Tensor::row(std::move(v)), detail::any_grad({a}), [ia, r, n](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    for (std::size_t j = 0; j < n; ++j) gA[r * n + j] += G[j];
  });
}

inline Var embedding_row(Var table, std::size_t index) { return row(table, index); }

// Stacks rows of `a` at the given indices.
inline Var gather_rows(Var a, std::vector<std::size_t> idx) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const std::size_t n = A.cols();
  Tensor out({idx.size(), n});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= A.rows()) throw DimensionError("gather_rows index out of range");
    std::copy_n(A.ptr() + idx[i] * n, n, out.ptr() + i * n);
  }
  const std::size_t ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [ia, idx = std::move(idx), n](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gA[idx[i] * n + j] += G[i * n + j];
  });
}

// Repeats a 1×n row m times.
inline Var broadcast_rows(Var a, std::size_t m) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (A.rows() != 1) throw DimensionError("broadcast_rows expects a single row");
  const std::size_t n = A.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(A.ptr(), n, out.ptr() + i * n);
  const std::size_t ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [ia, m, n](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gA[j] += G[i * n + j];
  });
}

// Columns [begin, begin+count) of every row.
inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  if (begin + count > n || count == 0) throw DimensionError("slice_cols out of range");
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(A.ptr() + i * n + begin, count, out.ptr() + i * count);
  const std::size_t ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [ia, m, n, begin, count](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gA[i * n + begin + j] += G[i * count + j];
  });
}

// Row-wise concatenation along the last axis: [a ‖ b ‖ ...].
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  Tape& t = *parts.front().tape;
  const std::size_t m = parts.front().value().rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (auto p : parts) {
    if (p.tape != &t) throw ContractError("operands recorded on different tapes");
    if (p.value().rows() != m) throw DimensionError("concat_cols row counts differ");
    widths.push_back(p.value().cols());
    n += widths.back();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(P.ptr() + i * widths[k], widths[k], out.ptr() + i * n + off);
    off += widths[k];
  }
  bool needs = false;
  std::vector<std::size_t> ids;
  for (auto p : parts) {
    ids.push_back(p.id);
    needs = needs || t.requires_grad(p.id);
  }
  return t.push(std::move(out), needs, [ids, widths, m, n](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) {
        auto& g = tp.grad(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += G[i * n + off + j];
      }
      off += widths[k];
    }
  });
}

inline Var concat(Var a, Var b) { return concat_cols({a, b}); }

// Stacks matrices with equal column counts on top of each other.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  Tape& t = *parts.front().tape;
  const std::size_t n = parts.front().value().cols();
  std::size_t m = 0;
  for (auto p : parts) {
    if (p.value().cols() != n) throw DimensionError("concat_rows column counts differ");
    m += p.value().rows();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  bool needs = false;
  std::vector<std::size_t> ids;
  for (auto p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.ptr() + off);
    off += p.value().size();
    ids.push_back(p.id);
    needs = needs || t.requires_grad(p.id);
  }
  return t.push(std::move(out), needs, [ids](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t sz = tp.value(id).size();
      if (tp.requires_grad(id)) {
        auto& g = tp.grad(id);
        for (std::size_t i = 0; i < sz; ++i) g[i] += G[off + i];
      }
      off += sz;
    }
  });
}

// Zeroes rows whose mask entry is false.
inline Var mask_rows(Var a, const Mask& mask) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (mask.size() != A.rows()) throw DimensionError("mask_rows mask length differs from row count");
  const std::size_t n = A.cols();
  Tensor out = A;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) std::fill_n(out.ptr() + i * n, n, 0.0);
  const std::size_t ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [ia, mask, n](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i])
        for (std::size_t j = 0; j < n; ++j) gA[i * n + j] += G[i * n + j];
  });
}

// Mean over the valid rows, as a 1×n row.
inline Var masked_mean_rows(Var a, const Mask& mask) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (mask.size() != A.rows()) throw DimensionError("masked_mean_rows mask length differs from row count");
  const std::size_t valid = count_valid(mask);
  if (valid == 0) throw DegenerateInputError("masked_mean_rows: every row is masked");
  const std::size_t n = A.cols();
  Tensor out({1, n});
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i])
      for (std::size_t j = 0; j < n; ++j) out[j] += A[i * n + j];
  const double inv = 1.0 / static_cast<double>(valid);
  for (auto& v : out.data()) v *= inv;
  const std::size_t ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [ia, mask, n, inv](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i])
        for (std::size_t j = 0; j < n; ++j) gA[i * n + j] += G[j] * inv;
  });
}

// Row-wise softmax restricted to unmasked columns. The mask has one entry per
// column (shared by all rows) or one per element. Masked outputs are exactly 0.
inline Var masked_softmax(Var a, const Mask& mask) {
  Tape& t = *a.tape;
  const Tensor& X = a.value();
  const std::size_t m = X.rows(), n = X.cols();
  const bool per_elem = mask.size() == X.size() && m > 1;
  if (!per_elem && mask.size() != n)
    throw DimensionError("masked_softmax mask length " + std::to_string(mask.size()) + " does not fit " +
                         shape_str(X.shape()));
  auto valid = [&](std::size_t i, std::size_t j) { return per_elem ? mask[i * n + j] : mask[j]; };
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (valid(i, j)) mx = std::max(mx, X[i * n + j]);
    if (!std::isfinite(mx)) throw DegenerateInputError("masked_softmax: all positions masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (valid(i, j)) {
        const double e = std::exp(X[i * n + j] - mx);
        Y[i * n + j] = e;
        z += e;
      }
    for (std::size_t j = 0; j < n; ++j) Y[i * n + j] /= z;
  }
  const std::size_t ia = a.id;
  return t.push(std::move(Y), detail::any_grad({a}), [ia, m, n](Tape& tp, std::size_t self) {
    const Tensor& Y = tp.value(self);
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    // Masked outputs are constant zero, so y_j = 0 kills their terms.
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * Y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gA[i * n + j] += Y[i * n + j] * (G[i * n + j] - s);
    }
  });
}

inline Var softmax_rows(Var a) { return masked_softmax(a, Mask(a.value().cols(), true)); }

// Row-wise layer normalization with learned gain and bias (each 1×n).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (gamma.value().size() != n || beta.value().size() != n) throw DimensionError("layer_norm parameter width mismatch");
  Tensor xhat(X.shape());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (X[i * n + j] - mu) * (X[i * n + j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat[i * n + j] = (X[i * n + j] - mu) * inv_std[i];
  }
  const Tensor& g = gamma.value();
  const Tensor& b = beta.value();
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) Y[i * n + j] = xhat[i * n + j] * g[j] + b[j];
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return t.push(std::move(Y), detail::any_grad({x, gamma, beta}),
                [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                  const Tensor& G = tp.grad(self);
                  const Tensor& g = tp.value(ig);
                  if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        if (tp.requires_grad(ig)) tp.grad(ig)[j] += G[i * n + j] * xhat[i * n + j];
                        if (tp.requires_grad(ib)) tp.grad(ib)[j] += G[i * n + j];
                      }
                  }
                  if (tp.requires_grad(ix)) {
                    auto& gX = tp.grad(ix);
                    const double dn = static_cast<double>(n);
                    for (std::size_t i = 0; i < m; ++i) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = G[i * n + j] * g[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i * n + j];
                      }
                      for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = G[i * n + j] * g[j];
                        gX[i * n + j] += inv_std[i] / dn * (dn * dxh - s1 - xhat[i * n + j] * s2);
                      }
                    }
                  }
                });
}

// Inverted dropout: kept units are scaled by 1/(1-rate) at train time; identity otherwise.
template <typename Rng>
Var dropout(Var a, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must be in [0, 1)");
  if (!train || rate == 0.0) return a;
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor scale_mask(A.shape());
  const double s = 1.0 / (1.0 - rate);
  for (auto& v : scale_mask.data()) v = keep(rng) ? s : 0.0;
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * scale_mask[i];
  const std::size_t ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [ia, scale_mask = std::move(scale_mask)](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    auto& gA = tp.grad(ia);
    for (std::size_t i = 0; i < G.size(); ++i) gA[i] += G[i] * scale_mask[i];
  });
}

// x·W + b with W [in×out] and b [1×out].
inline Var affine(Var x, Var w, Var b) { return add(matmul(x, w), b); }

}  // namespace ops

// Glorot-uniform init for an affine map of shape [fan_in × fan_out].
template <typename Rng>
Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor t({fan_in, fan_out});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

template <typename Rng>
Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

}  // namespace transpdt
