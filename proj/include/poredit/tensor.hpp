#pragma once

// Reverse-mode differentiable n-dimensional arrays.
//
// Tensor<Real> is a handle to an immutable value plus an optional gradient
// record. Operations build a graph only when grad mode is on and at least one
// input requires a gradient; backward() walks that graph once in reverse
// topological order. The operation set is closed: everything the network and
// the losses need is defined in this file, each with an analytic backward rule.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "poredit/errors.hpp"
#include "poredit/parallel.hpp"

namespace poredit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public ValidationError {
 public:
  ShapeError(std::string_view op, const std::string& detail)
      : ValidationError(std::string(op) + ": " + detail) {}
};

namespace detail {
inline thread_local bool grad_enabled = true;
inline std::atomic<std::uint64_t> matmul_multiplies{0};
}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

/// Scalar multiplications performed by forward matmuls since the last reset.
inline std::uint64_t matmul_multiply_count() { return detail::matmul_multiplies.load(); }
inline void reset_matmul_multiply_count() { detail::matmul_multiplies.store(0); }

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<Real>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

template <class Real>
class Tensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<Node<Real>>;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<Real> values) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("constant", "shape " + shape_str(shape) + " needs " +
                                       std::to_string(shape_size(shape)) + " values, got " +
                                       std::to_string(values.size()));
    }
    auto n = std::make_shared<Node<Real>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor filled(Shape shape, Real v) {
    const std::size_t count = shape_size(shape);
    return constant(std::move(shape), std::vector<Real>(count, v));
  }

  static Tensor scalar(Real v) { return constant({}, {v}); }

  /// Leaf that accumulates gradients; its values may be updated in place
  /// between graphs (optimizer steps).
  static Tensor parameter(Shape shape, std::vector<Real> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor from_node(NodePtr n) { return Tensor(std::move(n)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const Real> data() const { return node_->value; }
  std::span<Real> mutable_data() { return node_->value; }
  Real item() const {
    if (size() != 1) throw ShapeError("item", "tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const NodePtr& node() const { return node_; }

 private:
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}
  NodePtr node_;
};

namespace detail {

template <class Real>
bool any_requires_grad(std::initializer_list<const Tensor<Real>*> inputs) {
  if (!grad_enabled) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <class Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                         std::initializer_list<const Tensor<Real>*> inputs,
                         std::function<void(Node<Real>&)> backward) {
  auto n = std::make_shared<Node<Real>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (any_requires_grad(inputs)) {
    n->requires_grad = true;
    for (const auto* t : inputs) n->parents.push_back(t->node());
    n->backward = std::move(backward);
  }
  return Tensor<Real>::from_node(std::move(n));
}

template <class Real>
Tensor<Real> make_result_list(const char* op, Shape shape, std::vector<Real> value,
                              const std::vector<Tensor<Real>>& inputs,
                              std::function<void(Node<Real>&)> backward) {
  auto n = std::make_shared<Node<Real>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (grad_enabled)
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward);
  }
  return Tensor<Real>::from_node(std::move(n));
}

// C[m,n] (+)= A[m,k] * B[k,n], all row-major. Rows of C are independent, the
// inner accumulation order over k is fixed.
template <class Real>
void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  parallel_for(m, k * n, [&](std::size_t i) {
    Real* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, Real(0));
    const Real* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Real av = arow[kk];
      const Real* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

template <class Real>
std::vector<Real> transpose2d(const Real* a, std::size_t rows, std::size_t cols) {
  std::vector<Real> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

// b broadcasts against a when b's shape equals a trailing suffix of a's shape.
inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. `b` may match `a` exactly or a trailing suffix of it.

enum class BinaryKind { Add, Sub, Mul, Div };

template <class Real>
Tensor<Real> binary_op(BinaryKind kind, const Tensor<Real>& a, const Tensor<Real>& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(kind)];
  if (!detail::is_suffix(a.shape(), b.shape())) {
    throw ShapeError(name, "cannot combine " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  }
  if (kind == BinaryKind::Div && a.shape() != b.shape())
    throw ShapeError(name, "div requires identical shapes");
  const std::size_t n = a.size(), nb = b.size();
  const Real* av = a.data().data();
  const Real* bv = b.data().data();
  std::vector<Real> out(n);
  parallel_for(n, 1, [&](std::size_t i) {
    const Real x = av[i], y = bv[i % nb];
    switch (kind) {
      case BinaryKind::Add: out[i] = x + y; break;
      case BinaryKind::Sub: out[i] = x - y; break;
      case BinaryKind::Mul: out[i] = x * y; break;
      case BinaryKind::Div: out[i] = x / y; break;
    }
  });
  return detail::make_result<Real>(name, a.shape(), std::move(out), {&a, &b}, [kind, n, nb](Node<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      parallel_for(n, 1, [&](std::size_t i) {
        switch (kind) {
          case BinaryKind::Add:
          case BinaryKind::Sub: ga[i] += g[i]; break;
          case BinaryKind::Mul: ga[i] += g[i] * pb.value[i % nb]; break;
          case BinaryKind::Div: ga[i] += g[i] / pb.value[i]; break;
        }
      });
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      // Broadcast reduction runs serially in index order.
      for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
          case BinaryKind::Add: gb[i % nb] += g[i]; break;
          case BinaryKind::Sub: gb[i % nb] -= g[i]; break;
          case BinaryKind::Mul: gb[i % nb] += g[i] * pa.value[i]; break;
          case BinaryKind::Div: gb[i] -= g[i] * pa.value[i] / (pb.value[i] * pb.value[i]); break;
        }
      }
    }
  });
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) { return binary_op(BinaryKind::Add, a, b); }
template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) { return binary_op(BinaryKind::Sub, a, b); }
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) { return binary_op(BinaryKind::Mul, a, b); }
template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) { return binary_op(BinaryKind::Div, a, b); }

/// s * a + c
template <class Real>
Tensor<Real> affine(const Tensor<Real>& a, Real s, Real c = Real(0)) {
  std::vector<Real> out(a.size());
  const Real* av = a.data().data();
  parallel_for(out.size(), 1, [&](std::size_t i) { out[i] = s * av[i] + c; });
  return detail::make_result<Real>("affine", a.shape(), std::move(out), {&a}, [s](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    const auto& g = self.grad;
    parallel_for(g.size(), 1, [&](std::size_t i) { ga[i] += s * g[i]; });
  });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) { return affine(a, s, Real(0)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops with analytic derivatives.

namespace detail {

template <class Real, class Fwd, class Deriv>
Tensor<Real> unary(const char* name, const Tensor<Real>& a, Fwd fwd, Deriv deriv) {
  std::vector<Real> out(a.size());
  const Real* av = a.data().data();
  parallel_for(out.size(), 8, [&](std::size_t i) { out[i] = fwd(av[i]); });
  return make_result<Real>(name, a.shape(), std::move(out), {&a}, [deriv](Node<Real>& self) {
    auto& p = *self.parents[0];
    auto& ga = p.ensure_grad();
    const auto& g = self.grad;
    parallel_for(g.size(), 8, [&](std::size_t i) { ga[i] += g[i] * deriv(p.value[i], self.value[i]); });
  });
}

template <class Real>
Real sigmoid_scalar(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

inline constexpr double kGeluCoeff = 0.044715;
inline constexpr double kSqrt2OverPi = 0.7978845608028654;

}  // namespace detail

/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
  const Real k0 = Real(detail::kSqrt2OverPi), k1 = Real(detail::kGeluCoeff);
  return detail::unary<Real>(
      "gelu", a,
      [=](Real x) { return Real(0.5) * x * (Real(1) + std::tanh(k0 * (x + k1 * x * x * x))); },
      [=](Real x, Real) {
        const Real th = std::tanh(k0 * (x + k1 * x * x * x));
        return Real(0.5) * (Real(1) + th) +
               Real(0.5) * x * (Real(1) - th * th) * k0 * (Real(1) + Real(3) * k1 * x * x);
      });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "sigmoid", a, [](Real x) { return detail::sigmoid_scalar(x); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "tanh", a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Tensor<Real> sin(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "sin", a, [](Real x) { return std::sin(x); }, [](Real x, Real) { return std::cos(x); });
}

template <class Real>
Tensor<Real> cos(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "cos", a, [](Real x) { return std::cos(x); }, [](Real x, Real) { return -std::sin(x); });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "log", a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

/// Gradient passes where lo <= x <= hi.
template <class Real>
Tensor<Real> clamp(const Tensor<Real>& a, Real lo, Real hi) {
  return detail::unary<Real>(
      "clamp", a, [=](Real x) { return std::min(std::max(x, lo), hi); },
      [=](Real x, Real) { return (x >= lo && x <= hi) ? Real(1) : Real(0); });
}

/// x * sigmoid(x), composed from primitives.
template <class Real>
Tensor<Real> silu(const Tensor<Real>& a) {
  return mul(a, sigmoid(a));
}

// ---------------------------------------------------------------------------
// Reductions.

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  const Real s = static_cast<Real>(deterministic_sum(a.data()));
  return detail::make_result<Real>("sum", {}, {s}, {&a}, [](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    const Real g = self.grad[0];
    parallel_for(ga.size(), 1, [&](std::size_t i) { ga[i] += g; });
  });
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  const Real inv = Real(1) / static_cast<Real>(a.size());
  const Real s = static_cast<Real>(deterministic_sum(a.data()) / static_cast<double>(a.size()));
  return detail::make_result<Real>("mean", {}, {s}, {&a}, [inv](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    const Real g = self.grad[0] * inv;
    parallel_for(ga.size(), 1, [&](std::size_t i) { ga[i] += g; });
  });
}

// ---------------------------------------------------------------------------
// Matrix products.

/// [m,k] x [k,n] -> [m,n], or batched [b,m,k] x [b,k,n] -> [b,m,n].
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3))) {
    throw ShapeError("matmul", "expected rank-2 or rank-3 operands, got " + shape_str(a.shape()) + " and " +
                                   shape_str(b.shape()));
  }
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb || (batched && b.dim(0) != batch)) {
    throw ShapeError("matmul", "inner dims disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  detail::matmul_multiplies.fetch_add(static_cast<std::uint64_t>(batch * m * k * n));
  std::vector<Real> out(batch * m * n);
  const Real* av = a.data().data();
  const Real* bv = b.data().data();
  if (batched) {
    parallel_for(batch, m * k * n, [&](std::size_t bi) {
      for (std::size_t i = 0; i < m; ++i) {
        Real* crow = out.data() + (bi * m + i) * n;
        const Real* arow = av + (bi * m + i) * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const Real x = arow[kk];
          const Real* brow = bv + (bi * k + kk) * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += x * brow[j];
        }
      }
    });
  } else {
    detail::gemm(av, bv, out.data(), m, k, n, false);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return detail::make_result<Real>("matmul", std::move(shape), std::move(out), {&a, &b},
                                   [batch, m, k, n](Node<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const Real* g = self.grad.data();
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      // dA = dC * B^T
      for (std::size_t bi = 0; bi < batch; ++bi) {
        auto bt = detail::transpose2d(pb.value.data() + bi * k * n, k, n);
        detail::gemm(g + bi * m * n, bt.data(), ga.data() + bi * m * k, m, n, k, true);
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      // dB = A^T * dC
      for (std::size_t bi = 0; bi < batch; ++bi) {
        auto at = detail::transpose2d(pa.value.data() + bi * m * k, m, k);
        detail::gemm(at.data(), g + bi * m * n, gb.data() + bi * k * n, k, m, n, true);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<Real> out(a.data().begin(), a.data().end());
  return detail::make_result<Real>("reshape", std::move(shape), std::move(out), {&a}, [](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

namespace detail {

// out[j] = in[src[j]] mapping for a permutation of axes.
inline std::vector<std::size_t> permute_index(const Shape& in_shape, const std::vector<std::size_t>& axes) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  const std::size_t n = shape_size(in_shape);
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_stride[axes[d]];
    src[j] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return src;
}

}  // namespace detail

template <class Real>
Tensor<Real> permute(const Tensor<Real>& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  std::vector<bool> seen(r, false);
  bool ok = axes.size() == r;
  for (std::size_t ax : axes) {
    if (!ok || ax >= r || seen[ax]) {
      ok = false;
      break;
    }
    seen[ax] = true;
  }
  if (!ok) throw ShapeError("permute", "axes do not form a permutation of rank " + std::to_string(r));
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(axes[i]);
  auto src = std::make_shared<std::vector<std::size_t>>(detail::permute_index(a.shape(), axes));
  std::vector<Real> out(a.size());
  const Real* av = a.data().data();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = av[(*src)[j]];
  return detail::make_result<Real>("permute", std::move(out_shape), std::move(out), {&a}, [src](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t j = 0; j < src->size(); ++j) ga[(*src)[j]] += self.grad[j];
  });
}

/// Elements [begin, end) along `axis`.
template <class Real>
Tensor<Real> slice(const Tensor<Real>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.dim(axis)) {
    throw ShapeError("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                                  std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t len = a.dim(axis), cut = end - begin;
  Shape shape = a.shape();
  shape[axis] = cut;
  std::vector<Real> out(outer * cut * inner);
  const Real* av = a.data().data();
  parallel_for(outer, cut * inner, [&](std::size_t o) {
    std::copy_n(av + (o * len + begin) * inner, cut * inner, out.data() + o * cut * inner);
  });
  return detail::make_result<Real>("slice", std::move(shape), std::move(out), {&a},
                                   [outer, inner, len, begin, cut](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    parallel_for(outer, cut * inner, [&](std::size_t o) {
      const Real* g = self.grad.data() + o * cut * inner;
      Real* dst = ga.data() + (o * len + begin) * inner;
      for (std::size_t i = 0; i < cut * inner; ++i) dst[i] += g[i];
    });
  });
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat", "axis out of range for " + shape_str(first));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat", "rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i])
        throw ShapeError("concat", "dims " + shape_str(s) + " vs " + shape_str(first) + " disagree off-axis");
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape shape = first;
  shape[axis] = total;
  std::vector<Real> out(outer * total * inner);
  std::vector<std::size_t> lens;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * len * inner, len * inner, out.data() + (o * total + offset) * inner);
    lens.push_back(len);
    offset += len;
  }
  return detail::make_result_list<Real>("concat", std::move(shape), std::move(out), parts,
                                        [outer, inner, total, lens](Node<Real>& self) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < lens.size(); ++pi) {
      auto& p = *self.parents[pi];
      if (p.requires_grad) {
        auto& gp = p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < lens[pi] * inner; ++i)
            gp[o * lens[pi] * inner + i] += self.grad[(o * total + off) * inner + i];
      }
      off += lens[pi];
    }
  });
}

/// Rows of `a` (indexing its leading axis) selected by `index`.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& a, std::shared_ptr<const std::vector<std::size_t>> index) {
  if (a.rank() < 1) throw ShapeError("gather", "needs rank >= 1");
  const std::size_t rows = a.dim(0), width = a.size() / std::max<std::size_t>(rows, 1);
  for (std::size_t r : *index)
    if (r >= rows) throw ShapeError("gather", "row " + std::to_string(r) + " out of " + std::to_string(rows));
  Shape shape = a.shape();
  shape[0] = index->size();
  std::vector<Real> out(index->size() * width);
  const Real* av = a.data().data();
  parallel_for(index->size(), width, [&](std::size_t j) {
    std::copy_n(av + (*index)[j] * width, width, out.data() + j * width);
  });
  return detail::make_result<Real>("gather", std::move(shape), std::move(out), {&a}, [index, width](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    // Serial scatter-add: indices may repeat.
    for (std::size_t j = 0; j < index->size(); ++j) {
      const Real* g = self.grad.data() + j * width;
      Real* dst = ga.data() + (*index)[j] * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention helpers.

/// Softmax over the last axis with max subtraction.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a) {
  if (a.rank() < 1) throw ShapeError("softmax", "needs rank >= 1");
  const std::size_t n = a.dim(a.rank() - 1), rows = a.size() / n;
  std::vector<Real> out(a.size());
  const Real* av = a.data().data();
  parallel_for(rows, n * 4, [&](std::size_t r) {
    const Real* x = av + r * n;
    Real* y = out.data() + r * n;
    Real mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    Real s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = std::exp(x[i] - mx);
      s += y[i];
    }
    const Real inv = Real(1) / s;
    for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
  });
  return detail::make_result<Real>("softmax", a.shape(), std::move(out), {&a}, [rows, n](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    parallel_for(rows, n * 3, [&](std::size_t r) {
      const Real* y = self.value.data() + r * n;
      const Real* g = self.grad.data() + r * n;
      Real dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
      Real* dst = ga.data() + r * n;
      for (std::size_t i = 0; i < n; ++i) dst[i] += y[i] * (g[i] - dot);
    });
  });
}

/// Layer norm over the last axis. `gamma`/`beta` may be undefined tensors for
/// the non-affine variant.
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& a, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        Real eps = Real(1e-5)) {
  const std::size_t n = a.dim(a.rank() - 1), rows = a.size() / n;
  const bool affine = gamma.defined();
  if (affine && (gamma.size() != n || !beta.defined() || beta.size() != n)) {
    throw ShapeError("layer_norm", "scale/shift must have " + std::to_string(n) + " entries");
  }
  auto xhat = std::make_shared<std::vector<Real>>(a.size());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  std::vector<Real> out(a.size());
  const Real* av = a.data().data();
  const Real* gv = affine ? gamma.data().data() : nullptr;
  const Real* bv = affine ? beta.data().data() : nullptr;
  parallel_for(rows, n * 4, [&](std::size_t r) {
    const Real* x = av + r * n;
    Real mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += x[i];
    mu /= Real(n);
    Real var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= Real(n);
    const Real rs = Real(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < n; ++i) {
      const Real h = (x[i] - mu) * rs;
      (*xhat)[r * n + i] = h;
      out[r * n + i] = affine ? h * gv[i] + bv[i] : h;
    }
  });
  auto backward = [xhat, rstd, rows, n, affine](Node<Real>& self) {
    auto& px = *self.parents[0];
    const Real* gam = affine ? self.parents[1]->value.data() : nullptr;
    if (px.requires_grad) {
      auto& gx = px.ensure_grad();
      parallel_for(rows, n * 6, [&](std::size_t r) {
        const Real* g = self.grad.data() + r * n;
        const Real* h = xhat->data() + r * n;
        Real m1 = 0, m2 = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const Real dh = affine ? g[i] * gam[i] : g[i];
          m1 += dh;
          m2 += dh * h[i];
        }
        m1 /= Real(n);
        m2 /= Real(n);
        for (std::size_t i = 0; i < n; ++i) {
          const Real dh = affine ? g[i] * gam[i] : g[i];
          gx[r * n + i] += (*rstd)[r] * (dh - m1 - h[i] * m2);
        }
      });
    }
    if (affine) {
      auto& pg = *self.parents[1];
      auto& pb = *self.parents[2];
      if (pg.requires_grad || pb.requires_grad) {
        std::vector<Real> dg(n, Real(0)), db(n, Real(0));
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < n; ++i) {
            dg[i] += self.grad[r * n + i] * (*xhat)[r * n + i];
            db[i] += self.grad[r * n + i];
          }
        if (pg.requires_grad) {
          auto& gg = pg.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) gg[i] += dg[i];
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) gb[i] += db[i];
        }
      }
    }
  };
  if (affine) return detail::make_result<Real>("layer_norm", a.shape(), std::move(out), {&a, &gamma, &beta}, backward);
  return detail::make_result<Real>("layer_norm", a.shape(), std::move(out), {&a}, backward);
}

/// scores[w, h, i, j] + mask[w, i, j]; the mask is a constant shared by heads.
template <class Real>
Tensor<Real> masked_add(const Tensor<Real>& scores, std::shared_ptr<const std::vector<Real>> mask) {
  if (scores.rank() != 4 || mask->size() != scores.dim(0) * scores.dim(2) * scores.dim(3)) {
    throw ShapeError("masked_add", "mask of " + std::to_string(mask->size()) + " entries does not fit scores " +
                                       shape_str(scores.shape()));
  }
  const std::size_t windows = scores.dim(0), heads = scores.dim(1), tt = scores.dim(2) * scores.dim(3);
  std::vector<Real> out(scores.size());
  const Real* sv = scores.data().data();
  parallel_for(windows * heads, tt, [&](std::size_t wh) {
    const std::size_t w = wh / heads;
    for (std::size_t i = 0; i < tt; ++i) out[wh * tt + i] = sv[wh * tt + i] + (*mask)[w * tt + i];
  });
  return detail::make_result<Real>("masked_add", scores.shape(), std::move(out), {&scores}, [](Node<Real>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Backward pass.

/// Populates grad on every ancestor of `root` that requires a gradient.
template <class Real>
void backward(const Tensor<Real>& root) {
  if (root.size() != 1) throw ShapeError("backward", "root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  std::vector<Node<Real>*> order;
  std::unordered_set<Node<Real>*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<Real>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Real>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

/// Number of distinct graph nodes reachable from `root` (including leaves).
template <class Real>
std::size_t graph_size(const Tensor<Real>& root) {
  std::unordered_set<const Node<Real>*> seen;
  std::vector<const Node<Real>*> stack{root.node().get()};
  while (!stack.empty()) {
    const Node<Real>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return seen.size();
}

}  // namespace poredit
