#pragma once

// Dense double tensors with reverse-mode automatic differentiation.
//
// Design contract (load-bearing for everything downstream):
//  * Row-major contiguous storage; all reductions run in row-major,
//    left-to-right order so forward values and gradients are bit-identical
//    across runs and across thread counts (workers never share a tape).
//  * A tape records one node per primitive application whenever a tape is
//    active and any input requires gradients. backward(loss) walks the tape
//    in strict reverse creation order, accumulating (never overwriting)
//    gradients, so fan-out sums contributions in a fixed order.
//  * Primitives validate shapes (error names the op and offending shapes)
//    and reject non-finite inputs up front.
//  * The primitive set is closed and dispatchable through apply_primitive;
//    composites (sub, sigmoid, outer products) are built from it, not added
//    to it. The one extension beyond the core list is `reciprocal`, needed
//    by Householder-parameterized rotations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "circuitlab/common.hpp"

namespace circuitlab {

// ===== shapes ===============================================================

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ValidationError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

// ===== tensor ===============================================================

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same extent as data
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    t.impl_->shape = std::move(shape);
    return t;
  }

  static Tensor full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
      throw ValidationError("Tensor::from: " + std::to_string(values.size()) +
                            " values for shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  double at(int i) const { return impl_->data[static_cast<size_t>(i)]; }
  double at(int i, int j) const {
    return impl_->data[static_cast<size_t>(i) * static_cast<size_t>(dim(1)) +
                       static_cast<size_t>(j)];
  }
  double& at(int i) { return impl_->data[static_cast<size_t>(i)]; }
  double& at(int i, int j) {
    return impl_->data[static_cast<size_t>(i) * static_cast<size_t>(dim(1)) +
                       static_cast<size_t>(j)];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<double>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Accumulate `src` into lazily-allocated gradient storage of `t`.
inline void accumulate_grad(const std::shared_ptr<TensorImpl>& t,
                            const std::vector<double>& src) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  for (size_t i = 0; i < src.size(); ++i) t->grad[i] += src[i];
}

// ===== tape =================================================================
//
// One tape per evaluation context. Contexts may run in parallel across
// examples but must never share a tape; the active tape is thread-local and
// installed with a RAII scope.

struct TapeNode {
  // Pulls gradient from outputs and accumulates into inputs.
  std::function<void()> backward;
};

class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(TapeNode{std::move(backward_fn)});
  }
  size_t size() const { return nodes_.size(); }

  // Replays in strict reverse creation order (the recording order is a
  // topological order of the forward graph by construction).
  void run_backward() {
    for (size_t i = nodes_.size(); i > 0; --i) nodes_[i - 1].backward();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
};

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape()) {
    detail::active_tape() = &tape;
  }
  ~TapeScope() { detail::active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

inline bool tape_active() { return detail::active_tape() != nullptr; }

// Computes d(loss)/d(x) for every tensor that participated in producing
// `loss` under the given tape. `loss` must be scalar (extent 1).
inline void backward(Tape& tape, Tensor& loss) {
  if (loss.numel() != 1) {
    throw ValidationError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
  }
  loss.grad()[0] += 1.0;
  tape.run_backward();
}

// ===== primitive machinery ==================================================

enum class OpKind {
  matmul,
  add,
  mul,
  scale,
  softmax,
  layernorm,
  gelu,
  tanh_op,
  atanh_op,
  embed_lookup,
  slice,
  concat,
  mean,
  cross_entropy_with_logits,
  reciprocal,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::softmax: return "softmax";
    case OpKind::layernorm: return "layernorm";
    case OpKind::gelu: return "gelu";
    case OpKind::tanh_op: return "tanh";
    case OpKind::atanh_op: return "atanh";
    case OpKind::embed_lookup: return "embed_lookup";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::mean: return "mean";
    case OpKind::cross_entropy_with_logits: return "cross_entropy_with_logits";
    case OpKind::reciprocal: return "reciprocal";
  }
  return "?";
}

namespace detail {

inline void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ValidationError(std::string(op) + ": undefined tensor input");
}

inline void check_finite(const char* op, const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input value");
    }
  }
}

inline void check_input(const char* op, const Tensor& t) {
  check_defined(op, t);
  check_finite(op, t);
}

inline Tensor make_output(Shape shape, bool requires_grad) {
  Tensor out = Tensor::zeros(std::move(shape));
  out.set_requires_grad(requires_grad);
  return out;
}

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!tape_active()) return false;
  for (const Tensor* t : inputs) {
    if ((*t).requires_grad()) return true;
  }
  return false;
}

inline void record(std::function<void()> fn) {
  active_tape()->record(std::move(fn));
}

}  // namespace detail

// ===== primitives ===========================================================

// matmul(a [m,k], b [k,n]) -> [m,n]; with transpose_b, b is [n,k].
// Inner products accumulate left-to-right over the shared axis.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::check_input("matmul", a);
  detail::check_input("matmul", b);
  if (a.rank() != 2 || b.rank() != 2) {
    throw ValidationError("matmul: expects rank-2 inputs, got " + shape_str(a.shape()) +
                          " x " + shape_str(b.shape()));
  }
  int m = a.dim(0), k = a.dim(1);
  int bk = transpose_b ? b.dim(1) : b.dim(0);
  int n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != bk) {
    throw ValidationError(std::string("matmul: inner dimensions disagree: ") +
                          shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                          (transpose_b ? " (b transposed)" : ""));
  }
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = detail::make_output({m, n}, rg);
  const auto& A = a.data();
  const auto& B = b.data();
  auto& C = out.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      if (!transpose_b) {
        for (int l = 0; l < k; ++l) {
          acc += A[static_cast<size_t>(i) * k + l] * B[static_cast<size_t>(l) * n + j];
        }
      } else {
        for (int l = 0; l < k; ++l) {
          acc += A[static_cast<size_t>(i) * k + l] * B[static_cast<size_t>(j) * k + l];
        }
      }
      C[static_cast<size_t>(i) * n + j] = acc;
    }
  }
  if (detail::should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    bool agrad = a.requires_grad(), bgrad = b.requires_grad();
    detail::record([ai, bi, oi, m, n, k, transpose_b, agrad, bgrad]() {
      if (oi->grad.empty()) return;
      const auto& G = oi->grad;
      if (agrad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
        // dA = G * B^T  (or G * B when b was transposed)
        for (int i = 0; i < m; ++i) {
          for (int l = 0; l < k; ++l) {
            double acc = 0.0;
            if (!transpose_b) {
              for (int j = 0; j < n; ++j) {
                acc += G[static_cast<size_t>(i) * n + j] * bi->data[static_cast<size_t>(l) * n + j];
              }
            } else {
              for (int j = 0; j < n; ++j) {
                acc += G[static_cast<size_t>(i) * n + j] * bi->data[static_cast<size_t>(j) * k + l];
              }
            }
            ai->grad[static_cast<size_t>(i) * k + l] += acc;
          }
        }
      }
      if (bgrad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
        if (!transpose_b) {
          // dB = A^T * G
          for (int l = 0; l < k; ++l) {
            for (int j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int i = 0; i < m; ++i) {
                acc += ai->data[static_cast<size_t>(i) * k + l] * G[static_cast<size_t>(i) * n + j];
              }
              bi->grad[static_cast<size_t>(l) * n + j] += acc;
            }
          }
        } else {
          // dB = G^T * A  (b stored [n,k])
          for (int j = 0; j < n; ++j) {
            for (int l = 0; l < k; ++l) {
              double acc = 0.0;
              for (int i = 0; i < m; ++i) {
                acc += G[static_cast<size_t>(i) * n + j] * ai->data[static_cast<size_t>(i) * k + l];
              }
              bi->grad[static_cast<size_t>(j) * k + l] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

enum class Broadcast { none, last_axis, scalar };

inline Broadcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.numel() == 1) return Broadcast::scalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.dim(a.rank() - 1) == b.dim(0)) {
    return Broadcast::last_axis;
  }
  throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
}

// Sums `g` over the broadcast axes of `b`, in row-major order.
inline void reduce_into_broadcast(const std::vector<double>& g, Broadcast mode,
                                  const Shape& a_shape, std::vector<double>& out) {
  if (mode == Broadcast::none) {
    for (size_t i = 0; i < g.size(); ++i) out[i] += g[i];
  } else if (mode == Broadcast::scalar) {
    double acc = 0.0;
    for (double v : g) acc += v;
    out[0] += acc;
  } else {
    size_t last = static_cast<size_t>(a_shape.back());
    size_t rows = g.size() / last;
    for (size_t r = 0; r < rows; ++r) {
      for (size_t j = 0; j < last; ++j) out[j] += g[r * last + j];
    }
  }
}

}  // namespace detail

// Elementwise a + b. b may broadcast: same shape, a 1-D vector matching a's
// last axis, or a single value.
inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_input("add", a);
  detail::check_input("add", b);
  auto mode = detail::broadcast_mode("add", a, b);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = detail::make_output(a.shape(), rg);
  const auto& A = a.data();
  const auto& B = b.data();
  auto& O = out.data();
  if (mode == detail::Broadcast::none) {
    for (size_t i = 0; i < A.size(); ++i) O[i] = A[i] + B[i];
  } else if (mode == detail::Broadcast::scalar) {
    for (size_t i = 0; i < A.size(); ++i) O[i] = A[i] + B[0];
  } else {
    size_t last = static_cast<size_t>(a.shape().back());
    for (size_t i = 0; i < A.size(); ++i) O[i] = A[i] + B[i % last];
  }
  if (detail::should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    bool agrad = a.requires_grad(), bgrad = b.requires_grad();
    Shape ash = a.shape();
    detail::record([ai, bi, oi, mode, agrad, bgrad, ash]() {
      if (oi->grad.empty()) return;
      if (agrad) accumulate_grad(ai, oi->grad);
      if (bgrad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
        detail::reduce_into_broadcast(oi->grad, mode, ash, bi->grad);
      }
    });
  }
  return out;
}

// Elementwise a * b with the same broadcast rules as add.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_input("mul", a);
  detail::check_input("mul", b);
  auto mode = detail::broadcast_mode("mul", a, b);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = detail::make_output(a.shape(), rg);
  const auto& A = a.data();
  const auto& B = b.data();
  auto& O = out.data();
  size_t last = a.shape().empty() ? 1 : static_cast<size_t>(a.shape().back());
  if (mode == detail::Broadcast::none) {
    for (size_t i = 0; i < A.size(); ++i) O[i] = A[i] * B[i];
  } else if (mode == detail::Broadcast::scalar) {
    for (size_t i = 0; i < A.size(); ++i) O[i] = A[i] * B[0];
  } else {
    for (size_t i = 0; i < A.size(); ++i) O[i] = A[i] * B[i % last];
  }
  if (detail::should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    bool agrad = a.requires_grad(), bgrad = b.requires_grad();
    Shape ash = a.shape();
    detail::record([ai, bi, oi, mode, agrad, bgrad, ash, last]() {
      if (oi->grad.empty()) return;
      const auto& G = oi->grad;
      if (agrad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
        if (mode == detail::Broadcast::none) {
          for (size_t i = 0; i < G.size(); ++i) ai->grad[i] += G[i] * bi->data[i];
        } else if (mode == detail::Broadcast::scalar) {
          for (size_t i = 0; i < G.size(); ++i) ai->grad[i] += G[i] * bi->data[0];
        } else {
          for (size_t i = 0; i < G.size(); ++i) ai->grad[i] += G[i] * bi->data[i % last];
        }
      }
      if (bgrad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
        std::vector<double> weighted(G.size());
        for (size_t i = 0; i < G.size(); ++i) weighted[i] = G[i] * ai->data[i];
        detail::reduce_into_broadcast(weighted, mode, ash, bi->grad);
      }
    });
  }
  return out;
}

// a * c for compile-time-known constant c.
inline Tensor scale(const Tensor& a, double c) {
  detail::check_input("scale", a);
  if (!std::isfinite(c)) throw NumericError("scale: non-finite constant");
  Tensor out = detail::make_output(a.shape(), a.requires_grad());
  const auto& A = a.data();
  auto& O = out.data();
  for (size_t i = 0; i < A.size(); ++i) O[i] = A[i] * c;
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi, c]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
    });
  }
  return out;
}

// Softmax over the last axis, numerically stabilized by per-row max shift.
inline Tensor softmax(const Tensor& a) {
  detail::check_input("softmax", a);
  if (a.rank() < 1) throw ValidationError("softmax: rank-0 input");
  size_t last = static_cast<size_t>(a.shape().back());
  if (last == 0) throw ValidationError("softmax: empty last axis");
  size_t rows = static_cast<size_t>(a.numel()) / last;
  Tensor out = detail::make_output(a.shape(), a.requires_grad());
  const auto& A = a.data();
  auto& O = out.data();
  for (size_t r = 0; r < rows; ++r) {
    const double* x = &A[r * last];
    double* y = &O[r * last];
    double mx = x[0];
    for (size_t j = 1; j < last; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (size_t j = 0; j < last; ++j) {
      y[j] = std::exp(x[j] - mx);
      denom += y[j];
    }
    for (size_t j = 0; j < last; ++j) y[j] /= denom;
  }
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi, rows, last]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      // dx_j = p_j * (g_j - sum_k g_k p_k) per row.
      for (size_t r = 0; r < rows; ++r) {
        const double* p = &oi->data[r * last];
        const double* g = &oi->grad[r * last];
        double dot = 0.0;
        for (size_t j = 0; j < last; ++j) dot += g[j] * p[j];
        for (size_t j = 0; j < last; ++j) {
          ai->grad[r * last + j] += p[j] * (g[j] - dot);
        }
      }
    });
  }
  return out;
}

// LayerNorm over the last axis (no learned affine; scale/shift are composed
// outside with mul/add so their gradients flow through the generic ops).
inline Tensor layernorm(const Tensor& a, double eps = 1e-5) {
  detail::check_input("layernorm", a);
  if (a.rank() < 1) throw ValidationError("layernorm: rank-0 input");
  size_t last = static_cast<size_t>(a.shape().back());
  if (last == 0) throw ValidationError("layernorm: empty last axis");
  size_t rows = static_cast<size_t>(a.numel()) / last;
  Tensor out = detail::make_output(a.shape(), a.requires_grad());
  const auto& A = a.data();
  auto& O = out.data();
  std::vector<double> inv_sigma(rows);
  for (size_t r = 0; r < rows; ++r) {
    const double* x = &A[r * last];
    double mu = 0.0;
    for (size_t j = 0; j < last; ++j) mu += x[j];
    mu /= static_cast<double>(last);
    double var = 0.0;
    for (size_t j = 0; j < last; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(last);
    double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = inv;
    double* y = &O[r * last];
    for (size_t j = 0; j < last; ++j) y[j] = (x[j] - mu) * inv;
  }
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi, rows, last, inv_sigma = std::move(inv_sigma)]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      // dx = inv_sigma * (g - mean(g) - y * mean(g . y)) per row.
      for (size_t r = 0; r < rows; ++r) {
        const double* y = &oi->data[r * last];
        const double* g = &oi->grad[r * last];
        double gmean = 0.0, gymean = 0.0;
        for (size_t j = 0; j < last; ++j) gmean += g[j];
        gmean /= static_cast<double>(last);
        for (size_t j = 0; j < last; ++j) gymean += g[j] * y[j];
        gymean /= static_cast<double>(last);
        for (size_t j = 0; j < last; ++j) {
          ai->grad[r * last + j] += inv_sigma[r] * (g[j] - gmean - y[j] * gymean);
        }
      }
    });
  }
  return out;
}

namespace detail {
inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}
inline double gelu_derivative(double x) {
  double phi_cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
  double phi_pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
  return phi_cdf + x * phi_pdf;
}
}  // namespace detail

// Exact (erf-based) GeLU.
inline Tensor gelu(const Tensor& a) {
  detail::check_input("gelu", a);
  Tensor out = detail::make_output(a.shape(), a.requires_grad());
  const auto& A = a.data();
  auto& O = out.data();
  for (size_t i = 0; i < A.size(); ++i) O[i] = detail::gelu_value(A[i]);
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        ai->grad[i] += oi->grad[i] * detail::gelu_derivative(ai->data[i]);
      }
    });
  }
  return out;
}

inline Tensor tanh_t(const Tensor& a) {
  detail::check_input("tanh", a);
  Tensor out = detail::make_output(a.shape(), a.requires_grad());
  const auto& A = a.data();
  auto& O = out.data();
  for (size_t i = 0; i < A.size(); ++i) O[i] = std::tanh(A[i]);
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        double t = oi->data[i];
        ai->grad[i] += oi->grad[i] * (1.0 - t * t);
      }
    });
  }
  return out;
}

// Elementwise inverse hyperbolic tangent. Inputs must lie strictly inside
// (-1, 1); values at or beyond the boundary would produce an infinity, so the
// error is raised at the source like reciprocal's zero check.
inline Tensor atanh_t(const Tensor& a) {
  detail::check_input("atanh", a);
  for (double v : a.data()) {
    if (std::abs(v) >= 1.0) throw NumericError("atanh: input outside (-1, 1)");
  }
  Tensor out = detail::make_output(a.shape(), a.requires_grad());
  const auto& A = a.data();
  auto& O = out.data();
  for (size_t i = 0; i < A.size(); ++i) O[i] = std::atanh(A[i]);
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        double x = ai->data[i];
        ai->grad[i] += oi->grad[i] / (1.0 - x * x);
      }
    });
  }
  return out;
}

// Gathers rows of `table` [vocab, d] at integer ids -> [n, d]. The gradient
// scatters back into the table rows in ascending id-position order.
inline Tensor embed_lookup(const Tensor& table, const std::vector<int>& ids) {
  detail::check_input("embed_lookup", table);
  if (table.rank() != 2) {
    throw ValidationError("embed_lookup: table must be rank-2, got " +
                          shape_str(table.shape()));
  }
  int vocab = table.dim(0), d = table.dim(1);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw ValidationError("embed_lookup: id " + std::to_string(ids[i]) + " at position " +
                            std::to_string(i) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
  }
  int n = static_cast<int>(ids.size());
  Tensor out = detail::make_output({n, d}, table.requires_grad());
  const auto& T = table.data();
  auto& O = out.data();
  for (int i = 0; i < n; ++i) {
    const double* row = &T[static_cast<size_t>(ids[static_cast<size_t>(i)]) * d];
    std::copy(row, row + d, &O[static_cast<size_t>(i) * d]);
  }
  if (detail::should_record({&table})) {
    auto ti = table.impl_ptr(), oi = out.impl_ptr();
    detail::record([ti, oi, ids, d]() {
      if (oi->grad.empty()) return;
      if (ti->grad.empty()) ti->grad.assign(ti->data.size(), 0.0);
      for (size_t i = 0; i < ids.size(); ++i) {
        double* dst = &ti->grad[static_cast<size_t>(ids[i]) * d];
        const double* src = &oi->grad[i * static_cast<size_t>(d)];
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Contiguous slice along `axis` (rank-1 or rank-2 inputs).
inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  detail::check_input("slice", a);
  if (a.rank() < 1 || a.rank() > 2) {
    throw ValidationError("slice: supports rank-1/2, got " + shape_str(a.shape()));
  }
  if (axis < 0 || axis >= a.rank()) {
    throw ValidationError("slice: axis " + std::to_string(axis) + " for shape " +
                          shape_str(a.shape()));
  }
  int extent = a.dim(axis);
  if (start < 0 || len < 0 || start + len > extent) {
    throw ValidationError("slice: range [" + std::to_string(start) + ", " +
                          std::to_string(start + len) + ") outside axis of extent " +
                          std::to_string(extent));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out = detail::make_output(out_shape, a.requires_grad());
  const auto& A = a.data();
  auto& O = out.data();
  int rows = a.rank() == 2 ? a.dim(0) : 1;
  int cols = a.rank() == 2 ? a.dim(1) : a.dim(0);
  if (a.rank() == 1 || axis == 1) {
    int r0 = 0, r1 = rows, c0 = start, clen = len;
    if (a.rank() == 1) { rows = 1; cols = a.dim(0); r1 = 1; }
    for (int r = r0; r < r1; ++r) {
      std::copy(&A[static_cast<size_t>(r) * cols + c0],
                &A[static_cast<size_t>(r) * cols + c0 + clen],
                &O[static_cast<size_t>(r - r0) * clen]);
    }
  } else {  // axis == 0, rank 2
    std::copy(&A[static_cast<size_t>(start) * cols],
              &A[static_cast<size_t>(start + len) * cols], O.begin());
  }
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    int arank = a.rank();
    detail::record([ai, oi, axis, start, len, rows, cols, arank]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      if (arank == 1 || axis == 1) {
        int r1 = arank == 1 ? 1 : rows;
        for (int r = 0; r < r1; ++r) {
          for (int j = 0; j < len; ++j) {
            ai->grad[static_cast<size_t>(r) * cols + start + j] +=
                oi->grad[static_cast<size_t>(r) * len + j];
          }
        }
      } else {
        for (size_t i = 0; i < oi->grad.size(); ++i) {
          ai->grad[static_cast<size_t>(start) * cols + i] += oi->grad[i];
        }
      }
    });
  }
  return out;
}

// Concatenation along `axis`; all parts must agree on the other axes.
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  for (const Tensor& p : parts) detail::check_input("concat", p);
  int rank = parts[0].rank();
  if (rank < 1 || rank > 2) {
    throw ValidationError("concat: supports rank-1/2, got " + shape_str(parts[0].shape()));
  }
  if (axis < 0 || axis >= rank) {
    throw ValidationError("concat: axis " + std::to_string(axis) + " for rank " +
                          std::to_string(rank));
  }
  Shape out_shape = parts[0].shape();
  int total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) {
      throw ValidationError("concat: rank mismatch " + shape_str(parts[0].shape()) +
                            " vs " + shape_str(p.shape()));
    }
    for (int d = 0; d < rank; ++d) {
      if (d != axis && p.dim(d) != out_shape[static_cast<size_t>(d)]) {
        throw ValidationError("concat: shape mismatch " + shape_str(parts[0].shape()) +
                              " vs " + shape_str(p.shape()) + " on axis " + std::to_string(d));
      }
    }
    total += p.dim(axis);
    rg = rg || p.requires_grad();
  }
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out = detail::make_output(out_shape, rg);
  auto& O = out.data();
  if (rank == 1 || axis == 0) {
    size_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.data().begin(), p.data().end(), O.begin() + static_cast<long>(off));
      off += p.data().size();
    }
  } else {  // axis == 1, rank 2
    int rows = out_shape[0];
    int col_off = 0;
    for (const Tensor& p : parts) {
      int pc = p.dim(1);
      for (int r = 0; r < rows; ++r) {
        std::copy(&p.data()[static_cast<size_t>(r) * pc],
                  &p.data()[static_cast<size_t>(r) * pc + pc],
                  &O[static_cast<size_t>(r) * total + col_off]);
      }
      col_off += pc;
    }
  }
  if (tape_active() && rg) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    std::vector<bool> grads;
    for (const Tensor& p : parts) {
      impls.push_back(p.impl_ptr());
      grads.push_back(p.requires_grad());
    }
    auto oi = out.impl_ptr();
    detail::record([impls, grads, oi, axis, rank, total]() {
      if (oi->grad.empty()) return;
      if (rank == 1 || axis == 0) {
        size_t off = 0;
        for (size_t pi = 0; pi < impls.size(); ++pi) {
          size_t n = impls[pi]->data.size();
          if (grads[pi]) {
            if (impls[pi]->grad.empty()) impls[pi]->grad.assign(n, 0.0);
            for (size_t i = 0; i < n; ++i) impls[pi]->grad[i] += oi->grad[off + i];
          }
          off += n;
        }
      } else {
        int rows = static_cast<int>(oi->data.size()) / total;
        int col_off = 0;
        for (size_t pi = 0; pi < impls.size(); ++pi) {
          int pc = static_cast<int>(impls[pi]->data.size()) / rows;
          if (grads[pi]) {
            if (impls[pi]->grad.empty()) impls[pi]->grad.assign(impls[pi]->data.size(), 0.0);
            for (int r = 0; r < rows; ++r) {
              for (int j = 0; j < pc; ++j) {
                impls[pi]->grad[static_cast<size_t>(r) * pc + j] +=
                    oi->grad[static_cast<size_t>(r) * total + col_off + j];
              }
            }
          }
          col_off += pc;
        }
      }
    });
  }
  return out;
}

// Mean over all entries -> scalar.
inline Tensor mean_all(const Tensor& a) {
  detail::check_input("mean", a);
  if (a.numel() == 0) throw ValidationError("mean: empty input");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  double n = static_cast<double>(a.numel());
  Tensor out = detail::make_output({1}, a.requires_grad());
  out.data()[0] = acc / n;
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi, n]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      double g = oi->grad[0] / n;
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
    });
  }
  return out;
}

// Cross-entropy of a 1-D logit vector against a hard target index:
// loss = logsumexp(logits) - logits[target].
inline Tensor cross_entropy_with_logits(const Tensor& logits, int target) {
  detail::check_input("cross_entropy_with_logits", logits);
  if (logits.rank() != 1) {
    throw ValidationError("cross_entropy_with_logits: logits must be rank-1, got " +
                          shape_str(logits.shape()));
  }
  int n = logits.dim(0);
  if (target < 0 || target >= n) {
    throw ValidationError("cross_entropy_with_logits: target " + std::to_string(target) +
                          " outside logits of extent " + std::to_string(n));
  }
  const auto& X = logits.data();
  double mx = X[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, X[static_cast<size_t>(j)]);
  double denom = 0.0;
  for (int j = 0; j < n; ++j) denom += std::exp(X[static_cast<size_t>(j)] - mx);
  double lse = mx + std::log(denom);
  Tensor out = detail::make_output({1}, logits.requires_grad());
  out.data()[0] = lse - X[static_cast<size_t>(target)];
  if (detail::should_record({&logits})) {
    auto li = logits.impl_ptr(), oi = out.impl_ptr();
    detail::record([li, oi, n, target, mx, denom]() {
      if (oi->grad.empty()) return;
      if (li->grad.empty()) li->grad.assign(li->data.size(), 0.0);
      double g = oi->grad[0];
      for (int j = 0; j < n; ++j) {
        double p = std::exp(li->data[static_cast<size_t>(j)] - mx) / denom;
        li->grad[static_cast<size_t>(j)] += g * (p - (j == target ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

// Soft-target variant: loss = logsumexp(logits) - sum_j t_j logits_j, with a
// constant (no-gradient) target distribution. Equals KL(t || softmax(logits))
// up to an additive constant in the logits, so it serves as the divergence
// objective for gate training.
inline Tensor cross_entropy_with_logits(const Tensor& logits, const Tensor& target_dist) {
  detail::check_input("cross_entropy_with_logits", logits);
  detail::check_input("cross_entropy_with_logits", target_dist);
  if (logits.rank() != 1 || target_dist.rank() != 1 || logits.dim(0) != target_dist.dim(0)) {
    throw ValidationError("cross_entropy_with_logits: logits " + shape_str(logits.shape()) +
                          " vs target distribution " + shape_str(target_dist.shape()));
  }
  int n = logits.dim(0);
  const auto& X = logits.data();
  const auto& T = target_dist.data();
  double mx = X[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, X[static_cast<size_t>(j)]);
  double denom = 0.0;
  for (int j = 0; j < n; ++j) denom += std::exp(X[static_cast<size_t>(j)] - mx);
  double lse = mx + std::log(denom);
  double dot = 0.0;
  for (int j = 0; j < n; ++j) dot += T[static_cast<size_t>(j)] * X[static_cast<size_t>(j)];
  Tensor out = detail::make_output({1}, logits.requires_grad());
  out.data()[0] = lse - dot;
  if (detail::should_record({&logits})) {
    auto li = logits.impl_ptr(), ti = target_dist.impl_ptr(), oi = out.impl_ptr();
    detail::record([li, ti, oi, n, mx, denom]() {
      if (oi->grad.empty()) return;
      if (li->grad.empty()) li->grad.assign(li->data.size(), 0.0);
      double g = oi->grad[0];
      for (int j = 0; j < n; ++j) {
        double p = std::exp(li->data[static_cast<size_t>(j)] - mx) / denom;
        li->grad[static_cast<size_t>(j)] += g * (p - ti->data[static_cast<size_t>(j)]);
      }
    });
  }
  return out;
}

// Elementwise 1/x. Rejects zeros (the downstream finite checks would catch
// the inf anyway, but the error is clearer at the source).
inline Tensor reciprocal(const Tensor& a) {
  detail::check_input("reciprocal", a);
  for (double v : a.data()) {
    if (v == 0.0) throw NumericError("reciprocal: zero input value");
  }
  Tensor out = detail::make_output(a.shape(), a.requires_grad());
  const auto& A = a.data();
  auto& O = out.data();
  for (size_t i = 0; i < A.size(); ++i) O[i] = 1.0 / A[i];
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi]() {
      if (oi->grad.empty()) return;
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        double y = oi->data[i];
        ai->grad[i] += -oi->grad[i] * y * y;
      }
    });
  }
  return out;
}

// ===== composites (no new primitives) ======================================

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

// sigmoid(x) = 0.5 * tanh(x/2) + 0.5
inline Tensor sigmoid(const Tensor& a) {
  return add(scale(tanh_t(scale(a, 0.5)), 0.5), Tensor::scalar(0.5));
}

// ===== view utilities =======================================================

// Same flat data under a new shape; gradient passes through unchanged. Shape
// plumbing only — not part of the numeric primitive set.
inline Tensor reshape(const Tensor& a, Shape shape) {
  detail::check_input("reshape", a);
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ValidationError("reshape: non-positive extent in " + shape_str(shape));
    n *= d;
  }
  if (n != static_cast<int64_t>(a.numel())) {
    throw ValidationError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                          shape_str(shape));
  }
  Tensor out = detail::make_output(std::move(shape), a.requires_grad());
  out.data() = a.data();
  if (detail::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    detail::record([ai, oi]() {
      if (oi->grad.empty()) return;
      accumulate_grad(ai, oi->grad);
    });
  }
  return out;
}

// ===== generic dispatch =====================================================

struct PrimitiveArgs {
  bool transpose_b = false;       // matmul
  double constant = 1.0;          // scale
  double eps = 1e-5;              // layernorm
  std::vector<int> ids;           // embed_lookup
  int axis = 0, start = 0, len = 0;  // slice / concat axis
  int target = -1;                // cross-entropy hard target
  Tensor target_dist;             // cross-entropy soft target
};

// Uniform entry point over the primitive set; the typed wrappers above are
// thin conveniences over the same implementations.
inline Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs,
                              const PrimitiveArgs& args = {}) {
  auto want = [&](size_t n) {
    if (inputs.size() != n) {
      throw ValidationError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                            " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: want(2); return matmul(inputs[0], inputs[1], args.transpose_b);
    case OpKind::add: want(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: want(2); return mul(inputs[0], inputs[1]);
    case OpKind::scale: want(1); return scale(inputs[0], args.constant);
    case OpKind::softmax: want(1); return softmax(inputs[0]);
    case OpKind::layernorm: want(1); return layernorm(inputs[0], args.eps);
    case OpKind::gelu: want(1); return gelu(inputs[0]);
    case OpKind::tanh_op: want(1); return tanh_t(inputs[0]);
    case OpKind::atanh_op: want(1); return atanh_t(inputs[0]);
    case OpKind::embed_lookup: want(1); return embed_lookup(inputs[0], args.ids);
    case OpKind::slice: want(1); return slice(inputs[0], args.axis, args.start, args.len);
    case OpKind::concat: return concat(inputs, args.axis);
    case OpKind::mean: want(1); return mean_all(inputs[0]);
    case OpKind::cross_entropy_with_logits:
      want(1);
      if (args.target_dist.defined()) {
        return cross_entropy_with_logits(inputs[0], args.target_dist);
      }
      return cross_entropy_with_logits(inputs[0], args.target);
    case OpKind::reciprocal: want(1); return reciprocal(inputs[0]);
  }
  throw ValidationError("apply_primitive: unknown op kind");
}

// ===== finite-difference gradient check =====================================

struct GradCheckReport {
  bool ok = false;
  double max_deviation = 0.0;  // relative, see finite_difference_check
  size_t worst_index = 0;
};

// Central finite differences against autodiff for a scalar-valued function of
// one tensor. Deviation is max_i |analytic_i - fd_i| normalized by
// max(1e-8, max_i max(|analytic_i|, |fd_i|)).
inline GradCheckReport finite_difference_check(
    const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
    double tolerance = 1e-5, double step = 1e-5) {
  // Analytic gradient.
  Tensor x = Tensor::from(point.shape(), point.data());
  x.set_requires_grad(true);
  Tape tape;
  std::vector<double> analytic;
  {
    TapeScope scope(tape);
    Tensor loss = fn(x);
    if (loss.numel() != 1) {
      throw ValidationError("finite_difference_check: function must be scalar-valued");
    }
    backward(tape, loss);
    analytic = x.has_grad() ? x.grad() : std::vector<double>(x.data().size(), 0.0);
    if (analytic.empty()) analytic.assign(x.data().size(), 0.0);
  }
  // Central differences.
  GradCheckReport report;
  double norm = 1e-8;
  std::vector<double> fd(point.data().size());
  for (size_t i = 0; i < point.data().size(); ++i) {
    Tensor xp = Tensor::from(point.shape(), point.data());
    Tensor xm = Tensor::from(point.shape(), point.data());
    xp.data()[i] += step;
    xm.data()[i] -= step;
    double fp = fn(xp).data()[0];
    double fm = fn(xm).data()[0];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_check: function non-finite at probe point");
    }
    fd[i] = (fp - fm) / (2.0 * step);
    norm = std::max(norm, std::max(std::abs(analytic[i]), std::abs(fd[i])));
  }
  for (size_t i = 0; i < fd.size(); ++i) {
    double dev = std::abs(analytic[i] - fd[i]) / norm;
    if (dev > report.max_deviation) {
      report.max_deviation = dev;
      report.worst_index = i;
    }
  }
  report.ok = report.max_deviation <= tolerance;
  return report;
}

}  // namespace circuitlab
