// ca/tensor.hpp
// Dense 64-bit tensors with define-by-run reverse-mode differentiation.
// A Tape records primitive ops in execution order; backward() replays the
// record in exact reverse order, accumulating gradients per tensor payload.
// Tensors not watched by (or derived from) a live tape evaluate untracked,
// which is how inference runs.
#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ca/common.hpp"

namespace ca {

using Shape = std::vector<std::int64_t>;

class Tape;

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> v;
  Tape* tape = nullptr;  // live tape tracking this payload, if any
};
}  // namespace detail

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData>()) {}

  static Tensor from(Shape shape, std::vector<double> values) {
    for (auto d : shape)
      if (d < 0) throw std::invalid_argument("tensor: negative extent");
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw std::invalid_argument("tensor: data length does not match shape " + shape_str(shape));
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->v = std::move(values);
    return t;
  }

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  }

  static Tensor full(Shape shape, double x) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), x));
  }

  static Tensor scalar(double x) { return from({1}, {x}); }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
    auto n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return from(std::move(shape), std::move(v));
  }

  static Tensor normal(Shape shape, double std_dev, Rng& rng) {
    auto n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal() * std_dev;
    return from(std::move(shape), std::move(v));
  }

  const Shape& shape() const { return d_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(d_->v.size()); }
  std::int64_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t rank() const { return d_->shape.size(); }

  // 2-D views. A 1-D tensor of length n is treated as a 1 x n row.
  std::int64_t rows() const { return rank() <= 1 ? 1 : d_->shape[0]; }
  std::int64_t cols() const {
    if (rank() == 0) return numel();
    return d_->shape[rank() - 1];
  }

  const std::vector<double>& vals() const { return d_->v; }
  std::vector<double>& mutable_vals() { return d_->v; }
  double item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return d_->v[0];
  }
  double at(std::int64_t i) const { return d_->v[static_cast<std::size_t>(i)]; }
  double at(std::int64_t r, std::int64_t c) const {
    return d_->v[static_cast<std::size_t>(r * cols() + c)];
  }

  const std::shared_ptr<detail::TensorData>& payload() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Ordered record of primitive operations plus per-payload gradient buffers.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    for (auto& p : touched_)
      if (p->tape == this) p->tape = nullptr;
  }

  // Mark a leaf (parameter, input) so downstream ops record onto this tape.
  void watch(const Tensor& t) {
    auto& p = t.payload();
    if (p->tape && p->tape != this)
      throw std::logic_error("tensor already watched by another live tape");
    if (p->tape == this) return;
    p->tape = this;
    touched_.push_back(p);
  }

  bool tracks(const Tensor& t) const { return t.payload()->tape == this; }

  std::size_t node_count() const { return nodes_.size(); }

  // Record a primitive: marks `out` as tracked and stores its backward fn.
  void record(const Tensor& out, std::function<void(Tape&)> back) {
    auto& p = out.payload();
    p->tape = this;
    touched_.push_back(p);
    nodes_.push_back(std::move(back));
  }

  void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!tracks(loss)) throw std::invalid_argument("backward: loss is not on this tape");
    grads_.clear();
    grad_buf(loss.payload().get(), 1)[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
  }

  // Gradient accumulator for a payload; zero-initialized on first touch.
  std::vector<double>& grad_buf(const detail::TensorData* p, std::size_t n) {
    auto it = grads_.find(p);
    if (it == grads_.end()) it = grads_.emplace(p, std::vector<double>(n, 0.0)).first;
    return it->second;
  }

  const std::vector<double>* grad_ptr(const detail::TensorData* p) const {
    auto it = grads_.find(p);
    return it == grads_.end() ? nullptr : &it->second;
  }

  const std::vector<double>* grad(const Tensor& t) const { return grad_ptr(t.payload().get()); }

  Tensor grad_tensor(const Tensor& t) const {
    const auto* g = grad(t);
    if (!g) return Tensor::zeros(t.shape());
    return Tensor::from(t.shape(), *g);
  }

 private:
  std::vector<std::function<void(Tape&)>> nodes_;
  std::vector<std::shared_ptr<detail::TensorData>> touched_;
  std::unordered_map<const detail::TensorData*, std::vector<double>> grads_;
};

namespace detail {

inline Tape* tape_of(std::initializer_list<const Tensor*> ins) {
  Tape* t = nullptr;
  for (const Tensor* x : ins) {
    Tape* xt = x->payload()->tape;
    if (!xt) continue;
    if (t && t != xt) throw std::logic_error("operands belong to different live tapes");
    t = xt;
  }
  return t;
}

inline void check_finite(const char* op, const Tensor& t) {
  for (double x : t.vals())
    if (!std::isfinite(x))
      throw NumericError(std::string(op) + ": non-finite value in result");
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Broadcasting is deliberately limited to scalar-with-tensor and
// equal shapes; anything richer must be an explicit reshape/stack.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
  detail::require(a.shape() == b.shape() || a_scalar || b_scalar,
                  "add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                      " are neither equal nor scalar-broadcastable");
  const Tensor& big = b_scalar ? a : b;
  std::vector<double> v(static_cast<std::size_t>(big.numel()));
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] + b.vals()[i];
  } else if (b_scalar) {
    double s = b.item();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] + s;
  } else {
    double s = a.item();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = s + b.vals()[i];
  }
  Tensor out = Tensor::from(big.shape(), std::move(v));
  detail::check_finite("add", out);
  if (Tape* tp = detail::tape_of({&a, &b})) {
    auto ap = a.payload(), bp = b.payload(), op = out.payload();
    tp->record(out, [ap, bp, op](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& ga = t.grad_buf(ap.get(), ap->v.size());
      auto& gb = t.grad_buf(bp.get(), bp->v.size());
      if (ap->v.size() == g->size()) {
        for (std::size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i];
      } else {
        for (double x : *g) ga[0] += x;
      }
      if (bp->v.size() == g->size()) {
        for (std::size_t i = 0; i < g->size(); ++i) gb[i] += (*g)[i];
      } else {
        for (double x : *g) gb[0] += x;
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
  detail::require(a.shape() == b.shape() || a_scalar || b_scalar,
                  "mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                      " are neither equal nor scalar-broadcastable");
  const Tensor& big = b_scalar ? a : b;
  std::vector<double> v(static_cast<std::size_t>(big.numel()));
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] * b.vals()[i];
  } else if (b_scalar) {
    double s = b.item();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] * s;
  } else {
    double s = a.item();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = s * b.vals()[i];
  }
  Tensor out = Tensor::from(big.shape(), std::move(v));
  detail::check_finite("mul", out);
  if (Tape* tp = detail::tape_of({&a, &b})) {
    auto ap = a.payload(), bp = b.payload(), op = out.payload();
    tp->record(out, [ap, bp, op](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& ga = t.grad_buf(ap.get(), ap->v.size());
      auto& gb = t.grad_buf(bp.get(), bp->v.size());
      bool eq = ap->v.size() == bp->v.size();
      if (eq) {
        for (std::size_t i = 0; i < g->size(); ++i) {
          ga[i] += (*g)[i] * bp->v[i];
          gb[i] += (*g)[i] * ap->v[i];
        }
      } else if (bp->v.size() == 1) {
        double s = bp->v[0];
        for (std::size_t i = 0; i < g->size(); ++i) {
          ga[i] += (*g)[i] * s;
          gb[0] += (*g)[i] * ap->v[i];
        }
      } else {
        double s = ap->v[0];
        for (std::size_t i = 0; i < g->size(); ++i) {
          gb[i] += (*g)[i] * s;
          ga[0] += (*g)[i] * bp->v[i];
        }
      }
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor mul_scalar(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

namespace detail {

// Shared scaffold for unary elementwise ops: y = f(x), dx += g * dfdy(y, x).
template <class F, class DF>
Tensor unary_ew(const char* name, const Tensor& x, F f, DF dfdy) {
  std::vector<double> v(static_cast<std::size_t>(x.numel()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(x.vals()[i]);
  Tensor out = Tensor::from(x.shape(), std::move(v));
  check_finite(name, out);
  if (Tape* tp = tape_of({&x})) {
    auto xp = x.payload(), op = out.payload();
    tp->record(out, [xp, op, dfdy](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      for (std::size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i] * dfdy(op->v[i], xp->v[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor neg(const Tensor& x) {
  return detail::unary_ew("neg", x, [](double a) { return -a; },
                          [](double, double) { return -1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

inline Tensor tanh(const Tensor& x) {
  return detail::unary_ew("tanh", x, [](double a) { return std::tanh(a); },
                          [](double y, double) { return 1.0 - y * y; });
}

// Numerically symmetric two-branch sigmoid.
inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_ew("sigmoid", x, sigmoid_scalar,
                          [](double y, double) { return y * (1.0 - y); });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.vals())
    if (v <= 0.0) throw NumericError("log: non-positive input");
  return detail::unary_ew("log", x, [](double a) { return std::log(a); },
                          [](double, double xi) { return 1.0 / xi; });
}

// max(x, lo); derivative 0 where clamped.
inline Tensor clamp_min(const Tensor& x, double lo) {
  return detail::unary_ew("clamp_min", x, [lo](double a) { return a < lo ? lo : a; },
                          [lo](double, double xi) { return xi < lo ? 0.0 : 1.0; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be 2-D");
  std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  detail::require(k == k2, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                               " x " + shape_str(b.shape()));
  std::vector<double> v(static_cast<std::size_t>(m * n), 0.0);
  const double* av = a.vals().data();
  const double* bv = b.vals().data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t p = 0; p < k; ++p) {
      double av_ip = av[i * k + p];
      if (av_ip == 0.0) continue;
      const double* brow = bv + p * n;
      double* orow = v.data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += av_ip * brow[j];
    }
  Tensor out = Tensor::from({m, n}, std::move(v));
  detail::check_finite("matmul", out);
  if (Tape* tp = detail::tape_of({&a, &b})) {
    auto ap = a.payload(), bp = b.payload(), op = out.payload();
    tp->record(out, [ap, bp, op, m, k, n](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& ga = t.grad_buf(ap.get(), ap->v.size());
      auto& gb = t.grad_buf(bp.get(), bp->v.size());
      const double* gv = g->data();
      // dA = g . B^T ; dB = A^T . g
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          double gij = gv[i * n + j];
          if (gij == 0.0) continue;
          const double* brow = bp->v.data();
          for (std::int64_t p = 0; p < k; ++p) ga[i * k + p] += gij * brow[p * n + j];
        }
      for (std::int64_t p = 0; p < k; ++p)
        for (std::int64_t i = 0; i < m; ++i) {
          double a_ip = ap->v[i * k + p];
          if (a_ip == 0.0) continue;
          for (std::int64_t j = 0; j < n; ++j) gb[p * n + j] += a_ip * gv[i * n + j];
        }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& x) {
  detail::require(x.rank() == 2, "transpose: 2-D only");
  std::int64_t m = x.dim(0), n = x.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m * n));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) v[static_cast<std::size_t>(j * m + i)] = x.at(i, j);
  Tensor out = Tensor::from({n, m}, std::move(v));
  if (Tape* tp = detail::tape_of({&x})) {
    auto xp = x.payload(), op = out.payload();
    tp->record(out, [xp, op, m, n](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      for (std::int64_t j = 0; j < n; ++j)
        for (std::int64_t i = 0; i < m; ++i) gx[i * n + j] += (*g)[j * m + i];
    });
  }
  return out;
}

// X[m x n] + v[n] broadcast across rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  detail::require(x.rank() == 2, "add_rowvec: x must be 2-D");
  std::int64_t m = x.dim(0), n = x.dim(1);
  detail::require(v.numel() == n, "add_rowvec: vector length mismatch");
  std::vector<double> out_v(static_cast<std::size_t>(m * n));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out_v[i * n + j] = x.at(i, j) + v.at(j);
  Tensor out = Tensor::from({m, n}, std::move(out_v));
  detail::check_finite("add_rowvec", out);
  if (Tape* tp = detail::tape_of({&x, &v})) {
    auto xp = x.payload(), vp = v.payload(), op = out.payload();
    tp->record(out, [xp, vp, op, m, n](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      auto& gv = t.grad_buf(vp.get(), vp->v.size());
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          gx[i * n + j] += (*g)[i * n + j];
          gv[j] += (*g)[i * n + j];
        }
    });
  }
  return out;
}

// X[m x n] + v[m x 1] broadcast across columns.
inline Tensor add_colvec(const Tensor& x, const Tensor& v) {
  detail::require(x.rank() == 2, "add_colvec: x must be 2-D");
  std::int64_t m = x.dim(0), n = x.dim(1);
  detail::require(v.numel() == m, "add_colvec: vector length mismatch");
  std::vector<double> out_v(static_cast<std::size_t>(m * n));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out_v[i * n + j] = x.at(i, j) + v.at(i);
  Tensor out = Tensor::from({m, n}, std::move(out_v));
  detail::check_finite("add_colvec", out);
  if (Tape* tp = detail::tape_of({&x, &v})) {
    auto xp = x.payload(), vp = v.payload(), op = out.payload();
    tp->record(out, [xp, vp, op, m, n](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      auto& gv = t.grad_buf(vp.get(), vp->v.size());
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          gx[i * n + j] += (*g)[i * n + j];
          gv[i] += (*g)[i * n + j];
        }
    });
  }
  return out;
}

// Softmax over the last dimension, max-subtracted for stability.
inline Tensor softmax(const Tensor& x) {
  detail::require(x.rank() >= 1, "softmax: rank >= 1 required");
  std::int64_t n = x.cols();
  detail::require(n >= 1, "softmax: empty last dimension");
  std::int64_t m = x.numel() / n;
  std::vector<double> v(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < m; ++i) {
    const double* row = x.vals().data() + i * n;
    double* orow = v.data() + i * n;
    double mx = row[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (std::int64_t j = 0; j < n; ++j) orow[j] /= z;
  }
  Tensor out = Tensor::from(x.shape(), std::move(v));
  detail::check_finite("softmax", out);
  if (Tape* tp = detail::tape_of({&x})) {
    auto xp = x.payload(), op = out.payload();
    tp->record(out, [xp, op, m, n](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      for (std::int64_t i = 0; i < m; ++i) {
        const double* y = op->v.data() + i * n;
        const double* gr = g->data() + i * n;
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * y[j];
        for (std::int64_t j = 0; j < n; ++j) gx[i * n + j] += y[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

// Row gather; rows may repeat. Backward scatter-adds.
inline Tensor take_rows(const Tensor& x, std::vector<std::int64_t> idx) {
  detail::require(x.rank() == 2, "take_rows: x must be 2-D");
  std::int64_t m = x.dim(0), n = x.dim(1);
  for (auto i : idx)
    detail::require(i >= 0 && i < m, "take_rows: row index out of range");
  std::int64_t r = static_cast<std::int64_t>(idx.size());
  std::vector<double> v(static_cast<std::size_t>(r * n));
  for (std::int64_t i = 0; i < r; ++i)
    std::copy_n(x.vals().data() + idx[i] * n, n, v.data() + i * n);
  Tensor out = Tensor::from({r, n}, std::move(v));
  if (Tape* tp = detail::tape_of({&x})) {
    auto xp = x.payload(), op = out.payload();
    tp->record(out, [xp, op, idx = std::move(idx), n](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t j = 0; j < n; ++j)
          gx[idx[i] * n + j] += (*g)[static_cast<std::int64_t>(i) * n + j];
    });
  }
  return out;
}

inline Tensor row(const Tensor& x, std::int64_t i) { return take_rows(x, {i}); }

inline Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t end) {
  detail::require(begin >= 0 && end >= begin && end <= x.dim(0), "slice_rows: bad range");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return take_rows(x, std::move(idx));
}

// Stack row vectors (each [n] or [1 x n]) into an [m x n] matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows_in) {
  detail::require(!rows_in.empty(), "stack_rows: empty input");
  std::int64_t n = rows_in[0].numel();
  for (const auto& r : rows_in)
    detail::require(r.numel() == n && r.rows() == 1, "stack_rows: rows must share length");
  std::int64_t m = static_cast<std::int64_t>(rows_in.size());
  std::vector<double> v(static_cast<std::size_t>(m * n));
  for (std::int64_t i = 0; i < m; ++i)
    std::copy_n(rows_in[i].vals().data(), n, v.data() + i * n);
  Tensor out = Tensor::from({m, n}, std::move(v));
  Tape* tp = nullptr;
  for (const auto& r : rows_in) {
    Tape* rt = r.payload()->tape;
    if (rt) {
      if (tp && tp != rt) throw std::logic_error("stack_rows: mixed tapes");
      tp = rt;
    }
  }
  if (tp) {
    std::vector<std::shared_ptr<detail::TensorData>> ins;
    ins.reserve(rows_in.size());
    for (const auto& r : rows_in) ins.push_back(r.payload());
    auto op = out.payload();
    tp->record(out, [ins = std::move(ins), op, n](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      for (std::size_t i = 0; i < ins.size(); ++i) {
        auto& gi = t.grad_buf(ins[i].get(), ins[i]->v.size());
        for (std::int64_t j = 0; j < n; ++j)
          gi[j] += (*g)[static_cast<std::int64_t>(i) * n + j];
      }
    });
  }
  return out;
}

// Per-row element pick: out[i] = x[i, ids[i]]. Result is [m x 1].
inline Tensor gather_cols(const Tensor& x, std::vector<std::int64_t> ids) {
  detail::require(x.rank() == 2, "gather_cols: x must be 2-D");
  std::int64_t m = x.dim(0), n = x.dim(1);
  detail::require(static_cast<std::int64_t>(ids.size()) == m, "gather_cols: one id per row required");
  for (auto c : ids)
    detail::require(c >= 0 && c < n, "gather_cols: column out of range");
  std::vector<double> v(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) v[i] = x.at(i, ids[i]);
  Tensor out = Tensor::from({m, 1}, std::move(v));
  if (Tape* tp = detail::tape_of({&x})) {
    auto xp = x.payload(), op = out.payload();
    tp->record(out, [xp, op, ids = std::move(ids), n](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      for (std::size_t i = 0; i < ids.size(); ++i)
        gx[static_cast<std::int64_t>(i) * n + ids[i]] += (*g)[i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(), "reshape: element count mismatch");
  Tensor out = Tensor::from(std::move(shape), x.vals());
  if (Tape* tp = detail::tape_of({&x})) {
    auto xp = x.payload(), op = out.payload();
    tp->record(out, [xp, op](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      for (std::size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i];
    });
  }
  return out;
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.vals()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::check_finite("sum", out);
  if (Tape* tp = detail::tape_of({&x})) {
    auto xp = x.payload(), op = out.payload();
    tp->record(out, [xp, op](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      for (auto& v : gx) v += (*g)[0];
    });
  }
  return out;
}

// Row-wise layer normalization with learned gain/bias vectors of length n.
inline Tensor layernorm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                             double eps = 1e-8) {
  detail::require(x.rank() == 2, "layernorm_rows: x must be 2-D");
  std::int64_t m = x.dim(0), n = x.dim(1);
  detail::require(gain.numel() == n && bias.numel() == n, "layernorm_rows: gain/bias length");
  std::vector<double> v(static_cast<std::size_t>(m * n));
  std::vector<double> xhat(static_cast<std::size_t>(m * n));
  std::vector<double> inv_std(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    const double* r = x.vals().data() + i * n;
    double mu = 0.0;
    for (std::int64_t j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::int64_t j = 0; j < n; ++j) {
      double xh = (r[j] - mu) * is;
      xhat[i * n + j] = xh;
      v[i * n + j] = xh * gain.at(j) + bias.at(j);
    }
  }
  Tensor out = Tensor::from({m, n}, std::move(v));
  detail::check_finite("layernorm_rows", out);
  if (Tape* tp = detail::tape_of({&x, &gain, &bias})) {
    auto xp = x.payload(), gp = gain.payload(), bp = bias.payload(), op = out.payload();
    tp->record(out, [xp, gp, bp, op, m, n, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      auto& gx = t.grad_buf(xp.get(), xp->v.size());
      auto& gg = t.grad_buf(gp.get(), gp->v.size());
      auto& gb = t.grad_buf(bp.get(), bp->v.size());
      for (std::int64_t i = 0; i < m; ++i) {
        const double* gr = g->data() + i * n;
        const double* xh = xhat.data() + i * n;
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
          double dxh = gr[j] * gp->v[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh[j];
          gg[j] += gr[j] * xh[j];
          gb[j] += gr[j];
        }
        mean_dxh /= static_cast<double>(n);
        mean_dxh_xh /= static_cast<double>(n);
        for (std::int64_t j = 0; j < n; ++j) {
          double dxh = gr[j] * gp->v[j];
          gx[i * n + j] += inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention, composed from primitives so the gradient
// falls out of the tape. Mask is additive (0 for visible, large negative for
// hidden); every query row must keep at least one visible key.
// ---------------------------------------------------------------------------

constexpr double kMaskHidden = -1e30;

struct AttentionResult {
  Tensor output;   // [T x d]
  Tensor weights;  // [T x T], rows sum to 1
};

inline AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const Tensor& mask) {
  detail::require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: 2-D inputs");
  std::int64_t tq = q.dim(0), d = q.dim(1);
  detail::require(k.dim(1) == d && v.dim(0) == k.dim(0), "attention: shape mismatch");
  detail::require(mask.rank() == 2 && mask.dim(0) == tq && mask.dim(1) == k.dim(0),
                  "attention: mask must be [Tq x Tk]");
  for (std::int64_t i = 0; i < tq; ++i) {
    bool open = false;
    for (std::int64_t j = 0; j < k.dim(0); ++j)
      if (mask.at(i, j) == 0.0) { open = true; break; }
    if (!open) throw std::invalid_argument("attention: fully-masked query row");
  }
  Tensor scores = mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor w = softmax(add(scores, mask));
  return {matmul(w, v), w};
}

// ---------------------------------------------------------------------------
// Gradient verification: central differences against the tape gradient.
// Returns max over components of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
// `f` must rebuild its computation from scratch on each call.
// ---------------------------------------------------------------------------

inline double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5) {
  Tensor base = Tensor::from(x.shape(), x.vals());
  std::vector<double> g_ad;
  {
    Tape tape;
    tape.watch(base);
    Tensor loss = f(tape, base);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    tape.backward(loss);
    g_ad = tape.grad_tensor(base).vals();
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < g_ad.size(); ++i) {
    auto eval = [&](double delta) {
      Tensor xx = Tensor::from(x.shape(), x.vals());
      xx.mutable_vals()[i] += delta;
      Tape tape;
      tape.watch(xx);
      return f(tape, xx).item();
    };
    double g_fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
    double err = std::abs(g_ad[i] - g_fd) / std::max(1e-8, std::abs(g_ad[i]) + std::abs(g_fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ca
