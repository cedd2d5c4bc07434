#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ttlab/blas.hpp"

namespace ttlab {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ", ";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

// Dense row-major tensor.  Copies share storage (shared_ptr), reshaped() gives
// a view with a different shape over the same storage.  Gradient buffers live
// next to the data and are allocated on demand.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape, S fill = S(0), bool requires_grad = false)
      : st_(std::make_shared<Storage>()), shape_(std::move(shape)) {
    for (int64_t d : shape_)
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dim in " + shape_str(shape_));
    st_->data.assign(static_cast<size_t>(shape_numel(shape_)), fill);
    st_->requires_grad = requires_grad;
  }

  static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("tensor: " + std::to_string(data.size()) +
                                  " values do not fill shape " + shape_str(shape));
    TensorT t;
    t.st_ = std::make_shared<Storage>();
    t.st_->data = std::move(data);
    t.st_->requires_grad = requires_grad;
    t.shape_ = std::move(shape);
    return t;
  }

  static TensorT scalar(S v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const { return st_ ? static_cast<int64_t>(st_->data.size()) : 0; }

  S* data() { return st_->data.data(); }
  const S* data() const { return st_->data.data(); }
  std::vector<S>& vec() { return st_->data; }
  const std::vector<S>& vec() const { return st_->data; }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor has shape " + shape_str(shape_));
    return st_->data[0];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  void set_requires_grad(bool rg) { st_->requires_grad = rg; }

  bool has_grad() const { return st_ && !st_->grad.empty(); }
  void ensure_grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), S(0));
  }
  void zero_grad() {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }
  S* grad() {
    ensure_grad();
    return st_->grad.data();
  }
  const S* grad() const {
    if (!has_grad()) throw std::logic_error("grad: no gradient buffer");
    return st_->grad.data();
  }
  std::vector<S>& grad_vec() {
    ensure_grad();
    return st_->grad;
  }

  // Same storage, new shape.  Gradients flow through views for free.
  TensorT reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " + shape_str(s) +
                                  " changes element count");
    TensorT t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  TensorT clone() const {
    TensorT t = from_data(shape_, st_->data, st_->requires_grad);
    return t;
  }

  bool same_storage(const TensorT& o) const { return st_ == o.st_; }

 private:
  struct Storage {
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> st_;
  Shape shape_;
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

// Recording scope for reverse-mode autodiff.  Constructing a Tape makes it
// current for the thread; ops append backward rules while one is active.
// backward(loss) seeds d(loss)/d(loss) = 1 and replays the rules in reverse.
//
// Gradient buffers of op *outputs* are reset at the start of every backward
// pass (they carry per-pass values), while leaf tensors keep accumulating
// until zero_grad(), so repeated backward calls add up on leaves and
// micro-batch accumulation works as expected.
template <typename S>
class Tape {
 public:
  Tape() : prev_(cur()) { cur() = this; }
  ~Tape() { cur() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return cur(); }

  void record(const TensorT<S>& out, std::function<void()> rule) {
    nodes_.push_back({out, std::move(rule)});
  }

  size_t num_nodes() const { return nodes_.size(); }

  void backward(TensorT<S>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(loss.shape()));
    for (auto& n : nodes_) {
      n.out.ensure_grad();
      n.out.zero_grad();
    }
    loss.ensure_grad();
    loss.grad()[0] += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->rule();
  }

 private:
  struct Node {
    TensorT<S> out;
    std::function<void()> rule;
  };
  static Tape*& cur() {
    static thread_local Tape* t = nullptr;
    return t;
  }
  Tape* prev_;
  std::vector<Node> nodes_;
};

template <typename S>
void backward(TensorT<S>& loss) {
  auto* tp = Tape<S>::current();
  if (!tp) throw std::logic_error("backward: no active tape");
  tp->backward(loss);
}

namespace detail {

// exp for the float path, accurate to a few ulp and branch-light so the
// softmax/gelu loops vectorise.  Returns exactly 0 below the underflow
// cutoff, which keeps causally masked attention weights identically zero.
inline float fast_exp(float x) {
  constexpr float kLo = -87.0f, kHi = 88.0f;
  bool under = x < kLo;
  if (x > kHi) x = kHi;
  if (under) x = kLo;
  float t = x * 1.4426950408889634f;
  float nf = std::floor(t + 0.5f);
  float f = x - nf * 0.693145751953125f;  // Cody-Waite split of ln 2
  f -= nf * 1.42860677e-06f;
  float p = 1.0f + f * (1.0f + f * 0.5f * (1.0f + (f / 3.0f) * (1.0f + 0.25f * f *
            (1.0f + 0.2f * f * (1.0f + (f / 6.0f) * (1.0f + f / 7.0f))))));
  int n = static_cast<int>(nf);
  float sc;
  std::uint32_t bits = static_cast<std::uint32_t>(n + 127) << 23;
  std::memcpy(&sc, &bits, sizeof sc);
  float r = p * sc;
  return under ? 0.0f : r;
}

inline double exp_s(double x) { return std::exp(x); }
inline float exp_s(float x) { return fast_exp(x); }

inline double tanh_s(double x) { return std::tanh(x); }
inline float tanh_s(float x) {
  float ax = std::fabs(x);
  if (ax > 9.0f) return x < 0 ? -1.0f : 1.0f;
  float e = fast_exp(2.0f * ax);
  float r = (e - 1.0f) / (e + 1.0f);
  return x < 0 ? -r : r;
}

template <typename S>
inline S* acc(TensorT<S>& t) {
  return t.grad();
}

// Attention mask fill value.  exp(kMasked - rowmax) underflows to exactly 0
// in both precisions, so masked positions contribute nothing at all.
template <typename S>
constexpr S masked_score() {
  return S(-1e30);
}

}  // namespace detail

// ---- elementwise and reduction ops ----

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  TensorT<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (auto* tp = Tape<S>::current(); tp && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tp->record(out, [a = a, b = b, out = out]() mutable {
      const S* g = out.grad();
      int64_t m = out.numel();
      if (a.requires_grad()) {
        S* ga = detail::acc(a);
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        S* gb = detail::acc(b);
        for (int64_t i = 0; i < m; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  TensorT<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (auto* tp = Tape<S>::current(); tp && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tp->record(out, [a = a, b = b, out = out]() mutable {
      const S* g = out.grad();
      int64_t m = out.numel();
      if (a.requires_grad()) {
        S* ga = detail::acc(a);
        const S* pb2 = b.data();
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        S* gb = detail::acc(b);
        const S* pa2 = a.data();
        for (int64_t i = 0; i < m; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (auto* tp = Tape<S>::current(); tp && a.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [a = a, out = out, c]() mutable {
      const S* g = out.grad();
      S* ga = detail::acc(a);
      int64_t m = out.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
  S total = S(0);
  const S* pa = a.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) total += pa[i];
  TensorT<S> out = TensorT<S>::scalar(total);
  if (auto* tp = Tape<S>::current(); tp && a.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [a = a, out = out]() mutable {
      S g = out.grad()[0];
      S* ga = detail::acc(a);
      int64_t m = a.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g;
    });
  }
  return out;
}

// x: [rows x d] (any leading shape, last dim d), bias: [d].
template <typename S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& bias) {
  if (x.ndim() < 1 || bias.ndim() != 1 || x.shape().back() != bias.dim(0))
    throw std::invalid_argument("add_bias: " + shape_str(x.shape()) + " with bias " +
                                shape_str(bias.shape()));
  int64_t d = bias.dim(0);
  int64_t rows = x.numel() / d;
  TensorT<S> out(x.shape());
  const S* px = x.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  if (auto* tp = Tape<S>::current(); tp && (x.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    tp->record(out, [x = x, bias = bias, out = out, rows, d]() mutable {
      const S* g = out.grad();
      if (x.requires_grad()) {
        S* gx = detail::acc(x);
        int64_t m = out.numel();
        for (int64_t i = 0; i < m; ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        S* gb = detail::acc(bias);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
    });
  }
  return out;
}

// ---- matrix products ----

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<S> out({m, n});
  blas::gemm(false, false, m, n, k, S(1), a.data(), k, b.data(), n, S(0), out.data(), n);
  if (auto* tp = Tape<S>::current(); tp && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tp->record(out, [a = a, b = b, out = out, m, k, n]() mutable {
      const S* g = out.grad();
      if (a.requires_grad())
        blas::gemm(false, true, m, k, n, S(1), g, n, b.data(), n, S(1), detail::acc(a), k);
      if (b.requires_grad())
        blas::gemm(true, false, k, n, m, S(1), a.data(), k, g, n, S(1), detail::acc(b), n);
    });
  }
  return out;
}

// a: [m x k], b: [n x k]  ->  a b^T: [m x n].
template <typename S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw std::invalid_argument("matmul_nt: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  TensorT<S> out({m, n});
  blas::gemm(false, true, m, n, k, S(1), a.data(), k, b.data(), k, S(0), out.data(), n);
  if (auto* tp = Tape<S>::current(); tp && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tp->record(out, [a = a, b = b, out = out, m, k, n]() mutable {
      const S* g = out.grad();
      if (a.requires_grad())
        blas::gemm(false, false, m, k, n, S(1), g, n, b.data(), k, S(1), detail::acc(a), k);
      if (b.requires_grad())
        blas::gemm(true, false, n, k, m, S(1), g, n, a.data(), k, S(1), detail::acc(b), k);
    });
  }
  return out;
}

// a: [g x m x k], b: [g x k x n]  ->  [g x m x n].
template <typename S>
TensorT<S> batched_matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument("batched_matmul: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int64_t g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  TensorT<S> out({g, m, n});
  for (int64_t i = 0; i < g; ++i)
    blas::gemm(false, false, m, n, k, S(1), a.data() + i * m * k, k, b.data() + i * k * n,
               n, S(0), out.data() + i * m * n, n);
  if (auto* tp = Tape<S>::current(); tp && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tp->record(out, [a = a, b = b, out = out, g, m, k, n]() mutable {
      const S* gr = out.grad();
      for (int64_t i = 0; i < g; ++i) {
        const S* gi = gr + i * m * n;
        if (a.requires_grad())
          blas::gemm(false, true, m, k, n, S(1), gi, n, b.data() + i * k * n, n, S(1),
                     detail::acc(a) + i * m * k, k);
        if (b.requires_grad())
          blas::gemm(true, false, k, n, m, S(1), a.data() + i * m * k, k, gi, n, S(1),
                     detail::acc(b) + i * k * n, n);
      }
    });
  }
  return out;
}

// a: [g x m x k], b: [g x n x k]  ->  a b^T per slice: [g x m x n].
template <typename S>
TensorT<S> batched_matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw std::invalid_argument("batched_matmul_nt: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  int64_t g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  TensorT<S> out({g, m, n});
  for (int64_t i = 0; i < g; ++i)
    blas::gemm(false, true, m, n, k, S(1), a.data() + i * m * k, k, b.data() + i * n * k,
               k, S(0), out.data() + i * m * n, n);
  if (auto* tp = Tape<S>::current(); tp && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tp->record(out, [a = a, b = b, out = out, g, m, k, n]() mutable {
      const S* gr = out.grad();
      for (int64_t i = 0; i < g; ++i) {
        const S* gi = gr + i * m * n;
        if (a.requires_grad())
          blas::gemm(false, false, m, k, n, S(1), gi, n, b.data() + i * n * k, k, S(1),
                     detail::acc(a) + i * m * k, k);
        if (b.requires_grad())
          blas::gemm(true, false, n, k, m, S(1), gi, n, a.data() + i * m * k, k, S(1),
                     detail::acc(b) + i * n * k, k);
      }
    });
  }
  return out;
}

// ---- nonlinearities and normalisation ----

// Softmax over the last axis.
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
  if (x.ndim() < 1) throw std::invalid_argument("softmax_rows: scalar input");
  int64_t d = x.shape().back();
  int64_t rows = x.numel() / d;
  TensorT<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    S* yr = po + r * d;
    S mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    S s = S(0);
    for (int64_t j = 0; j < d; ++j) {
      S e = detail::exp_s(xr[j] - mx);
      yr[j] = e;
      s += e;
    }
    S inv = S(1) / s;
    for (int64_t j = 0; j < d; ++j) yr[j] *= inv;
  }
  if (auto* tp = Tape<S>::current(); tp && x.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [x = x, out = out, rows, d]() mutable {
      const S* g = out.grad();
      const S* y = out.data();
      S* gx = detail::acc(x);
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g + r * d;
        const S* yr = y + r * d;
        S dot = S(0);
        for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
        S* gxr = gx + r * d;
        for (int64_t j = 0; j < d; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

// Per-row normalisation over the last axis with learned gain and bias.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias,
                      S eps = S(1e-5)) {
  if (x.ndim() < 1 || gain.ndim() != 1 || bias.ndim() != 1 ||
      gain.dim(0) != x.shape().back() || bias.dim(0) != x.shape().back())
    throw std::invalid_argument("layer_norm: " + shape_str(x.shape()) + " with gain " +
                                shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  int64_t d = x.shape().back();
  int64_t rows = x.numel() / d;
  TensorT<S> out(x.shape());
  std::vector<S> mean(rows), inv_std(rows);
  const S* px = x.data();
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    S mu = S(0);
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= S(d);
    S var = S(0);
    for (int64_t j = 0; j < d; ++j) {
      S c = xr[j] - mu;
      var += c * c;
    }
    var /= S(d);
    S inv = S(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = inv;
    S* yr = po + r * d;
    for (int64_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * inv * pg[j] + pb[j];
  }
  if (auto* tp = Tape<S>::current();
      tp && (x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    tp->record(out, [x = x, gain = gain, bias = bias, out = out, rows, d, mean = std::move(mean),
                     inv_std = std::move(inv_std)]() mutable {
      const S* g = out.grad();
      const S* px2 = x.data();
      const S* pg2 = gain.data();
      S* gx = x.requires_grad() ? detail::acc(x) : nullptr;
      S* gg = gain.requires_grad() ? detail::acc(gain) : nullptr;
      S* gb = bias.requires_grad() ? detail::acc(bias) : nullptr;
      std::vector<S> xhat(static_cast<size_t>(d));
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = px2 + r * d;
        const S* gr = g + r * d;
        S inv = inv_std[r], mu = mean[r];
        S mean_h = S(0), mean_hx = S(0);
        for (int64_t j = 0; j < d; ++j) {
          xhat[j] = (xr[j] - mu) * inv;
          S h = gr[j] * pg2[j];
          mean_h += h;
          mean_hx += h * xhat[j];
        }
        mean_h /= S(d);
        mean_hx /= S(d);
        for (int64_t j = 0; j < d; ++j) {
          if (gx) gx[r * d + j] += inv * (gr[j] * pg2[j] - mean_h - xhat[j] * mean_hx);
          if (gg) gg[j] += gr[j] * xhat[j];
          if (gb) gb[j] += gr[j];
        }
      }
    });
  }
  return out;
}

// tanh-approximated gaussian error linear unit.
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  constexpr S c0 = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S c1 = S(0.044715);
  TensorT<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    S v = px[i];
    S t = detail::tanh_s(c0 * (v + c1 * v * v * v));
    po[i] = S(0.5) * v * (S(1) + t);
  }
  if (auto* tp = Tape<S>::current(); tp && x.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [x = x, out = out]() mutable {
      constexpr S c0 = S(0.7978845608028654);
      constexpr S c1 = S(0.044715);
      const S* g = out.grad();
      const S* px2 = x.data();
      S* gx = detail::acc(x);
      int64_t m = x.numel();
      for (int64_t i = 0; i < m; ++i) {
        S v = px2[i];
        S u = c0 * (v + c1 * v * v * v);
        S t = detail::tanh_s(u);
        S du = c0 * (S(1) + S(3) * c1 * v * v);
        S dy = S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * du;
        gx[i] += g[i] * dy;
      }
    });
  }
  return out;
}

// ---- attention plumbing ----

// scores: [g x t x t]; positions j > i get a fill that underflows to zero
// weight after softmax, so causality holds exactly, not just approximately.
template <typename S>
TensorT<S> apply_causal_mask(const TensorT<S>& scores) {
  if (scores.ndim() != 3 || scores.dim(1) != scores.dim(2))
    throw std::invalid_argument("apply_causal_mask: want [g x t x t], got " +
                                shape_str(scores.shape()));
  int64_t g = scores.dim(0), t = scores.dim(1);
  TensorT<S> out(scores.shape());
  const S* px = scores.data();
  S* po = out.data();
  for (int64_t b = 0; b < g; ++b)
    for (int64_t i = 0; i < t; ++i) {
      const S* xr = px + (b * t + i) * t;
      S* yr = po + (b * t + i) * t;
      for (int64_t j = 0; j <= i; ++j) yr[j] = xr[j];
      for (int64_t j = i + 1; j < t; ++j) yr[j] = detail::masked_score<S>();
    }
  if (auto* tp = Tape<S>::current(); tp && scores.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [scores = scores, out = out, g, t]() mutable {
      const S* gr = out.grad();
      S* gx = detail::acc(scores);
      for (int64_t b = 0; b < g; ++b)
        for (int64_t i = 0; i < t; ++i)
          for (int64_t j = 0; j <= i; ++j)
            gx[(b * t + i) * t + j] += gr[(b * t + i) * t + j];
    });
  }
  return out;
}

// x: [(batch*t) x d] -> [(batch*heads) x t x head_dim].
template <typename S>
TensorT<S> split_heads(const TensorT<S>& x, int64_t batch, int64_t t, int64_t heads) {
  if (x.ndim() != 2 || x.dim(0) != batch * t || x.dim(1) % heads != 0)
    throw std::invalid_argument("split_heads: " + shape_str(x.shape()) + " with batch " +
                                std::to_string(batch) + ", t " + std::to_string(t) +
                                ", heads " + std::to_string(heads));
  int64_t d = x.dim(1), hd = d / heads;
  TensorT<S> out({batch * heads, t, hd});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < t; ++i)
        std::memcpy(po + ((b * heads + h) * t + i) * hd, px + (b * t + i) * d + h * hd,
                    sizeof(S) * static_cast<size_t>(hd));
  if (auto* tp = Tape<S>::current(); tp && x.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [x = x, out = out, batch, t, heads, d, hd]() mutable {
      const S* g = out.grad();
      S* gx = detail::acc(x);
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t i = 0; i < t; ++i) {
            const S* gr = g + ((b * heads + h) * t + i) * hd;
            S* gxr = gx + (b * t + i) * d + h * hd;
            for (int64_t c = 0; c < hd; ++c) gxr[c] += gr[c];
          }
    });
  }
  return out;
}

// Inverse of split_heads: [(batch*heads) x t x head_dim] -> [(batch*t) x d].
template <typename S>
TensorT<S> merge_heads(const TensorT<S>& x, int64_t batch, int64_t t, int64_t heads) {
  if (x.ndim() != 3 || x.dim(0) != batch * heads || x.dim(1) != t)
    throw std::invalid_argument("merge_heads: " + shape_str(x.shape()) + " with batch " +
                                std::to_string(batch) + ", t " + std::to_string(t) +
                                ", heads " + std::to_string(heads));
  int64_t hd = x.dim(2), d = heads * hd;
  TensorT<S> out({batch * t, d});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < t; ++i)
        std::memcpy(po + (b * t + i) * d + h * hd, px + ((b * heads + h) * t + i) * hd,
                    sizeof(S) * static_cast<size_t>(hd));
  if (auto* tp = Tape<S>::current(); tp && x.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [x = x, out = out, batch, t, heads, d, hd]() mutable {
      const S* g = out.grad();
      S* gx = detail::acc(x);
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t i = 0; i < t; ++i) {
            const S* gr = g + (b * t + i) * d + h * hd;
            S* gxr = gx + ((b * heads + h) * t + i) * hd;
            for (int64_t c = 0; c < hd; ++c) gxr[c] += gr[c];
          }
    });
  }
  return out;
}

// ---- embedding and loss ----

template <typename S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding_lookup: table must be 2-d");
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: empty id list");
  int64_t v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " outside [0, " + std::to_string(v) + ")");
  TensorT<S> out({static_cast<int64_t>(ids.size()), d});
  const S* pt = table.data();
  S* po = out.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(po + static_cast<int64_t>(i) * d, pt + static_cast<int64_t>(ids[i]) * d,
                sizeof(S) * static_cast<size_t>(d));
  if (auto* tp = Tape<S>::current(); tp && table.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [table = table, out = out, ids, d]() mutable {
      const S* g = out.grad();
      S* gt = detail::acc(table);
      for (size_t i = 0; i < ids.size(); ++i) {
        const S* gr = g + static_cast<int64_t>(i) * d;
        S* row = gt + static_cast<int64_t>(ids[i]) * d;
        for (int64_t c = 0; c < d; ++c) row[c] += gr[c];
      }
    });
  }
  return out;
}

// Mean token-level cross entropy over positions where mask is true.
// logits: [t x v]; targets, mask: length t.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& mask) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("cross_entropy: logits must be [t x v], got " +
                                shape_str(logits.shape()));
  int64_t t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t || static_cast<int64_t>(mask.size()) != t)
    throw std::invalid_argument("cross_entropy: got " + std::to_string(targets.size()) +
                                " targets, " + std::to_string(mask.size()) + " mask entries for " +
                                std::to_string(t) + " rows");
  int64_t n_mask = 0;
  for (int64_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    ++n_mask;
    if (targets[i] < 0 || targets[i] >= v)
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                              " outside [0, " + std::to_string(v) + ")");
  }
  if (n_mask == 0)
    throw std::invalid_argument("cross_entropy: every position is masked out");
  const S* pl = logits.data();
  double total = 0;
  for (int64_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    const S* row = pl + i * v;
    S mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S se = S(0);
    for (int64_t j = 0; j < v; ++j) se += detail::exp_s(row[j] - mx);
    total += static_cast<double>(mx) + std::log(static_cast<double>(se)) -
             static_cast<double>(row[targets[i]]);
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(total / static_cast<double>(n_mask)));
  if (auto* tp = Tape<S>::current(); tp && logits.requires_grad()) {
    out.set_requires_grad(true);
    tp->record(out, [logits = logits, out = out, targets, mask, t, v, n_mask]() mutable {
      S coef = out.grad()[0] / static_cast<S>(n_mask);
      const S* pl2 = logits.data();
      S* gl = detail::acc(logits);
      for (int64_t i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        const S* row = pl2 + i * v;
        S* grow = gl + i * v;
        S mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        S se = S(0);
        for (int64_t j = 0; j < v; ++j) se += detail::exp_s(row[j] - mx);
        S inv = S(1) / se;
        for (int64_t j = 0; j < v; ++j) grow[j] += coef * detail::exp_s(row[j] - mx) * inv;
        grow[targets[i]] -= coef;
      }
    });
  }
  return out;
}

// ---- initialisation ----

template <typename S, typename Rng>
void fill_normal(TensorT<S>& t, double mean, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  S* p = t.data();
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = static_cast<S>(dist(rng));
}

}  // namespace ttlab
