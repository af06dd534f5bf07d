#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mhelab/errors.hpp"
#include "mhelab/kernels.hpp"

// Dense row-major tensors (rank 1 or 2) with tape-based reverse-mode
// differentiation. A GradTape is rebuilt per forward pass; ops record onto
// the innermost tape active on the current thread whenever an input requires
// gradients. Tensors are immutable after construction except the grad slot.

namespace mhelab {

// Logits masked out by the causal mask get this added before softmax; large
// enough to zero the weight at fp64 resolution without producing NaN.
inline constexpr double kMaskValue = -1e30;

template <typename T>
struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<T> v;
  std::vector<T> g;  // same length as v when grads are tracked, else empty
  bool requires_grad = false;
};

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

}  // namespace detail

template <typename T>
class GradTape;

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, bool requires_grad = false)
      : p_(std::make_shared<TensorImpl<T>>()) {
    for (auto d : shape)
      if (d == 0) throw DimError("zero dimension in tensor shape " + detail::shape_str(shape));
    if (shape.empty()) throw DimError("tensor rank must be >= 1");
    p_->shape = std::move(shape);
    p_->v.assign(detail::shape_numel(p_->shape), T(0));
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, T value) {
    Tensor t(std::move(shape));
    for (auto& x : t.p_->v) x = value;
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from(std::vector<std::size_t> shape, std::vector<T> values) {
    Tensor t;
    t.p_ = std::make_shared<TensorImpl<T>>();
    if (detail::shape_numel(shape) != values.size())
      throw DimError("value count " + std::to_string(values.size()) + " does not fill shape " +
                     detail::shape_str(shape));
    t.p_->shape = std::move(shape);
    t.p_->v = std::move(values);
    return t;
  }

  static Tensor randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double stddev,
                      double mean = 0.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& x : t.p_->v) x = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return static_cast<bool>(p_); }
  const std::vector<std::size_t>& shape() const { return p_->shape; }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t numel() const { return p_->v.size(); }
  std::size_t rows() const { return p_->shape[0]; }
  std::size_t cols() const { return p_->shape.size() > 1 ? p_->shape[1] : 1; }
  bool is_scalar() const { return numel() == 1; }

  std::span<T> values() { return p_->v; }
  std::span<const T> values() const { return p_->v; }
  T* data() { return p_->v.data(); }
  const T* data() const { return p_->v.data(); }

  T at(std::size_t i) const { return p_->v.at(i); }
  T at(std::size_t r, std::size_t c) const { return p_->v.at(r * cols() + c); }
  T& mut(std::size_t i) { return p_->v.at(i); }
  T& mut(std::size_t r, std::size_t c) { return p_->v.at(r * cols() + c); }

  bool requires_grad() const { return p_ && p_->requires_grad; }
  void set_requires_grad(bool on) {
    p_->requires_grad = on;
    if (on && p_->g.size() != p_->v.size()) p_->g.assign(p_->v.size(), T(0));
    if (!on) p_->g.clear();
  }
  std::span<T> grad() { return p_->g; }
  std::span<const T> grad() const { return p_->g; }
  T* grad_data() { return p_->g.data(); }
  void zero_grad() {
    for (auto& x : p_->g) x = T(0);
  }

  bool all_finite() const {
    for (T x : p_->v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  // Identity of the underlying storage; two handles alias iff equal.
  const void* id() const { return p_.get(); }
  std::shared_ptr<TensorImpl<T>> impl() const { return p_; }

 private:
  std::shared_ptr<TensorImpl<T>> p_;
};

// ---------------------------------------------------------------------------
// Gradient tape
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
inline thread_local GradTape<T>* t_active_tape = nullptr;
}

template <typename T>
class GradTape {
 public:
  GradTape() : parent_(detail::t_active_tape<T>) { detail::t_active_tape<T> = this; }
  ~GradTape() { detail::t_active_tape<T> = parent_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return detail::t_active_tape<T>; }

  void record(std::string name, std::function<void()> backward_fn) {
    nodes_.push_back({std::move(name), std::move(backward_fn)});
  }

  std::size_t node_count() const { return nodes_.size(); }
  const std::string& node_name(std::size_t i) const { return nodes_.at(i).name; }

  // Seeds d(loss)/d(loss) = 1 and walks the tape once in reverse topological
  // order, accumulating into the grad slot of every recorded tensor.
  void backward(Tensor<T>& loss) {
    if (!loss.is_scalar())
      throw ContractError("backward requires a scalar loss, got shape " +
                          detail::shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw ContractError("loss does not track gradients (no recorded path to it)");
    if (consumed_) throw ContractError("backward already ran on this tape");
    consumed_ = true;
    loss.grad_data()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

 private:
  struct Node {
    std::string name;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  GradTape* parent_ = nullptr;
  bool consumed_ = false;
};

template <typename T>
void backward(GradTape<T>& tape, Tensor<T>& loss) {
  tape.backward(loss);
}

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
bool track(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradTape<T>::active()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
void mark_output(Tensor<T>& out, bool tracked) {
  if (tracked) out.set_requires_grad(true);
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
  if (ta && tb) throw ContractError("matmul: both-transposed form is not supported");
  if (a.rank() != 2 || b.rank() != 2)
    throw DimError("matmul needs rank-2 tensors, got " + detail::shape_str(a.shape()) + " and " +
                   detail::shape_str(b.shape()));
  const std::size_t m = ta ? a.shape()[1] : a.shape()[0];
  const std::size_t ka = ta ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = tb ? b.shape()[1] : b.shape()[0];
  const std::size_t n = tb ? b.shape()[0] : b.shape()[1];
  if (ka != kb)
    throw DimError("matmul: inner dimensions differ: " + detail::shape_str(a.shape()) +
                   (ta ? "^T" : "") + " vs " + detail::shape_str(b.shape()) + (tb ? "^T" : ""));

  Tensor<T> out({m, n});
  kern::gemm<T>(ta, tb, m, n, ka, T(1), a.data(), b.data(), T(0), out.data());

  const bool tracked = detail::track<T>({&a, &b});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    const std::size_t k = ka;
    GradTape<T>::active()->record("matmul", [ai, bi, oi, ta, tb, m, n, k] {
      const T* dy = oi->g.data();
      if (ai->requires_grad) {
        if (!ta && !tb)  // dA += dY * B^T
          kern::gemm<T>(false, true, m, k, n, T(1), dy, bi->v.data(), T(1), ai->g.data());
        else if (!ta && tb)  // dA += dY * B
          kern::gemm<T>(false, false, m, k, n, T(1), dy, bi->v.data(), T(1), ai->g.data());
        else  // ta: dA += B * dY^T  (A stored k x m)
          kern::gemm<T>(false, true, k, m, n, T(1), bi->v.data(), dy, T(1), ai->g.data());
      }
      if (bi->requires_grad) {
        if (!ta && !tb)  // dB += A^T * dY
          kern::gemm<T>(true, false, k, n, m, T(1), ai->v.data(), dy, T(1), bi->g.data());
        else if (!ta && tb)  // dB += dY^T * A  (B stored n x k)
          kern::gemm<T>(true, false, n, k, m, T(1), dy, ai->v.data(), T(1), bi->g.data());
        else  // ta: dB += A * dY  (A stored k x m)
          kern::gemm<T>(false, false, k, n, m, T(1), ai->v.data(), dy, T(1), bi->g.data());
      }
    });
  }
  return out;
}

enum class EwiseOp { add, mul };

template <typename T>
Tensor<T> ewise(EwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  const bool bcast = !same && a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1];
  if (!same && !bcast)
    throw DimError("ewise: shapes " + detail::shape_str(a.shape()) + " and " +
                   detail::shape_str(b.shape()) +
                   " are neither equal nor vector-broadcastable over the last dimension");

  Tensor<T> out(a.shape());
  const std::size_t r = a.rows();
  const std::size_t c = a.numel() / r;
  if (same) {
    if (op == EwiseOp::add)
      kern::add<T>(a.data(), b.data(), out.data(), a.numel());
    else
      kern::mul<T>(a.data(), b.data(), out.data(), a.numel());
  } else {
    if (op == EwiseOp::add)
      kern::add_rowvec<T>(a.data(), b.data(), out.data(), r, c);
    else
      kern::mul_rowvec<T>(a.data(), b.data(), out.data(), r, c);
  }

  const bool tracked = detail::track<T>({&a, &b});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record(op == EwiseOp::add ? "add" : "mul", [ai, bi, oi, op, same, r, c] {
      const T* dy = oi->g.data();
      const std::size_t n = oi->v.size();
      if (op == EwiseOp::add) {
        if (ai->requires_grad) kern::axpy<T>(T(1), dy, ai->g.data(), n);
        if (bi->requires_grad) {
          if (same)
            kern::axpy<T>(T(1), dy, bi->g.data(), n);
          else
            kern::colsum_accum<T>(dy, bi->g.data(), r, c);  // broadcast grad sums over rows
        }
      } else {
        if (ai->requires_grad) {
          std::vector<T> tmp(n);
          if (same)
            kern::mul<T>(dy, bi->v.data(), tmp.data(), n);
          else
            kern::mul_rowvec<T>(dy, bi->v.data(), tmp.data(), r, c);
          kern::axpy<T>(T(1), tmp.data(), ai->g.data(), n);
        }
        if (bi->requires_grad) {
          std::vector<T> tmp(n);
          kern::mul<T>(dy, ai->v.data(), tmp.data(), n);
          if (same)
            kern::axpy<T>(T(1), tmp.data(), bi->g.data(), n);
          else
            kern::colsum_accum<T>(tmp.data(), bi->g.data(), r, c);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return ewise(EwiseOp::add, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return ewise(EwiseOp::mul, a, b);
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + c;
  const bool tracked = detail::track<T>({&a});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("add_scalar", [ai, oi] {
      if (ai->requires_grad) kern::axpy<T>(T(1), oi->g.data(), ai->g.data(), oi->g.size());
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = c * a.data()[i];
  const bool tracked = detail::track<T>({&a});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("scale", [ai, oi, c] {
      if (ai->requires_grad) kern::axpy<T>(c, oi->g.data(), ai->g.data(), oi->g.size());
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  if (!a.all_finite()) throw NumericError("softmax_rows: input contains NaN or Inf");
  const std::size_t r = a.rows();
  const std::size_t c = a.numel() / r;
  Tensor<T> out(a.shape());
  kern::softmax_rows<T>(a.data(), out.data(), r, c);
  const bool tracked = detail::track<T>({&a});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("softmax_rows", [ai, oi, r, c] {
      if (ai->requires_grad)
        kern::softmax_rows_grad<T>(oi->v.data(), oi->g.data(), ai->g.data(), r, c);
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2) throw DimError("slice_cols needs a rank-2 tensor");
  if (c0 >= c1 || c1 > a.shape()[1])
    throw DimError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                   ") out of range for " + detail::shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.shape()[1], w = c1 - c0;
  Tensor<T> out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(a.data() + i * c + c0, w, out.data() + i * w);
  const bool tracked = detail::track<T>({&a});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("slice_cols", [ai, oi, r, c, c0, w] {
      if (!ai->requires_grad) return;
      for (std::size_t i = 0; i < r; ++i)
        kern::axpy<T>(T(1), oi->g.data() + i * w, ai->g.data() + i * c + c0, w);
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty input");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != r)
      throw DimError("concat_cols: row mismatch, expected " + std::to_string(r) + " rows, got " +
                     detail::shape_str(p.shape()));
    total += p.shape()[1];
  }
  Tensor<T> out({r, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data() + i * w, w, out.data() + i * total + off);
    off += w;
  }
  bool tracked = false;
  if (GradTape<T>::active())
    for (const auto& p : parts) tracked = tracked || p.requires_grad();
  detail::mark_output(out, tracked);
  if (tracked) {
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      impls.push_back(p.impl());
      widths.push_back(p.shape()[1]);
    }
    auto oi = out.impl();
    GradTape<T>::active()->record("concat_cols", [impls, widths, oi, r, total] {
      std::size_t off2 = 0;
      for (std::size_t pi = 0; pi < impls.size(); ++pi) {
        const std::size_t w = widths[pi];
        if (impls[pi]->requires_grad)
          for (std::size_t i = 0; i < r; ++i)
            kern::axpy<T>(T(1), oi->g.data() + i * total + off2, impls[pi]->g.data() + i * w, w);
        off2 += w;
      }
    });
  }
  return out;
}

// Vertically repeats a rank-2 tensor `times` times; the gradient sums the
// repeated blocks. Used to add one positional table to a whole batch.
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& a, std::size_t times) {
  if (a.rank() != 2) throw DimError("tile_rows needs a rank-2 tensor");
  if (times == 0) throw ContractError("tile_rows: times must be >= 1");
  const std::size_t r = a.rows(), c = a.shape()[1];
  Tensor<T> out({r * times, c});
  for (std::size_t t = 0; t < times; ++t)
    std::copy_n(a.data(), r * c, out.data() + t * r * c);
  const bool tracked = detail::track<T>({&a});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("tile_rows", [ai, oi, times, r, c] {
      if (!ai->requires_grad) return;
      for (std::size_t t = 0; t < times; ++t)
        kern::axpy<T>(T(1), oi->g.data() + t * r * c, ai->g.data(), r * c);
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int32_t>& ids) {
  if (table.rank() != 2) throw DimError("embedding table must be rank-2");
  const std::size_t v = table.rows(), d = table.shape()[1];
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(v));
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  const bool tracked = detail::track<T>({&table});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ti = table.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("embedding", [ti, oi, ids, d] {
      if (!ti->requires_grad) return;
      for (std::size_t i = 0; i < ids.size(); ++i)
        kern::axpy<T>(T(1), oi->g.data() + i * d, ti->g.data() + static_cast<std::size_t>(ids[i]) * d,
                      d);
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T x = a.data()[i];
    out.data()[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  const bool tracked = detail::track<T>({&a});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("gelu", [ai, oi, inv_sqrt2] {
      if (!ai->requires_grad) return;
      const T inv_sqrt2pi = T(0.3989422804014326779);
      for (std::size_t i = 0; i < ai->v.size(); ++i) {
        const T x = ai->v[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        ai->g[i] += oi->g[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// Row-wise layer normalization with learned gain/bias.
template <typename T>
Tensor<T> layernorm_rows(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                         T eps = T(1e-5)) {
  if (x.rank() != 2) throw DimError("layernorm_rows needs a rank-2 tensor");
  const std::size_t r = x.rows(), c = x.shape()[1];
  if (gain.numel() != c || bias.numel() != c)
    throw DimError("layernorm_rows: gain/bias length must equal " + std::to_string(c));
  Tensor<T> out({r, c});
  auto xhat = std::make_shared<std::vector<T>>(r * c);
  auto rstd = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = x.data() + i * c;
    T mean = kern::sum<T>(xr, c) / T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xr[j] - mean) * rs;
      (*xhat)[i * c + j] = h;
      out.data()[i * c + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  const bool tracked = detail::track<T>({&x, &gain, &bias});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto xi = x.impl();
    auto gi = gain.impl();
    auto bi = bias.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("layernorm_rows", [xi, gi, bi, oi, xhat, rstd, r, c] {
      for (std::size_t i = 0; i < r; ++i) {
        const T* dy = oi->g.data() + i * c;
        const T* h = xhat->data() + i * c;
        if (gi->requires_grad)
          for (std::size_t j = 0; j < c; ++j) gi->g[j] += dy[j] * h[j];
        if (bi->requires_grad)
          for (std::size_t j = 0; j < c; ++j) bi->g[j] += dy[j];
        if (xi->requires_grad) {
          T mean_dh = 0, mean_dhh = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T dh = dy[j] * gi->v[j];
            mean_dh += dh;
            mean_dhh += dh * h[j];
          }
          mean_dh /= T(c);
          mean_dhh /= T(c);
          const T rs = (*rstd)[i];
          for (std::size_t j = 0; j < c; ++j) {
            const T dh = dy[j] * gi->v[j];
            xi->g[i * c + j] += rs * (dh - mean_dh - h[j] * mean_dhh);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out({1});
  out.data()[0] = kern::sum<T>(a.data(), a.numel());
  const bool tracked = detail::track<T>({&a});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("sum", [ai, oi] {
      if (ai->requires_grad)
        for (auto& g : ai->g) g += oi->g[0];
    });
  }
  return out;
}

// Batched scaled-dot attention over `batch` independent sequences stacked
// row-wise: Q, K, V are (batch*L) x d. Softmax probabilities are cached for
// the backward pass. With `causal`, position t only attends to s <= t.
template <typename T>
Tensor<T> sdp_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                        std::size_t batch, bool causal) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw DimError("sdp_attention needs rank-2 tensors");
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw DimError("sdp_attention: Q/K/V shapes differ: " + detail::shape_str(q.shape()) + ", " +
                   detail::shape_str(k.shape()) + ", " + detail::shape_str(v.shape()));
  if (batch == 0 || q.rows() % batch != 0)
    throw DimError("sdp_attention: row count " + std::to_string(q.rows()) +
                   " not divisible into " + std::to_string(batch) + " sequences");
  if (!q.all_finite() || !k.all_finite() || !v.all_finite())
    throw NumericError("sdp_attention: non-finite input");
  const std::size_t L = q.rows() / batch;
  const std::size_t d = q.shape()[1];
  const T inv_sqrt_d = T(1) / std::sqrt(T(d));

  Tensor<T> out({q.rows(), d});
  auto probs = std::make_shared<std::vector<T>>(batch * L * L);
  std::vector<T> scores(L * L);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* qb = q.data() + b * L * d;
    const T* kb = k.data() + b * L * d;
    const T* vb = v.data() + b * L * d;
    kern::gemm<T>(false, true, L, L, d, inv_sqrt_d, qb, kb, T(0), scores.data());
    if (causal)
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t s = t + 1; s < L; ++s) scores[t * L + s] += T(kMaskValue);
    T* pb = probs->data() + b * L * L;
    kern::softmax_rows<T>(scores.data(), pb, L, L);
    kern::gemm<T>(false, false, L, d, L, T(1), pb, vb, T(0), out.data() + b * L * d);
  }

  const bool tracked = detail::track<T>({&q, &k, &v});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto qi = q.impl();
    auto ki = k.impl();
    auto vi = v.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("sdp_attention", [qi, ki, vi, oi, probs, batch, L, d,
                                                    inv_sqrt_d] {
      std::vector<T> dp(L * L), ds(L * L);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* pb = probs->data() + b * L * L;
        const T* dob = oi->g.data() + b * L * d;
        const T* vb = vi->v.data() + b * L * d;
        if (vi->requires_grad)  // dV += P^T dO
          kern::gemm<T>(true, false, L, d, L, T(1), pb, dob, T(1), vi->g.data() + b * L * d);
        if (!qi->requires_grad && !ki->requires_grad) continue;
        // dP = dO V^T, dS = softmax'(P, dP)
        kern::gemm<T>(false, true, L, L, d, T(1), dob, vb, T(0), dp.data());
        std::fill(ds.begin(), ds.end(), T(0));
        kern::softmax_rows_grad<T>(pb, dp.data(), ds.data(), L, L);
        if (qi->requires_grad)  // dQ += (1/sqrt d) dS K
          kern::gemm<T>(false, false, L, d, L, inv_sqrt_d, ds.data(), ki->v.data() + b * L * d,
                        T(1), qi->g.data() + b * L * d);
        if (ki->requires_grad)  // dK += (1/sqrt d) dS^T Q
          kern::gemm<T>(true, false, L, d, L, inv_sqrt_d, ds.data(), qi->v.data() + b * L * d,
                        T(1), ki->g.data() + b * L * d);
      }
    });
  }
  return out;
}

// Mean weighted token cross entropy in nats over rows of logits.
// loss = sum_i w_i * nll_i / sum_i w_i ; rows with weight zero are skipped.
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<std::int32_t>& targets,
                             const std::vector<T>& weights) {
  if (logits.rank() != 2) throw DimError("cross_entropy_rows needs rank-2 logits");
  const std::size_t r = logits.rows(), c = logits.shape()[1];
  if (targets.size() != r || weights.size() != r)
    throw DimError("cross_entropy_rows: need one target and weight per row");
  double wsum = 0;
  for (T w : weights) wsum += static_cast<double>(w);
  if (!(wsum > 0)) throw ContractError("cross_entropy_rows: total weight must be positive");

  auto probs = std::make_shared<std::vector<T>>(r * c);
  double loss_acc = 0;
  for (std::size_t i = 0; i < r; ++i) {
    const std::int32_t y = targets[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw ContractError("cross_entropy_rows: target " + std::to_string(y) + " out of range");
    const T* row = logits.data() + i * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = row[j] > mx ? row[j] : mx;
    double se = 0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(se);
    T* pr = probs->data() + i * c;
    for (std::size_t j = 0; j < c; ++j)
      pr[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
    loss_acc += static_cast<double>(weights[i]) * (lse - static_cast<double>(row[y]));
  }
  Tensor<T> out({1});
  out.data()[0] = static_cast<T>(loss_acc / wsum);

  const bool tracked = detail::track<T>({&logits});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto li = logits.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("cross_entropy_rows", [li, oi, probs, targets, weights, wsum, r,
                                                         c] {
      if (!li->requires_grad) return;
      const T d0 = oi->g[0];
      for (std::size_t i = 0; i < r; ++i) {
        if (weights[i] == T(0)) continue;
        const T s = d0 * weights[i] / static_cast<T>(wsum);
        const T* pr = probs->data() + i * c;
        T* g = li->g.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) g[j] += s * pr[j];
        g[static_cast<std::size_t>(targets[i])] -= s;
      }
    });
  }
  return out;
}

// Inverted dropout; identity when p == 0. The mask is sampled from `rng`.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, std::mt19937_64& rng) {
  if (p < 0 || p >= 1) throw ContractError("dropout rate must be in [0, 1)");
  if (p == 0) return a;
  auto mask = std::make_shared<std::vector<T>>(a.numel());
  std::bernoulli_distribution keep(1.0 - p);
  const T scale_up = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : *mask) m = keep(rng) ? scale_up : T(0);
  Tensor<T> out(a.shape());
  kern::mul<T>(a.data(), mask->data(), out.data(), a.numel());
  const bool tracked = detail::track<T>({&a});
  detail::mark_output(out, tracked);
  if (tracked) {
    auto ai = a.impl();
    auto oi = out.impl();
    GradTape<T>::active()->record("dropout", [ai, oi, mask] {
      if (!ai->requires_grad) return;
      for (std::size_t i = 0; i < ai->g.size(); ++i) ai->g[i] += oi->g[i] * (*mask)[i];
    });
  }
  return out;
}

}  // namespace mhelab
