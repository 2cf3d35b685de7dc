// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode autodiff. A Tape is pushed for the duration of
// one forward pass; ops record backward closures in execution order, so the
// reverse sweep is just a reversed replay. Without an active tape the same
// ops run as plain (non-recording) math, which is the evaluation path.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include "moepeft/tensor.hpp"

namespace moepeft {

class Tape {
 public:
  Tape() : prev_(current_tape()) { current_tape() = this; }
  ~Tape() { current_tape() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_tape(); }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  bool finished() const { return finished_; }

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse. Tensors
  // with requires_grad=false never receive gradient buffers.
  void backward(const Tensor& loss) {
    if (finished_) throw ContractError("backward() already called on this tape");
    if (loss.size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    }
    if (loss.impl()->producer != nullptr && loss.impl()->producer != this) {
      throw ContractError("loss was not produced under this tape");
    }
    if (!std::isfinite(loss.item())) {
      throw NumericError("backward() on non-finite loss");
    }
    detail::ensure_grad(*loss.impl());
    loss.impl()->grad[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    finished_ = true;
  }

 private:
  static Tape*& current_tape() {
    thread_local Tape* t = nullptr;
    return t;
  }
  std::vector<std::function<void()>> nodes_;
  Tape* prev_ = nullptr;
  bool finished_ = false;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  Tape* t = Tape::current();
  if (!t || t->finished()) return false;
  for (const Tensor* in : inputs) {
    if (in->requires_grad()) return true;
  }
  return false;
}

inline void mark_output(Tensor& out) {
  out.set_requires_grad(true);
  out.impl()->producer = Tape::current();
}

// Trailing-dimension broadcast: the smaller shape must be an exact suffix of
// the larger one; the flat data of the smaller operand then tiles.
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing broadcast

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd, const char* name) {
  const Tensor* big = &a;
  const Tensor* small = &b;
  bool a_is_big = true;
  if (a.size() < b.size()) {
    big = &b;
    small = &a;
    a_is_big = false;
  }
  if (!is_suffix(small->shape(), big->shape())) {
    throw DimensionError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not trailing-broadcast compatible");
  }
  const std::int64_t inner = small->size();
  const std::int64_t total = big->size();
  std::vector<float> out(static_cast<std::size_t>(total));
  const float* bp = big->data();
  const float* sp = small->data();
  for (std::int64_t t = 0; t < total; ++t) {
    float x = a_is_big ? bp[t] : sp[t % inner];
    float y = a_is_big ? sp[t % inner] : bp[t];
    out[static_cast<std::size_t>(t)] = fwd(x, y);
  }
  Tensor res = Tensor::from_data(big->shape(), std::move(out));
  if (should_record({&a, &b})) {
    mark_output(res);
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([ai, bi, oi, a_is_big, inner, total, bwd] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      TensorImpl* big_i = a_is_big ? ai.get() : bi.get();
      TensorImpl* small_i = a_is_big ? bi.get() : ai.get();
      float* bg = nullptr;
      float* sg = nullptr;
      if (big_i->requires_grad) {
        ensure_grad(*big_i);
        bg = big_i->grad.data();
      }
      if (small_i->requires_grad) {
        ensure_grad(*small_i);
        sg = small_i->grad.data();
      }
      if (!bg && !sg) return;
      const float* bp = big_i->data.data();
      const float* sp = small_i->data.data();
      for (std::int64_t t = 0; t < total; ++t) {
        float xb = bp[t];
        float xs = sp[t % inner];
        float ga, gb_;
        // bwd fills (d/d_a, d/d_b) given (a_val, b_val)
        if (a_is_big) {
          bwd(xb, xs, ga, gb_);
          if (bg) bg[t] += g[t] * ga;
          if (sg) sg[t % inner] += g[t] * gb_;
        } else {
          bwd(xs, xb, ga, gb_);
          if (sg) sg[t % inner] += g[t] * ga;
          if (bg) bg[t] += g[t] * gb_;
        }
      }
    });
  }
  return res;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](float x, float y) { return x + y; },
      [](float, float, float& ga, float& gb) {
        ga = 1.0f;
        gb = 1.0f;
      },
      "add");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](float x, float y) { return x * y; },
      [](float x, float y, float& ga, float& gb) {
        ga = y;
        gb = x;
      },
      "mul");
}

// ---------------------------------------------------------------------------
// Unary ops

namespace detail {

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  const float* xp = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = fwd(xp[i]);
  Tensor res = Tensor::from_data(x.shape(), std::move(out));
  if (should_record({&x})) {
    mark_output(res);
    auto xi = x.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, oi, deriv] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      const float* g = oi->grad.data();
      const float* xv = xi->data.data();
      float* xg = xi->grad.data();
      for (std::size_t i = 0; i < xi->data.size(); ++i) xg[i] += g[i] * deriv(xv[i]);
    });
  }
  return res;
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v) { return v > 0.0f ? 1.0f : 0.0f; });
}

// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  constexpr float kInvSqrt2Pi = 0.39894228040143268f;
  return detail::unary_op(
      x,
      [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); },
      [](float v) {
        float phi_cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
        float phi_pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
        return phi_cdf + v * phi_pdf;
      });
}

inline Tensor scale(const Tensor& x, float c) {
  return detail::unary_op(
      x, [c](float v) { return c * v; }, [c](float) { return c; });
}

// ---------------------------------------------------------------------------
// matmul: a[..., m, k] x b[k, n]  or  a[..., m, k] x b[..., k, n] with equal
// leading (batch) dims. A rank-2 b acts as a shared weight: its gradient
// accumulates over all batch slices.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const int m = a.dim(a.rank() - 2);
  const int k = a.dim(a.rank() - 1);
  const bool b_shared = (b.rank() == 2);
  if (!b_shared) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw DimensionError("matmul: batch dims of " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) + " do not match");
    }
  }
  if (b.dim(b.rank() - 2) != k) {
    throw DimensionError("matmul: inner dimensions disagree between " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const int n = b.dim(b.rank() - 1);
  std::int64_t batch = 1;
  for (int i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<float> out(static_cast<std::size_t>(batch) * m * n, 0.0f);
  const float* ap = a.data();
  const float* bp = b.data();
  for (std::int64_t s = 0; s < batch; ++s) {
    const float* as = ap + s * m * k;
    const float* bs = b_shared ? bp : bp + s * static_cast<std::int64_t>(k) * n;
    float* os = out.data() + s * static_cast<std::int64_t>(m) * n;
    for (int i = 0; i < m; ++i) {
      for (int kk = 0; kk < k; ++kk) {
        const float av = as[i * k + kk];
        if (av == 0.0f) continue;
        const float* brow = bs + kk * n;
        float* orow = os + i * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  Tensor res = Tensor::from_data(std::move(out_shape), std::move(out));
  if (detail::should_record({&a, &b})) {
    detail::mark_output(res);
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([ai, bi, oi, batch, m, k, n, b_shared] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const float* ap = ai->data.data();
      const float* bp = bi->data.data();
      if (ai->requires_grad) {
        detail::ensure_grad(*ai);
        float* ag = ai->grad.data();
        for (std::int64_t s = 0; s < batch; ++s) {
          const float* gs = g + s * static_cast<std::int64_t>(m) * n;
          const float* bs = b_shared ? bp : bp + s * static_cast<std::int64_t>(k) * n;
          float* ags = ag + s * static_cast<std::int64_t>(m) * k;
          for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
              const float gv = gs[i * n + j];
              if (gv == 0.0f) continue;
              for (int kk = 0; kk < k; ++kk) ags[i * k + kk] += gv * bs[kk * n + j];
            }
          }
        }
      }
      if (bi->requires_grad) {
        detail::ensure_grad(*bi);
        float* bg = bi->grad.data();
        for (std::int64_t s = 0; s < batch; ++s) {
          const float* gs = g + s * static_cast<std::int64_t>(m) * n;
          const float* as = ap + s * static_cast<std::int64_t>(m) * k;
          float* bgs = b_shared ? bg : bg + s * static_cast<std::int64_t>(k) * n;
          for (int i = 0; i < m; ++i) {
            for (int kk = 0; kk < k; ++kk) {
              const float av = as[i * k + kk];
              if (av == 0.0f) continue;
              const float* grow = gs + i * n;
              float* brow = bgs + kk * n;
              for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
          }
        }
      }
    });
  }
  return res;
}

inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2");
  const int m = x.dim(x.rank() - 2);
  const int n = x.dim(x.rank() - 1);
  std::int64_t batch = x.size() / (static_cast<std::int64_t>(m) * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  const float* xp = x.data();
  for (std::int64_t s = 0; s < batch; ++s) {
    const float* xs = xp + s * m * n;
    float* os = out.data() + s * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) os[j * m + i] = xs[i * n + j];
  }
  Tensor res = Tensor::from_data(std::move(out_shape), std::move(out));
  if (detail::should_record({&x})) {
    detail::mark_output(res);
    auto xi = x.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, oi, batch, m, n] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad(*xi);
      const float* g = oi->grad.data();
      float* xg = xi->grad.data();
      for (std::int64_t s = 0; s < batch; ++s) {
        const float* gs = g + s * m * n;
        float* xgs = xg + s * m * n;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) xgs[i * n + j] += gs[j * m + i];
      }
    });
  }
  return res;
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
  }
  Tensor res = Tensor::from_data(std::move(new_shape), x.raw());
  if (detail::should_record({&x})) {
    detail::mark_output(res);
    auto xi = x.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad(*xi);
      for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// softmax with max-subtraction along an arbitrary axis

inline Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) {
    throw DimensionError("softmax: axis out of range for shape " + shape_str(x.shape()));
  }
  for (std::int64_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x.data()[i])) throw NumericError("softmax: NaN input");
  }
  const int n = x.dim(axis);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  const float* xp = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = 0; j < n; ++j) mx = std::max(mx, xp[base + j * inner]);
      double denom = 0.0;
      for (int j = 0; j < n; ++j) {
        float e = std::exp(xp[base + j * inner] - mx);
        out[static_cast<std::size_t>(base + j * inner)] = e;
        denom += e;
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(base + j * inner)] *= inv;
    }
  }
  Tensor res = Tensor::from_data(x.shape(), std::move(out));
  if (detail::should_record({&x})) {
    detail::mark_output(res);
    auto xi = x.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, oi, outer, inner, n] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad(*xi);
      const float* g = oi->grad.data();
      const float* s = oi->data.data();
      float* xg = xi->grad.data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += double(g[base + j * inner]) * s[base + j * inner];
          for (int j = 0; j < n; ++j) {
            const std::int64_t idx = base + j * inner;
            xg[idx] += s[idx] * (g[idx] - static_cast<float>(dot));
          }
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor res = Tensor::scalar(static_cast<float>(acc));
  if (detail::should_record({&x})) {
    detail::mark_output(res);
    auto xi = x.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad(*xi);
      const float g = oi->grad[0];
      for (auto& v : xi->grad) v += g;
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// scale_channels: out[..., e*gs + j] = u[..., e*gs + j] * s[..., e].
// The grouped form of '...eg,...e->...eg'; the factored low-rank merge and
// masked reductions are built on it.

inline Tensor scale_channels(const Tensor& u, const Tensor& s, int group_size) {
  if (u.rank() < 1 || s.rank() < 1 || u.rank() != s.rank()) {
    throw DimensionError("scale_channels: ranks must match, got " + shape_str(u.shape()) +
                         " and " + shape_str(s.shape()));
  }
  const int groups = s.dim(s.rank() - 1);
  if (u.dim(u.rank() - 1) != groups * group_size ||
      !std::equal(u.shape().begin(), u.shape().end() - 1, s.shape().begin())) {
    throw DimensionError("scale_channels: " + shape_str(u.shape()) + " is not " +
                         shape_str(s.shape()) + " with group size " +
                         std::to_string(group_size));
  }
  const std::int64_t rows = u.size() / (static_cast<std::int64_t>(groups) * group_size);
  std::vector<float> out(static_cast<std::size_t>(u.size()));
  const float* up = u.data();
  const float* sp = s.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (int e = 0; e < groups; ++e) {
      const float sv = sp[r * groups + e];
      const std::int64_t base = (r * groups + e) * group_size;
      for (int j = 0; j < group_size; ++j)
        out[static_cast<std::size_t>(base + j)] = up[base + j] * sv;
    }
  }
  Tensor res = Tensor::from_data(u.shape(), std::move(out));
  if (detail::should_record({&u, &s})) {
    detail::mark_output(res);
    auto ui = u.impl_ptr(), si = s.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([ui, si, oi, rows, groups, group_size] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const float* up = ui->data.data();
      const float* sp = si->data.data();
      float* ug = nullptr;
      float* sg = nullptr;
      if (ui->requires_grad) {
        detail::ensure_grad(*ui);
        ug = ui->grad.data();
      }
      if (si->requires_grad) {
        detail::ensure_grad(*si);
        sg = si->grad.data();
      }
      for (std::int64_t r = 0; r < rows; ++r) {
        for (int e = 0; e < groups; ++e) {
          const std::int64_t base = (r * groups + e) * group_size;
          const float sv = sp[r * groups + e];
          double acc = 0.0;
          for (int j = 0; j < group_size; ++j) {
            if (ug) ug[base + j] += g[base + j] * sv;
            acc += double(g[base + j]) * up[base + j];
          }
          if (sg) sg[r * groups + e] += static_cast<float>(acc);
        }
      }
    });
  }
  return res;
}

// Swap axes 1 and 2 of a rank-4 tensor ([B, S, H, D] <-> [B, H, S, D]),
// the head split/merge permutation in attention.
inline Tensor swap_axes_1_2(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("swap_axes_1_2: expected rank 4, got " + shape_str(x.shape()));
  const int b = x.dim(0), s = x.dim(1), h = x.dim(2), d = x.dim(3);
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  const float* xp = x.data();
  for (int bi = 0; bi < b; ++bi)
    for (int si = 0; si < s; ++si)
      for (int hi = 0; hi < h; ++hi) {
        const float* src = xp + ((static_cast<std::int64_t>(bi) * s + si) * h + hi) * d;
        float* dst = out.data() + ((static_cast<std::int64_t>(bi) * h + hi) * s + si) * d;
        std::copy(src, src + d, dst);
      }
  Tensor res = Tensor::from_data({b, h, s, d}, std::move(out));
  if (detail::should_record({&x})) {
    detail::mark_output(res);
    auto xi = x.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, oi, b, s, h, d] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad(*xi);
      const float* g = oi->grad.data();
      float* xg = xi->grad.data();
      for (int bi = 0; bi < b; ++bi)
        for (int si = 0; si < s; ++si)
          for (int hi = 0; hi < h; ++hi) {
            const float* gs = g + ((static_cast<std::int64_t>(bi) * h + hi) * s + si) * d;
            float* xs = xg + ((static_cast<std::int64_t>(bi) * s + si) * h + hi) * d;
            for (int j = 0; j < d; ++j) xs[j] += gs[j];
          }
    });
  }
  return res;
}

// Divide each last-axis row by its sum. Rows must have nonzero sum.
inline Tensor normalize_last(const Tensor& x) {
  const int n = x.dim(x.rank() - 1);
  const std::int64_t rows = x.size() / n;
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  std::vector<float> inv_sums(static_cast<std::size_t>(rows));
  const float* xp = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += xp[r * n + j];
    if (s == 0.0 || !std::isfinite(s)) {
      throw NumericError("normalize_last: row sum is zero or non-finite");
    }
    const float inv = static_cast<float>(1.0 / s);
    inv_sums[static_cast<std::size_t>(r)] = inv;
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(r * n + j)] = xp[r * n + j] * inv;
  }
  Tensor res = Tensor::from_data(x.shape(), std::move(out));
  if (detail::should_record({&x})) {
    detail::mark_output(res);
    auto xi = x.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, oi, rows, n, inv = std::move(inv_sums)] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad(*xi);
      const float* g = oi->grad.data();
      const float* y = oi->data.data();
      float* xg = xi->grad.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += double(g[r * n + j]) * y[r * n + j];
        const float ir = inv[static_cast<std::size_t>(r)];
        for (int j = 0; j < n; ++j)
          xg[r * n + j] += (g[r * n + j] - static_cast<float>(dot)) * ir;
      }
    });
  }
  return res;
}

// Expand a size-1 axis by tiling; backward sums back into the slot.
inline Tensor expand_dim(const Tensor& x, int axis, int times) {
  if (axis < 0 || axis >= x.rank() || x.dim(axis) != 1) {
    throw DimensionError("expand_dim: axis " + std::to_string(axis) + " of " +
                         shape_str(x.shape()) + " is not expandable");
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = times;
  std::vector<float> out(static_cast<std::size_t>(outer * times * inner));
  const float* xp = x.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (int t = 0; t < times; ++t)
      std::copy(xp + o * inner, xp + (o + 1) * inner, out.begin() + (o * times + t) * inner);
  Tensor res = Tensor::from_data(std::move(out_shape), std::move(out));
  if (detail::should_record({&x})) {
    detail::mark_output(res);
    auto xi = x.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, oi, outer, inner, times] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad(*xi);
      const float* g = oi->grad.data();
      float* xg = xi->grad.data();
      for (std::int64_t o = 0; o < outer; ++o)
        for (int t = 0; t < times; ++t)
          for (std::int64_t i = 0; i < inner; ++i)
            xg[o * inner + i] += g[(o * times + t) * inner + i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// RMS norm over the last axis: y = x / sqrt(mean(x^2) + eps) * gain

inline Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-6f) {
  const int d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d) {
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " does not match width " +
                         std::to_string(d));
  }
  const std::int64_t rows = x.size() / d;
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  std::vector<float> inv_rms(static_cast<std::size_t>(rows));
  const float* xp = x.data();
  const float* gp = gain.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += double(xp[r * d + j]) * xp[r * d + j];
    const float inv = 1.0f / std::sqrt(static_cast<float>(ms / d) + eps);
    inv_rms[static_cast<std::size_t>(r)] = inv;
    for (int j = 0; j < d; ++j)
      out[static_cast<std::size_t>(r * d + j)] = xp[r * d + j] * inv * gp[j];
  }
  Tensor res = Tensor::from_data(x.shape(), std::move(out));
  if (detail::should_record({&x, &gain})) {
    detail::mark_output(res);
    auto xi = x.impl_ptr(), gi = gain.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, gi, oi, rows, d, inv = std::move(inv_rms)] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const float* xp = xi->data.data();
      const float* gp = gi->data.data();
      float* xg = nullptr;
      float* gg = nullptr;
      if (xi->requires_grad) {
        detail::ensure_grad(*xi);
        xg = xi->grad.data();
      }
      if (gi->requires_grad) {
        detail::ensure_grad(*gi);
        gg = gi->grad.data();
      }
      for (std::int64_t r = 0; r < rows; ++r) {
        const float ir = inv[static_cast<std::size_t>(r)];
        if (gg) {
          for (int j = 0; j < d; ++j) gg[j] += g[r * d + j] * xp[r * d + j] * ir;
        }
        if (xg) {
          double dot = 0.0;  // sum_i g_i * gain_i * x_i
          for (int j = 0; j < d; ++j) dot += double(g[r * d + j]) * gp[j] * xp[r * d + j];
          const float c = static_cast<float>(dot) * ir * ir * ir / d;
          for (int j = 0; j < d; ++j) xg[r * d + j] += g[r * d + j] * gp[j] * ir - c * xp[r * d + j];
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Embedding lookup; backward scatters into the table.

inline Tensor embedding(const Tensor& table, std::span<const int> ids, int batch, int seq) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  const int vocab = table.dim(0);
  const int d = table.dim(1);
  if (static_cast<std::int64_t>(ids.size()) != static_cast<std::int64_t>(batch) * seq) {
    throw DimensionError("embedding: id count does not match batch*seq");
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(id) + " outside vocab " +
                       std::to_string(vocab));
    }
  }
  std::vector<float> out(static_cast<std::size_t>(ids.size()) * d);
  const float* tp = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(tp + static_cast<std::int64_t>(ids[i]) * d, tp + (static_cast<std::int64_t>(ids[i]) + 1) * d,
              out.begin() + static_cast<std::int64_t>(i) * d);
  }
  Tensor res = Tensor::from_data({batch, seq, d}, std::move(out));
  if (detail::should_record({&table})) {
    detail::mark_output(res);
    auto ti = table.impl_ptr(), oi = res.impl_ptr();
    std::vector<int> ids_copy(ids.begin(), ids.end());
    Tape::current()->record([ti, oi, ids_copy = std::move(ids_copy), d] {
      if (oi->grad.empty() || !ti->requires_grad) return;
      detail::ensure_grad(*ti);
      const float* g = oi->grad.data();
      float* tg = ti->grad.data();
      for (std::size_t i = 0; i < ids_copy.size(); ++i) {
        float* row = tg + static_cast<std::int64_t>(ids_copy[i]) * d;
        const float* gr = g + static_cast<std::int64_t>(i) * d;
        for (int j = 0; j < d; ++j) row[j] += gr[j];
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Shared relative-position bias: out[h, s, t] = table[h, clamp(t-s)+R].

inline Tensor relative_bias(const Tensor& table, int q_len, int k_len) {
  if (table.rank() != 2 || table.dim(1) % 2 == 0) {
    throw DimensionError("relative_bias: table must be [heads, 2R+1]");
  }
  const int heads = table.dim(0);
  const int radius = (table.dim(1) - 1) / 2;
  std::vector<float> out(static_cast<std::size_t>(heads) * q_len * k_len);
  const float* tp = table.data();
  auto bucket = [radius](int delta) { return std::clamp(delta, -radius, radius) + radius; };
  for (int h = 0; h < heads; ++h)
    for (int s = 0; s < q_len; ++s)
      for (int t = 0; t < k_len; ++t)
        out[(static_cast<std::size_t>(h) * q_len + s) * k_len + t] =
            tp[h * table.dim(1) + bucket(t - s)];
  Tensor res = Tensor::from_data({heads, q_len, k_len}, std::move(out));
  if (detail::should_record({&table})) {
    detail::mark_output(res);
    auto ti = table.impl_ptr(), oi = res.impl_ptr();
    const int width = table.dim(1);
    Tape::current()->record([ti, oi, heads, q_len, k_len, radius, width] {
      if (oi->grad.empty() || !ti->requires_grad) return;
      detail::ensure_grad(*ti);
      const float* g = oi->grad.data();
      float* tg = ti->grad.data();
      for (int h = 0; h < heads; ++h)
        for (int s = 0; s < q_len; ++s)
          for (int t = 0; t < k_len; ++t)
            tg[h * width + std::clamp(t - s, -radius, radius) + radius] +=
                g[(static_cast<std::size_t>(h) * q_len + s) * k_len + t];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Mean negative log-likelihood over unmasked positions.
// logits: [batch, seq, vocab]; targets row-major batch*seq; mask: [batch, seq].

inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                            const Tensor& mask) {
  if (logits.rank() != 3) {
    throw DimensionError("cross_entropy: logits must be [batch, seq, vocab], got " +
                         shape_str(logits.shape()));
  }
  const int batch = logits.dim(0), seq = logits.dim(1), vocab = logits.dim(2);
  if (static_cast<std::int64_t>(targets.size()) != static_cast<std::int64_t>(batch) * seq ||
      mask.size() != static_cast<std::int64_t>(batch) * seq) {
    throw DimensionError("cross_entropy: targets/mask size does not match logits");
  }
  const float* lp = logits.data();
  const float* mp = mask.data();
  double total = 0.0;
  double count = 0.0;
  std::vector<float> lse(static_cast<std::size_t>(batch) * seq);
  for (std::int64_t pos = 0; pos < static_cast<std::int64_t>(batch) * seq; ++pos) {
    if (mp[pos] == 0.0f) continue;
    const int t = targets[static_cast<std::size_t>(pos)];
    if (t < 0 || t >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(t) + " outside vocab " +
                       std::to_string(vocab));
    }
    const float* row = lp + pos * vocab;
    float mx = row[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    double denom = 0.0;
    for (int v = 0; v < vocab; ++v) denom += std::exp(double(row[v]) - mx);
    const float l = static_cast<float>(mx + std::log(denom));
    lse[static_cast<std::size_t>(pos)] = l;
    total += double(l) - row[t];
    count += mp[pos];
  }
  if (count == 0.0) throw InputError("cross_entropy: mask excludes every position");
  Tensor res = Tensor::scalar(static_cast<float>(total / count));
  if (detail::should_record({&logits})) {
    detail::mark_output(res);
    auto li = logits.impl_ptr(), mi = mask.impl_ptr(), oi = res.impl_ptr();
    std::vector<int> tcopy(targets.begin(), targets.end());
    Tape::current()->record([li, mi, oi, tcopy = std::move(tcopy), lse = std::move(lse), vocab,
                             count] {
      if (oi->grad.empty() || !li->requires_grad) return;
      detail::ensure_grad(*li);
      const float g = oi->grad[0] / static_cast<float>(count);
      const float* lp = li->data.data();
      const float* mp = mi->data.data();
      float* lg = li->grad.data();
      const std::int64_t positions = static_cast<std::int64_t>(li->data.size()) / vocab;
      for (std::int64_t pos = 0; pos < positions; ++pos) {
        if (mp[pos] == 0.0f) continue;
        const float* row = lp + pos * vocab;
        float* grow = lg + pos * vocab;
        const float l = lse[static_cast<std::size_t>(pos)];
        for (int v = 0; v < vocab; ++v) grow[v] += g * std::exp(row[v] - l);
        grow[tcopy[static_cast<std::size_t>(pos)]] -= g;
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Central-difference gradient oracle. Returns the max over coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).

inline float finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               float eps = 1e-3f) {
  if (eps <= 0.0f) throw ContractError("finite_diff_check: eps must be positive");
  Tensor probe = x.clone(/*requires_grad=*/true);
  std::vector<float> analytic;
  {
    Tape tape;
    Tensor loss = f(probe);
    tape.backward(loss);
    analytic = probe.has_grad() ? probe.grad() : std::vector<float>(probe.raw().size(), 0.0f);
  }
  float worst = 0.0f;
  Tensor work = x.clone(false);
  for (std::size_t i = 0; i < work.raw().size(); ++i) {
    const float orig = work.raw()[i];
    work.raw()[i] = orig + eps;
    const float fp = f(work).item();
    work.raw()[i] = orig - eps;
    const float fm = f(work).item();
    work.raw()[i] = orig;
    const float numeric = (fp - fm) / (2.0f * eps);
    const float denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6f});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// Same oracle against a live parameter: loss_fn() must rebuild the forward
// pass reading `param` in place. Restores the parameter on exit.
inline float finite_diff_check_param(const std::function<Tensor()>& loss_fn, Tensor param,
                                     float eps = 1e-3f) {
  std::vector<float> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
    analytic = param.has_grad() ? param.grad() : std::vector<float>(param.raw().size(), 0.0f);
    param.clear_grad();
  }
  float worst = 0.0f;
  for (std::size_t i = 0; i < param.raw().size(); ++i) {
    const float orig = param.raw()[i];
    param.raw()[i] = orig + eps;
    const float fp = loss_fn().item();
    param.raw()[i] = orig - eps;
    const float fm = loss_fn().item();
    param.raw()[i] = orig;
    const float numeric = (fp - fm) / (2.0f * eps);
    const float denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6f});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace moepeft
