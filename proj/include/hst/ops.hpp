#pragma once

// Differentiable primitives. Every op computes its forward result eagerly and,
// when a tape is active and some input requires a gradient, records the
// adjoint rule that accumulates into the inputs' gradient buffers.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "hst/tensor.hpp"

namespace hst {

namespace detail {

template <class T, class... Ts>
bool recording(const Ts&... inputs) {
  return active_tape<T>() != nullptr && (inputs.requires_grad() || ...);
}

template <class T>
void record(Tensor<T>& out, std::function<void()> adjoint) {
  out.set_requires_grad(true);
  active_tape<T>()->record(std::move(adjoint));
}

template <class T>
void debug_check_finite([[maybe_unused]] const Tensor<T>& out, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!all_finite<T>(out.data())) throw NumericError(std::string(op) + " produced non-finite values", {op});
#endif
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, std::vector<T>& scratch) {
  scratch.resize(k * n);
  transpose_into(n, k, b, scratch.data());
  gemm_nn(m, n, k, a, scratch.data(), c);
}

template <class T>
Shape leading(const Shape& s, std::size_t drop) {
  return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(drop));
}

}  // namespace detail

/// Elementwise a + b. `b` may also be a trailing suffix of a's shape, in
/// which case it is broadcast over the leading axes (bias / positional add).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!suffix) throw DimensionError("add: cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  const std::size_t n = a.numel(), m = b.numel();
  Tensor<T> out(sa, uninitialized);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < n; i += m)
    for (std::size_t j = 0; j < m; ++j) po[i + j] = pa[i + j] + pb[j];
  detail::debug_check_finite(out, "add");
  if (detail::recording<T>(a, b)) {
    detail::record(out, [a, b, out, n, m]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < n; i += m)
          for (std::size_t j = 0; j < m; ++j) gb[j] += g[i + j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  if (detail::recording<T>(a)) {
    detail::record(out, [a, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

/// Elementwise product of equally shaped tensors.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  if (detail::recording<T>(a, b)) {
    detail::record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::recording<T>(a)) {
    detail::record(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (T& x : a.grad_buffer()) x += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Plain 2-D matrix product.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::gemm_nn(m, n, k, a.ptr(), b.ptr(), out.ptr());
  count_flops(2ull * m * k * n);
  detail::debug_check_finite(out, "matmul");
  if (detail::recording<T>(a, b)) {
    detail::record(out, [a, b, out, m, n, k]() mutable {
      if (!out.has_grad()) return;
      std::vector<T> scratch;
      if (a.requires_grad()) detail::gemm_nt(m, k, n, out.grad().data(), b.ptr(), a.grad_buffer().data(), scratch);
      if (b.requires_grad()) detail::gemm_tn(k, n, m, a.ptr(), out.grad().data(), b.grad_buffer().data());
    });
  }
  return out;
}

/// Batched product over matching leading axes: [..., m, k] x [..., k, n],
/// or with `transpose_b` [..., m, k] x [..., n, k]^T.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || detail::leading<T>(sa, 2) != detail::leading<T>(sb, 2))
    throw DimensionError("bmm: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (k != kb) throw DimensionError("bmm: inner extents differ in " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t batch = a.numel() / (m * k);
  Shape so = detail::leading<T>(sa, 2);
  so.push_back(m);
  so.push_back(n);
  Tensor<T> out(so);
  std::vector<T> scratch;
  for (std::size_t t = 0; t < batch; ++t) {
    const T* pa = a.ptr() + t * m * k;
    const T* pb = b.ptr() + t * k * n;
    T* po = out.ptr() + t * m * n;
    if (transpose_b)
      detail::gemm_nt(m, n, k, pa, pb, po, scratch);
    else
      detail::gemm_nn(m, n, k, pa, pb, po);
  }
  count_flops(2ull * batch * m * k * n);
  detail::debug_check_finite(out, "bmm");
  if (detail::recording<T>(a, b)) {
    detail::record(out, [a, b, out, m, n, k, batch, transpose_b]() mutable {
      if (!out.has_grad()) return;
      std::vector<T> scratch;
      const T* g = out.grad().data();
      T* ga = a.requires_grad() ? a.grad_buffer().data() : nullptr;
      T* gb = b.requires_grad() ? b.grad_buffer().data() : nullptr;
      for (std::size_t t = 0; t < batch; ++t) {
        const T* gt = g + t * m * n;
        const T* pa = a.ptr() + t * m * k;
        const T* pb = b.ptr() + t * k * n;
        if (transpose_b) {
          // out = A B^T: dA = G B, dB = G^T A
          if (ga) detail::gemm_nn(m, k, n, gt, pb, ga + t * m * k);
          if (gb) detail::gemm_tn(n, k, m, gt, pa, gb + t * k * n);
        } else {
          if (ga) detail::gemm_nt(m, k, n, gt, pb, ga + t * m * k, scratch);
          if (gb) detail::gemm_tn(k, n, m, pa, gt, gb + t * k * n);
        }
      }
    });
  }
  return out;
}

/// x[..., in] * W[in, out] + bias[out]. `bias` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  const std::size_t in = w.dim(0), outd = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd))
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(outd) + " outputs");
  const std::size_t rows = x.numel() / in;
  Shape so = x.shape();
  so.back() = outd;
  Tensor<T> out(so);
  T* po = out.ptr();
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.ptr(), bias.ptr() + outd, po + r * outd);
  detail::gemm_nn(rows, outd, in, x.ptr(), w.ptr(), po);
  count_flops(2ull * rows * in * outd);
  detail::debug_check_finite(out, "linear");
  if (detail::recording<T>(x, w, bias)) {
    detail::record(out, [x, w, bias, out, rows, in, outd]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (x.requires_grad()) {
        std::vector<T> scratch;
        detail::gemm_nt(rows, in, outd, g, w.ptr(), x.grad_buffer().data(), scratch);
      }
      if (w.requires_grad()) detail::gemm_tn(in, outd, rows, x.ptr(), g, w.grad_buffer().data());
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), x.data());
  if (detail::recording<T>(x)) {
    detail::record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

namespace detail {

// Visits output elements of a permutation in order, passing (output index,
// source offset).
template <class F>
void for_each_permuted(const Shape& out_shape, const std::vector<std::size_t>& src_stride, F&& fn) {
  const std::size_t r = out_shape.size();
  const std::size_t n = numel_of(out_shape);
  const std::size_t last = out_shape[r - 1], last_stride = src_stride[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t j = 0; j < last; ++j) fn(o + j, src + j * last_stride);
    for (std::size_t d = r - 1; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace detail

/// out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(s));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation for " + shape_str(s));
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * s[i];
  Shape so(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    so[i] = s[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  Tensor<T> out(so, uninitialized);
  T* po = out.ptr();
  const T* px = x.ptr();
  detail::for_each_permuted(so, src_stride, [&](std::size_t o, std::size_t src) { po[o] = px[src]; });
  if (detail::recording<T>(x)) {
    detail::record(out, [x, out, so, src_stride]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      T* gx = x.grad_buffer().data();
      detail::for_each_permuted(so, src_stride, [&](std::size_t o, std::size_t src) { gx[src] += g[o]; });
    });
  }
  return out;
}

/// Concatenation along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape so = parts.front().shape();
  if (axis >= so.size()) throw DimensionError("concat: axis out of range for " + shape_str(so));
  so[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != so.size()) throw DimensionError("concat: rank mismatch at " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != so[i])
        throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(parts.front().shape()));
    so[axis] += s[axis];
  }
  Tensor<T> out(so, uninitialized);
  const auto sp = detail::split_at(so, axis);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(p.ptr() + o * chunk, p.ptr() + (o + 1) * chunk, out.ptr() + o * sp.len * sp.inner + offset);
    offsets.push_back(offset);
    offset += chunk;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (active_tape<T>() && any) {
    detail::record(out, [parts, out, offsets, sp, axis]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      for (std::size_t q = 0; q < parts.size(); ++q) {
        auto& p = parts[q];
        if (!p.requires_grad()) continue;
        const std::size_t chunk = p.dim(axis) * sp.inner;
        T* gp = p.grad_buffer().data();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[o * sp.len * sp.inner + offsets[q] + i];
      }
    });
  }
  return out;
}

/// Half-open range [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_at(x.shape(), axis);
  if (begin >= end || end > sp.len)
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_str(x.shape()));
  Shape so = x.shape();
  so[axis] = end - begin;
  Tensor<T> out(so, uninitialized);
  const std::size_t chunk = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy(x.ptr() + (o * sp.len + begin) * sp.inner, x.ptr() + (o * sp.len + begin) * sp.inner + chunk,
              out.ptr() + o * chunk);
  if (detail::recording<T>(x)) {
    detail::record(out, [x, out, sp, begin, chunk]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      T* gx = x.grad_buffer().data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < chunk; ++i) gx[(o * sp.len + begin) * sp.inner + i] += g[o * chunk + i];
    });
  }
  return out;
}

/// Stacks `n` copies of x along a new leading axis: [n, ...x.shape].
template <class T>
Tensor<T> broadcast_leading(const Tensor<T>& x, std::size_t n) {
  Shape so{n};
  so.insert(so.end(), x.shape().begin(), x.shape().end());
  Tensor<T> out(so, uninitialized);
  const std::size_t m = x.numel();
  for (std::size_t b = 0; b < n; ++b) std::copy(x.ptr(), x.ptr() + m, out.ptr() + b * m);
  if (detail::recording<T>(x)) {
    detail::record(out, [x, out, n, m]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      T* gx = x.grad_buffer().data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < m; ++i) gx[i] += g[b * m + i];
    });
  }
  return out;
}

/// Numerically stable softmax along `axis` (max-subtracted).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail::split_at(x.shape(), axis);
  Tensor<T> out(x.shape(), uninitialized);
  const T* px = x.ptr();
  T* py = out.ptr();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = px[base];
      for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, px[base + l * sp.inner]);
      T z = 0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const T e = std::exp(px[base + l * sp.inner] - mx);
        py[base + l * sp.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) py[base + l * sp.inner] /= z;
    }
  }
  count_flops(3ull * x.numel());
  detail::debug_check_finite(out, "softmax");
  if (detail::recording<T>(x)) {
    detail::record(out, [x, out, sp]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      const T* y = out.ptr();
      T* gx = x.grad_buffer().data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          T dot = 0;
          for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * y[base + l * sp.inner];
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t i = base + l * sp.inner;
            gx[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Fused multi-head softmax self-attention. `qkv` is [B, S, 3d] laid out as
/// [q | k | v] with heads contiguous inside each part; returns [B, S, d].
/// Only the attention probabilities are kept for the backward pass.
template <class T>
Tensor<T> self_attention(const Tensor<T>& qkv, std::size_t heads) {
  if (qkv.rank() != 3 || heads == 0 || qkv.dim(2) % (3 * heads) != 0)
    throw DimensionError("self_attention: qkv " + shape_str(qkv.shape()) + " with " + std::to_string(heads) +
                         " heads");
  const std::size_t b = qkv.dim(0), s = qkv.dim(1), d = qkv.dim(2) / 3, dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> out({b, s, d}, uninitialized);
  Buffer<T> probs(b * heads * s * s);
  std::vector<T> q(s * dh), k(s * dh), v(s * dh), ctx(s * dh), scratch;

  // copies head h of part (0=q, 1=k, 2=v) of one sample into [s, dh]
  auto gather = [s, d, dh](const T* src, std::size_t part, std::size_t h, std::vector<T>& dst) {
    for (std::size_t t = 0; t < s; ++t)
      std::copy(src + t * 3 * d + part * d + h * dh, src + t * 3 * d + part * d + (h + 1) * dh, dst.data() + t * dh);
  };

  for (std::size_t bi = 0; bi < b; ++bi) {
    const T* src = qkv.ptr() + bi * s * 3 * d;
    for (std::size_t h = 0; h < heads; ++h) {
      gather(src, 0, h, q);
      gather(src, 1, h, k);
      gather(src, 2, h, v);
      T* p = probs.data() + (bi * heads + h) * s * s;
      std::fill(p, p + s * s, T(0));
      detail::gemm_nt(s, s, dh, q.data(), k.data(), p, scratch);
      for (std::size_t i = 0; i < s; ++i) {
        T* row = p + i * s;
        T mx = row[0] * sc;
        for (std::size_t j = 0; j < s; ++j) mx = std::max(mx, row[j] * sc);
        T z = 0;
        for (std::size_t j = 0; j < s; ++j) {
          row[j] = std::exp(row[j] * sc - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < s; ++j) row[j] /= z;
      }
      std::fill(ctx.begin(), ctx.end(), T(0));
      detail::gemm_nn(s, dh, s, p, v.data(), ctx.data());
      T* dst = out.ptr() + bi * s * d;
      for (std::size_t t = 0; t < s; ++t) std::copy(ctx.data() + t * dh, ctx.data() + (t + 1) * dh, dst + t * d + h * dh);
    }
  }
  count_flops(b * heads * (4ull * s * s * dh + 3ull * s * s));
  detail::debug_check_finite(out, "self_attention");
  if (detail::recording<T>(qkv)) {
    detail::record(out, [qkv, out, probs = std::move(probs), b, s, d, dh, heads, sc, gather]() mutable {
      if (!out.has_grad()) return;
      std::vector<T> q(s * dh), k(s * dh), v(s * dh), gctx(s * dh), dp(s * s), gq(s * dh), gk(s * dh), gv(s * dh),
          scratch;
      T* gqkv = qkv.grad_buffer().data();
      for (std::size_t bi = 0; bi < b; ++bi) {
        const T* src = qkv.ptr() + bi * s * 3 * d;
        const T* gout = out.grad().data() + bi * s * d;
        for (std::size_t h = 0; h < heads; ++h) {
          gather(src, 0, h, q);
          gather(src, 1, h, k);
          gather(src, 2, h, v);
          for (std::size_t t = 0; t < s; ++t)
            std::copy(gout + t * d + h * dh, gout + t * d + (h + 1) * dh, gctx.data() + t * dh);
          const T* p = probs.data() + (bi * heads + h) * s * s;
          // dP = dctx V^T, dV = P^T dctx
          std::fill(dp.begin(), dp.end(), T(0));
          detail::gemm_nt(s, s, dh, gctx.data(), v.data(), dp.data(), scratch);
          std::fill(gv.begin(), gv.end(), T(0));
          detail::gemm_tn(s, dh, s, p, gctx.data(), gv.data());
          // dScores = P * (dP - rowsum(dP * P)) * scale
          for (std::size_t i = 0; i < s; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < s; ++j) dot += dp[i * s + j] * p[i * s + j];
            for (std::size_t j = 0; j < s; ++j) dp[i * s + j] = p[i * s + j] * (dp[i * s + j] - dot) * sc;
          }
          std::fill(gq.begin(), gq.end(), T(0));
          detail::gemm_nn(s, dh, s, dp.data(), k.data(), gq.data());
          std::fill(gk.begin(), gk.end(), T(0));
          detail::gemm_tn(s, dh, s, dp.data(), q.data(), gk.data());
          T* dst = gqkv + bi * s * 3 * d;
          for (std::size_t t = 0; t < s; ++t)
            for (std::size_t e = 0; e < dh; ++e) {
              dst[t * 3 * d + h * dh + e] += gq[t * dh + e];
              dst[t * 3 * d + d + h * dh + e] += gk[t * dh + e];
              dst[t * 3 * d + 2 * d + h * dh + e] += gv[t * dh + e];
            }
        }
      }
    });
  }
  return out;
}

/// Normalizes the last axis to zero mean / unit (biased) variance, then
/// applies gamma and beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                         " beta " + shape_str(beta.shape()));
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape(), uninitialized);
  Buffer<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* px = x.ptr() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += px[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (px[i] - mu) * (px[i] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (px[i] - mu) * rstd[r];
      out[r * d + i] = xhat[r * d + i] * gamma[i] + beta[i];
    }
  }
  detail::debug_check_finite(out, "layer_norm");
  if (detail::recording<T>(x, gamma, beta)) {
    detail::record(out, [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (gamma.requires_grad()) {
        auto gg = gamma.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xhat[r * d + i];
      }
      if (beta.requires_grad()) {
        auto gb = beta.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
      }
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          T m1 = 0, m2 = 0;
          for (std::size_t i = 0; i < d; ++i) {
            const T dxh = g[r * d + i] * gamma[i];
            m1 += dxh;
            m2 += dxh * xhat[r * d + i];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::size_t i = 0; i < d; ++i) {
            const T dxh = g[r * d + i] * gamma[i];
            gx[r * d + i] += rstd[r] * (dxh - m1 - xhat[r * d + i] * m2);
          }
        }
      }
    });
  }
  return out;
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape(), uninitialized);
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  if (detail::recording<T>(x)) {
    detail::record(out, [x, out, inv_sqrt2]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_buffer();
      const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

struct Conv2dGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
};

/// NCHW convolution, weight [Cout, Cin, kh, kw], optional bias [Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, padding, 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw)
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (bias.defined() && bias.numel() != g.cout) throw DimensionError("conv2d: bias " + shape_str(bias.shape()));
  const std::size_t ckk = g.cin * g.kh * g.kw, hw = g.oh * g.ow;

  // cols[(c,ki,kj), (oy,ox)] -> x offset, or npos for padding
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> index(ckk * hw, npos);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const std::size_t row = (c * g.kh + ki) * g.kw + kj;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            index[row * hw + oy * g.ow + ox] = (c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix);
          }
        }
      }

  Tensor<T> out({g.batch, g.cout, g.oh, g.ow});
  std::vector<T> cols(ckk * hw);
  const std::size_t in_plane = g.cin * g.h * g.w;
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* xb = x.ptr() + b * in_plane;
    for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = index[i] == npos ? T(0) : xb[index[i]];
    T* ob = out.ptr() + b * g.cout * hw;
    if (bias.defined())
      for (std::size_t co = 0; co < g.cout; ++co) std::fill(ob + co * hw, ob + (co + 1) * hw, bias[co]);
    detail::gemm_nn(g.cout, hw, ckk, w.ptr(), cols.data(), ob);
  }
  count_flops(2ull * g.batch * g.cout * hw * ckk);
  detail::debug_check_finite(out, "conv2d");
  if (detail::recording<T>(x, w, bias)) {
    detail::record(out, [x, w, bias, out, g, index = std::move(index), ckk, hw, in_plane]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      std::vector<T> cols(ckk * hw), scratch;
      T* gw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
      T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* gob = go + b * g.cout * hw;
        if (gw) {
          const T* xb = x.ptr() + b * in_plane;
          for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = index[i] == npos ? T(0) : xb[index[i]];
          detail::gemm_nt(g.cout, ckk, hw, gob, cols.data(), gw, scratch);
        }
        if (gx) {
          std::fill(cols.begin(), cols.end(), T(0));
          detail::gemm_tn(ckk, hw, g.cout, w.ptr(), gob, cols.data());
          T* gxb = gx + b * in_plane;
          for (std::size_t i = 0; i < cols.size(); ++i)
            if (index[i] != npos) gxb[index[i]] += cols[i];
        }
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t co = 0; co < g.cout; ++co) {
            const T* row = go + (b * g.cout + co) * hw;
            for (std::size_t i = 0; i < hw; ++i) gb[co] += row[i];
          }
      }
    });
  }
  return out;
}

/// Arithmetic mean over `axis`. With keepdim the axis is retained with
/// extent 1, otherwise it is removed (rank-1 inputs keep a [1] shape).
template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  const auto sp = detail::split_at(x.shape(), axis);
  Shape so = x.shape();
  if (keepdim || so.size() == 1)
    so[axis] = 1;
  else
    so.erase(so.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(so, uninitialized);
  const T inv = T(1) / static_cast<T>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      T acc = 0;
      for (std::size_t l = 0; l < sp.len; ++l) acc += x[(o * sp.len + l) * sp.inner + in];
      out[o * sp.inner + in] = acc * inv;
    }
  if (detail::recording<T>(x)) {
    detail::record(out, [x, out, sp, inv]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      T* gx = x.grad_buffer().data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const T v = g[o * sp.inner + in] * inv;
          for (std::size_t l = 0; l < sp.len; ++l) gx[(o * sp.len + l) * sp.inner + in] += v;
        }
    });
  }
  return out;
}

/// Mean over the token axis of [B, S, d] (-> [B, d]) or the spatial axes of
/// [B, C, H, W] (-> [B, C]).
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() == 3) return mean_axis(x, 1);
  if (x.rank() == 4) return mean_axis(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
  throw DimensionError("global_avg_pool: expected rank 3 or 4, got " + shape_str(x.shape()));
}

namespace detail {

struct Lerp {
  std::size_t i0, i1;
  double w1;
};

// Half-pixel centres (align_corners = false), edge-clamped.
inline std::vector<Lerp> lerp_table(std::size_t in, std::size_t out) {
  std::vector<Lerp> t(out);
  const double s = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * s - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    t[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace detail

/// Bilinear resampling of [B, C, H, W] to [B, C, oh, ow] with half-pixel
/// centres (align_corners = false). Identity when the size is unchanged.
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  if (x.rank() != 4) throw DimensionError("bilinear_resize: expected NCHW input, got " + shape_str(x.shape()));
  if (oh == 0 || ow == 0) throw DimensionError("bilinear_resize: output size must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (oh == h && ow == w) return reshape(x, x.shape());
  const auto ty = detail::lerp_table(h, oh);
  const auto tx = detail::lerp_table(w, ow);
  Tensor<T> out({x.dim(0), x.dim(1), oh, ow}, uninitialized);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * h * w;
    T* dst = out.ptr() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto& ly = ty[oy];
      const T wy1 = static_cast<T>(ly.w1), wy0 = T(1) - wy1;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto& lx = tx[ox];
        const T wx1 = static_cast<T>(lx.w1), wx0 = T(1) - wx1;
        dst[oy * ow + ox] = wy0 * (wx0 * src[ly.i0 * w + lx.i0] + wx1 * src[ly.i0 * w + lx.i1]) +
                            wy1 * (wx0 * src[ly.i1 * w + lx.i0] + wx1 * src[ly.i1 * w + lx.i1]);
      }
    }
  }
  if (detail::recording<T>(x)) {
    detail::record(out, [x, out, ty, tx, planes, h, w, oh, ow]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      T* gx = x.grad_buffer().data();
      for (std::size_t p = 0; p < planes; ++p) {
        const T* gp = g + p * oh * ow;
        T* dst = gx + p * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto& ly = ty[oy];
          const T wy1 = static_cast<T>(ly.w1), wy0 = T(1) - wy1;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto& lx = tx[ox];
            const T wx1 = static_cast<T>(lx.w1), wx0 = T(1) - wx1;
            const T v = gp[oy * ow + ox];
            dst[ly.i0 * w + lx.i0] += v * wy0 * wx0;
            dst[ly.i0 * w + lx.i1] += v * wy0 * wx1;
            dst[ly.i1 * w + lx.i0] += v * wy1 * wx0;
            dst[ly.i1 * w + lx.i1] += v * wy1 * wx1;
          }
        }
      }
    });
  }
  return out;
}

/// Mean softmax cross-entropy of logits [B, C] against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<T> prob(b * c);
  T loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw DimensionError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(c) + ")");
    const T* row = logits.ptr() + i * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      prob[i * c + j] = std::exp(row[j] - mx);
      z += prob[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= z;
    loss += std::log(z) + mx - row[labels[i]];
  }
  Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(b));
  if (detail::recording<T>(logits)) {
    std::vector<int> lab(labels.begin(), labels.end());
    detail::record(out, [logits, out, prob = std::move(prob), lab = std::move(lab), b, c]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(b);
      auto gl = logits.grad_buffer();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j)
          gl[i * c + j] += g * (prob[i * c + j] - (static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0)));
    });
  }
  return out;
}

}  // namespace hst
