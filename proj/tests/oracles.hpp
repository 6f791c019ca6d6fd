#pragma once

// Independent reference computations used by the test suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hst/hst.hpp"

namespace oracle {

using hst::Shape;
using hst::Tensor;

inline Tensor<double> randn(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  Tensor<double> t(std::move(s));
  std::normal_distribution<double> d(0.0, sd);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline Tensor<float> randnf(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  Tensor<float> t(std::move(s));
  std::normal_distribution<float> d(0.0f, static_cast<float>(sd));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

/// Max relative error between tape gradients and central differences of
/// sum(w * f(inputs)) for fixed random weights w, over every input element.
inline double max_fd_error(std::vector<Tensor<double>> inputs,
                           const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                           double h = 1e-6, std::uint64_t seed = 7) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    if (x.has_grad()) x.zero_grad();
  }
  Tensor<double> weights;
  auto loss_of = [&](const Tensor<double>& out) {
    if (!weights.defined()) {
      std::mt19937_64 rng(seed);
      weights = randn(out.shape(), rng);
    }
    return hst::sum(hst::mul(out, weights));
  };
  {
    hst::Tape<double> tape;
    hst::TapeScope<double> scope(tape);
    tape.backward(loss_of(f(inputs)));
  }
  hst::NoGradScope<double> off;
  double worst = 0;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double up = loss_of(f(inputs)).item();
      x[i] = orig - h;
      const double down = loss_of(f(inputs)).item();
      x[i] = orig;
      const double num = (up - down) / (2 * h);
      const double err = std::abs(num - analytic[i]) / std::max({std::abs(num), std::abs(analytic[i]), 1e-6});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Element-by-element triple loop.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

/// Softmax attention with the Lq x M score matrix materialized in full.
inline std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                           const std::vector<double>& v, std::size_t lq, std::size_t m,
                                           std::size_t d, bool softmax) {
  std::vector<double> a(lq * m);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < d; ++t) s += q[i * d + t] * k[j * d + t];
      a[i * m + j] = softmax ? s / std::sqrt(static_cast<double>(d)) : s;
    }
  if (softmax)
    for (std::size_t i = 0; i < lq; ++i) {
      double mx = a[i * m];
      for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, a[i * m + j]);
      double z = 0;
      for (std::size_t j = 0; j < m; ++j) z += a[i * m + j] = std::exp(a[i * m + j] - mx);
      for (std::size_t j = 0; j < m; ++j) a[i * m + j] /= z;
    }
  return matmul(a, v, lq, m, d);
}

// ---------------------------------------------------------------------------
// Closed-form parameter counts

inline std::size_t ln_count(const hst::ViTConfig& v) { return (2 * v.depth + 1) * 2 * v.embed_dim; }

inline std::size_t backbone_total(const hst::ViTConfig& v) {
  const std::size_t d = v.embed_dim, h = d * v.mlp_ratio, p = v.patch_size;
  const std::size_t block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
  return d * 3 * p * p + d + v.num_patches() * d + (v.use_cls_token ? d : 0) + v.depth * block + 2 * d +
         v.num_meta_tokens * d;
}

inline std::size_t bridge_count(const hst::ModelConfig& c) {
  const std::size_t d = c.backbone.embed_dim, per_stage = c.backbone.depth / 4;
  std::size_t n = 0;
  for (auto dj : c.hsn.stage_dims) n += (c.weight_sharing ? 1 : per_stage) * (d * dj + (c.bridge_bias ? dj : 0));
  return n;
}

inline std::size_t side_block_count(std::size_t d, std::size_t ffn_ratio) {
  const std::size_t h = d * ffn_ratio;
  return 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
}

inline std::size_t hsn_count(const hst::ModelConfig& c) {
  const auto& s = c.hsn.stage_dims;
  std::size_t n = (3 * 9 * s[0] + s[0]) + (s[0] * 9 * s[0] + s[0]);
  for (std::size_t j = 1; j < 4; ++j) n += s[j - 1] * 4 * s[j] + s[j];
  for (std::size_t j = 0; j < 4; ++j) n += (c.backbone.depth / 4) * side_block_count(s[j], c.hsn.ffn_ratio);
  return n;
}

inline std::size_t head_count(const hst::ModelConfig& c) {
  const std::size_t in = c.hsn_enabled ? c.hsn.stage_dims.back() : c.backbone.embed_dim;
  return in * c.num_classes + c.num_classes;
}

inline std::size_t trainable_total(const hst::ModelConfig& c) {
  if (!c.hsn_enabled) return head_count(c);
  return (c.ln_tuning ? ln_count(c.backbone) : 0) + c.backbone.num_meta_tokens * c.backbone.embed_dim +
         bridge_count(c) + hsn_count(c) + head_count(c);
}

inline std::size_t grand_total(const hst::ModelConfig& c) {
  return backbone_total(c.backbone) + (c.hsn_enabled ? bridge_count(c) + hsn_count(c) : 0) + head_count(c);
}

}  // namespace oracle
