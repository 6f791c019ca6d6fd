#pragma once

// Introspection: meta-token/patch-token alignment per layer, FLOP and memory
// profiling, and the attention scaling benchmark.

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "hst/model.hpp"

namespace hst::diag {

/// Cosine of two vectors, accumulated in double. Zero vectors give 0.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// Mean over every axis but the last: [..., d] -> d values.
template <class T>
std::vector<double> mean_vector(const Tensor<T>& x) {
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[j] += static_cast<double>(x[r * d + j]);
  for (auto& v : out) v /= static_cast<double>(rows);
  return out;
}

/// Cosine between the averaged meta-token output and the mean patch token of each tap.
template <class T>
std::vector<double> cosine_per_tap(const std::vector<IntermediateTap<T>>& taps) {
  std::vector<double> out;
  for (const auto& tap : taps) {
    if (!tap.meta.defined()) throw ConfigError("cosine similarity needs at least one meta token (N >= 1)");
    out.push_back(cosine(mean_vector(tap.meta), mean_vector(tap.patch)));
  }
  return out;
}

template <class T>
std::vector<double> cosine_similarity_per_layer(const HSTModel<T>& model, const Tensor<T>& images) {
  if (model.config().backbone.num_meta_tokens == 0)
    throw ConfigError("cosine similarity needs at least one meta token (N >= 1), this model has N = 0");
  NoGradScope<T> no_grad;
  return cosine_per_tap(model.backbone().forward(model.normalize(images)).taps);
}

struct LayerComparison {
  std::vector<double> before, after;  // one value per backbone block
};

template <class T>
LayerComparison compare_ln_tuning(const HSTModel<T>& before, const HSTModel<T>& after, const Tensor<T>& images) {
  const auto& pa = before.params();
  const auto& pb = after.params();
  if (pa.names() != pb.names()) throw ConfigError("compare_ln_tuning: models have different parameter sets");
  for (const auto& [name, p] : pa)
    if (p.value.shape() != pb.at(name).value.shape())
      throw ConfigError("compare_ln_tuning: parameter '" + name + "' differs in shape");
  return {cosine_similarity_per_layer(before, images), cosine_similarity_per_layer(after, images)};
}

inline void write_csv(std::ostream& os, const LayerComparison& c) {
  os << "layer,before,after\n";
  os.precision(9);
  for (std::size_t i = 0; i < c.before.size(); ++i) os << i << ',' << c.before[i] << ',' << c.after[i] << '\n';
}

// ---------------------------------------------------------------------------
// Profiling

struct ProfileReport {
  std::uint64_t flops = 0;     // analytic, per call
  double wall_seconds = 0;     // mean over trials
  std::size_t peak_bytes = 0;  // peak live tensor bytes above the starting level
  std::size_t trials = 0;
};

/// Runs `fn` `trials` times (after one untimed warm-up that also counts FLOPs).
inline ProfileReport profile(const std::function<void()>& fn, std::size_t trials = 100) {
  if (trials == 0) throw ConfigError("profile: trials must be positive");
  ProfileReport r;
  r.trials = trials;
  auto& mem = memory_stats();
  const std::size_t base = mem.live, saved_peak = mem.peak;
  mem.peak = mem.live;
  {
    FlopCounter fc;
    FlopScope scope(fc);
    fn();
    r.flops = fc.total();
  }
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < trials; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  r.wall_seconds = std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(trials);
  r.peak_bytes = mem.peak - std::min(mem.peak, base);
  mem.peak = std::max(saved_peak, mem.peak);
  return r;
}

struct ModuleFlops {
  std::uint64_t backbone = 0, bridge = 0, hsn = 0, head = 0;
  std::uint64_t total() const { return backbone + bridge + hsn + head; }
};

/// FLOPs of each stage of the classification forward, counted separately.
template <class T>
ModuleFlops module_flops(const HSTModel<T>& model, const Tensor<T>& images) {
  NoGradScope<T> no_grad;
  ModuleFlops m;
  auto x = model.normalize(images);
  auto counted = [](std::uint64_t& slot, auto&& fn) {
    FlopCounter fc;
    FlopScope scope(fc);
    auto out = fn();
    slot += fc.total();
    return out;
  };
  auto bb = counted(m.backbone, [&] { return model.backbone().forward(x); });
  if (!model.side_net()) {
    counted(m.head, [&] { return model.head(model.backbone().pooled_patches(bb)); });
    return m;
  }
  const auto& hc = model.config().hsn;
  std::vector<BridgeOutput<T>> bridged;
  for (std::size_t i = 0; i < bb.taps.size(); ++i)
    bridged.push_back(counted(m.bridge, [&] { return model.bridge()->forward(bb.taps[i], i, hc.global_t, hc.fg_injection); }));
  auto pyr = counted(m.hsn, [&] { return model.side_net()->forward(x, bridged); });
  counted(m.head, [&] { return model.head(global_avg_pool(pyr.p32())); });
  return m;
}

template <class T>
ProfileReport profile_model(const HSTModel<T>& model, const Tensor<T>& images, std::size_t trials = 100) {
  return profile(
      [&] {
        NoGradScope<T> no_grad;
        model.forward_classify(images);
      },
      trials);
}

// ---------------------------------------------------------------------------
// Attention scaling

/// Full softmax self-attention of x [L, d] with itself, one query row at a
/// time, so memory stays O(L) while time is O(L^2 d).
inline std::vector<float> naive_self_attention(const std::vector<float>& x, std::size_t l, std::size_t d) {
  std::vector<float> out(l * d, 0.0f), scores(l);
  const float s = 1.0f / std::sqrt(static_cast<float>(d));
  for (std::size_t i = 0; i < l; ++i) {
    const float* q = x.data() + i * d;
    float mx = -INFINITY;
    for (std::size_t j = 0; j < l; ++j) {
      const float* k = x.data() + j * d;
      float dot = 0;
      for (std::size_t t = 0; t < d; ++t) dot += q[t] * k[t];
      scores[j] = dot * s;
      mx = std::max(mx, scores[j]);
    }
    float z = 0;
    for (std::size_t j = 0; j < l; ++j) z += scores[j] = std::exp(scores[j] - mx);
    float* o = out.data() + i * d;
    for (std::size_t j = 0; j < l; ++j) {
      const float p = scores[j] / z;
      const float* v = x.data() + j * d;
      for (std::size_t t = 0; t < d; ++t) o[t] += p * v[t];
    }
  }
  return out;
}

inline std::uint64_t naive_self_attention_flops(std::uint64_t l, std::uint64_t d) {
  return 4 * l * l * d + 3 * l * l;
}

struct ComplexityRow {
  std::size_t length = 0;
  std::uint64_t cross_flops = 0;
  double cross_seconds = 0;
  std::uint64_t naive_flops = 0;
  double naive_seconds = 0;
  std::size_t naive_trials = 0;
};

struct ComplexityReport {
  std::vector<ComplexityRow> rows;
  double cross_slope = 0;  // least-squares slope of log time vs log L
  double naive_slope = 0;
};

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Times the side-block attention core (queries of length L over M tokens)
/// against full self-attention over L tokens, both at width d.
/// `naive_budget_flops` caps the naive trials per length: at least one trial
/// always runs, and at most `trials`.
inline ComplexityReport attention_complexity_profile(const std::vector<std::size_t>& lengths, std::size_t d,
                                                     std::size_t m, std::size_t trials = 100,
                                                     double naive_budget_flops = 2e10, std::uint64_t seed = 0) {
  ComplexityReport rep;
  auto rng = substream(seed, "complexity");
  std::normal_distribution<float> nd(0.0f, 1.0f);
  auto randn = [&](Shape s) {
    Tensor<float> t(s, uninitialized);
    for (auto& v : t.data()) v = nd(rng);
    return t;
  };
  NoGradScope<float> no_grad;
  std::vector<double> ls, ct, nt;
  for (std::size_t l : lengths) {
    ComplexityRow row;
    row.length = l;
    auto q = randn({1, l, d});
    auto k = randn({1, m, d});
    auto v = randn({1, m, d});
    auto cross = profile([&] { attention_core(q, k, v, AttentionKind::softmax); }, trials);
    row.cross_flops = cross.flops;
    row.cross_seconds = cross.wall_seconds;

    std::vector<float> x(l * d);
    for (auto& e : x) e = nd(rng);
    row.naive_flops = naive_self_attention_flops(l, d);
    row.naive_trials = static_cast<std::size_t>(
        std::clamp(naive_budget_flops / static_cast<double>(row.naive_flops), 1.0, static_cast<double>(trials)));
    volatile float sink = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < row.naive_trials; ++i) sink = sink + naive_self_attention(x, l, d)[0];
    const auto t1 = std::chrono::steady_clock::now();
    row.naive_seconds = std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(row.naive_trials);

    ls.push_back(static_cast<double>(l));
    ct.push_back(row.cross_seconds);
    nt.push_back(row.naive_seconds);
    rep.rows.push_back(row);
  }
  if (lengths.size() >= 2) {
    rep.cross_slope = loglog_slope(ls, ct);
    rep.naive_slope = loglog_slope(ls, nt);
  }
  return rep;
}

inline void write_csv(std::ostream& os, const ComplexityReport& r) {
  os << "length,cross_flops,cross_seconds,naive_flops,naive_seconds,naive_trials\n";
  os.precision(9);
  for (const auto& row : r.rows)
    os << row.length << ',' << row.cross_flops << ',' << row.cross_seconds << ',' << row.naive_flops << ','
       << row.naive_seconds << ',' << row.naive_trials << '\n';
}

}  // namespace hst::diag
