#pragma once

// Hierarchical side network: a stride-4 convolutional stem followed by four
// stages of side blocks (meta-global cross-attention, fine-grained injection
// and FFN) joined by stride-2 transitions.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "hst/bridge.hpp"

namespace hst {

enum class AttentionKind {
  softmax,   // softmax(Q K^T / sqrt(d)) V
  bilinear,  // Q (K^T V), no normalization
};

struct HSNConfig {
  std::array<std::size_t, kNumStages> stage_dims{16, 32, 64, 128};
  std::size_t ffn_ratio = 4;
  std::size_t attn_heads = 1;
  AttentionKind attention = AttentionKind::softmax;
  bool global_t = true;
  bool fg_injection = true;
  double ln_eps = 1e-5;

  void validate(const ViTConfig& vit) const {
    for (auto d : stage_dims)
      if (d == 0 || attn_heads == 0 || d % attn_heads != 0)
        throw ConfigError("hsn.stage_dims must be positive multiples of hsn.attn_heads");
    if (ffn_ratio == 0) throw ConfigError("hsn.ffn_ratio must be positive");
    if (vit.num_meta_tokens == 0 && !global_t)
      throw ConfigError("side-block cross-attention needs at least one key: set backbone.num_meta_tokens >= 1 or "
                        "enable toggles.global_t");
  }

  /// Key/value length seen by every side block.
  std::size_t meta_global_len(const ViTConfig& vit) const { return vit.num_meta_tokens + (global_t ? 1 : 0); }
};

template <class T>
struct CrossAttentionWeights {
  Tensor<T> norm_g, norm_b;  // pre-norm on the query stream
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct SideBlockWeights {
  CrossAttentionWeights<T> attn;
  Tensor<T> norm_g, norm_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

template <class T>
struct FeaturePyramid {
  std::array<Tensor<T>, kNumStages> maps;  // [B, d_j, H/stride_j, W/stride_j]

  const Tensor<T>& p4() const { return maps[0]; }
  const Tensor<T>& p8() const { return maps[1]; }
  const Tensor<T>& p16() const { return maps[2]; }
  const Tensor<T>& p32() const { return maps[3]; }
};

namespace detail {

template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (heads == 1) return x;
  return reshape(permute(reshape(x, {b, n, heads, d / heads}), {0, 2, 1, 3}), {b * heads, n, d / heads});
}

template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads) {
  if (heads == 1) return x;
  const std::size_t n = x.dim(1), dh = x.dim(2);
  return reshape(permute(reshape(x, {batch, heads, n, dh}), {0, 2, 1, 3}), {batch, n, heads * dh});
}

}  // namespace detail

/// Attention of queries [G, Lq, d] over keys/values [G, M, d]. Cost is
/// linear in Lq: the score matrix is only Lq x M.
template <class T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, AttentionKind kind) {
  if (k.dim(1) == 0) throw ConfigError("cross-attention with zero keys");
  if (kind == AttentionKind::bilinear) return bmm(q, bmm(permute(k, {0, 2, 1}), v));
  const T s = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
  return bmm(softmax(scale(bmm(q, k, true), s), 2), v);
}

/// Analytic FLOPs of attention_core for the softmax form: scores, softmax
/// and the weighted sum. Exactly linear in the query length.
inline std::uint64_t attention_core_flops(std::uint64_t groups, std::uint64_t lq, std::uint64_t m, std::uint64_t d) {
  return groups * (2 * lq * m * d + 3 * lq * m + 2 * lq * m * d);
}

/// Residual cross-attention: F_hsn + Wo . Attn(LN(F_hsn) Wq, F_mg Wk, F_mg Wv).
template <class T>
Tensor<T> cross_attention(const CrossAttentionWeights<T>& w, const Tensor<T>& f_hsn, const Tensor<T>& f_mg,
                          std::size_t heads, AttentionKind kind = AttentionKind::softmax, T eps = T(1e-5)) {
  if (!f_mg.defined()) throw ConfigError("cross-attention requires M >= 1 meta-global tokens");
  if (f_hsn.rank() != 3 || f_mg.rank() != 3 || f_hsn.dim(0) != f_mg.dim(0) || f_hsn.dim(2) != f_mg.dim(2))
    throw DimensionError("cross_attention: F_hsn " + shape_str(f_hsn.shape()) + " vs F_mg " + shape_str(f_mg.shape()));
  const std::size_t b = f_hsn.dim(0);
  auto q = detail::split_heads(linear(layer_norm(f_hsn, w.norm_g, w.norm_b, eps), w.wq, w.bq), heads);
  auto k = detail::split_heads(linear(f_mg, w.wk, w.bk), heads);
  auto v = detail::split_heads(linear(f_mg, w.wv, w.bv), heads);
  auto ctx = detail::merge_heads(attention_core(q, k, v, kind), b, heads);
  return add(f_hsn, linear(ctx, w.wo, w.bo));
}

/// One side block on token layout [B, Lq, d]:
///   F^ = F + CrossAttn(F, F_mg);  out = F^ + F_fg + FFN(F^ + F_fg).
/// `f_fg` undefined means fine-grained injection is off.
template <class T>
Tensor<T> side_block(const SideBlockWeights<T>& w, const Tensor<T>& f_hsn, const Tensor<T>& f_mg,
                     const Tensor<T>& f_fg, std::size_t heads, AttentionKind kind = AttentionKind::softmax,
                     T eps = T(1e-5)) {
  auto x = cross_attention(w.attn, f_hsn, f_mg, heads, kind, eps);
  if (f_fg.defined()) {
    if (f_fg.shape() != f_hsn.shape())
      throw DimensionError("side_block: F_fg " + shape_str(f_fg.shape()) + " does not match F_hsn " +
                           shape_str(f_hsn.shape()));
    x = add(x, f_fg);
  }
  auto hidden = gelu(linear(layer_norm(x, w.norm_g, w.norm_b, eps), w.fc1_w, w.fc1_b));
  return add(x, linear(hidden, w.fc2_w, w.fc2_b));
}

/// [B, C, H, W] -> [B, H*W, C], row-major over (H, W).
template <class T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  return permute(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), {0, 2, 1});
}

template <class T>
Tensor<T> from_tokens(const Tensor<T>& x, std::size_t h, std::size_t w) {
  return reshape(permute(x, {0, 2, 1}), {x.dim(0), x.dim(2), h, w});
}

template <class T>
class SideNet {
 public:
  SideNet(const ViTConfig& vit, const HSNConfig& cfg, ParamStore<T>& store, std::uint64_t seed)
      : vit_(vit), cfg_(cfg) {
    cfg_.validate(vit_);
    auto rng = substream(seed, "hsn");
    const auto& dims = cfg_.stage_dims;
    auto lin = [&](const std::string& name, std::size_t in, std::size_t out, Tensor<T>& w, Tensor<T>& b) {
      w = store.add(name + ".weight", trunc_normal<T>({in, out}, 0.02, rng), true);
      b = store.add(name + ".bias", Tensor<T>({out}), true, false);
    };
    auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Tensor<T>& w,
                    Tensor<T>& b) {
      const double sd = std::sqrt(2.0 / static_cast<double>(cin * k * k));
      w = store.add(name + ".weight", trunc_normal<T>({cout, cin, k, k}, sd, rng), true);
      b = store.add(name + ".bias", Tensor<T>({cout}), true, false);
    };
    auto norm = [&](const std::string& name, std::size_t d, Tensor<T>& g, Tensor<T>& b) {
      g = store.add(name + ".gamma", Tensor<T>({d}, T(1)), true, false);
      b = store.add(name + ".beta", Tensor<T>({d}), true, false);
    };

    conv("hsn.stem.conv1", 3, dims[0], 3, stem1_w_, stem1_b_);
    conv("hsn.stem.conv2", dims[0], dims[0], 3, stem2_w_, stem2_b_);
    const std::size_t per_stage = vit_.depth / kNumStages;
    for (std::size_t i = 0; i < vit_.depth; ++i) {
      const std::size_t j = i / per_stage, d = dims[j];
      const std::string pre = "hsn.stage" + std::to_string(j) + ".block" + std::to_string(i % per_stage);
      SideBlockWeights<T> w;
      norm(pre + ".attn.norm", d, w.attn.norm_g, w.attn.norm_b);
      lin(pre + ".attn.q", d, d, w.attn.wq, w.attn.bq);
      lin(pre + ".attn.k", d, d, w.attn.wk, w.attn.bk);
      lin(pre + ".attn.v", d, d, w.attn.wv, w.attn.bv);
      lin(pre + ".attn.out", d, d, w.attn.wo, w.attn.bo);
      norm(pre + ".ffn.norm", d, w.norm_g, w.norm_b);
      lin(pre + ".ffn.fc1", d, d * cfg_.ffn_ratio, w.fc1_w, w.fc1_b);
      lin(pre + ".ffn.fc2", d * cfg_.ffn_ratio, d, w.fc2_w, w.fc2_b);
      blocks_.push_back(w);
    }
    for (std::size_t j = 0; j + 1 < kNumStages; ++j) {
      Transition t;
      conv("hsn.transition" + std::to_string(j), dims[j], dims[j + 1], 2, t.w, t.b);
      transitions_.push_back(t);
    }
  }

  const HSNConfig& config() const { return cfg_; }
  const std::vector<SideBlockWeights<T>>& blocks() const { return blocks_; }
  std::size_t blocks_per_stage() const { return vit_.depth / kNumStages; }

  /// Two 3x3 stride-2 convolutions with GELU between: [B,3,H,W] -> [B,d_1,H/4,W/4].
  Tensor<T> conv_stem(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
      throw DimensionError("conv_stem: spatial size must be divisible by 4, got " + shape_str(image.shape()));
    return conv2d(gelu(conv2d(image, stem1_w_, stem1_b_, 2, 1)), stem2_w_, stem2_b_, 2, 1);
  }

  /// 2x2 stride-2 projection from stage j to stage j+1.
  Tensor<T> stage_transition(const Tensor<T>& x, std::size_t j) const {
    if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
      throw DimensionError("stage_transition: spatial dims must be even, got " + shape_str(x.shape()));
    const auto& t = transitions_.at(j);
    return conv2d(x, t.w, t.b, 2, 0);
  }

  /// Stem, then stage j consumes bridged taps j*L/4 .. (j+1)*L/4 - 1.
  FeaturePyramid<T> forward(const Tensor<T>& image, std::span<const BridgeOutput<T>> bridged) const {
    if (bridged.size() != vit_.depth)
      throw WiringError("hsn_forward: got " + std::to_string(bridged.size()) + " taps for " +
                        std::to_string(vit_.depth) + " side blocks");
    const T eps = static_cast<T>(cfg_.ln_eps);
    const std::size_t per_stage = blocks_per_stage();
    FeaturePyramid<T> pyramid;
    Tensor<T> map = conv_stem(image);
    for (std::size_t j = 0; j < kNumStages; ++j) {
      if (j > 0) map = stage_transition(map, j - 1);
      const std::size_t h = map.dim(2), w = map.dim(3);
      Tensor<T> tokens = to_tokens(map);
      for (std::size_t k = 0; k < per_stage; ++k) {
        const std::size_t i = j * per_stage + k;
        Tensor<T> fg;
        if (cfg_.fg_injection) {
          const auto& f = bridged[i].fine_grained;
          if (!f.defined() || f.rank() != 4 || f.dim(2) != h || f.dim(3) != w)
            throw DimensionError("hsn_forward: fine-grained map for block " + std::to_string(i) +
                                 " does not match stage resolution " + std::to_string(h) + "x" + std::to_string(w));
          fg = to_tokens(f);
        }
        tokens = side_block(blocks_[i], tokens, bridged[i].meta_global, fg, cfg_.attn_heads, cfg_.attention, eps);
      }
      map = from_tokens(tokens, h, w);
      pyramid.maps[j] = map;
    }
    return pyramid;
  }

 private:
  struct Transition {
    Tensor<T> w, b;
  };

  ViTConfig vit_;
  HSNConfig cfg_;
  Tensor<T> stem1_w_, stem1_b_, stem2_w_, stem2_b_;
  std::vector<SideBlockWeights<T>> blocks_;
  std::vector<Transition> transitions_;
};

}  // namespace hst
