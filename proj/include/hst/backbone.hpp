#pragma once

// Frozen plain ViT with trainable meta tokens and LayerNorm parameters.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "hst/ops.hpp"
#include "hst/param.hpp"

namespace hst {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t depth = 8;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  bool use_cls_token = false;
  std::size_t num_meta_tokens = 1;
  double ln_eps = 1e-5;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t prefix_len() const { return num_meta_tokens + (use_cls_token ? 1 : 0); }
  std::size_t seq_len() const { return prefix_len() + num_patches(); }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("backbone.image_size (" + std::to_string(image_size) + ") must be divisible by patch_size (" +
                        std::to_string(patch_size) + ")");
    if (depth == 0 || depth % 4 != 0)
      throw ConfigError("backbone.depth must be a positive multiple of 4, got " + std::to_string(depth));
    if (num_heads == 0 || embed_dim % num_heads != 0)
      throw ConfigError("backbone.embed_dim must be divisible by num_heads");
    if (mlp_ratio == 0) throw ConfigError("backbone.mlp_ratio must be positive");
    if (!(ln_eps > 0)) throw ConfigError("backbone.ln_eps must be positive");
  }
};

/// Output of one backbone block split into meta-token and patch-token parts.
/// `meta` is undefined when there are no meta tokens.
template <class T>
struct IntermediateTap {
  Tensor<T> meta;   // [B, N, d]
  Tensor<T> patch;  // [B, g*g, d]
};

template <class T>
struct BackboneOutput {
  std::vector<IntermediateTap<T>> taps;
  Tensor<T> final_tokens;  // [B, S, d] after the final LayerNorm
};

template <class T>
class Backbone {
 public:
  struct Block {
    Tensor<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  Backbone(const ViTConfig& cfg, ParamStore<T>& store, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.embed_dim, p = cfg_.patch_size, hidden = d * cfg_.mlp_ratio;
    auto rng = substream(seed, "backbone.frozen");
    auto frozen = [&](const std::string& name, Shape s) { return store.add(name, trunc_normal<T>(s, 0.02, rng), false); };
    auto frozen_zero = [&](const std::string& name, Shape s) { return store.add(name, Tensor<T>(s), false, false); };
    auto norm = [&](const std::string& name, Tensor<T>& g, Tensor<T>& b) {
      g = store.add(name + ".gamma", Tensor<T>({d}, T(1)), false, false);
      b = store.add(name + ".beta", Tensor<T>({d}), false, false);
      ln_names_.push_back(name + ".gamma");
      ln_names_.push_back(name + ".beta");
    };

    patch_w_ = frozen("backbone.patch_embed.weight", {d, 3, p, p});
    patch_b_ = frozen_zero("backbone.patch_embed.bias", {d});
    pos_ = frozen("backbone.pos_embed", {cfg_.num_patches(), d});
    if (cfg_.use_cls_token) cls_ = frozen("backbone.cls_token", {1, d});
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      const std::string pre = "backbone.block" + std::to_string(i);
      Block b;
      norm(pre + ".ln1", b.ln1_g, b.ln1_b);
      b.qkv_w = frozen(pre + ".attn.qkv.weight", {d, 3 * d});
      b.qkv_b = frozen_zero(pre + ".attn.qkv.bias", {3 * d});
      b.proj_w = frozen(pre + ".attn.proj.weight", {d, d});
      b.proj_b = frozen_zero(pre + ".attn.proj.bias", {d});
      norm(pre + ".ln2", b.ln2_g, b.ln2_b);
      b.fc1_w = frozen(pre + ".mlp.fc1.weight", {d, hidden});
      b.fc1_b = frozen_zero(pre + ".mlp.fc1.bias", {hidden});
      b.fc2_w = frozen(pre + ".mlp.fc2.weight", {hidden, d});
      b.fc2_b = frozen_zero(pre + ".mlp.fc2.bias", {d});
      blocks_.push_back(b);
    }
    norm("backbone.norm", norm_g_, norm_b_);
    if (cfg_.num_meta_tokens > 0) {
      auto meta_rng = substream(seed, "backbone.meta_tokens");
      meta_ = store.add("backbone.meta_tokens", trunc_normal<T>({cfg_.num_meta_tokens, d}, 0.02, meta_rng), false,
                        false);
    }
  }

  const ViTConfig& config() const { return cfg_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  /// Makes exactly the LayerNorm parameters (if `ln_tuning`) and the meta
  /// tokens (if `meta_tuning`) trainable; returns the sorted trainable
  /// backbone names.
  std::vector<std::string> set_freeze_policy(ParamStore<T>& store, bool ln_tuning = true,
                                             bool meta_tuning = true) const {
    std::vector<std::string> manifest;
    for (auto& [name, p] : store) {
      if (name.rfind("backbone.", 0) != 0) continue;
      const bool is_ln = std::find(ln_names_.begin(), ln_names_.end(), name) != ln_names_.end();
      const bool on = (is_ln && ln_tuning) || (meta_tuning && name == "backbone.meta_tokens");
      ParamStore<T>::set_trainable(p, on);
      if (on) manifest.push_back(name);
    }
    return manifest;
  }

  const std::vector<std::string>& layer_norm_names() const { return ln_names_; }

  /// Non-overlapping patch projection plus positional embedding: [B, g*g, d].
  Tensor<T> patch_embed(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != cfg_.image_size || image.dim(3) != cfg_.image_size)
      throw DimensionError("patch_embed: expected [B,3," + std::to_string(cfg_.image_size) + "," +
                           std::to_string(cfg_.image_size) + "], got " + shape_str(image.shape()));
    const std::size_t b = image.dim(0), g = cfg_.grid(), d = cfg_.embed_dim;
    auto x = conv2d(image, patch_w_, patch_b_, cfg_.patch_size, 0);
    x = permute(reshape(x, {b, d, g * g}), {0, 2, 1});
    return add(x, pos_);
  }

  /// Runs every block on [meta | cls | patches] and records one tap per block.
  BackboneOutput<T> forward(const Tensor<T>& image) const {
    const std::size_t b = image.dim(0);
    auto patches = patch_embed(image);
    std::vector<Tensor<T>> seq;
    if (meta_) seq.push_back(broadcast_leading(meta_, b));
    if (cls_) seq.push_back(broadcast_leading(cls_, b));
    seq.push_back(patches);
    Tensor<T> x = seq.size() == 1 ? patches : concat(seq, 1);

    BackboneOutput<T> out;
    const std::size_t n_meta = cfg_.num_meta_tokens, prefix = cfg_.prefix_len(), s = cfg_.seq_len();
    for (const auto& blk : blocks_) {
      x = block_forward(blk, x);
      IntermediateTap<T> tap;
      if (n_meta > 0) tap.meta = slice(x, 1, 0, n_meta);
      tap.patch = prefix > 0 ? slice(x, 1, prefix, s) : x;
      out.taps.push_back(std::move(tap));
    }
    out.final_tokens = layer_norm(x, norm_g_, norm_b_, static_cast<T>(cfg_.ln_eps));
    return out;
  }

  /// Pre-norm transformer block: x + MHSA(LN(x)), then + MLP(LN(.)).
  Tensor<T> block_forward(const Block& blk, const Tensor<T>& x) const {
    const std::size_t h = cfg_.num_heads;
    const T eps = static_cast<T>(cfg_.ln_eps);
    auto qkv = linear(layer_norm(x, blk.ln1_g, blk.ln1_b, eps), blk.qkv_w, blk.qkv_b);
    auto ctx = self_attention(qkv, h);
    auto y = add(x, linear(ctx, blk.proj_w, blk.proj_b));
    auto hidden = gelu(linear(layer_norm(y, blk.ln2_g, blk.ln2_b, eps), blk.fc1_w, blk.fc1_b));
    return add(y, linear(hidden, blk.fc2_w, blk.fc2_b));
  }

  /// Mean of the final-normalized patch tokens: [B, d].
  Tensor<T> pooled_patches(const BackboneOutput<T>& out) const {
    const std::size_t prefix = cfg_.prefix_len();
    auto patches = prefix > 0 ? slice(out.final_tokens, 1, prefix, cfg_.seq_len()) : out.final_tokens;
    return mean_axis(patches, 1);
  }

  Tensor<T> meta_tokens() const { return meta_; }

 private:
  ViTConfig cfg_;
  Tensor<T> patch_w_, patch_b_, pos_, cls_, meta_, norm_g_, norm_b_;
  std::vector<Block> blocks_;
  std::vector<std::string> ln_names_;
};

}  // namespace hst
