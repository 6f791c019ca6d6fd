#pragma once

// Full hierarchical side-tuning model: frozen backbone, bridge, side network
// and a classification head reading the stride-32 map.

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hst/side_net.hpp"

namespace hst {

struct ModelConfig {
  ViTConfig backbone;
  HSNConfig hsn;
  bool hsn_enabled = true;  // false: pooled-backbone linear probe, head only
  bool ln_tuning = true;
  bool weight_sharing = true;
  bool bridge_bias = true;
  std::size_t num_classes = 10;
  // Per-channel input normalization applied inside the model; images are in [0, 1].
  std::array<double, 3> pixel_mean{0.485, 0.456, 0.406};
  std::array<double, 3> pixel_std{0.229, 0.224, 0.225};
  std::uint64_t seed = 0;

  void validate() const {
    backbone.validate();
    if (hsn_enabled) hsn.validate(backbone);
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    for (double s : pixel_std)
      if (!(s > 0)) throw ConfigError("data.pixel_std entries must be positive");
  }
};

/// ViT-B/16 backbone at 224 pixels with the default side network.
inline ModelConfig vit_base_config() {
  ModelConfig c;
  c.backbone.image_size = 224;
  c.backbone.patch_size = 16;
  c.backbone.embed_dim = 768;
  c.backbone.depth = 12;
  c.backbone.num_heads = 12;
  return c;
}

/// Trainable parameter counts per component plus frozen totals.
struct ParamReport {
  std::map<std::string, std::size_t> trainable_by_component;  // backbone.ln, backbone.meta, bridge, hsn, head
  std::size_t total_trainable = 0;
  std::size_t total_frozen = 0;
  std::size_t distinct_projections = 0;

  std::size_t total() const { return total_trainable + total_frozen; }
  double trainable_fraction() const {
    return total() ? static_cast<double>(total_trainable) / static_cast<double>(total()) : 0.0;
  }
};

template <class T>
class HSTModel {
 public:
  explicit HSTModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    backbone_.emplace(cfg_.backbone, store_, cfg_.seed);
    std::size_t head_in = cfg_.backbone.embed_dim;
    if (cfg_.hsn_enabled) {
      bridge_.emplace(cfg_.backbone, cfg_.hsn.stage_dims, cfg_.weight_sharing, cfg_.bridge_bias, store_, cfg_.seed);
      side_.emplace(cfg_.backbone, cfg_.hsn, store_, cfg_.seed);
      head_in = cfg_.hsn.stage_dims.back();
    }
    auto rng = substream(cfg_.seed, "head");
    head_w_ = store_.add("head.weight", trunc_normal<T>({head_in, cfg_.num_classes}, 0.02, rng), true);
    head_b_ = store_.add("head.bias", Tensor<T>({cfg_.num_classes}), true, false);
    // Without the side network the model is a linear probe: only the head trains.
    backbone_manifest_ = backbone_->set_freeze_policy(store_, cfg_.ln_tuning && cfg_.hsn_enabled, cfg_.hsn_enabled);
  }

  HSTModel(const HSTModel&) = delete;
  HSTModel& operator=(const HSTModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const Backbone<T>& backbone() const { return *backbone_; }
  const Bridge<T>* bridge() const { return bridge_ ? &*bridge_ : nullptr; }
  const SideNet<T>* side_net() const { return side_ ? &*side_ : nullptr; }

  /// Trainable backbone names as returned by the freeze policy.
  const std::vector<std::string>& backbone_manifest() const { return backbone_manifest_; }

  /// (x - mean_c) / std_c per channel. The image is data, never a leaf.
  Tensor<T> normalize(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != 3)
      throw DimensionError("expected [B,3,H,W] image batch, got " + shape_str(image.shape()));
    Tensor<T> out(image.shape());
    const std::size_t plane = image.dim(2) * image.dim(3);
    for (std::size_t b = 0; b < image.dim(0); ++b)
      for (std::size_t c = 0; c < 3; ++c) {
        const T m = static_cast<T>(cfg_.pixel_mean[c]), s = static_cast<T>(cfg_.pixel_std[c]);
        const std::size_t off = (b * 3 + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) out[off + i] = (image[off + i] - m) / s;
      }
    return out;
  }

  FeaturePyramid<T> forward_pyramid(const Tensor<T>& image) const {
    if (!side_) throw ConfigError("forward_pyramid: side network disabled in this configuration");
    auto x = normalize(image);
    return pyramid_from(x, backbone_->forward(x));
  }

  /// Logits [B, num_classes].
  Tensor<T> forward_classify(const Tensor<T>& image) const {
    auto x = normalize(image);
    auto bb = backbone_->forward(x);
    if (!side_) return head(backbone_->pooled_patches(bb));
    return head(global_avg_pool(pyramid_from(x, bb).p32()));
  }

  /// Linear classifier on pooled features [B, in].
  Tensor<T> head(const Tensor<T>& pooled) const { return linear(pooled, head_w_, head_b_); }

  /// Bridge and side network on precomputed backbone output.
  FeaturePyramid<T> pyramid_from(const Tensor<T>& normalized, const BackboneOutput<T>& bb) const {
    if (!side_) throw ConfigError("pyramid_from: side network disabled in this configuration");
    std::vector<BridgeOutput<T>> bridged;
    bridged.reserve(bb.taps.size());
    for (std::size_t i = 0; i < bb.taps.size(); ++i)
      bridged.push_back(bridge_->forward(bb.taps[i], i, cfg_.hsn.global_t, cfg_.hsn.fg_injection));
    return side_->forward(normalized, bridged);
  }

  ParamReport param_report() const {
    ParamReport r;
    for (const auto& [name, p] : store_) {
      const std::size_t n = p.value.numel();
      if (!p.trainable) {
        r.total_frozen += n;
        continue;
      }
      r.total_trainable += n;
      std::string comp;
      if (name == "backbone.meta_tokens")
        comp = "backbone.meta";
      else if (name.rfind("backbone.", 0) == 0)
        comp = "backbone.ln";
      else
        comp = name.substr(0, name.find('.'));
      r.trainable_by_component[comp] += n;
    }
    r.distinct_projections = bridge_ ? bridge_->projection_count() : 0;
    return r;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  std::optional<Backbone<T>> backbone_;
  std::optional<Bridge<T>> bridge_;
  std::optional<SideNet<T>> side_;
  Tensor<T> head_w_, head_b_;
  std::vector<std::string> backbone_manifest_;
};

}  // namespace hst
