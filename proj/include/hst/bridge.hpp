#pragma once

// Adaptive feature bridge: projects a backbone tap to a side-network stage
// width and splits it into meta-global tokens and a fine-grained map.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "hst/backbone.hpp"

namespace hst {

inline constexpr std::size_t kNumStages = 4;

/// Stride of stage j (0-based): 4, 8, 16, 32.
inline constexpr std::size_t stage_stride(std::size_t j) { return std::size_t{4} << j; }

struct StageProjection {
  std::size_t stage = 0;
  std::string weight_name, bias_name;
};

template <class T>
struct BridgeOutput {
  Tensor<T> meta_global;   // [B, M, d_j]; undefined when M == 0
  Tensor<T> fine_grained;  // [B, d_j, H_j, W_j]; undefined when not requested
};

template <class T>
class Bridge {
 public:
  Bridge(const ViTConfig& vit, const std::array<std::size_t, kNumStages>& stage_dims, bool shared, bool bias,
         ParamStore<T>& store, std::uint64_t seed)
      : vit_(vit), dims_(stage_dims), shared_(shared) {
    auto rng = substream(seed, "bridge");
    const std::size_t per_stage = vit.depth / kNumStages;
    const std::size_t count = shared ? kNumStages : vit.depth;
    for (std::size_t p = 0; p < count; ++p) {
      const std::size_t j = shared ? p : p / per_stage;
      const std::string pre = shared ? "bridge.stage" + std::to_string(j) + ".proj"
                                     : "bridge.block" + std::to_string(p) + ".proj";
      Proj proj;
      proj.meta.stage = j;
      proj.meta.weight_name = pre + ".weight";
      proj.w = store.add(proj.meta.weight_name, trunc_normal<T>({vit.embed_dim, dims_[j]}, 0.02, rng), true);
      if (bias) {
        proj.meta.bias_name = pre + ".bias";
        proj.b = store.add(proj.meta.bias_name, Tensor<T>({dims_[j]}), true, false);
      }
      projs_.push_back(proj);
    }
  }

  /// Number of distinct projection maps: 4 when shared, L otherwise.
  std::size_t projection_count() const { return projs_.size(); }
  bool shared() const { return shared_; }

  /// Projection used by backbone block `block` (0-based).
  const StageProjection& projection_for(std::size_t block) const { return projs_.at(index_for(block)).meta; }

  std::size_t stage_of(std::size_t block) const { return block / (vit_.depth / kNumStages); }

  /// Dual-branch separation of one tap. The linear projection is applied
  /// before pooling and before interpolation.
  BridgeOutput<T> forward(const IntermediateTap<T>& tap, std::size_t block, bool global_token,
                          bool fine_grained) const {
    const auto& proj = projs_.at(index_for(block));
    const std::size_t j = proj.meta.stage;
    const std::size_t b = tap.patch.dim(0), count = tap.patch.dim(1), dj = dims_[j];
    const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(count))));
    if (g * g != count)
      throw LayoutError("bridge: " + std::to_string(count) + " patch tokens do not form a square grid");

    BridgeOutput<T> out;
    auto projected = linear(tap.patch, proj.w, proj.b);  // [B, g*g, d_j]
    std::vector<Tensor<T>> mg;
    if (tap.meta) mg.push_back(linear(tap.meta, proj.w, proj.b));
    if (global_token) mg.push_back(mean_axis(projected, 1, true));
    if (!mg.empty()) out.meta_global = mg.size() == 1 ? mg.front() : concat(mg, 1);
    if (fine_grained) {
      const std::size_t res = vit_.image_size / stage_stride(j);
      auto grid = reshape(permute(projected, {0, 2, 1}), {b, dj, g, g});
      out.fine_grained = bilinear_resize(grid, res, res);
    }
    return out;
  }

 private:
  struct Proj {
    StageProjection meta;
    Tensor<T> w, b;
  };

  std::size_t index_for(std::size_t block) const {
    if (block >= vit_.depth) throw WiringError("bridge: block index " + std::to_string(block) + " out of range");
    return shared_ ? stage_of(block) : block;
  }

  ViTConfig vit_;
  std::array<std::size_t, kNumStages> dims_;
  bool shared_;
  std::vector<Proj> projs_;
};

}  // namespace hst
