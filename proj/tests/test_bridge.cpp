#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace hst;

namespace {

const std::array<std::size_t, 4> kDims{16, 32, 64, 128};

ViTConfig vit(std::size_t image = 32, std::size_t patch = 4, std::size_t depth = 8, std::size_t n = 1) {
  ViTConfig c;
  c.image_size = image;
  c.patch_size = patch;
  c.depth = depth;
  c.num_meta_tokens = n;
  return c;
}

IntermediateTap<double> random_tap(const ViTConfig& c, std::size_t b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  IntermediateTap<double> t;
  if (c.num_meta_tokens) t.meta = oracle::randn({b, c.num_meta_tokens, c.embed_dim}, rng);
  t.patch = oracle::randn({b, c.num_patches(), c.embed_dim}, rng);
  return t;
}

// Projection x W + b applied to one d-vector.
std::vector<double> project(const ParamStore<double>& s, const std::string& pre, std::span<const double> x,
                            std::size_t dj) {
  const auto& w = s.at(pre + ".weight").value;
  const auto& b = s.at(pre + ".bias").value;
  std::vector<double> out(dj);
  for (std::size_t o = 0; o < dj; ++o) {
    double acc = b[o];
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w[i * dj + o];
    out[o] = acc;
  }
  return out;
}

void randomize_biases(ParamStore<double>& s) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  for (auto& [name, p] : s)
    if (name.find(".bias") != std::string::npos)
      for (auto& v : p.value.data()) v = nd(rng);
}

}  // namespace

TEST(Bridge, GlobalTokenOfEqualPatchesIsTheirProjection) {
  auto c = vit();
  ParamStore<double> s;
  Bridge<double> br(c, kDims, true, true, s, 0);
  randomize_biases(s);
  auto tap = random_tap(c, 1, 1);
  for (std::size_t p = 0; p < c.num_patches(); ++p)
    for (std::size_t e = 0; e < c.embed_dim; ++e) tap.patch[p * c.embed_dim + e] = tap.patch[e];
  auto out = br.forward(tap, 5, true, false);
  ASSERT_EQ(out.meta_global.shape(), (Shape{1, 2, 64}));
  auto expect = project(s, "bridge.stage2.proj", tap.patch.data().subspan(0, 64), 64);
  for (std::size_t o = 0; o < 64; ++o) EXPECT_NEAR(out.meta_global[64 + o], expect[o], 1e-12);
}

TEST(Bridge, GlobalTokenCommutesWithProjection) {
  auto c = vit(32, 4, 8, 2);
  ParamStore<double> s;
  Bridge<double> br(c, kDims, true, true, s, 0);
  randomize_biases(s);
  auto tap = random_tap(c, 2, 2);
  for (std::size_t block = 0; block < 8; ++block) {
    const std::size_t j = br.stage_of(block), dj = kDims[j];
    auto out = br.forward(tap, block, true, false);
    ASSERT_EQ(out.meta_global.dim(1), 3u);  // M = N + 1
    for (std::size_t b = 0; b < 2; ++b) {
      std::vector<double> mean_patch(64, 0.0);
      for (std::size_t p = 0; p < 64; ++p)
        for (std::size_t e = 0; e < 64; ++e) mean_patch[e] += tap.patch[(b * 64 + p) * 64 + e] / 64.0;
      auto expect = project(s, "bridge.stage" + std::to_string(j) + ".proj", mean_patch, dj);
      for (std::size_t o = 0; o < dj; ++o) EXPECT_NEAR(out.meta_global[(b * 3 + 2) * dj + o], expect[o], 1e-6);
      // meta rows are the projected meta tokens
      for (std::size_t n = 0; n < 2; ++n) {
        auto m = project(s, "bridge.stage" + std::to_string(j) + ".proj",
                         tap.meta.data().subspan((b * 2 + n) * 64, 64), dj);
        for (std::size_t o = 0; o < dj; ++o) EXPECT_NEAR(out.meta_global[(b * 3 + n) * dj + o], m[o], 1e-12);
      }
    }
  }
}

TEST(Bridge, FineGrainedMapAtGridResolutionIsExactReshape) {
  auto c = vit(64, 16, 8, 1);  // g = 4, stage 2 (stride 16) is also 4x4
  ParamStore<double> s;
  Bridge<double> br(c, kDims, true, true, s, 0);
  auto tap = random_tap(c, 2, 3);
  auto out = br.forward(tap, 4, true, true);
  ASSERT_EQ(out.fine_grained.shape(), (Shape{2, 64, 4, 4}));
  auto proj = linear(tap.patch, s.at("bridge.stage2.proj.weight").value, s.at("bridge.stage2.proj.bias").value);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t ch = 0; ch < 64; ++ch)
      for (std::size_t p = 0; p < 16; ++p)
        EXPECT_EQ(out.fine_grained[(b * 64 + ch) * 16 + p], proj[(b * 16 + p) * 64 + ch]);
}

TEST(Bridge, StageResolutionsFor224) {
  ViTConfig c = vit(224, 16, 4, 1);
  c.embed_dim = 32;
  c.num_heads = 2;
  ParamStore<double> s;
  Bridge<double> br(c, kDims, true, true, s, 0);
  auto tap = random_tap(c, 1, 4);
  const std::size_t expect[4] = {56, 28, 14, 7};
  for (std::size_t block = 0; block < 4; ++block) {
    auto out = br.forward(tap, block, true, true);
    EXPECT_EQ(out.fine_grained.shape(), (Shape{1, kDims[block], expect[block], expect[block]}));
  }
}

TEST(Bridge, NonSquareTokenCountIsALayoutError) {
  auto c = vit();
  ParamStore<double> s;
  Bridge<double> br(c, kDims, true, true, s, 0);
  IntermediateTap<double> tap;
  tap.patch = Tensor<double>({1, 60, 64});
  EXPECT_THROW(br.forward(tap, 0, true, true), LayoutError);
}

TEST(Bridge, ProjectionCountAndParameterDelta) {
  for (std::size_t depth : {8u, 12u, 16u}) {
    auto c = vit(32, 4, depth, 1);
    ParamStore<float> a, b;
    Bridge<float> shared(c, kDims, true, true, a, 0);
    Bridge<float> separate(c, kDims, false, true, b, 0);
    EXPECT_EQ(shared.projection_count(), 4u);
    EXPECT_EQ(separate.projection_count(), depth);
    auto count = [](const ParamStore<float>& st) {
      std::size_t n = 0;
      for (const auto& [_, p] : st) n += p.value.numel();
      return n;
    };
    std::size_t delta = 0;
    for (auto dj : kDims) delta += (depth / 4 - 1) * (64 * dj + dj);
    EXPECT_EQ(count(b) - count(a), delta);
    if (depth == 12) {
      EXPECT_EQ(separate.projection_count(), 12u);
    }
  }
}

TEST(Bridge, SharingTiesBlocksWithinAStage) {
  auto c = vit();
  auto tap = random_tap(c, 1, 5);
  for (bool shared : {true, false}) {
    ParamStore<double> s;
    Bridge<double> br(c, kDims, shared, true, s, 0);
    auto b4 = br.forward(tap, 4, true, false).meta_global.clone();
    auto b5 = br.forward(tap, 5, true, false).meta_global.clone();
    auto w = s.at(br.projection_for(4).weight_name).value;
    for (auto& v : w.data()) v *= 2;
    auto a4 = br.forward(tap, 4, true, false).meta_global;
    auto a5 = br.forward(tap, 5, true, false).meta_global;
    bool changed5 = false;
    for (std::size_t i = 0; i < a5.numel(); ++i) changed5 |= a5[i] != b5[i];
    bool changed4 = false;
    for (std::size_t i = 0; i < a4.numel(); ++i) changed4 |= a4[i] != b4[i];
    EXPECT_TRUE(changed4);
    EXPECT_EQ(changed5, shared);
    if (shared) {
      for (std::size_t i = 0; i < a4.numel(); ++i) EXPECT_EQ(a4[i], a5[i]);
    }
  }
}

TEST(Bridge, MetaBranchIsLinearWithoutBias) {
  auto c = vit();
  ParamStore<double> s;
  Bridge<double> br(c, kDims, true, false, s, 0);
  auto tap = random_tap(c, 1, 6);
  auto base = br.forward(tap, 2, true, false).meta_global;
  IntermediateTap<double> scaled{scale(tap.meta, 3.0), scale(tap.patch, 3.0)};
  auto out = br.forward(scaled, 2, true, false).meta_global;
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], 3.0 * base[i], 1e-12);
}

TEST(Bridge, ZeroMetaGlobalTokensWhenBothSourcesAreOff) {
  auto c = vit(32, 4, 8, 0);
  ParamStore<double> s;
  Bridge<double> br(c, kDims, true, true, s, 0);
  auto out = br.forward(random_tap(c, 1, 7), 0, false, true);
  EXPECT_FALSE(out.meta_global.defined());
  EXPECT_TRUE(out.fine_grained.defined());
}
