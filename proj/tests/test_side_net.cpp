#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace hst;
using V = std::vector<Tensor<double>>;

namespace {

std::mt19937_64& rng() {
  static std::mt19937_64 r(21);
  return r;
}

Tensor<double> rnd(Shape s, double sd = 1.0) { return oracle::randn(std::move(s), rng(), sd); }

CrossAttentionWeights<double> attn_weights(std::size_t d) {
  CrossAttentionWeights<double> w;
  w.norm_g = add(Tensor<double>({d}, 1.0), rnd({d}, 0.1));
  w.norm_b = rnd({d}, 0.1);
  w.wq = rnd({d, d}, 0.3);
  w.bq = rnd({d}, 0.1);
  w.wk = rnd({d, d}, 0.3);
  w.bk = rnd({d}, 0.1);
  w.wv = rnd({d, d}, 0.3);
  w.bv = rnd({d}, 0.1);
  w.wo = rnd({d, d}, 0.3);
  w.bo = rnd({d}, 0.1);
  return w;
}

SideBlockWeights<double> block_weights(std::size_t d, std::size_t ratio = 4) {
  SideBlockWeights<double> w;
  w.attn = attn_weights(d);
  w.norm_g = add(Tensor<double>({d}, 1.0), rnd({d}, 0.1));
  w.norm_b = rnd({d}, 0.1);
  w.fc1_w = rnd({d, d * ratio}, 0.3);
  w.fc1_b = rnd({d * ratio}, 0.1);
  w.fc2_w = rnd({d * ratio, d}, 0.3);
  w.fc2_b = rnd({d}, 0.1);
  return w;
}

std::vector<Tensor<double>*> block_params(SideBlockWeights<double>& w) {
  return {&w.attn.norm_g, &w.attn.norm_b, &w.attn.wq, &w.attn.bq, &w.attn.wk, &w.attn.bk, &w.attn.wv,
          &w.attn.bv,     &w.attn.wo,     &w.attn.bo, &w.norm_g,  &w.norm_b,  &w.fc1_w,   &w.fc1_b,
          &w.fc2_w,       &w.fc2_b};
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

ViTConfig vit(std::size_t image = 32, std::size_t patch = 4, std::size_t depth = 8) {
  ViTConfig c;
  c.image_size = image;
  c.patch_size = patch;
  c.depth = depth;
  return c;
}

}  // namespace

TEST(Stem, ShapeAndZeroInput) {
  ParamStore<double> s;
  SideNet<double> net(vit(), HSNConfig{}, s, 0);
  EXPECT_EQ(net.conv_stem(rnd({2, 3, 32, 32})).shape(), (Shape{2, 16, 8, 8}));
  const auto zero = net.conv_stem(Tensor<double>({1, 3, 32, 32}));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(net.conv_stem(rnd({1, 3, 30, 30})), DimensionError);
}

TEST(Stem, GradientMatchesFiniteDifferences) {
  ParamStore<double> s;
  SideNet<double> net(vit(), HSNConfig{}, s, 0);
  auto img = rnd({1, 3, 8, 8});
  V leaves{s.at("hsn.stem.conv1.weight").value, s.at("hsn.stem.conv1.bias").value,
           s.at("hsn.stem.conv2.weight").value, s.at("hsn.stem.conv2.bias").value};
  EXPECT_LT(oracle::max_fd_error(leaves, [&](const V&) { return net.conv_stem(img); }), 1e-3);
}

TEST(CrossAttention, LowRankOrderMatchesMaterializedMatrix) {
  for (std::size_t lq : {16u, 100u, 1024u})
    for (std::size_t m : {1u, 2u, 9u})
      for (std::size_t d : {16u, 64u})
        for (auto kind : {AttentionKind::softmax, AttentionKind::bilinear}) {
          auto q = rnd({1, lq, d}, 0.3), k = rnd({1, m, d}, 0.3), v = rnd({1, m, d});
          auto out = attention_core(q, k, v, kind);
          auto ref = oracle::naive_attention(values(q), values(k), values(v), lq, m, d, kind == AttentionKind::softmax);
          double worst = 0;
          for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(out[i] - ref[i]));
          EXPECT_LT(worst, 1e-6) << lq << " " << m << " " << d;
        }
}

TEST(CrossAttention, SingleKeyClosedForm) {
  const std::size_t d = 8;
  auto w = attn_weights(d);
  auto f = rnd({2, 5, d}), mg = rnd({2, 1, d});
  auto out = cross_attention(w, f, mg, 1);
  for (std::size_t b = 0; b < 2; ++b) {
    // softmax over one key is 1, so every query receives Wo (Wv k + bv) + bo
    std::vector<double> vk(d), o(d);
    for (std::size_t j = 0; j < d; ++j) {
      vk[j] = w.bv[j];
      for (std::size_t i = 0; i < d; ++i) vk[j] += mg[b * d + i] * w.wv[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = w.bo[j];
      for (std::size_t i = 0; i < d; ++i) o[j] += vk[i] * w.wo[i * d + j];
    }
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t j = 0; j < d; ++j)
        EXPECT_NEAR(out[(b * 5 + t) * d + j], f[(b * 5 + t) * d + j] + o[j], 1e-12);
  }
}

TEST(CrossAttention, ZeroValuesLeavePureResidual) {
  auto w = attn_weights(16);
  w.wv = Tensor<double>({16, 16});
  w.bv = Tensor<double>({16});
  w.bo = Tensor<double>({16});
  auto f = rnd({2, 10, 16});
  auto out = cross_attention(w, f, rnd({2, 3, 16}), 1);
  EXPECT_EQ(values(out), values(f));
}

TEST(CrossAttention, ZeroKeysIsAConfigError) {
  auto w = attn_weights(4);
  EXPECT_THROW(cross_attention(w, rnd({1, 3, 4}), Tensor<double>(), 1), ConfigError);
}

TEST(CrossAttention, MultiHeadMatchesPerHeadOracle) {
  const std::size_t d = 16, heads = 4, dh = 4, lq = 6, m = 3;
  auto w = attn_weights(d);
  auto f = rnd({1, lq, d}), mg = rnd({1, m, d});
  auto out = cross_attention(w, f, mg, heads);
  auto q = linear(layer_norm(f, w.norm_g, w.norm_b, 1e-5), w.wq, w.bq);
  auto k = linear(mg, w.wk, w.bk), v = linear(mg, w.wv, w.bv);
  std::vector<double> ctx(lq * d);
  for (std::size_t h = 0; h < heads; ++h) {
    auto part = [&](const Tensor<double>& t, std::size_t n) {
      std::vector<double> r(n * dh);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t e = 0; e < dh; ++e) r[i * dh + e] = t[i * d + h * dh + e];
      return r;
    };
    auto o = oracle::naive_attention(part(q, lq), part(k, m), part(v, m), lq, m, dh, true);
    for (std::size_t i = 0; i < lq; ++i)
      for (std::size_t e = 0; e < dh; ++e) ctx[i * d + h * dh + e] = o[i * dh + e];
  }
  auto ref = add(f, linear(Tensor<double>({1, lq, d}, ctx), w.wo, w.bo));
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(CrossAttention, AnalyticCostIsLinearInQueryLength) {
  for (std::size_t lq : {64u, 300u}) {
    FlopCounter fc;
    {
      FlopScope scope(fc);
      attention_core(rnd({2, lq, 16}), rnd({2, 3, 16}), rnd({2, 3, 16}), AttentionKind::softmax);
    }
    EXPECT_EQ(fc.total(), attention_core_flops(2, lq, 3, 16));
    EXPECT_EQ(attention_core_flops(2, 2 * lq, 3, 16), 2 * attention_core_flops(2, lq, 3, 16));
  }
}

TEST(SideBlock, ZeroedSubmodulesGiveResidualPlusInjection) {
  auto w = block_weights(16);
  w.attn.wv = Tensor<double>({16, 16});
  w.attn.bv = Tensor<double>({16});
  w.attn.bo = Tensor<double>({16});
  w.fc2_w = Tensor<double>({64, 16});
  w.fc2_b = Tensor<double>({16});
  auto f = rnd({2, 12, 16}), fg = rnd({2, 12, 16});
  auto out = side_block(w, f, rnd({2, 2, 16}), fg, 1);
  auto expect = add(f, fg);
  EXPECT_EQ(values(out), values(expect));
}

TEST(SideBlock, ZeroValueAttentionReducesToInjectionPlusFfn) {
  auto w = block_weights(16);
  w.attn.wv = Tensor<double>({16, 16});
  w.attn.bv = Tensor<double>({16});
  w.attn.bo = Tensor<double>({16});
  auto f = rnd({2, 12, 16}), fg = rnd({2, 12, 16});
  auto out = side_block(w, f, rnd({2, 2, 16}), fg, 1);
  auto x = add(f, fg);
  auto expect = add(x, linear(gelu(linear(layer_norm(x, w.norm_g, w.norm_b, 1e-5), w.fc1_w, w.fc1_b)), w.fc2_w,
                              w.fc2_b));
  EXPECT_EQ(values(out), values(expect));
}

TEST(SideBlock, MismatchedInjectionIsADimensionError) {
  auto w = block_weights(8);
  EXPECT_THROW(side_block(w, rnd({1, 16, 8}), rnd({1, 2, 8}), rnd({1, 4, 8}), 1), DimensionError);
}

TEST(SideBlock, GradientMatchesFiniteDifferences) {
  auto w = block_weights(8, 2);
  auto f = rnd({1, 6, 8}), mg = rnd({1, 2, 8}), fg = rnd({1, 6, 8});
  V leaves;
  for (auto* p : block_params(w)) leaves.push_back(*p);
  leaves.push_back(f);
  leaves.push_back(mg);
  leaves.push_back(fg);
  for (auto kind : {AttentionKind::softmax, AttentionKind::bilinear})
    EXPECT_LT(oracle::max_fd_error(leaves, [&](const V&) { return side_block(w, f, mg, fg, 2, kind); }), 1e-3);
}

TEST(Transition, ShapeSubsamplingAndErrors) {
  ParamStore<double> s;
  SideNet<double> net(vit(), HSNConfig{}, s, 0);
  EXPECT_EQ(net.stage_transition(rnd({2, 16, 8, 8}), 0).shape(), (Shape{2, 32, 4, 4}));
  EXPECT_THROW(net.stage_transition(rnd({1, 16, 7, 7}), 0), DimensionError);

  // kernel picking the top-left corner of each window, channel c -> c
  auto w = s.at("hsn.transition0.weight").value;
  std::fill(w.data().begin(), w.data().end(), 0.0);
  for (std::size_t c = 0; c < 16; ++c) w[((c * 16 + c) * 2 + 0) * 2 + 0] = 1.0;
  auto x = rnd({1, 16, 8, 8});
  auto y = net.stage_transition(x, 0);
  for (std::size_t c = 0; c < 16; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y[(c * 4 + i) * 4 + j], x[(c * 8 + 2 * i) * 8 + 2 * j]);
  for (std::size_t i = 16 * 16; i < y.numel(); ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(Transition, GradientMatchesFiniteDifferences) {
  HSNConfig h;
  h.stage_dims = {4, 6, 8, 10};
  ParamStore<double> s;
  SideNet<double> net(vit(), h, s, 0);
  auto x = rnd({1, 4, 4, 4});
  V leaves{s.at("hsn.transition0.weight").value, s.at("hsn.transition0.bias").value, x};
  EXPECT_LT(oracle::max_fd_error(leaves, [&](const V&) { return net.stage_transition(x, 0); }), 1e-5);
}

TEST(SideNet, PyramidFor224WithTwelveBlocks) {
  auto c = vit(224, 16, 12);
  c.embed_dim = 32;
  c.num_heads = 2;
  HSNConfig h;
  h.stage_dims = {8, 16, 24, 32};
  ParamStore<float> s;
  Bridge<float> br(c, h.stage_dims, true, true, s, 0);
  SideNet<float> net(c, h, s, 0);
  EXPECT_EQ(net.blocks_per_stage(), 3u);
  std::mt19937_64 r(1);
  auto img = oracle::randnf({1, 3, 224, 224}, r);
  std::vector<BridgeOutput<float>> bridged;
  for (std::size_t i = 0; i < 12; ++i) {
    IntermediateTap<float> tap{oracle::randnf({1, 1, 32}, r), oracle::randnf({1, 196, 32}, r)};
    bridged.push_back(br.forward(tap, i, true, true));
  }
  auto p = net.forward(img, bridged);
  const std::size_t res[4] = {56, 28, 14, 7};
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(p.maps[j].shape(), (Shape{1, h.stage_dims[j], res[j], res[j]}));
    EXPECT_TRUE(all_finite<float>(p.maps[j].data()));
  }
  auto again = net.forward(img, bridged);
  for (std::size_t j = 0; j < 4; ++j)
    EXPECT_TRUE(std::equal(p.maps[j].data().begin(), p.maps[j].data().end(), again.maps[j].data().begin()));

  bridged.pop_back();
  EXPECT_THROW(net.forward(img, bridged), WiringError);
}

TEST(SideNet, DisabledInjectionIgnoresFineGrainedMaps) {
  auto c = vit();
  HSNConfig h;
  h.fg_injection = false;
  ParamStore<double> s;
  SideNet<double> net(c, h, s, 0);
  auto img = rnd({1, 3, 32, 32});
  auto make = [&](double sd) {
    std::vector<BridgeOutput<double>> out;
    for (std::size_t i = 0; i < 8; ++i) {
      const std::size_t j = i / 2, r = 32 / (4u << j);
      out.push_back({rnd({1, 2, h.stage_dims[j]}, 0.0), rnd({1, h.stage_dims[j], r, r}, sd)});
    }
    return out;
  };
  auto a = net.forward(img, make(1.0));
  auto b = net.forward(img, make(5.0));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(values(a.maps[j]), values(b.maps[j]));
}

TEST(SideNet, ConfigValidation) {
  HSNConfig h;
  h.global_t = false;
  auto c = vit();
  c.num_meta_tokens = 0;
  EXPECT_THROW(h.validate(c), ConfigError);
  h.global_t = true;
  EXPECT_NO_THROW(h.validate(c));
  h.attn_heads = 3;
  EXPECT_THROW(h.validate(c), ConfigError);
}
