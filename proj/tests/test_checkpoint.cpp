#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "oracles.hpp"

using namespace hst;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.backbone.depth = 4;
  return c;
}

std::uint64_t reference_fnv(const std::vector<unsigned char>& b, std::size_t from, std::size_t to) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = from; i < to; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t le64(const std::vector<unsigned char>& b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[at + static_cast<std::size_t>(i)];
  return v;
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresEveryBit) {
  HSTModel<float> a(small());
  Trainer<float> t(a, TrainConfig{});
  std::mt19937_64 rng(1);
  std::vector<int> y{1, 2};
  t.step(oracle::randnf({2, 3, 32, 32}, rng), y);
  auto ck = snapshot(a.params(), 42, 1);
  const auto path = (std::filesystem::temp_directory_path() / "hst_test_round.hstc").string();
  write_checkpoint(path, ck);
  auto back = read_checkpoint(path);
  std::remove(path.c_str());
  EXPECT_EQ(back.config_hash, 42u);
  EXPECT_EQ(back.step, 1u);
  EXPECT_EQ(back.entries, ck.entries);

  ModelConfig other = small();
  other.seed = 9;
  HSTModel<float> b(other);
  restore(b.params(), back);
  EXPECT_EQ(snapshot(b.params(), 42, 1).entries, ck.entries);
  auto x = oracle::randnf({1, 3, 32, 32}, rng);
  auto la = a.forward_classify(x), lb = b.forward_classify(x);
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la[i], lb[i]);
}

TEST(Checkpoint, LayoutAndChecksum) {
  Checkpoint c{7, 3, {}};
  c.entries["a"] = to_record(Tensor<float>({2}, std::vector<float>{1.0f, -2.0f}));
  c.entries["b"] = to_record(Tensor<double>({1, 1}, std::vector<double>{0.5}));
  auto bytes = encode_checkpoint(c);
  const std::size_t expect = kCheckpointHeaderBytes + (4 + 1 + 1 + 4 + 8 + 8) + (4 + 1 + 1 + 4 + 16 + 8) + 8;
  ASSERT_EQ(bytes.size(), expect);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HSTC");
  EXPECT_EQ(le64(bytes, 8), 7u);
  EXPECT_EQ(le64(bytes, 16), 3u);
  EXPECT_EQ(le64(bytes, bytes.size() - 8), reference_fnv(bytes, kCheckpointHeaderBytes, bytes.size() - 8));
  auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.entries.at("b").dtype, DType::f64);
  EXPECT_EQ(back.entries, c.entries);
}

TEST(Checkpoint, FlippedByteIsDetected) {
  Checkpoint c{1, 0, {}};
  c.entries["w"] = to_record(Tensor<float>({4}, 1.0f));
  auto bytes = encode_checkpoint(c);
  for (std::size_t at : {kCheckpointHeaderBytes + 2, bytes.size() - 12}) {
    auto bad = bytes;
    bad[at] ^= 0x40;
    try {
      decode_checkpoint(bad);
      FAIL() << at;
    } catch (const FormatError& e) {
      EXPECT_EQ(e.offset(), bytes.size() - 8);
    }
  }
}

TEST(Checkpoint, TruncationAndBadHeaders) {
  Checkpoint c{1, 0, {}};
  c.entries["w"] = to_record(Tensor<float>({4}, 1.0f));
  auto bytes = encode_checkpoint(c);
  EXPECT_THROW(decode_checkpoint(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 20)), FormatError);
  EXPECT_THROW(decode_checkpoint(std::vector<unsigned char>(bytes.begin(), bytes.end() - 3)), FormatError);
  auto magic = bytes;
  magic[1] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);
  auto version = bytes;
  version[4] = 2;
  try {
    decode_checkpoint(version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Checkpoint, RestoreRequiresMatchingNamesAndShapes) {
  HSTModel<float> m(small());
  auto ck = snapshot(m.params(), 0, 0);
  auto missing = ck;
  missing.entries.erase("head.bias");
  EXPECT_THROW(restore(m.params(), missing), AuditError);
  auto extra = ck;
  extra.entries["ghost"] = to_record(Tensor<float>({1}));
  EXPECT_THROW(restore(m.params(), extra), AuditError);
  auto shape = ck;
  shape.entries["head.bias"] = to_record(Tensor<float>({3}));
  EXPECT_THROW(restore(m.params(), shape), DimensionError);
}

TEST(Checkpoint, PrecisionConversionOnRestore) {
  HSTModel<double> d(small());
  HSTModel<float> f(small());
  restore(f.params(), snapshot(d.params(), 0, 0));
  const auto& wd = d.params().at("head.weight").value;
  const auto& wf = f.params().at("head.weight").value;
  for (std::size_t i = 0; i < wd.numel(); ++i) EXPECT_EQ(wf[i], static_cast<float>(wd[i]));
}
