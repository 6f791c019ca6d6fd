#pragma once

// Synthetic shape datasets and the HSTD binary dataset container.
//
// HSTD layout (little-endian):
//   0  char[4]  magic "HSTD"
//   4  u32      version (1)
//   8  u64      count
//   16 u32      channels
//   20 u32      height
//   24 u32      width
//   28 u32      label width in bytes (4)
//   32 f32[count * channels * height * width]  images, row-major NCHW
//   .. i32[count]                               labels

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hst/io.hpp"
#include "hst/param.hpp"
#include "hst/tensor.hpp"

namespace hst::data {

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 100;
  std::size_t image_size = 32;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::size_t count = 0;
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> images;
  std::vector<std::int32_t> labels;

  std::size_t image_numel() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(images).subspan(i * image_numel(), image_numel());
  }
};

enum class ShapeKind { square, disc, ring, cross, diamond };

/// Per-class rendering recipe. Shapes of one colour group have roughly
/// equal area so that mean colour alone does not identify the class.
struct ClassRecipe {
  ShapeKind shape;
  std::array<float, 3> color;
  int size;    // characteristic half-extent in pixels at 32x32
  int region;  // 0: anywhere, 1: left half, 2: right half
};

inline ClassRecipe class_recipe(std::size_t c) {
  static constexpr std::array<ShapeKind, 5> kShapes{ShapeKind::square, ShapeKind::disc, ShapeKind::ring,
                                                   ShapeKind::cross, ShapeKind::diamond};
  static constexpr std::array<std::array<float, 3>, 2> kColors{{{0.9f, 0.3f, 0.2f}, {0.2f, 0.4f, 0.9f}}};
  // half-extents giving ~100 lit pixels for each shape at 32x32
  static constexpr std::array<int, 5> kSizes{5, 6, 8, 8, 7};
  const std::size_t s = c % kShapes.size();
  const std::size_t group = (c / kShapes.size()) % kColors.size();
  const int region = static_cast<int>((c / (kShapes.size() * kColors.size())) % 3);
  return {kShapes[s], kColors[group], kSizes[s], region};
}

inline bool shape_covers(ShapeKind k, int dy, int dx, int r) {
  switch (k) {
    case ShapeKind::square:
      return std::abs(dy) < r && std::abs(dx) < r;
    case ShapeKind::disc:
      return dy * dy + dx * dx < r * r;
    case ShapeKind::ring: {
      const int d2 = dy * dy + dx * dx;
      return d2 < r * r && d2 >= (r - 3) * (r - 3);
    }
    case ShapeKind::cross:
      return (std::abs(dy) < r && std::abs(dx) < 2) || (std::abs(dx) < r && std::abs(dy) < 2);
    case ShapeKind::diamond:
      return std::abs(dy) + std::abs(dx) < r;
  }
  return false;
}

/// Balanced, deterministic dataset: `samples_per_class` images per class,
/// ordered class-major. Pixels are clamped to [0, 1].
inline Dataset generate(const SyntheticSpec& spec, std::size_t patch_size = 0) {
  if (spec.num_classes < 2) throw ConfigError("data.num_classes must be at least 2");
  if (spec.image_size < 8) throw ConfigError("data.image_size must be at least 8");
  if (patch_size != 0 && spec.image_size % patch_size != 0)
    throw ConfigError("data.image_size (" + std::to_string(spec.image_size) +
                      ") is incompatible with backbone patch size " + std::to_string(patch_size));
  if (spec.noise_std < 0) throw ConfigError("data.noise_std must be non-negative");

  Dataset ds;
  ds.count = spec.num_classes * spec.samples_per_class;
  ds.height = ds.width = spec.image_size;
  ds.images.assign(ds.count * ds.image_numel(), 0.0f);
  ds.labels.resize(ds.count);
  const int n = static_cast<int>(spec.image_size);
  const double unit = static_cast<double>(n) / 32.0;
  auto rng = substream(spec.seed, "synthetic");
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_std));

  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const auto recipe = class_recipe(c);
    const int r = std::max(2, static_cast<int>(std::lround(recipe.size * unit)));
    int lo = r, hi = n - r;  // centre range keeping the shape inside the frame
    if (recipe.region == 1) hi = std::max(lo, n / 2);
    if (recipe.region == 2) lo = std::min(hi, n / 2);
    std::uniform_int_distribution<int> pos(lo, hi);
    for (std::size_t k = 0; k < spec.samples_per_class; ++k) {
      const std::size_t idx = c * spec.samples_per_class + k;
      ds.labels[idx] = static_cast<std::int32_t>(c);
      const int cy = pos(rng), cx = pos(rng);
      float* img = ds.images.data() + idx * ds.image_numel();
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const bool on = shape_covers(recipe.shape, y - cy, x - cx, r);
          for (int ch = 0; ch < 3; ++ch) {
            float v = on ? recipe.color[ch] : 0.5f;
            if (spec.noise_std > 0) v += noise(rng);
            img[(ch * n + y) * n + x] = std::clamp(v, 0.0f, 1.0f);
          }
        }
    }
  }
  return ds;
}

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 32;

inline std::vector<unsigned char> encode_dataset(const Dataset& ds) {
  std::vector<unsigned char> out;
  out.reserve(kDatasetHeaderBytes + ds.images.size() * 4 + ds.labels.size() * 4);
  for (char ch : {'H', 'S', 'T', 'D'}) out.push_back(static_cast<unsigned char>(ch));
  io::put_u32(out, kDatasetVersion);
  io::put_u64(out, ds.count);
  io::put_u32(out, static_cast<std::uint32_t>(ds.channels));
  io::put_u32(out, static_cast<std::uint32_t>(ds.height));
  io::put_u32(out, static_cast<std::uint32_t>(ds.width));
  io::put_u32(out, 4);
  for (float f : ds.images) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    io::put_u32(out, bits);
  }
  for (auto l : ds.labels) io::put_u32(out, static_cast<std::uint32_t>(l));
  return out;
}

inline Dataset decode_dataset(std::span<const unsigned char> bytes) {
  io::Reader in(bytes, "dataset");
  auto magic = in.take(4);
  if (std::memcmp(magic.data(), "HSTD", 4) != 0) throw FormatError("dataset: bad magic, expected HSTD", 0);
  const auto version_at = in.offset();
  if (in.u32() != kDatasetVersion) throw FormatError("dataset: unsupported version", version_at);
  Dataset ds;
  ds.count = in.u64();
  ds.channels = in.u32();
  ds.height = in.u32();
  ds.width = in.u32();
  const auto width_at = in.offset();
  if (in.u32() != 4) throw FormatError("dataset: unsupported label width", width_at);
  if (ds.count == 0 || ds.channels == 0 || ds.height == 0 || ds.width == 0)
    throw FormatError("dataset: empty extents in header", 8);
  const std::uint64_t payload = ds.count * (ds.image_numel() * 4 + 4);
  if (payload != in.remaining())
    throw FormatError("dataset: payload is " + std::to_string(in.remaining()) + " bytes, header implies " +
                          std::to_string(payload),
                      in.offset());
  ds.images.resize(ds.count * ds.image_numel());
  for (auto& f : ds.images) {
    const std::uint32_t bits = in.u32();
    std::memcpy(&f, &bits, 4);
  }
  ds.labels.resize(ds.count);
  for (auto& l : ds.labels) l = static_cast<std::int32_t>(in.u32());
  return ds;
}

inline void write_dataset(const std::string& path, const Dataset& ds) { io::write_file(path, encode_dataset(ds)); }
inline Dataset read_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

/// Index lists for one epoch: shuffled by (seed, epoch), final partial batch kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                     std::size_t epoch = 0, bool shuffle = true) {
  if (batch_size == 0 || batch_size > count)
    throw ConfigError("batch_size must be in [1, " + std::to_string(count) + "], got " + std::to_string(batch_size));
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (shuffle) {
    auto rng = substream(seed, "epoch" + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + batch_size)));
  return out;
}

template <class T>
struct Batch {
  Tensor<T> images;  // [B, C, H, W]
  std::vector<int> labels;
};

template <class T>
Batch<T> load_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch<T> b{Tensor<T>({indices.size(), ds.channels, ds.height, ds.width}, uninitialized), {}};
  const std::size_t n = ds.image_numel();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = ds.image(indices[i]);
    std::copy(src.begin(), src.end(), b.images.ptr() + i * n);
    b.labels.push_back(ds.labels[indices[i]]);
  }
  return b;
}

/// First `n` samples of each class go to the first split, the rest to the second.
inline std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, std::size_t n) {
  Dataset a = ds, b = ds;
  a.images.clear();
  a.labels.clear();
  b.images.clear();
  b.labels.clear();
  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < ds.count; ++i) {
    const auto l = static_cast<std::size_t>(ds.labels[i]);
    if (l >= seen.size()) seen.resize(l + 1, 0);
    Dataset& dst = seen[l]++ < n ? a : b;
    auto img = ds.image(i);
    dst.images.insert(dst.images.end(), img.begin(), img.end());
    dst.labels.push_back(ds.labels[i]);
  }
  a.count = a.labels.size();
  b.count = b.labels.size();
  return {std::move(a), std::move(b)};
}

}  // namespace hst::data
