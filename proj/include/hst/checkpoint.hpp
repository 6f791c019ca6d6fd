#pragma once

// HSTC checkpoint container for named tensors.
//
// Layout (little-endian):
//   char[4] magic "HSTC" | u32 version | u64 config hash | u64 step | u32 entry count
//   entries, sorted by name:
//     u32 name length | name bytes | u8 dtype (0 f32, 1 f64) | u32 rank | u64 extents[rank] | data
//   u64 FNV-1a checksum of every byte after the header

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "hst/io.hpp"
#include "hst/param.hpp"

namespace hst {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderBytes = 28;

struct TensorRecord {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<unsigned char> bytes;  // little-endian row-major values

  std::size_t numel() const { return numel_of(shape); }
  bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::map<std::string, TensorRecord> entries;
};

template <class T>
TensorRecord to_record(const Tensor<T>& t) {
  TensorRecord r{dtype_of<T>(), t.shape(), {}};
  r.bytes.reserve(t.numel() * sizeof(T));
  for (T v : t.data()) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      io::put_u32(r.bytes, bits);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      io::put_u64(r.bytes, bits);
    }
  }
  return r;
}

/// Decodes a record into `dst`, converting precision if the dtypes differ.
template <class T>
void from_record(const TensorRecord& r, Tensor<T>& dst, const std::string& name) {
  if (r.shape != dst.shape())
    throw DimensionError("checkpoint entry '" + name + "' has shape " + shape_str(r.shape) + ", model expects " +
                         shape_str(dst.shape()));
  const std::size_t w = dtype_size(r.dtype);
  auto out = dst.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (std::size_t k = 0; k < w; ++k) bits |= static_cast<std::uint64_t>(r.bytes[i * w + k]) << (8 * k);
    if (r.dtype == DType::f32) {
      const auto b32 = static_cast<std::uint32_t>(bits);
      float f;
      std::memcpy(&f, &b32, 4);
      out[i] = static_cast<T>(f);
    } else {
      double d;
      std::memcpy(&d, &bits, 8);
      out[i] = static_cast<T>(d);
    }
  }
}

template <class T>
Checkpoint snapshot(const ParamStore<T>& store, std::uint64_t config_hash, std::uint64_t step) {
  Checkpoint c{config_hash, step, {}};
  for (const auto& [name, p] : store) c.entries.emplace(name, to_record(p.value));
  return c;
}

/// Overwrites every parameter from `c`; the name sets must match exactly.
template <class T>
void restore(ParamStore<T>& store, const Checkpoint& c) {
  for (const auto& [name, _] : store)
    if (!c.entries.count(name)) throw AuditError("checkpoint is missing parameter '" + name + "'");
  for (const auto& [name, rec] : c.entries) {
    if (!store.contains(name)) throw AuditError("checkpoint has unknown parameter '" + name + "'");
    from_record(rec, store.at(name).value, name);
  }
}

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  std::vector<unsigned char> out{'H', 'S', 'T', 'C'};
  io::put_u32(out, kCheckpointVersion);
  io::put_u64(out, c.config_hash);
  io::put_u64(out, c.step);
  io::put_u32(out, static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& [name, r] : c.entries) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(r.dtype));
    io::put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) io::put_u64(out, e);
    out.insert(out.end(), r.bytes.begin(), r.bytes.end());
  }
  io::put_u64(out, fnv1a(out.data() + kCheckpointHeaderBytes, out.size() - kCheckpointHeaderBytes));
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  io::Reader in(bytes, "checkpoint");
  auto magic = in.take(4);
  if (std::memcmp(magic.data(), "HSTC", 4) != 0) throw FormatError("checkpoint: bad magic, expected HSTC", 0);
  if (in.u32() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version", 4);
  Checkpoint c;
  c.config_hash = in.u64();
  c.step = in.u64();
  const std::uint32_t count = in.u32();

  if (bytes.size() < kCheckpointHeaderBytes + 8) throw FormatError("checkpoint: truncated", bytes.size());
  const std::size_t sum_at = bytes.size() - 8;
  io::Reader trailer(bytes.subspan(sum_at), "checkpoint");
  const std::uint64_t stored = trailer.u64();
  const std::uint64_t actual = fnv1a(bytes.data() + kCheckpointHeaderBytes, sum_at - kCheckpointHeaderBytes);
  if (stored != actual) throw FormatError("checkpoint: checksum mismatch, file is corrupt", sum_at);

  io::Reader body(bytes.first(sum_at), "checkpoint");
  body.take(kCheckpointHeaderBytes);
  std::string prev;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto entry_at = body.offset();
    const std::uint32_t len = body.u32();
    auto nb = body.take(len);
    std::string name(nb.begin(), nb.end());
    if (i > 0 && !(prev < name)) throw FormatError("checkpoint: entries not in strict name order", entry_at);
    const auto dtype_at = body.offset();
    const std::uint8_t tag = body.u8();
    if (tag > 1) throw FormatError("checkpoint: unknown dtype tag " + std::to_string(tag), dtype_at);
    TensorRecord r;
    r.dtype = static_cast<DType>(tag);
    const std::uint32_t rank = body.u32();
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank for '" + name + "'", dtype_at + 1);
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = body.u64();
      if (e == 0) throw FormatError("checkpoint: zero extent in '" + name + "'", body.offset() - 8);
      r.shape.push_back(e);
      n *= e;
    }
    auto data = body.take(n * dtype_size(r.dtype));
    r.bytes.assign(data.begin(), data.end());
    c.entries.emplace(name, std::move(r));
    prev = std::move(name);
  }
  if (body.remaining() != 0) throw FormatError("checkpoint: trailing bytes after last entry", body.offset());
  return c;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& c) { io::write_file(path, encode_checkpoint(c)); }
inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace hst
