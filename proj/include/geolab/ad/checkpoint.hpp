#pragma once

// EGWT parameter checkpoints:
//   "EGWT" | version u32 | count u32 |
//   count x { name_len u16 | name | frozen u8 | rank u8 | extents u32[rank] | f64[prod] }
// followed by an optional architecture trailer "DESC" | len u32 | text.
// All integers little-endian.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "geolab/ad/tensor.hpp"
#include "geolab/binary_io.hpp"
#include "geolab/error.hpp"

namespace geolab::ad {

inline constexpr char kCheckpointMagic[4] = {'E', 'G', 'W', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  bool frozen = false;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;
  std::string descriptor;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kCheckpointMagic, 4);
  binary::put_le<std::uint32_t>(out, kCheckpointVersion);
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    if (e.name.size() > 0xFFFF) throw Error(ErrorKind::FormatError, "parameter name too long");
    if (e.values.size() != shape_size(e.shape)) {
      throw Error(ErrorKind::ShapeError, "checkpoint entry '" + e.name + "' size mismatch");
    }
    binary::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    binary::put_le<std::uint8_t>(out, e.frozen ? 1 : 0);
    binary::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (auto ext : e.shape) binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ext));
    for (double v : e.values) binary::put_f64(out, v);
  }
  if (!ckpt.descriptor.empty()) {
    out.write("DESC", 4);
    binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.descriptor.size()));
    out.write(ckpt.descriptor.data(), static_cast<std::streamsize>(ckpt.descriptor.size()));
  }
}

inline Checkpoint read_checkpoint(std::istream& in) {
  binary::Reader r(in, "checkpoint");
  if (r.get_bytes(4) != std::string(kCheckpointMagic, 4)) r.fail("bad magic");
  if (r.get_le<std::uint32_t>() != kCheckpointVersion) r.fail("unsupported version");
  const auto count = r.get_le<std::uint32_t>();
  Checkpoint ckpt;
  ckpt.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.get_bytes(r.get_le<std::uint16_t>());
    const auto frozen = r.get_le<std::uint8_t>();
    if (frozen > 1) r.fail("frozen flag must be 0 or 1");
    e.frozen = frozen == 1;
    const auto rank = r.get_le<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(r.get_le<std::uint32_t>());
    const std::size_t n = shape_size(e.shape);
    e.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) e.values[k] = r.get_f64();
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.at_eof()) {
    if (r.get_bytes(4) != "DESC") r.fail("unexpected trailing data");
    ckpt.descriptor = r.get_bytes(r.get_le<std::uint32_t>());
    if (!r.at_eof()) r.fail("unexpected trailing data");
  }
  return ckpt;
}

inline std::string checkpoint_bytes(const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, ckpt);
  return os.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IOError, "cannot write " + path);
  write_checkpoint(out, ckpt);
  if (!out) throw Error(ErrorKind::IOError, "write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IOError, "cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace geolab::ad
