#pragma once

// File interchange: GEOF binary feature grids, text label files and text
// correspondence files.
//
// GEOF layout (little-endian):
//   "GEOF" | version u32 = 1 | record count u32
//   per record: pair_id u64 | role u8 (0 first, 1 second) | has_cls u8 |
//               d u32 | s u32 | d*s*s f32 (channel-major) | d f32 if has_cls

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "geolab/binary_io.hpp"
#include "geolab/error.hpp"
#include "geolab/geometry.hpp"
#include "geolab/model.hpp"

namespace geolab {

inline constexpr char kFeatureMagic[4] = {'G', 'E', 'O', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureRecord {
  std::uint64_t pair_id = 0;
  std::uint8_t role = 0;
  FeatureGrid grid;
};

inline void write_features(std::ostream& out, const std::vector<FeatureRecord>& records) {
  if (records.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(ErrorKind::ShapeError, "too many feature records");
  }
  for (const auto& r : records) {
    const auto& g = r.grid;
    const auto& first = records.front().grid;
    if (g.d != first.d || g.s != first.s || g.cls.has_value() != first.cls.has_value()) {
      throw Error(ErrorKind::ShapeError, "feature record " + std::to_string(r.pair_id) +
                                             " does not match the file's (d, s, has_cls)");
    }
    if (g.d == 0 || g.s == 0 || g.values.size() != std::size_t(g.d) * g.s * g.s ||
        (g.cls && g.cls->size() != g.d) || r.role > 1) {
      throw Error(ErrorKind::ShapeError, "feature record " + std::to_string(r.pair_id) + " is malformed");
    }
  }
  out.write(kFeatureMagic, 4);
  binary::put_le<std::uint32_t>(out, kFeatureVersion);
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    binary::put_le<std::uint64_t>(out, r.pair_id);
    binary::put_le<std::uint8_t>(out, r.role);
    binary::put_le<std::uint8_t>(out, r.grid.cls ? 1 : 0);
    binary::put_le<std::uint32_t>(out, r.grid.d);
    binary::put_le<std::uint32_t>(out, r.grid.s);
    for (float v : r.grid.values) binary::put_f32(out, v);
    if (r.grid.cls)
      for (float v : *r.grid.cls) binary::put_f32(out, v);
  }
  if (!out) throw Error(ErrorKind::IOError, "failed writing feature file");
}

inline std::vector<FeatureRecord> read_features(std::istream& in) {
  binary::Reader rd(in, "feature file");
  if (rd.get_bytes(4) != std::string(kFeatureMagic, 4)) rd.fail("bad magic");
  if (const auto v = rd.get_le<std::uint32_t>(); v != kFeatureVersion) rd.fail("unsupported version " + std::to_string(v));
  const auto count = rd.get_le<std::uint32_t>();
  std::vector<FeatureRecord> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureRecord r;
    r.pair_id = rd.get_le<std::uint64_t>();
    r.role = rd.get_le<std::uint8_t>();
    const auto has_cls = rd.get_le<std::uint8_t>();
    if (r.role > 1) rd.fail("role must be 0 or 1");
    if (has_cls > 1) rd.fail("has_cls must be 0 or 1");
    r.grid.d = rd.get_le<std::uint32_t>();
    r.grid.s = rd.get_le<std::uint32_t>();
    if (r.grid.d == 0 || r.grid.s == 0) {
      throw Error(ErrorKind::ShapeError, "feature record " + std::to_string(i) + " has an empty grid");
    }
    if (!out.empty()) {
      const auto& f = out.front().grid;
      if (r.grid.d != f.d || r.grid.s != f.s || bool(has_cls) != f.cls.has_value()) {
        throw Error(ErrorKind::ShapeError, "feature record " + std::to_string(i) + " has (d, s) = (" +
                                               std::to_string(r.grid.d) + ", " + std::to_string(r.grid.s) +
                                               "), file declares (" + std::to_string(f.d) + ", " +
                                               std::to_string(f.s) + ")");
      }
    }
    const std::size_t n = std::size_t(r.grid.d) * r.grid.s * r.grid.s;
    r.grid.values.resize(n);
    for (auto& v : r.grid.values) v = rd.get_f32();
    if (has_cls) {
      r.grid.cls.emplace(r.grid.d);
      for (auto& v : *r.grid.cls) v = rd.get_f32();
    }
    out.push_back(std::move(r));
  }
  if (!rd.at_eof()) rd.fail("trailing bytes after " + std::to_string(count) + " records");
  return out;
}

inline void save_features(const std::string& path, const std::vector<FeatureRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IOError, "cannot open " + path + " for writing");
  write_features(out, records);
}

inline std::vector<FeatureRecord> load_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IOError, "cannot open " + path);
  return read_features(in);
}

/// Pairs up records by pair_id; every id must have both roles exactly once.
inline std::map<std::uint64_t, std::pair<FeatureGrid, FeatureGrid>> pair_features(
    const std::vector<FeatureRecord>& records) {
  std::map<std::uint64_t, std::pair<FeatureGrid, FeatureGrid>> out;
  std::map<std::uint64_t, int> seen;
  for (const auto& r : records) {
    int& mask = seen[r.pair_id];
    const int bit = 1 << r.role;
    if (mask & bit) throw Error(ErrorKind::DataError, "pair " + std::to_string(r.pair_id) + " repeats a role");
    mask |= bit;
    (r.role == 0 ? out[r.pair_id].first : out[r.pair_id].second) = r.grid;
  }
  for (const auto& [id, mask] : seen)
    if (mask != 3) throw Error(ErrorKind::DataError, "pair " + std::to_string(id) + " lacks one image");
  return out;
}

// ---------------------------------------------------------------------------
// Text formats. '#' starts a comment; blank lines are skipped.

namespace detail {

template <typename Fn>
void for_each_data_line(std::istream& in, const std::string& what, Fn fn) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    ls.imbue(std::locale::classic());
    try {
      fn(ls);
    } catch (const Error& e) {
      throw Error(ErrorKind::FormatError, what + " line " + std::to_string(number) + ": " + e.what());
    }
    std::string extra;
    if (ls >> extra) {
      throw Error(ErrorKind::FormatError, what + " line " + std::to_string(number) + ": unexpected '" + extra + "'");
    }
  }
}

template <typename V>
V read_value(std::istream& ls) {
  V v{};
  if (!(ls >> v)) throw Error(ErrorKind::FormatError, "expected a number");
  if constexpr (std::is_floating_point_v<V>) {
    if (!std::isfinite(v)) throw Error(ErrorKind::FormatError, "non-finite value");
  }
  return v;
}

inline std::ostream& precise(std::ostream& out) {
  out.imbue(std::locale::classic());
  return out << std::setprecision(17);
}

}  // namespace detail

struct RigidLabel {
  std::uint64_t id = 0;
  std::array<double, 3> normalized{};
};

struct FLabel {
  std::uint64_t id = 0;
  Mat3 f = Mat3::Zero();
};

inline void write_rigid_labels(std::ostream& out, const std::vector<RigidLabel>& labels) {
  detail::precise(out);
  for (const auto& l : labels) out << l.id << ' ' << l.normalized[0] << ' ' << l.normalized[1] << ' ' << l.normalized[2] << '\n';
}

inline std::vector<RigidLabel> read_rigid_labels(std::istream& in) {
  std::vector<RigidLabel> out;
  detail::for_each_data_line(in, "rigid labels", [&](std::istream& ls) {
    RigidLabel l;
    l.id = detail::read_value<std::uint64_t>(ls);
    for (auto& v : l.normalized) v = detail::read_value<double>(ls);
    out.push_back(l);
  });
  return out;
}

inline void write_f_labels(std::ostream& out, const std::vector<FLabel>& labels) {
  detail::precise(out);
  for (const auto& l : labels) {
    out << l.id;
    for (int i = 0; i < 9; ++i) out << ' ' << l.f(i / 3, i % 3);
    out << '\n';
  }
}

inline std::vector<FLabel> read_f_labels(std::istream& in) {
  std::vector<FLabel> out;
  detail::for_each_data_line(in, "F labels", [&](std::istream& ls) {
    FLabel l;
    l.id = detail::read_value<std::uint64_t>(ls);
    for (int i = 0; i < 9; ++i) l.f(i / 3, i % 3) = detail::read_value<double>(ls);
    out.push_back(l);
  });
  return out;
}

inline void write_correspondences(std::ostream& out, const CorrespondenceSet& corrs) {
  detail::precise(out);
  for (const auto& c : corrs) out << c.p.x() << ' ' << c.p.y() << ' ' << c.q.x() << ' ' << c.q.y() << '\n';
}

inline CorrespondenceSet read_correspondences(std::istream& in) {
  CorrespondenceSet out;
  detail::for_each_data_line(in, "correspondences", [&](std::istream& ls) {
    Correspondence c;
    c.p.x() = detail::read_value<double>(ls);
    c.p.y() = detail::read_value<double>(ls);
    c.q.x() = detail::read_value<double>(ls);
    c.q.y() = detail::read_value<double>(ls);
    out.push_back(c);
  });
  return out;
}

template <typename T, typename Reader>
T read_text_file(const std::string& path, Reader reader) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IOError, "cannot open " + path);
  return reader(in);
}

template <typename Writer>
void write_text_file(const std::string& path, Writer writer) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IOError, "cannot open " + path + " for writing");
  writer(out);
  if (!out) throw Error(ErrorKind::IOError, "failed writing " + path);
}

}  // namespace geolab
