#pragma once

// Retrieval descriptors built from the fused agents, cosine similarity, and
// the MMDS descriptor store file.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mmvpr/cammf.hpp"
#include "mmvpr/encoder.hpp"
#include "mmvpr/errors.hpp"
#include "mmvpr/seqcore.hpp"

namespace mmvpr {

enum class Variant {
  Full,      // [z_m; z_a; z_t]
  ImClsAvg,  // [z_m; z_a]
  TxCls,     // z_t
};

inline int segment_count(Variant v) {
  switch (v) {
    case Variant::Full: return 3;
    case Variant::ImClsAvg: return 2;
    case Variant::TxCls: return 1;
  }
  return 0;
}

inline Index descriptor_dim(Variant v, Index token_dim) { return segment_count(v) * token_dim; }

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "FULL";
    case Variant::ImClsAvg: return "IM_CLS_AVG";
    case Variant::TxCls: return "TX_CLS";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "FULL") return Variant::Full;
  if (s == "IM_CLS_AVG") return Variant::ImClsAvg;
  if (s == "TX_CLS") return Variant::TxCls;
  throw ConfigError("unknown descriptor variant '" + s + "' (expected FULL, IM_CLS_AVG or TX_CLS)");
}

enum class Normalization {
  None,
  Whole,       // L2 over the concatenated vector
  PerSegment,  // L2 over each agent segment before concatenation
};

struct Descriptor {
  Vector values;
  Variant variant = Variant::Full;
  bool normalized = false;

  Index size() const { return values.size(); }
};

inline std::vector<Branch> variant_branches(Variant v) {
  switch (v) {
    case Variant::Full: return {Branch::ImageCls, Branch::ImageAvg, Branch::Text};
    case Variant::ImClsAvg: return {Branch::ImageCls, Branch::ImageAvg};
    case Variant::TxCls: return {Branch::Text};
  }
  return {};
}

namespace detail {

inline Vector l2_normalize(const Vector& v) {
  const double n = v.norm();
  return n > 0.0 ? Vector(v / n) : v;
}

/// Vector-Jacobian product of v -> v / |v|.
inline Vector l2_normalize_backward(const Vector& v, const Vector& dy) {
  const double n = v.norm();
  if (n == 0.0) return dy;
  const Vector u = v / n;
  return (dy - u.dot(dy) * u) / n;
}

}  // namespace detail

inline Descriptor compose(const AgentSet& agents, Variant variant, Normalization norm = Normalization::Whole) {
  const auto branches = variant_branches(variant);
  const Index dim = agents.m.size();
  if (agents.a.size() != dim || agents.t.size() != dim) throw DimensionError("compose: agents differ in dimension");
  Descriptor d;
  d.variant = variant;
  d.values.resize(static_cast<Index>(branches.size()) * dim);
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const Vector& seg = agents[branches[i]];
    if (!seg.allFinite()) throw DataError("compose: non-finite agent");
    d.values.segment(static_cast<Index>(i) * dim, dim) =
        norm == Normalization::PerSegment ? detail::l2_normalize(seg) : seg;
  }
  if (norm == Normalization::Whole) d.values = detail::l2_normalize(d.values);
  // Per-segment normalization leaves the whole vector with norm sqrt(segments); renormalize so cosine stays a dot product.
  if (norm == Normalization::PerSegment) d.values = detail::l2_normalize(d.values);
  d.normalized = norm != Normalization::None;
  return d;
}

/// Gradient with respect to the agents; agents outside the variant get zero.
inline AgentSet compose_backward(const AgentSet& agents, Variant variant, Normalization norm, const Vector& d_desc) {
  const auto branches = variant_branches(variant);
  const Index dim = agents.m.size();
  AgentSet g{Vector::Zero(dim), Vector::Zero(dim), Vector::Zero(dim)};
  Vector raw(static_cast<Index>(branches.size()) * dim);
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const Vector& seg = agents[branches[i]];
    raw.segment(static_cast<Index>(i) * dim, dim) =
        norm == Normalization::PerSegment ? detail::l2_normalize(seg) : seg;
  }
  const Vector d_raw = norm == Normalization::None ? d_desc : detail::l2_normalize_backward(raw, d_desc);
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const Vector d_seg = d_raw.segment(static_cast<Index>(i) * dim, dim);
    g[branches[i]] = norm == Normalization::PerSegment ? detail::l2_normalize_backward(agents[branches[i]], d_seg)
                                                       : d_seg;
  }
  return g;
}

/// Cosine similarity. Zero vectors have similarity 0 with everything.
inline double similarity(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) {
    throw DimensionError("similarity: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

inline double similarity(const Descriptor& a, const Descriptor& b) {
  if (a.variant != b.variant) {
    throw DimensionError("similarity: variants " + to_string(a.variant) + " and " + to_string(b.variant));
  }
  return similarity(a.values, b.values);
}

// ---------------------------------------------------------------------------
// place records and the MMDS store

struct GeoPoint {
  double lat = 0.0;  // degrees
  double lon = 0.0;  // degrees
};

struct PlaceRecord {
  std::string id;
  GeoPoint location;
  std::optional<double> heading;  // degrees in [0, 360)
  Descriptor descriptor;
};

inline constexpr std::array<char, 4> kStoreMagic{'M', 'M', 'D', 'S'};
inline constexpr std::uint32_t kStoreVersion = 1;

/// "MMDS", u32 version, u32 count, u32 dim, then per record: u32 id length, id
/// bytes, f64 lat, f64 lon, f64 heading (NaN when absent), dim float32 values.
inline std::vector<std::uint8_t> encode_store(const std::vector<PlaceRecord>& records) {
  const std::uint32_t dim = records.empty() ? 0 : static_cast<std::uint32_t>(records.front().descriptor.size());
  std::vector<std::uint8_t> out;
  detail::put_bytes(out, std::string_view(kStoreMagic.data(), 4));
  detail::put_u32(out, kStoreVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  detail::put_u32(out, dim);
  for (const auto& r : records) {
    if (static_cast<std::uint32_t>(r.descriptor.size()) != dim) {
      throw DimensionError("descriptor store: record '" + r.id + "' has dim " + std::to_string(r.descriptor.size()) +
                           ", store dim is " + std::to_string(dim));
    }
    detail::put_u32(out, static_cast<std::uint32_t>(r.id.size()));
    detail::put_bytes(out, r.id);
    detail::put_f64(out, r.location.lat);
    detail::put_f64(out, r.location.lon);
    detail::put_f64(out, r.heading ? *r.heading : std::numeric_limits<double>::quiet_NaN());
    for (Index i = 0; i < r.descriptor.values.size(); ++i) detail::put_f32(out, static_cast<float>(r.descriptor.values[i]));
  }
  return out;
}

/// The file does not carry the variant; the caller supplies it.
inline std::vector<PlaceRecord> decode_store(std::span<const std::uint8_t> bytes, Variant variant,
                                             const std::string& what = "descriptor store") {
  detail::ByteReader in(bytes, what);
  if (in.remaining() < 4 || in.bytes(4) != std::string_view(kStoreMagic.data(), 4)) {
    throw FormatError(what + ": bad magic, expected MMDS");
  }
  const std::uint32_t version = in.u32();
  if (version != kStoreVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  const std::uint32_t dim = in.u32();
  std::vector<PlaceRecord> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PlaceRecord r;
    r.id = in.bytes(in.u32());
    r.location.lat = in.f64();
    r.location.lon = in.f64();
    const double heading = in.f64();
    if (!std::isnan(heading)) r.heading = heading;
    r.descriptor.variant = variant;
    r.descriptor.values.resize(dim);
    for (std::uint32_t k = 0; k < dim; ++k) {
      const float v = in.f32();
      if (!std::isfinite(v)) throw DataError(what + ": record '" + r.id + "' has a non-finite value");
      r.descriptor.values[k] = v;
    }
    r.descriptor.normalized = std::abs(r.descriptor.values.norm() - 1.0) < 1e-6;
    records.push_back(std::move(r));
  }
  if (in.remaining() != 0) throw LengthError(what + ": " + std::to_string(in.remaining()) + " trailing bytes");
  return records;
}

inline void save_store(const std::filesystem::path& path, const std::vector<PlaceRecord>& records) {
  detail::write_file(path, encode_store(records));
}

inline std::vector<PlaceRecord> load_store(const std::filesystem::path& path, Variant variant) {
  return decode_store(detail::read_file(path), variant, path.string());
}

/// Reads only the dim field of a store header.
inline std::uint32_t store_dim(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes, "descriptor store");
  if (in.remaining() < 4 || in.bytes(4) != std::string_view(kStoreMagic.data(), 4)) {
    throw FormatError("descriptor store: bad magic, expected MMDS");
  }
  in.u32();
  in.u32();
  return in.u32();
}

}  // namespace mmvpr
