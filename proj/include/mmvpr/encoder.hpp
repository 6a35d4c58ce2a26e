#pragma once

// Token ingestion: multi-level fusion, the MMTK token file, the dataset
// manifest, and deterministic synthetic encoders standing in for real
// vision/language backbones.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmvpr/errors.hpp"
#include "mmvpr/rng.hpp"
#include "mmvpr/seqcore.hpp"

namespace mmvpr {

/// Elementwise sum of feature maps taken from several backbone depths. CLS rows are summed too.
inline TokenSequence fuse_levels(std::span<const TokenSequence> levels) {
  if (levels.empty()) throw DimensionError("fuse_levels: no levels given");
  Matrix sum = levels.front().tokens();
  for (std::size_t i = 1; i < levels.size(); ++i) {
    const Matrix& t = levels[i].tokens();
    if (t.rows() != sum.rows() || t.cols() != sum.cols()) {
      throw DimensionError("fuse_levels: level " + std::to_string(i) + " is " + shape_str(t) +
                           ", level 0 is " + shape_str(sum));
    }
    sum += t;
  }
  return TokenSequence(std::move(sum));
}

// ---------------------------------------------------------------------------
// little-endian byte helpers shared by every binary file format

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_bytes(std::vector<std::uint8_t>& out, std::string_view s) {
  out.insert(out.end(), s.begin(), s.end());
}

/// Bounds-checked cursor over a byte buffer.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  std::size_t remaining() const { return data_.size() - pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw LengthError(what_ + ": truncated, need " + std::to_string(n) + " more bytes at offset " +
                        std::to_string(pos_) + ", have " + std::to_string(remaining()));
    }
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path.string() + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MMTK token file: "MMTK", u32 version = 1, u32 T, u32 D, T*D float32, all little-endian, row-major.

inline constexpr std::array<char, 4> kTokenMagic{'M', 'M', 'T', 'K'};
inline constexpr std::uint32_t kTokenVersion = 1;

inline std::vector<std::uint8_t> encode_tokens(const TokenSequence& seq) {
  const Matrix& t = seq.tokens();
  std::vector<std::uint8_t> out;
  out.reserve(16 + static_cast<std::size_t>(t.size()) * 4);
  detail::put_bytes(out, std::string_view(kTokenMagic.data(), 4));
  detail::put_u32(out, kTokenVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(t.cols()));
  for (Index r = 0; r < t.rows(); ++r)
    for (Index c = 0; c < t.cols(); ++c) detail::put_f32(out, static_cast<float>(t(r, c)));
  return out;
}

inline TokenSequence decode_tokens(std::span<const std::uint8_t> bytes, const std::string& what = "token file") {
  detail::ByteReader in(bytes, what);
  if (in.remaining() < 4 || in.bytes(4) != std::string_view(kTokenMagic.data(), 4)) {
    throw FormatError(what + ": bad magic, expected MMTK");
  }
  const std::uint32_t version = in.u32();
  if (version != kTokenVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::uint32_t rows = in.u32();
  const std::uint32_t cols = in.u32();
  if (rows < 1 || cols < 1) throw FormatError(what + ": T and D must be at least 1");
  const std::size_t payload = static_cast<std::size_t>(rows) * cols * 4;
  if (in.remaining() != payload) {
    throw LengthError(what + ": payload is " + std::to_string(in.remaining()) + " bytes, header implies " +
                      std::to_string(payload));
  }
  Matrix t(rows, cols);
  for (Index r = 0; r < t.rows(); ++r) {
    for (Index c = 0; c < t.cols(); ++c) {
      const float v = in.f32();
      if (!std::isfinite(v)) {
        throw DataError(what + ": non-finite value at row " + std::to_string(r) + ", col " + std::to_string(c));
      }
      t(r, c) = v;
    }
  }
  return TokenSequence(std::move(t));
}

inline void save_tokens(const std::filesystem::path& path, const TokenSequence& seq) {
  detail::write_file(path, encode_tokens(seq));
}

inline TokenSequence load_tokens(const std::filesystem::path& path) {
  return decode_tokens(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// synthetic encoders

/// One synthetic observation. Image tokens are (grid_h * grid_w + 1) x dim,
/// text tokens text_len x dim. Row 0 of each is the CLS token.
struct SceneSpec {
  int place_id = 0;
  int image_archetype = 0;
  int text_archetype = 0;
  double noise_scale = 0.0;
  int grid_h = 3;
  int grid_w = 3;
  int text_len = 6;
  int dim = 16;
  /// Replace the whole caption by unstructured noise (a hallucinated description).
  bool text_is_noise = false;

  int image_length() const { return grid_h * grid_w + 1; }
};

namespace detail {

inline constexpr std::uint64_t kImageSalt = 0x1A6E;
inline constexpr std::uint64_t kTextSalt = 0x7E87;
inline constexpr std::uint64_t kNoiseSalt = 0x4015E;

/// Archetype centers: entry (t, d) is a standard normal keyed by (kind, archetype, t).
inline Matrix archetype_center(std::uint64_t salt, int archetype, int rows, int dim) {
  Matrix m(rows, dim);
  for (int t = 0; t < rows; ++t) {
    SplitMix64 g(mix_seed({salt, static_cast<std::uint64_t>(archetype), static_cast<std::uint64_t>(t)}));
    for (int d = 0; d < dim; ++d) m(t, d) = g.gaussian();
  }
  return m;
}

}  // namespace detail

struct EncodedScene {
  TokenSequence image;
  TokenSequence text;
};

/// Deterministic in (spec, seed). With noise_scale = 0 the output depends on the archetypes only.
inline EncodedScene synth_encode(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.grid_h < 1 || spec.grid_w < 1 || spec.text_len < 1 || spec.dim < 1) {
    throw ConfigError("synth_encode: grid, text_len and dim must be positive");
  }
  if (spec.noise_scale < 0.0) throw ConfigError("synth_encode: noise_scale must be non-negative");
  Matrix image = detail::archetype_center(detail::kImageSalt, spec.image_archetype, spec.image_length(), spec.dim);
  Matrix text;
  if (spec.text_is_noise) {
    SplitMix64 g(mix_seed({detail::kTextSalt, seed, static_cast<std::uint64_t>(spec.place_id), 0xBADull}));
    text.resize(spec.text_len, spec.dim);
    for (Index i = 0; i < text.size(); ++i) text.data()[i] = g.gaussian();
  } else {
    text = detail::archetype_center(detail::kTextSalt, spec.text_archetype, spec.text_len, spec.dim);
  }
  if (spec.noise_scale > 0.0) {
    SplitMix64 g(mix_seed({detail::kNoiseSalt, seed, static_cast<std::uint64_t>(spec.place_id),
                           static_cast<std::uint64_t>(spec.image_archetype),
                           static_cast<std::uint64_t>(spec.text_archetype)}));
    for (Index r = 0; r < image.rows(); ++r)
      for (Index c = 0; c < image.cols(); ++c) image(r, c) += spec.noise_scale * g.gaussian();
    for (Index r = 0; r < text.rows(); ++r)
      for (Index c = 0; c < text.cols(); ++c) text(r, c) += spec.noise_scale * g.gaussian();
  }
  return {TokenSequence(std::move(image)), TokenSequence(std::move(text))};
}

// ---------------------------------------------------------------------------
// dataset manifest

enum class Split { Query, Database };

struct ManifestRecord {
  std::string id;
  /// One or more token files; several are summed with fuse_levels.
  std::vector<std::filesystem::path> image_tokens;
  std::optional<std::filesystem::path> text_tokens;
  double lat = 0.0;
  double lon = 0.0;
  std::optional<double> heading;
  Split split = Split::Database;
  /// Place identity used for batch sampling; defaults to the record id.
  std::string place;
};

inline std::string to_string(Split s) { return s == Split::Query ? "query" : "database"; }

namespace detail {

inline double require_number(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_number()) {
    throw FormatError(where + ": field '" + key + "' must be a number");
  }
  return j.at(key).get<double>();
}

}  // namespace detail

/// Relative token paths are resolved against `base_dir`.
inline std::vector<ManifestRecord> parse_manifest(const nlohmann::json& doc,
                                                  const std::filesystem::path& base_dir = {}) {
  if (!doc.is_array()) throw FormatError("manifest: top level must be an array");
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };
  std::vector<ManifestRecord> records;
  records.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& j = doc[i];
    const std::string where = "manifest record " + std::to_string(i);
    if (!j.is_object()) throw FormatError(where + ": must be an object");
    ManifestRecord r;
    if (!j.contains("id") || !j.at("id").is_string()) throw FormatError(where + ": field 'id' must be a string");
    r.id = j.at("id").get<std::string>();
    if (!j.contains("image_tokens")) throw FormatError(where + ": field 'image_tokens' is missing");
    const auto& img = j.at("image_tokens");
    if (img.is_string()) {
      r.image_tokens.push_back(resolve(img.get<std::string>()));
    } else if (img.is_array() && !img.empty()) {
      for (const auto& p : img) {
        if (!p.is_string()) throw FormatError(where + ": field 'image_tokens' must hold strings");
        r.image_tokens.push_back(resolve(p.get<std::string>()));
      }
    } else {
      throw FormatError(where + ": field 'image_tokens' must be a path or a non-empty list of paths");
    }
    if (j.contains("text_tokens") && !j.at("text_tokens").is_null()) {
      if (!j.at("text_tokens").is_string()) throw FormatError(where + ": field 'text_tokens' must be a string");
      r.text_tokens = resolve(j.at("text_tokens").get<std::string>());
    }
    r.lat = detail::require_number(j, "lat", where);
    r.lon = detail::require_number(j, "lon", where);
    if (j.contains("heading") && !j.at("heading").is_null()) r.heading = detail::require_number(j, "heading", where);
    const std::string split = j.value("split", std::string("database"));
    if (split == "query") {
      r.split = Split::Query;
    } else if (split == "database") {
      r.split = Split::Database;
    } else {
      throw FormatError(where + ": field 'split' must be \"query\" or \"database\"");
    }
    if (j.contains("place")) {
      const auto& p = j.at("place");
      r.place = p.is_string() ? p.get<std::string>() : p.dump();
    } else {
      r.place = r.id;
    }
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
  return parse_manifest(doc, path.parent_path());
}

/// Paths are written relative to `base_dir` when they live below it.
inline nlohmann::json manifest_to_json(const std::vector<ManifestRecord>& records,
                                       const std::filesystem::path& base_dir = {}) {
  auto rel = [&](const std::filesystem::path& p) {
    if (base_dir.empty()) return p.generic_string();
    return p.lexically_relative(base_dir).generic_string();
  };
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json j;
    j["id"] = r.id;
    if (r.image_tokens.size() == 1) {
      j["image_tokens"] = rel(r.image_tokens.front());
    } else {
      j["image_tokens"] = nlohmann::json::array();
      for (const auto& p : r.image_tokens) j["image_tokens"].push_back(rel(p));
    }
    if (r.text_tokens) j["text_tokens"] = rel(*r.text_tokens);
    j["lat"] = r.lat;
    j["lon"] = r.lon;
    if (r.heading) j["heading"] = *r.heading;
    j["split"] = to_string(r.split);
    j["place"] = r.place;
    doc.push_back(std::move(j));
  }
  return doc;
}

/// Image tokens (levels summed) and text tokens for one record; a missing
/// caption yields `text_len` zero rows of the image dimension.
inline EncodedScene load_record_tokens(const ManifestRecord& r, int text_len) {
  std::vector<TokenSequence> levels;
  levels.reserve(r.image_tokens.size());
  for (const auto& p : r.image_tokens) levels.push_back(load_tokens(p));
  TokenSequence image = fuse_levels(levels);
  if (r.text_tokens) return {std::move(image), load_tokens(*r.text_tokens)};
  Matrix zeros = Matrix::Zero(text_len, image.dim());
  return {std::move(image), TokenSequence(std::move(zeros))};
}

}  // namespace mmvpr
