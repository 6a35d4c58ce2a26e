#pragma once

// End-to-end descriptor model: recalibration -> regional pooling -> fusion ->
// descriptor composition, plus the MMWT weights file.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmvpr/atrec.hpp"
#include "mmvpr/cammf.hpp"
#include "mmvpr/descriptor.hpp"
#include "mmvpr/encoder.hpp"
#include "mmvpr/seqcore.hpp"

namespace mmvpr {

struct ModelConfig {
  int dim = 768;
  int hidden = 256;  // T1, width of the first recalibration layer
  int layers = 3;
  int heads = 12;
  int grid_h = 16;
  int grid_w = 16;
  int text_len = 32;  // N
  bool use_atrec = true;
  bool post_norm = true;
  double ln_eps = 1e-5;
  Variant variant = Variant::Full;
  Normalization normalization = Normalization::Whole;

  int image_len() const { return grid_h * grid_w + 1; }
  Index descriptor_size() const { return descriptor_dim(variant, dim); }
  FuseConfig fuse_config() const { return {layers, heads, post_norm, ln_eps}; }

  void validate() const {
    if (dim < 1) throw ConfigError("config: 'dim' must be positive");
    if (hidden < 1) throw ConfigError("config: 'hidden' must be positive");
    if (layers < 1) throw ConfigError("config: 'layers' must be at least 1");
    if (heads < 1 || dim % heads != 0) throw ConfigError("config: 'heads' must divide 'dim'");
    if (grid_h < 3 || grid_w < 3) throw ConfigError("config: 'grid_h' and 'grid_w' must be at least 3");
    if (text_len < 1) throw ConfigError("config: 'text_len' must be positive");
    if (!(ln_eps > 0.0)) throw ConfigError("config: 'ln_eps' must be positive");
  }
};

inline ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  SplitMix64 rng(mix_seed({seed, 0x3A7Eull}));
  init_atrec_params(store, cfg.image_len(), cfg.text_len, cfg.hidden, rng);
  init_cammf_params(store, cfg.dim, cfg.layers, rng);
  return store;
}

struct ModelOutput {
  RecalibrationResult recalibration;  // weights are all ones when recalibration is disabled
  FusionOutput fusion;
  Descriptor descriptor;
};

struct ModelCache {
  AtrecCache atrec;
  FuseCache fuse;
  AgentSet agents;
};

inline void check_inputs(const ModelConfig& cfg, const TokenSequence& image, const TokenSequence& text) {
  if (image.length() != cfg.image_len() || image.dim() != cfg.dim) {
    throw DimensionError("image tokens are " + shape_str(image.tokens()) + ", config expects " +
                         shape_str(cfg.image_len(), cfg.dim));
  }
  if (text.length() != cfg.text_len || text.dim() != cfg.dim) {
    throw DimensionError("text tokens are " + shape_str(text.tokens()) + ", config expects " +
                         shape_str(cfg.text_len, cfg.dim));
  }
}

inline ModelOutput forward(const ModelConfig& cfg, const ParamStore& store, const TokenSequence& image,
                           const TokenSequence& text, ModelCache* cache = nullptr) {
  check_inputs(cfg, image, text);
  ModelOutput out;
  if (cfg.use_atrec) {
    out.recalibration = recalibrate(image, text, store, cache != nullptr ? &cache->atrec : nullptr);
  } else {
    out.recalibration.weights = Vector::Ones(text.length());
    out.recalibration.recalibrated = text.tokens();
  }
  const Matrix& x = image.tokens();
  const RegionalFeatures regions = regional_pool(x.bottomRows(x.rows() - 1), cfg.grid_h, cfg.grid_w);
  out.fusion = fuse(x, out.recalibration.recalibrated, regions, store, cfg.fuse_config(),
                    cache != nullptr ? &cache->fuse : nullptr);
  out.descriptor = compose(out.fusion.agents, cfg.variant, cfg.normalization);
  if (cache != nullptr) cache->agents = out.fusion.agents;
  return out;
}

/// Accumulates parameter gradients for dL/d(descriptor). Token gradients are returned for completeness.
struct ModelInputGrads {
  Matrix image;
  Matrix text;
};

inline ModelInputGrads backward(const ModelConfig& cfg, const ModelCache& cache, const Vector& d_descriptor,
                                ParamStore& store) {
  const AgentSet d_agents = compose_backward(cache.agents, cfg.variant, cfg.normalization, d_descriptor);
  FusionInputGrads fg = fuse_backward(cache.fuse, d_agents, store, cfg.fuse_config());
  ModelInputGrads g;
  g.image = std::move(fg.image);
  g.image.bottomRows(g.image.rows() - 1) += regional_pool_backward(fg.regions, cfg.grid_h, cfg.grid_w);
  if (cfg.use_atrec) {
    AtrecInputGrads ag = recalibrate_backward(cache.atrec, fg.text, store);
    g.image += ag.image;
    g.text = std::move(ag.text);
  } else {
    g.text = std::move(fg.text);
  }
  return g;
}

// ---------------------------------------------------------------------------
// MMWT weights file: "MMWT", u32 version, u32 entry count; per entry u32 name
// length, name bytes, u32 rank, rank x u32 dims, float32 payload (row-major).

inline constexpr std::array<char, 4> kWeightsMagic{'M', 'M', 'W', 'T'};
inline constexpr std::uint32_t kWeightsVersion = 1;

inline std::vector<std::uint8_t> encode_weights(const ParamStore& store) {
  std::vector<std::uint8_t> out;
  detail::put_bytes(out, std::string_view(kWeightsMagic.data(), 4));
  detail::put_u32(out, kWeightsVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, p] : store) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    detail::put_bytes(out, name);
    detail::put_u32(out, 2);
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.cols()));
    for (Index r = 0; r < p.value.rows(); ++r)
      for (Index c = 0; c < p.value.cols(); ++c) detail::put_f32(out, static_cast<float>(p.value(r, c)));
  }
  return out;
}

/// Rank-1 entries load as 1 x n rows.
inline ParamStore decode_weights(std::span<const std::uint8_t> bytes, const std::string& what = "weights file") {
  detail::ByteReader in(bytes, what);
  if (in.remaining() < 4 || in.bytes(4) != std::string_view(kWeightsMagic.data(), 4)) {
    throw FormatError(what + ": bad magic, expected MMWT");
  }
  const std::uint32_t version = in.u32();
  if (version != kWeightsVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = in.bytes(in.u32());
    const std::uint32_t rank = in.u32();
    if (rank < 1 || rank > 2) throw FormatError(what + ": entry '" + name + "' has unsupported rank " + std::to_string(rank));
    const std::uint32_t rows = rank == 2 ? in.u32() : 1;
    const std::uint32_t cols = in.u32();
    Matrix m(rows, cols);
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) {
        const float v = in.f32();
        if (!std::isfinite(v)) throw DataError(what + ": entry '" + name + "' has a non-finite value");
        m(r, c) = v;
      }
    }
    try {
      store.add(name, std::move(m));
    } catch (const ConfigError&) {
      throw FormatError(what + ": duplicate entry '" + name + "'");
    }
  }
  if (in.remaining() != 0) throw LengthError(what + ": " + std::to_string(in.remaining()) + " trailing bytes");
  return store;
}

inline void save_weights(const std::filesystem::path& path, const ParamStore& store) {
  detail::write_file(path, encode_weights(store));
}

inline ParamStore load_weights(const std::filesystem::path& path) {
  return decode_weights(detail::read_file(path), path.string());
}

/// Rounds every parameter through float32 so an in-memory model matches what a weights file would hold.
inline void round_to_float(ParamStore& store) {
  for (auto& [_, p] : store) p.value = p.value.cast<float>().cast<double>();
}

}  // namespace mmvpr
