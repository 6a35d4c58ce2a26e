#pragma once

// Synthetic place-recognition datasets built from synth_encode.
//
// "aliasing": places come in pairs that share an image archetype and differ
// only in their caption archetype, so image features alone cannot tell the
// pair apart. "clusters": every place has its own image and text archetype.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mmvpr/encoder.hpp"
#include "mmvpr/errors.hpp"
#include "mmvpr/metric.hpp"
#include "mmvpr/model.hpp"
#include "mmvpr/rng.hpp"

namespace mmvpr {

struct ScenarioConfig {
  std::string kind = "aliasing";
  int places = 8;
  int db_per_place = 5;
  int query_per_place = 5;
  int train_per_place = 8;
  double noise = 0.05;
  /// Fraction of captions in each role replaced by unstructured noise.
  double text_noise_fraction = 0.0;
  double spacing_m = 200.0;

  void validate() const {
    if (kind != "aliasing" && kind != "clusters") {
      throw ConfigError("scenario: 'kind' must be \"aliasing\" or \"clusters\"");
    }
    if (places < 2) throw ConfigError("scenario: 'places' must be at least 2");
    if (kind == "aliasing" && places % 2 != 0) throw ConfigError("scenario: aliasing needs an even 'places'");
    if (db_per_place < 0 || query_per_place < 0 || train_per_place < 0) {
      throw ConfigError("scenario: per-place counts must be non-negative");
    }
    if (!(noise >= 0.0)) throw ConfigError("scenario: 'noise' must be non-negative");
    if (!(text_noise_fraction >= 0.0 && text_noise_fraction <= 1.0)) {
      throw ConfigError("scenario: 'text_noise_fraction' must lie in [0, 1]");
    }
    if (!(spacing_m > 0.0)) throw ConfigError("scenario: 'spacing_m' must be positive");
  }
};

enum class Role { Train, Database, Query };

inline const char* role_tag(Role r) {
  switch (r) {
    case Role::Train: return "train";
    case Role::Database: return "db";
    case Role::Query: return "q";
  }
  return "?";
}

struct ScenarioSample {
  Role role;
  ManifestRecord record;  // token paths left empty
  SceneSpec spec;
  EncodedScene tokens;
};

struct Scenario {
  std::vector<ScenarioSample> samples;

  std::vector<const ScenarioSample*> by_role(Role r) const {
    std::vector<const ScenarioSample*> out;
    for (const auto& s : samples)
      if (s.role == r) out.push_back(&s);
    return out;
  }

  std::vector<TrainSample> training_set() const {
    std::vector<TrainSample> out;
    for (const auto* s : by_role(Role::Train)) out.push_back({s->record.id, s->record.place, s->tokens.image, s->tokens.text});
    return out;
  }
};

/// Place p sits spacing_m * p meters north of a fixed origin, heading (45 p) mod 360.
inline Scenario make_scenario(const ScenarioConfig& cfg, const ModelConfig& model, std::uint64_t seed) {
  cfg.validate();
  constexpr double origin_lat = 47.0;
  constexpr double origin_lon = 8.0;
  const double meters_per_degree = 6371000.0 * std::numbers::pi / 180.0;

  Scenario sc;
  const std::vector<std::pair<Role, int>> roles{
      {Role::Train, cfg.train_per_place}, {Role::Database, cfg.db_per_place}, {Role::Query, cfg.query_per_place}};
  for (const auto& [role, per_place] : roles) {
    const int count = cfg.places * per_place;
    // exactly round(fraction * count) captions per role become noise
    std::vector<int> order(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
    SplitMix64 pick(mix_seed({seed, static_cast<std::uint64_t>(role), 0x7E47ull}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[pick.below(i)]);
    const auto noisy_count = static_cast<std::size_t>(std::llround(cfg.text_noise_fraction * count));
    std::vector<bool> noisy(static_cast<std::size_t>(count), false);
    for (std::size_t i = 0; i < noisy_count; ++i) noisy[static_cast<std::size_t>(order[i])] = true;

    for (int p = 0; p < cfg.places; ++p) {
      for (int k = 0; k < per_place; ++k) {
        const int flat = p * per_place + k;
        SceneSpec spec;
        spec.place_id = p;
        spec.image_archetype = cfg.kind == "aliasing" ? p / 2 : p;
        spec.text_archetype = p;
        spec.noise_scale = cfg.noise;
        spec.grid_h = model.grid_h;
        spec.grid_w = model.grid_w;
        spec.text_len = model.text_len;
        spec.dim = model.dim;
        spec.text_is_noise = noisy[static_cast<std::size_t>(flat)];
        const std::uint64_t sample_seed =
            mix_seed({seed, static_cast<std::uint64_t>(role), static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(k)});
        ManifestRecord rec;
        rec.id = std::string(role_tag(role)) + "_p" + std::to_string(p) + "_" + std::to_string(k);
        rec.place = "p" + std::to_string(p);
        rec.lat = origin_lat + cfg.spacing_m * p / meters_per_degree;
        rec.lon = origin_lon;
        rec.heading = std::fmod(45.0 * p, 360.0);
        rec.split = role == Role::Query ? Split::Query : Split::Database;
        sc.samples.push_back({role, std::move(rec), spec, synth_encode(spec, sample_seed)});
      }
    }
  }
  return sc;
}

}  // namespace mmvpr
