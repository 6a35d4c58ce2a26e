#pragma once

// RunConfig: every knob of a run in one JSON document. Unknown keys are
// rejected so that a typo never silently falls back to a default.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmvpr/descriptor.hpp"
#include "mmvpr/errors.hpp"
#include "mmvpr/metric.hpp"
#include "mmvpr/model.hpp"
#include "mmvpr/retrieval.hpp"
#include "mmvpr/scenario.hpp"

namespace mmvpr {

/// Toy shapes used by the gradient audit.
struct GradCheckConfig {
  double eps = 1e-5;
  double tol = 1e-5;
  int dim = 8;
  int heads = 2;
  int image_len = 6;
  int text_len = 5;
  int hidden = 4;
  int layers = 3;
  int trials = 3;
};

struct RunConfig {
  ModelConfig model;
  MatchRule match{25.0, 40.0};
  std::vector<int> ns{1, 5, 10};
  std::uint64_t seed = 0;
  TrainConfig train;
  ScenarioConfig scenario;
  GradCheckConfig gradcheck;

  void validate() const {
    model.validate();
    match.validate();
    if (ns.empty() || !std::is_sorted(ns.begin(), ns.end()) || ns.front() < 1) {
      throw ConfigError("config: 'ns' must be a non-empty ascending list of positive integers");
    }
    train.hyper.validate();
    if (train.places < 1 || train.per_place < 2) throw ConfigError("config: 'train.places' >= 1 and 'train.per_place' >= 2");
    if (train.steps < 0) throw ConfigError("config: 'train.steps' must be non-negative");
    if (!(train.lr > 0.0)) throw ConfigError("config: 'train.lr' must be positive");
    scenario.validate();
    if (!(gradcheck.eps > 0.0) || !(gradcheck.tol > 0.0)) throw ConfigError("config: 'gradcheck.eps' and 'gradcheck.tol' must be positive");
    if (gradcheck.dim % gradcheck.heads != 0) throw ConfigError("config: 'gradcheck.heads' must divide 'gradcheck.dim'");
    if (gradcheck.image_len < 2) throw ConfigError("config: 'gradcheck.image_len' must be at least 2");
  }
};

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
    for (const auto& [k, _] : j_.items()) unseen_.insert(k);
  }

  template <typename T>
  void read(const char* key, T& out) {
    if (!j_.contains(key)) return;
    unseen_.erase(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: field '" + field(key) + "' has the wrong type");
    }
  }

  const nlohmann::json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    unseen_.erase(key);
    return &j_.at(key);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    if (!unseen_.empty()) throw ConfigError("config: unknown field '" + field(*unseen_.begin()) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> unseen_;
};

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& doc) {
  RunConfig c;
  detail::ObjectReader root(doc, "");
  if (const auto* m = root.child("model")) {
    detail::ObjectReader r(*m, "model");
    auto& mc = c.model;
    r.read("dim", mc.dim);
    r.read("hidden", mc.hidden);
    r.read("layers", mc.layers);
    r.read("heads", mc.heads);
    r.read("grid_h", mc.grid_h);
    r.read("grid_w", mc.grid_w);
    r.read("text_len", mc.text_len);
    r.read("use_atrec", mc.use_atrec);
    r.read("post_norm", mc.post_norm);
    r.read("ln_eps", mc.ln_eps);
    std::string variant = to_string(mc.variant);
    r.read("variant", variant);
    mc.variant = parse_variant(variant);
    std::string norm = "whole";
    r.read("normalization", norm);
    if (norm == "whole") {
      mc.normalization = Normalization::Whole;
    } else if (norm == "per_segment") {
      mc.normalization = Normalization::PerSegment;
    } else if (norm == "none") {
      mc.normalization = Normalization::None;
    } else {
      throw ConfigError("config: field 'model.normalization' must be whole, per_segment or none");
    }
    r.finish();
  }
  if (const auto* m = root.child("match")) {
    detail::ObjectReader r(*m, "match");
    r.read("max_distance", c.match.max_distance);
    if (const auto* a = r.child("max_angle")) {
      if (a->is_null()) {
        c.match.max_angle.reset();
      } else if (a->is_number()) {
        c.match.max_angle = a->get<double>();
      } else {
        throw ConfigError("config: field 'match.max_angle' must be a number or null");
      }
    }
    r.finish();
  }
  root.read("ns", c.ns);
  root.read("seed", c.seed);
  if (const auto* t = root.child("train")) {
    detail::ObjectReader r(*t, "train");
    auto& tc = c.train;
    r.read("places", tc.places);
    r.read("per_place", tc.per_place);
    r.read("steps", tc.steps);
    r.read("lr", tc.lr);
    r.read("final_lr_fraction", tc.final_lr_fraction);
    r.read("weight_decay", tc.optimizer.weight_decay);
    r.read("train_atrec", tc.train_atrec);
    r.read("train_cammf", tc.train_cammf);
    std::string opt = tc.optimizer.kind == OptimizerKind::AdamW ? "adamw" : "sgd";
    r.read("optimizer", opt);
    if (opt == "adamw") {
      tc.optimizer.kind = OptimizerKind::AdamW;
    } else if (opt == "sgd") {
      tc.optimizer.kind = OptimizerKind::Sgd;
    } else {
      throw ConfigError("config: field 'train.optimizer' must be adamw or sgd");
    }
    if (const auto* ms = r.child("ms")) {
      detail::ObjectReader mr(*ms, "train.ms");
      mr.read("alpha", tc.hyper.alpha);
      mr.read("beta", tc.hyper.beta);
      mr.read("lambda", tc.hyper.lambda);
      mr.read("mining_margin", tc.hyper.mining_margin);
      mr.read("mine", tc.hyper.mine);
      mr.finish();
    }
    r.finish();
  }
  if (const auto* s = root.child("scenario")) {
    detail::ObjectReader r(*s, "scenario");
    auto& sc = c.scenario;
    r.read("kind", sc.kind);
    r.read("places", sc.places);
    r.read("db_per_place", sc.db_per_place);
    r.read("query_per_place", sc.query_per_place);
    r.read("train_per_place", sc.train_per_place);
    r.read("noise", sc.noise);
    r.read("text_noise_fraction", sc.text_noise_fraction);
    r.read("spacing_m", sc.spacing_m);
    r.finish();
  }
  if (const auto* g = root.child("gradcheck")) {
    detail::ObjectReader r(*g, "gradcheck");
    auto& gc = c.gradcheck;
    r.read("eps", gc.eps);
    r.read("tol", gc.tol);
    r.read("dim", gc.dim);
    r.read("heads", gc.heads);
    r.read("image_len", gc.image_len);
    r.read("text_len", gc.text_len);
    r.read("hidden", gc.hidden);
    r.read("layers", gc.layers);
    r.read("trials", gc.trials);
    r.finish();
  }
  root.finish();
  c.train.seed = c.seed;
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  const auto& m = c.model;
  j["model"] = {{"dim", m.dim},
                {"hidden", m.hidden},
                {"layers", m.layers},
                {"heads", m.heads},
                {"grid_h", m.grid_h},
                {"grid_w", m.grid_w},
                {"text_len", m.text_len},
                {"use_atrec", m.use_atrec},
                {"post_norm", m.post_norm},
                {"ln_eps", m.ln_eps},
                {"variant", to_string(m.variant)},
                {"normalization", m.normalization == Normalization::Whole
                                      ? "whole"
                                      : (m.normalization == Normalization::PerSegment ? "per_segment" : "none")}};
  j["match"] = {{"max_distance", c.match.max_distance},
                {"max_angle", c.match.max_angle ? nlohmann::json(*c.match.max_angle) : nlohmann::json(nullptr)}};
  j["ns"] = c.ns;
  j["seed"] = c.seed;
  const auto& t = c.train;
  j["train"] = {{"places", t.places},
                {"per_place", t.per_place},
                {"steps", t.steps},
                {"lr", t.lr},
                {"final_lr_fraction", t.final_lr_fraction},
                {"weight_decay", t.optimizer.weight_decay},
                {"optimizer", t.optimizer.kind == OptimizerKind::AdamW ? "adamw" : "sgd"},
                {"train_atrec", t.train_atrec},
                {"train_cammf", t.train_cammf},
                {"ms",
                 {{"alpha", t.hyper.alpha},
                  {"beta", t.hyper.beta},
                  {"lambda", t.hyper.lambda},
                  {"mining_margin", t.hyper.mining_margin},
                  {"mine", t.hyper.mine}}}};
  const auto& s = c.scenario;
  j["scenario"] = {{"kind", s.kind},
                   {"places", s.places},
                   {"db_per_place", s.db_per_place},
                   {"query_per_place", s.query_per_place},
                   {"train_per_place", s.train_per_place},
                   {"noise", s.noise},
                   {"text_noise_fraction", s.text_noise_fraction},
                   {"spacing_m", s.spacing_m}};
  const auto& g = c.gradcheck;
  j["gradcheck"] = {{"eps", g.eps},         {"tol", g.tol},       {"dim", g.dim},
                    {"heads", g.heads},     {"image_len", g.image_len}, {"text_len", g.text_len},
                    {"hidden", g.hidden},   {"layers", g.layers}, {"trials", g.trials}};
  return j;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path.string() + "'");
  try {
    return parse_config(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config '" + path.string() + "': " + e.what());
  }
}

}  // namespace mmvpr
