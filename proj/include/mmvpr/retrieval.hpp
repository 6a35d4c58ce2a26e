#pragma once

// Geodesic ground truth, exhaustive top-N search and Recall@N.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmvpr/descriptor.hpp"
#include "mmvpr/errors.hpp"

namespace mmvpr {

inline constexpr double kEarthRadiusMeters = 6371000.0;

inline void validate(const GeoPoint& p) {
  if (!(p.lat >= -90.0 && p.lat <= 90.0)) throw ValidationError("latitude " + std::to_string(p.lat) + " outside [-90, 90]");
  if (!(p.lon >= -180.0 && p.lon <= 180.0)) {
    throw ValidationError("longitude " + std::to_string(p.lon) + " outside [-180, 180]");
  }
}

/// Great-circle distance in meters on a sphere of radius 6,371,000 m.
inline double haversine(const GeoPoint& a, const GeoPoint& b) {
  validate(a);
  validate(b);
  constexpr double deg = std::numbers::pi / 180.0;
  const double dlat = (b.lat - a.lat) * deg;
  const double dlon = (b.lon - a.lon) * deg;
  const double s_lat = std::sin(dlat / 2.0);
  const double s_lon = std::sin(dlon / 2.0);
  double h = s_lat * s_lat + std::cos(a.lat * deg) * std::cos(b.lat * deg) * s_lon * s_lon;
  h = std::clamp(h, 0.0, 1.0);
  return 2.0 * kEarthRadiusMeters * std::asin(std::sqrt(h));
}

/// Smallest angle between two headings, in [0, 180].
inline double angular_diff(double h1, double h2) {
  const double d = std::fmod(std::abs(h1 - h2), 360.0);
  return std::min(d, 360.0 - d);
}

struct MatchRule {
  double max_distance = 25.0;        // meters
  std::optional<double> max_angle;   // degrees; only applied when both records carry a heading

  void validate() const {
    if (!(max_distance > 0.0)) throw ValidationError("match rule: max_distance must be positive");
    if (max_angle && !(*max_angle >= 0.0)) throw ValidationError("match rule: max_angle must be non-negative");
  }

  bool matches(const PlaceRecord& query, const PlaceRecord& candidate) const {
    if (haversine(query.location, candidate.location) > max_distance) return false;
    if (max_angle && query.heading && candidate.heading) return angular_diff(*query.heading, *candidate.heading) <= *max_angle;
    return true;
  }
};

// ---------------------------------------------------------------------------
// top-N

struct Hit {
  std::size_t index;  // position in the database
  double score;
};

/// Highest score first; equal scores by ascending id.
inline bool ranks_before(const Hit& a, const Hit& b, const std::vector<PlaceRecord>& db) {
  if (a.score != b.score) return a.score > b.score;
  return db[a.index].id < db[b.index].id;
}

inline std::vector<Hit> top_n(const Descriptor& query, const std::vector<PlaceRecord>& db, std::size_t n) {
  if (n < 1) throw ValidationError("top_n: n must be at least 1");
  if (db.empty()) throw ValidationError("top_n: empty database");
  std::vector<Hit> hits;
  hits.reserve(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    const Descriptor& d = db[i].descriptor;
    if (d.variant != query.variant || d.size() != query.size()) {
      throw ContractError("top_n: database entry '" + db[i].id + "' is " + to_string(d.variant) + "/" +
                          std::to_string(d.size()) + ", query is " + to_string(query.variant) + "/" +
                          std::to_string(query.size()));
    }
    hits.push_back({i, similarity(query.values, d.values)});
  }
  const std::size_t k = std::min(n, hits.size());
  auto cmp = [&db](const Hit& a, const Hit& b) { return ranks_before(a, b, db); };
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), cmp);
  hits.resize(k);
  return hits;
}

// ---------------------------------------------------------------------------
// Recall@N

struct QueryResult {
  std::string id;
  std::vector<std::string> retrieved;  // top max(N) ids
  std::vector<double> scores;
  std::vector<bool> correct;           // per retrieved id
  bool has_positive = false;
};

struct RecallReport {
  std::vector<int> ns;
  std::vector<double> recall;  // parallel to ns
  MatchRule rule;
  std::size_t query_count = 0;
  std::size_t evaluated = 0;         // queries with at least one positive in the database
  std::size_t without_positive = 0;  // excluded from the denominator
  std::vector<QueryResult> queries;
};

inline RecallReport recall_at_n(const std::vector<PlaceRecord>& queries, const std::vector<PlaceRecord>& db,
                                const MatchRule& rule, const std::vector<int>& ns) {
  if (queries.empty()) throw ValidationError("recall_at_n: empty query set");
  if (ns.empty()) throw ValidationError("recall_at_n: no N values");
  if (!std::is_sorted(ns.begin(), ns.end()) || ns.front() < 1) {
    throw ValidationError("recall_at_n: N values must be positive and ascending");
  }
  rule.validate();
  for (const auto& r : db) validate(r.location);

  RecallReport report;
  report.ns = ns;
  report.rule = rule;
  report.query_count = queries.size();
  std::vector<std::size_t> localized(ns.size(), 0);
  const auto depth = static_cast<std::size_t>(ns.back());
  for (const auto& q : queries) {
    QueryResult qr;
    qr.id = q.id;
    qr.has_positive = std::any_of(db.begin(), db.end(), [&](const PlaceRecord& r) { return rule.matches(q, r); });
    for (const Hit& h : top_n(q.descriptor, db, depth)) {
      qr.retrieved.push_back(db[h.index].id);
      qr.scores.push_back(h.score);
      qr.correct.push_back(rule.matches(q, db[h.index]));
    }
    if (qr.has_positive) {
      ++report.evaluated;
      const auto first = std::find(qr.correct.begin(), qr.correct.end(), true);
      const auto rank = static_cast<std::size_t>(first - qr.correct.begin());
      for (std::size_t k = 0; k < ns.size(); ++k) {
        if (rank < static_cast<std::size_t>(ns[k])) ++localized[k];
      }
    } else {
      ++report.without_positive;
    }
    report.queries.push_back(std::move(qr));
  }
  for (std::size_t k = 0; k < ns.size(); ++k) {
    report.recall.push_back(report.evaluated == 0 ? 0.0
                                                  : static_cast<double>(localized[k]) / static_cast<double>(report.evaluated));
  }
  return report;
}

inline bool is_nondecreasing(const RecallReport& r) { return std::is_sorted(r.recall.begin(), r.recall.end()); }

/// One line per N: `N<TAB>recall` with four decimals.
inline std::string report_to_tsv(const RecallReport& r) {
  std::string out;
  char buf[64];
  for (std::size_t k = 0; k < r.ns.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%d\t%.4f\n", r.ns[k], r.recall[k]);
    out += buf;
  }
  return out;
}

inline nlohmann::json report_to_json(const RecallReport& r) {
  nlohmann::json j;
  j["ns"] = r.ns;
  j["recall"] = r.recall;
  j["rule"]["max_distance"] = r.rule.max_distance;
  j["rule"]["max_angle"] = r.rule.max_angle ? nlohmann::json(*r.rule.max_angle) : nlohmann::json(nullptr);
  j["query_count"] = r.query_count;
  j["evaluated"] = r.evaluated;
  j["without_positive"] = r.without_positive;
  j["queries"] = nlohmann::json::array();
  for (const auto& q : r.queries) {
    nlohmann::json jq;
    jq["id"] = q.id;
    jq["retrieved"] = q.retrieved;
    jq["scores"] = q.scores;
    jq["correct"] = q.correct;
    jq["has_positive"] = q.has_positive;
    j["queries"].push_back(std::move(jq));
  }
  return j;
}

inline RecallReport report_from_json(const nlohmann::json& j) {
  try {
    RecallReport r;
    r.ns = j.at("ns").get<std::vector<int>>();
    r.recall = j.at("recall").get<std::vector<double>>();
    if (r.ns.size() != r.recall.size()) throw FormatError("recall report: 'ns' and 'recall' differ in length");
    r.rule.max_distance = j.at("rule").at("max_distance").get<double>();
    if (!j.at("rule").at("max_angle").is_null()) r.rule.max_angle = j.at("rule").at("max_angle").get<double>();
    r.query_count = j.at("query_count").get<std::size_t>();
    r.evaluated = j.at("evaluated").get<std::size_t>();
    r.without_positive = j.at("without_positive").get<std::size_t>();
    for (const auto& jq : j.at("queries")) {
      QueryResult q;
      q.id = jq.at("id").get<std::string>();
      q.retrieved = jq.at("retrieved").get<std::vector<std::string>>();
      q.scores = jq.at("scores").get<std::vector<double>>();
      q.correct = jq.at("correct").get<std::vector<bool>>();
      q.has_positive = jq.at("has_positive").get<bool>();
      r.queries.push_back(std::move(q));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("recall report: ") + e.what());
  }
}

}  // namespace mmvpr
