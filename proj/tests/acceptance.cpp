// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: acceptance <path-to-mmvpr-cli>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "mmvpr/mmvpr.hpp"

using namespace mmvpr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* title, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("[%s] %d. %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Matrix gaussian(Index r, Index c, SplitMix64& rng) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.gaussian();
  return m;
}

// ---------------------------------------------------------------------------

Outcome dimensions() {
  SplitMix64 rng(1);
  ModelConfig m;
  m.layers = 1;
  m.hidden = 8;
  m.grid_h = 3;
  m.grid_w = 3;
  m.text_len = 4;
  const ParamStore store = init_model(m, 1);
  const TokenSequence image(gaussian(m.image_len(), 768, rng));
  const TokenSequence text(gaussian(4, 768, rng));
  std::vector<Index> dims;
  for (Variant v : {Variant::Full, Variant::ImClsAvg, Variant::TxCls}) {
    m.variant = v;
    dims.push_back(forward(m, store, image, text).descriptor.size());
  }
  const Index regions = regional_pool(gaussian(256, 8, rng), 16, 16).rows().rows();
  const bool ok = dims == std::vector<Index>{2304, 1536, 768} && regions == 14;
  return {ok, "dims " + std::to_string(dims[0]) + "/" + std::to_string(dims[1]) + "/" + std::to_string(dims[2]) +
                  ", regional features " + std::to_string(regions)};
}

Outcome gradient_audit() {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckConfig g;  // eps 1e-5, tol 1e-5, D 8, 2 heads, M 6, N 5, L 3
  const AuditResult r = run_grad_audit(g, 2024);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string failed;
  for (const auto& e : r.entries)
    if (!e.report.pass) failed += " " + e.name + "[" + e.shape + "]";
  return {r.pass() && secs < 60.0,
          fmt("%.0f checks, worst relative error %.2e, %.1fs", static_cast<double>(r.entries.size()), r.worst(), secs) +
              (failed.empty() ? "" : ", failing:" + failed)};
}

Outcome attention() {
  SplitMix64 rng(3);
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const int layers = 1 + static_cast<int>(rng.below(3));
    ParamStore s;
    init_cammf_params(s, 8, layers, rng);
    const Matrix x = gaussian(10, 8, rng);
    const Matrix y = gaussian(1 + static_cast<Index>(rng.below(6)), 8, rng);
    const FusionOutput out = fuse(x, y, regional_pool(x.bottomRows(9), 3, 3), s, {layers, 2, true, 1e-5});
    for (const auto& branch : out.attn)
      for (const Matrix& a : branch) worst = std::max(worst, (a.rowwise().sum().array() - 1.0).abs().maxCoeff());
  }

  int violations = 0;
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore s;
    init_cammf_params(s, 8, 3, rng);
    for (auto& [name, p] : s)
      if (name.ends_with("Wv")) p.value.setZero();
    const FuseConfig cfg{3, 2, true, 1e-5};
    const Matrix x = gaussian(10, 8, rng);
    const Matrix y = gaussian(4, 8, rng);
    const RegionalFeatures xa = regional_pool(x.bottomRows(9), 3, 3);
    const FusionOutput base = fuse(x, y, xa, s, cfg);
    Matrix y2 = gaussian(4, 8, rng);
    y2.row(0) = y.row(0);
    const FusionOutput text_changed = fuse(x, y2, xa, s, cfg);
    if (text_changed.agents.m != base.agents.m || text_changed.agents.a != base.agents.a) ++violations;
    Matrix x2 = gaussian(10, 8, rng);
    const FusionOutput image_changed = fuse(x2, y, regional_pool(x2.bottomRows(9), 3, 3), s, cfg);
    if (image_changed.agents.t != base.agents.t) ++violations;
  }
  return {worst <= 1e-6 && violations == 0,
          fmt("max |row sum - 1| %.1e over 100 draws, %.0f severing violations", worst, violations)};
}

std::vector<std::string> brute_force(const Vector& q, const std::vector<PlaceRecord>& db, std::size_t n) {
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& r : db) {
    double dot = 0, nq = 0, nr = 0;
    for (Index i = 0; i < q.size(); ++i) {
      dot += q[i] * r.descriptor.values[i];
      nq += q[i] * q[i];
      nr += r.descriptor.values[i] * r.descriptor.values[i];
    }
    scored.emplace_back(dot / (std::sqrt(nq) * std::sqrt(nr)), r.id);
  }
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < std::min(n, scored.size()); ++i) ids.push_back(scored[i].second);
  return ids;
}

PlaceRecord record(std::string id, double lat, Vector v, std::optional<double> heading = {}) {
  return {std::move(id), {lat, 10.0}, heading, Descriptor{std::move(v), Variant::Full, false}};
}

constexpr double kMetersPerDegree = 6371000.0 * std::numbers::pi / 180.0;

Outcome retrieval_oracle() {
  SplitMix64 rng(4);
  int mismatches = 0;
  int monotone_failures = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t size = 1 + rng.below(2000);
    const Index dim = 1 + static_cast<Index>(rng.below(64));
    std::vector<PlaceRecord> db;
    for (std::size_t i = 0; i < size; ++i) {
      Vector v = (i % 5 == 4) ? db[rng.below(i)].descriptor.values : Vector(gaussian(1, dim, rng).row(0));
      db.push_back(record("e" + std::to_string(rng.below(100000)) + "_" + std::to_string(i),
                          10.0 + static_cast<double>(rng.below(50)) * 10.0 / kMetersPerDegree, v));
    }
    std::vector<PlaceRecord> queries;
    for (int k = 0; k < 5; ++k) {
      queries.push_back(record("q" + std::to_string(k), 10.0 + static_cast<double>(rng.below(50)) * 10.0 / kMetersPerDegree,
                               gaussian(1, dim, rng).row(0)));
      const std::size_t n = 1 + rng.below(25);
      std::vector<std::string> got;
      for (const Hit& h : top_n(queries.back().descriptor, db, n)) got.push_back(db[h.index].id);
      if (got != brute_force(queries.back().descriptor.values, db, n)) ++mismatches;
    }
    if (!is_nondecreasing(recall_at_n(queries, db, MatchRule{25.0, 40.0}, {1, 2, 5, 10, 25}))) ++monotone_failures;
  }

  auto unit = [](int i) {
    Vector v = Vector::Zero(6);
    v[i] = 1;
    return v;
  };
  const double km = 1000.0 / kMetersPerDegree;
  const double offsets[] = {0, 5, 7, 1, 2, 9};
  std::vector<PlaceRecord> db;
  for (int i = 0; i < 6; ++i) db.push_back(record("d" + std::to_string(i), 10.0 + offsets[i] * km, unit(i)));
  const std::vector<PlaceRecord> q{record("q0", 10.0, unit(0)),
                                   record("q1", 10.0 + km, (Vector(6) << 0, 0, 0.9, 0.5, 0, 0).finished()),
                                   record("q2", 10.0 + 2 * km, unit(4))};
  const RecallReport r = recall_at_n(q, db, MatchRule{25.0, 40.0}, {1, 2});
  if (!is_nondecreasing(r)) ++monotone_failures;
  const bool fixture = r.recall[0] == 2.0 / 3.0 && r.recall[1] == 1.0;
  return {mismatches == 0 && monotone_failures == 0 && fixture,
          fmt("%.0f/250 top-N mismatches, fixture R@1=%.4f R@2=%.4f, %.0f non-monotone reports", mismatches, r.recall[0],
              r.recall[1], monotone_failures)};
}

Outcome geodesy() {
  const double antipode = haversine({0, 0}, {0, 180});
  const double ang = angular_diff(350, 10);
  const MatchRule rule{25.0, 40.0};
  const Vector v = Vector::Ones(2);
  const PlaceRecord q = record("q", 47.0, v, 0.0);
  const bool d_in = rule.matches(q, record("a", 47.0 + 24.9 / kMetersPerDegree, v, 0.0));
  const bool d_out = rule.matches(q, record("b", 47.0 + 25.1 / kMetersPerDegree, v, 0.0));
  const bool a_in = rule.matches(q, record("c", 47.0, v, 39.9));
  const bool a_out = rule.matches(q, record("d", 47.0, v, 40.1));
  const bool ok = std::abs(antipode - 20015086.8) <= 1.0 && ang == 20.0 && d_in && !d_out && a_in && !a_out;
  return {ok, fmt("antipode %.1f m, angular_diff(350,10)=%g", antipode, ang) +
                  ", boundary 24.9/25.1 m " + (d_in ? "pass" : "fail") + "/" + (d_out ? "pass" : "fail") +
                  ", 39.9/40.1 deg " + (a_in ? "pass" : "fail") + "/" + (a_out ? "pass" : "fail")};
}

// ---------------------------------------------------------------------------
// synthetic experiments

ModelConfig toy_model() {
  ModelConfig m;
  m.dim = 16;
  m.hidden = 32;
  m.heads = 2;
  m.layers = 3;
  m.grid_h = 3;
  m.grid_w = 3;
  m.text_len = 6;
  return m;
}

double recall_at_1(const ModelConfig& m, const ParamStore& store, const Scenario& sc, bool drop_text) {
  auto describe = [&](Role role) {
    std::vector<PlaceRecord> out;
    for (const auto* s : sc.by_role(role)) {
      const TokenSequence text =
          drop_text ? TokenSequence(Matrix::Zero(s->tokens.text.length(), s->tokens.text.dim())) : s->tokens.text;
      out.push_back({s->record.id, {s->record.lat, s->record.lon}, s->record.heading,
                     forward(m, store, s->tokens.image, text).descriptor});
    }
    return out;
  };
  return recall_at_n(describe(Role::Query), describe(Role::Database), MatchRule{25.0, 40.0}, {1}).recall[0];
}

ScenarioConfig aliasing_scenario(double text_noise) {
  ScenarioConfig sc;
  sc.kind = "aliasing";
  sc.places = 8;
  sc.db_per_place = 5;
  sc.query_per_place = 5;
  sc.train_per_place = 8;
  sc.noise = 0.05;
  sc.text_noise_fraction = text_noise;
  return sc;
}

constexpr int kTrainSteps = 500;
const std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

ParamStore trained(const ModelConfig& m, const Scenario& sc, std::uint64_t seed, double& worst_secs) {
  TrainConfig tc;
  tc.steps = kTrainSteps;
  tc.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  ParamStore s = train_toy(m, tc, sc.training_set(), init_model(m, seed)).store;
  worst_secs = std::max(worst_secs, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return s;
}

Outcome fusion_benefit() {
  double image_only = 0.0;
  double full = 0.0;
  double worst_secs = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    const ModelConfig m = toy_model();
    const Scenario sc = make_scenario(aliasing_scenario(0.0), m, seed);
    ModelConfig image_model = m;
    image_model.variant = Variant::ImClsAvg;
    const double r_img = recall_at_1(image_model, init_model(m, seed), sc, true);
    const double r_full = recall_at_1(m, trained(m, sc, seed, worst_secs), sc, false);
    image_only += r_img / 5.0;
    full += r_full / 5.0;
    per_seed += fmt(" %.3f/%.3f", r_img, r_full);
  }
  return {image_only <= 0.60 && full >= 0.90 && worst_secs <= 300.0,
          fmt("mean image-only R@1 %.3f (<= 0.60), mean FULL R@1 %.3f (>= 0.90) after %.0f steps, slowest run %.1fs;",
              image_only, full, kTrainSteps, worst_secs) +
              " per seed image/full" + per_seed};
}

Outcome ablation() {
  double with = 0.0;
  double without = 0.0;
  double worst_secs = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    ModelConfig m = toy_model();
    const Scenario sc = make_scenario(aliasing_scenario(0.3), m, seed);
    const double r_on = recall_at_1(m, trained(m, sc, seed, worst_secs), sc, false);
    m.use_atrec = false;
    const double r_off = recall_at_1(m, trained(m, sc, seed, worst_secs), sc, false);
    with += r_on / 5.0;
    without += r_off / 5.0;
    per_seed += fmt(" %.3f/%.3f", r_on, r_off);
  }
  return {with >= without,
          fmt("30%% noisy captions: mean R@1 with recalibration %.3f, without %.3f;", with, without) +
              " per seed on/off" + per_seed};
}

// ---------------------------------------------------------------------------
// CLI determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism(const std::string& cli) {
  const fs::path root = fs::temp_directory_path() / ("mmvpr_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(root);
  std::ofstream(root / "config.json") << R"({
  "model": {"dim": 16, "hidden": 32, "heads": 2, "layers": 3, "grid_h": 3, "grid_w": 3, "text_len": 6},
  "seed": 7,
  "train": {"steps": 100}
})";
  const std::string cfg = " --config " + (root / "config.json").string();
  int bad_exits = 0;
  auto pass = [&](const std::string& tag) {
    const fs::path d = root / tag;
    fs::create_directories(d);
    bad_exits += run(cli + " synth --scenario aliasing --out-manifest " + (d / "data.json").string() + cfg) != 0;
    bad_exits += run(cli + " train-toy" + cfg + " --manifest " + (d / "data.train.json").string() + " --out-weights " +
                     (d / "w.mmwt").string() + " --trace " + (d / "trace.csv").string()) != 0;
    for (const char* split : {"query", "database"}) {
      bad_exits += run(cli + " build-descriptors" + cfg + " --split " + split + " --manifest " +
                       (d / "data.json").string() + " --weights " + (d / "w.mmwt").string() + " --out " +
                       (d / (std::string(split) + ".mmds")).string()) != 0;
    }
    bad_exits += run(cli + " evaluate" + cfg + " --queries " + (d / "query.mmds").string() + " --database " +
                     (d / "database.mmds").string() + " --out-report " + (d / "report.json").string()) != 0;
    std::string bytes;
    for (const char* f : {"w.mmwt", "trace.csv", "report.json", "report.tsv"}) bytes += slurp(d / f) + '\0';
    return bytes;
  };
  const std::string a = pass("a");
  const std::string b = pass("b");
  const int grad_exit = run(cli + " gradcheck");
  std::error_code ec;
  fs::remove_all(root, ec);
  const bool same = a == b && a.size() > 16;
  return {same && bad_exits == 0 && grad_exit == 0,
          std::string("train-toy/evaluate artifacts ") + (same ? "byte-identical" : "DIFFER") + " across two runs, " +
              std::to_string(bad_exits) + " failed commands, gradcheck exit " + std::to_string(grad_exit)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: %s <mmvpr-cli>\n", argv[0]);
    return 2;
  }
  criterion(1, "dimensional fidelity", dimensions);
  criterion(2, "gradient audit", gradient_audit);
  criterion(3, "attention normalization and severing", attention);
  criterion(4, "retrieval oracle equivalence", retrieval_oracle);
  criterion(5, "geodesic correctness", geodesy);
  criterion(6, "fusion benefit under perceptual aliasing", fusion_benefit);
  criterion(7, "recalibration ablation direction", ablation);
  criterion(8, "determinism", [&] { return determinism(argv[1]); });
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
