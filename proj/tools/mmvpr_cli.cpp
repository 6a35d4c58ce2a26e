// mmvpr: synthetic data, descriptor building, training, evaluation,
// attention export and the gradient audit behind one binary.
//
// Exit codes: 0 success, 2 usage or config error, 3 data or format error,
// 4 check failure.

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmvpr/mmvpr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmvpr;

namespace {

class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path sidecar(const fs::path& artifact) { return fs::path(artifact.string() + ".json"); }

/// Options shared by every subcommand; flags win over the config file.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;

  void attach(CLI::App* app, bool config_required) {
    auto* opt = app->add_option("--config", config_path, "run configuration (JSON)");
    if (config_required) opt->required();
    app->add_option("--seed", seed, "overrides 'seed'");
    app->add_option("--variant", variant, "overrides 'model.variant' (FULL, IM_CLS_AVG, TX_CLS)");
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed) {
      c.seed = *seed;
      c.train.seed = *seed;
    }
    if (variant) c.model.variant = parse_variant(*variant);
    c.validate();
    return c;
  }
};

json run_header(const std::string& command, const RunConfig& c) {
  return {{"command", command}, {"seed", c.seed}, {"config", config_to_json(c)}};
}

PlaceRecord describe(const RunConfig& c, const ParamStore& store, const ManifestRecord& r) {
  const EncodedScene tokens = load_record_tokens(r, c.model.text_len);
  return {r.id, {r.lat, r.lon}, r.heading, forward(c.model, store, tokens.image, tokens.text).descriptor};
}

// ---------------------------------------------------------------------------

void cmd_synth(const RunConfig& c, const std::string& kind, const fs::path& out_manifest) {
  ScenarioConfig sc = c.scenario;
  sc.kind = kind;
  const Scenario scenario = make_scenario(sc, c.model, c.seed);
  const fs::path base = out_manifest.parent_path();
  const fs::path token_dir = base / (out_manifest.stem().string() + "_tokens");
  fs::create_directories(token_dir);

  std::vector<ManifestRecord> eval_records;
  std::vector<ManifestRecord> train_records;
  for (const auto& s : scenario.samples) {
    ManifestRecord r = s.record;
    r.image_tokens = {token_dir / (r.id + ".img.mmtk")};
    r.text_tokens = token_dir / (r.id + ".txt.mmtk");
    save_tokens(r.image_tokens.front(), s.tokens.image);
    save_tokens(*r.text_tokens, s.tokens.text);
    (s.role == Role::Train ? train_records : eval_records).push_back(std::move(r));
  }
  write_json(out_manifest, manifest_to_json(eval_records, base));
  const fs::path train_manifest = base / (out_manifest.stem().string() + ".train.json");
  write_json(train_manifest, manifest_to_json(train_records, base));

  json run = run_header("synth", c);
  run["config"]["scenario"]["kind"] = kind;
  run["records"] = eval_records.size();
  run["train_records"] = train_records.size();
  run["train_manifest"] = train_manifest.filename().string();
  write_json(sidecar(out_manifest), run);
  std::cout << "wrote " << eval_records.size() << " records to " << out_manifest.string() << " and "
            << train_records.size() << " to " << train_manifest.string() << "\n";
}

void cmd_train(const RunConfig& c, const fs::path& out_weights, const fs::path& trace_path,
               const std::string& manifest) {
  std::vector<TrainSample> samples;
  if (manifest.empty()) {
    samples = make_scenario(c.scenario, c.model, c.seed).training_set();
  } else {
    for (const auto& r : load_manifest(manifest)) {
      EncodedScene t = load_record_tokens(r, c.model.text_len);
      samples.push_back({r.id, r.place, std::move(t.image), std::move(t.text)});
    }
  }
  TrainResult result = train_toy(c.model, c.train, samples, init_model(c.model, c.seed));
  round_to_float(result.store);
  const auto bytes = encode_weights(result.store);
  detail::write_file(out_weights, bytes);
  write_text(trace_path, trace_to_csv(result.trace));

  json run = run_header("train-toy", c);
  run["samples"] = samples.size();
  run["manifest"] = manifest.empty() ? json(nullptr) : json(manifest);
  run["steps"] = result.trace.size();
  run["final_loss"] = result.trace.empty() ? json(nullptr) : json(result.trace.back().loss);
  run["weights_sha256"] = sha256_hex(bytes);
  write_json(sidecar(out_weights), run);
  std::cout << "trained " << result.trace.size() << " steps on " << samples.size() << " samples; weights sha256 "
            << run["weights_sha256"].get<std::string>() << "\n";
}

void cmd_build(const RunConfig& c, const fs::path& manifest, const fs::path& weights, const fs::path& out,
               const std::string& split) {
  if (split != "all" && split != "query" && split != "database") {
    throw ConfigError("--split must be query, database or all");
  }
  const auto weight_bytes = detail::read_file(weights);
  const ParamStore store = decode_weights(weight_bytes, weights.string());
  std::vector<PlaceRecord> records;
  for (const auto& r : load_manifest(manifest)) {
    if (split != "all" && to_string(r.split) != split) continue;
    records.push_back(describe(c, store, r));
  }
  if (records.empty()) throw DataError("manifest '" + manifest.string() + "' has no '" + split + "' records");
  save_store(out, records);

  json run = run_header("build-descriptors", c);
  run["split"] = split;
  run["records"] = records.size();
  run["dim"] = records.front().descriptor.size();
  run["weights_sha256"] = sha256_hex(weight_bytes);
  write_json(sidecar(out), run);
  std::cout << "wrote " << records.size() << " descriptors of dim " << records.front().descriptor.size() << " to "
            << out.string() << "\n";
}

std::optional<std::string> weights_hash_of(const fs::path& store) {
  std::ifstream in(sidecar(store));
  if (!in) return std::nullopt;
  try {
    const json j = json::parse(in);
    if (j.contains("weights_sha256")) return j.at("weights_sha256").get<std::string>();
  } catch (const json::exception&) {
  }
  return std::nullopt;
}

void cmd_evaluate(const RunConfig& c, const fs::path& queries, const fs::path& database, const fs::path& out_report) {
  const auto qbytes = detail::read_file(queries);
  const auto dbytes = detail::read_file(database);
  const auto q = decode_store(qbytes, c.model.variant, queries.string());
  const auto db = decode_store(dbytes, c.model.variant, database.string());
  const RecallReport report = recall_at_n(q, db, c.match, c.ns);

  json j = report_to_json(report);
  j["run"] = run_header("evaluate", c);
  j["run"]["queries_sha256"] = sha256_hex(qbytes);
  j["run"]["database_sha256"] = sha256_hex(dbytes);
  const auto qw = weights_hash_of(queries);
  const auto dw = weights_hash_of(database);
  j["run"]["weights_sha256"] = qw ? json(*qw) : json(nullptr);
  if (qw && dw && *qw != *dw) throw DataError("query and database stores were built with different weights");
  write_json(out_report, j);
  fs::path tsv = out_report;
  tsv.replace_extension(".tsv");
  const std::string table = report_to_tsv(report);
  write_text(tsv, table);
  std::cout << table;
}

json attention_block(const std::vector<Matrix>& layers, const std::vector<std::string>& labels) {
  json j;
  j["key_labels"] = labels;
  j["layers"] = json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    json heads = json::array();
    for (Index h = 0; h < layers[l].rows(); ++h) {
      std::vector<double> row(layers[l].cols());
      for (Index k = 0; k < layers[l].cols(); ++k) row[static_cast<std::size_t>(k)] = layers[l](h, k);
      heads.push_back(row);
    }
    j["layers"].push_back({{"layer", l + 1}, {"heads", heads}});
  }
  return j;
}

void cmd_dump_attention(const RunConfig& c, const fs::path& manifest, const fs::path& weights, const fs::path& out) {
  const auto weight_bytes = detail::read_file(weights);
  const ParamStore store = decode_weights(weight_bytes, weights.string());
  const auto& m = c.model;

  std::vector<std::string> text_labels;
  for (int i = 0; i < m.text_len; ++i) text_labels.push_back("text_" + std::to_string(i));
  std::vector<std::string> image_labels{"cls"};
  for (int r = 0; r < m.grid_h; ++r)
    for (int col = 0; col < m.grid_w; ++col) image_labels.push_back("patch_" + std::to_string(r) + "_" + std::to_string(col));
  for (const auto& cell : region_cells(m.grid_h, m.grid_w)) {
    image_labels.push_back("reg_" + std::to_string(cell.level) + "_" + std::to_string(cell.index));
  }

  json j = run_header("dump-attention", c);
  j["weights_sha256"] = sha256_hex(weight_bytes);
  j["records"] = json::array();
  for (const auto& r : load_manifest(manifest)) {
    const EncodedScene t = load_record_tokens(r, m.text_len);
    const ModelOutput o = forward(m, store, t.image, t.text);
    json rec;
    rec["id"] = r.id;
    const Vector& s = o.recalibration.weights;
    rec["S"] = std::vector<double>(s.data(), s.data() + s.size());
    for (Branch b : kBranches) {
      rec["attention"][branch_tag(b)] =
          attention_block(o.fusion.attn[static_cast<std::size_t>(b)], b == Branch::Text ? image_labels : text_labels);
    }
    j["records"].push_back(std::move(rec));
  }
  write_json(out, j);
  std::cout << "wrote attention for " << j["records"].size() << " records to " << out.string() << "\n";
}

void cmd_gradcheck(RunConfig c, std::optional<double> tol) {
  if (tol) {
    if (!(*tol > 0.0)) throw ConfigError("--tol must be positive");
    c.gradcheck.tol = *tol;
  }
  const AuditResult result = run_grad_audit(c.gradcheck, c.seed);
  char buf[256];
  for (const auto& e : result.entries) {
    std::snprintf(buf, sizeof buf, "%-16s %-40s max_rel_error=%.3e %s\n", e.name.c_str(), e.shape.c_str(),
                  e.report.worst(), e.report.pass ? "PASS" : "FAIL");
    std::cout << buf;
  }
  std::snprintf(buf, sizeof buf, "gradcheck seed=%llu eps=%g tol=%g worst=%.3e: %s\n",
                static_cast<unsigned long long>(c.seed), c.gradcheck.eps, c.gradcheck.tol, result.worst(),
                result.pass() ? "PASS" : "FAIL");
  std::cout << buf;
  if (!result.pass()) throw CheckFailed("gradient audit failed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-modal place recognition toolkit"};
  app.require_subcommand(1);

  Common synth_opts;
  std::string scenario_kind;
  std::string out_manifest;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset and its manifests");
  synth_opts.attach(synth, false);
  synth->add_option("--scenario", scenario_kind, "aliasing or clusters")->required()->check(CLI::IsMember({"aliasing", "clusters"}));
  synth->add_option("--out-manifest", out_manifest)->required();

  Common train_opts;
  std::string out_weights, trace, train_manifest;
  std::optional<int> steps;
  auto* train = app.add_subcommand("train-toy", "train the fusion model with the multi-similarity loss");
  train_opts.attach(train, true);
  train->add_option("--out-weights", out_weights)->required();
  train->add_option("--trace", trace)->required();
  train->add_option("--manifest", train_manifest, "training manifest; defaults to the configured synthetic scenario");
  train->add_option("--steps", steps, "overrides 'train.steps'");

  Common build_opts;
  std::string build_manifest, build_weights, build_out, split = "all";
  auto* build = app.add_subcommand("build-descriptors", "encode manifest records into a descriptor store");
  build_opts.attach(build, true);
  build->add_option("--manifest", build_manifest)->required();
  build->add_option("--weights", build_weights)->required();
  build->add_option("--out", build_out)->required();
  build->add_option("--split", split, "query, database or all");

  Common eval_opts;
  std::string queries, database, out_report;
  auto* evaluate = app.add_subcommand("evaluate", "Recall@N of a query store against a database store");
  eval_opts.attach(evaluate, true);
  evaluate->add_option("--queries", queries)->required();
  evaluate->add_option("--database", database)->required();
  evaluate->add_option("--out-report", out_report)->required();

  Common dump_opts;
  std::string dump_manifest, dump_weights, dump_out;
  auto* dump = app.add_subcommand("dump-attention", "export recalibration and cross-attention weights");
  dump_opts.attach(dump, true);
  dump->add_option("--manifest", dump_manifest)->required();
  dump->add_option("--weights", dump_weights)->required();
  dump->add_option("--out", dump_out)->required();

  Common grad_opts;
  std::optional<double> tol;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference audit of every backward pass");
  grad_opts.attach(grad, false);
  grad->add_option("--tol", tol, "overrides 'gradcheck.tol'");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      cmd_synth(synth_opts.resolve(), scenario_kind, out_manifest);
    } else if (*train) {
      RunConfig c = train_opts.resolve();
      if (steps) c.train.steps = *steps;
      c.validate();
      cmd_train(c, out_weights, trace, train_manifest);
    } else if (*build) {
      cmd_build(build_opts.resolve(), build_manifest, build_weights, build_out, split);
    } else if (*evaluate) {
      cmd_evaluate(eval_opts.resolve(), queries, database, out_report);
    } else if (*dump) {
      cmd_dump_attention(dump_opts.resolve(), dump_manifest, dump_weights, dump_out);
    } else if (*grad) {
      cmd_gradcheck(grad_opts.resolve(), tol);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckFailed& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
