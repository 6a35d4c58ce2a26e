#include <gtest/gtest.h>

#include "mmvpr/config.hpp"

namespace mmvpr {
namespace {

using nlohmann::json;

TEST(Config, DefaultsFromEmptyDocument) {
  const RunConfig c = parse_config(json::object());
  EXPECT_EQ(c.model.dim, 768);
  EXPECT_EQ(c.model.hidden, 256);
  EXPECT_EQ(c.model.layers, 3);
  EXPECT_EQ(c.model.variant, Variant::Full);
  EXPECT_EQ(c.model.descriptor_size(), 2304);
  EXPECT_EQ(c.match.max_distance, 25.0);
  EXPECT_EQ(c.match.max_angle, 40.0);
  EXPECT_EQ(c.ns, (std::vector<int>{1, 5, 10}));
}

TEST(Config, FieldsAreRead) {
  const RunConfig c = parse_config(json::parse(R"({
    "model": {"dim": 16, "heads": 2, "layers": 5, "variant": "TX_CLS", "normalization": "per_segment"},
    "match": {"max_distance": 10, "max_angle": null},
    "ns": [1, 2],
    "seed": 77,
    "train": {"steps": 12, "optimizer": "sgd", "ms": {"alpha": 2, "mine": false}},
    "scenario": {"kind": "clusters", "places": 3},
    "gradcheck": {"tol": 1e-4}
  })"));
  EXPECT_EQ(c.model.dim, 16);
  EXPECT_EQ(c.model.layers, 5);
  EXPECT_EQ(c.model.variant, Variant::TxCls);
  EXPECT_EQ(c.model.normalization, Normalization::PerSegment);
  EXPECT_FALSE(c.match.max_angle.has_value());
  EXPECT_EQ(c.seed, 77u);
  EXPECT_EQ(c.train.seed, 77u);
  EXPECT_EQ(c.train.optimizer.kind, OptimizerKind::Sgd);
  EXPECT_EQ(c.train.hyper.alpha, 2.0);
  EXPECT_FALSE(c.train.hyper.mine);
  EXPECT_EQ(c.scenario.kind, "clusters");
  EXPECT_EQ(c.gradcheck.tol, 1e-4);
}

TEST(Config, RoundTripsThroughJson) {
  RunConfig c;
  c.model.dim = 32;
  c.model.heads = 4;
  c.match.max_angle.reset();
  c.seed = 5;
  c.train.seed = 5;
  c.scenario.text_noise_fraction = 0.3;
  const json j = config_to_json(c);
  EXPECT_EQ(config_to_json(parse_config(j)), j);
}

void expect_error_naming(const char* text, const std::string& field) {
  try {
    parse_config(json::parse(text));
    FAIL() << "accepted " << text;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
  }
}

TEST(Config, ErrorsNameTheField) {
  expect_error_naming(R"({"model": {"dimm": 3}})", "model.dimm");
  expect_error_naming(R"({"colour": 1})", "colour");
  expect_error_naming(R"({"train": {"ms": {"gamma": 1}}})", "train.ms.gamma");
  expect_error_naming(R"({"model": {"dim": "big"}})", "model.dim");
  expect_error_naming(R"({"model": {"layers": 0}})", "layers");
  expect_error_naming(R"({"model": {"dim": 10, "heads": 4}})", "heads");
  expect_error_naming(R"({"ns": [5, 1]})", "ns");
  expect_error_naming(R"({"model": {"variant": "BOTH"}})", "BOTH");
  expect_error_naming(R"({"train": {"optimizer": "adam"}})", "train.optimizer");
}

TEST(Config, MissingFile) { EXPECT_THROW(load_config("/nonexistent/config.json"), DataError); }

}  // namespace
}  // namespace mmvpr
