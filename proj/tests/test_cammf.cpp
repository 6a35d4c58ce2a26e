#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "mmvpr/cammf.hpp"
#include "mmvpr/gradaudit.hpp"
#include "test_support.hpp"

namespace mmvpr {
namespace {

using testing::random_matrix;
using testing::random_vector;

// ---------------------------------------------------------------------------
// regional pooling

TEST(RegionalPool, ConstantPatches) {
  const Matrix patches = Matrix::Constant(16, 3, 2.5);
  const RegionalFeatures r = regional_pool(patches, 4, 4);
  EXPECT_EQ(r.rows(), Matrix::Constant(14, 3, 2.5));
}

TEST(RegionalPool, FourByFourGridAgainstBruteForce) {
  Matrix patches(16, 1);
  for (int i = 0; i < 16; ++i) patches(i, 0) = i + 1;
  const Matrix r = regional_pool(patches, 4, 4).rows();
  const std::vector<double> expected{8.5, 3.5, 5.5, 11.5, 13.5, 1, 2, 3.5, 5, 6, 7.5, 11, 12, 13.5};
  for (int k = 0; k < 14; ++k) EXPECT_DOUBLE_EQ(r(k, 0), expected[static_cast<std::size_t>(k)]) << "cell " << k;
}

TEST(RegionalPool, FirstRowIsTheGlobalPatchMean) {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Index h = 3 + static_cast<Index>(rng.below(14));
    const Index w = 3 + static_cast<Index>(rng.below(14));
    const Matrix patches = random_matrix(h * w, 5, rng);
    const Matrix r = regional_pool(patches, h, w).rows();
    EXPECT_LE((r.row(0) - patches.colwise().mean()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(RegionalPool, SixteenGridCellsTileTheGrid) {
  const auto cells = region_cells(16, 16);
  ASSERT_EQ(cells.size(), 14u);
  for (int level = 1; level <= 3; ++level) {
    Index covered = 0;
    for (const auto& c : cells)
      if (c.level == level) covered += (c.row_end - c.row_begin) * (c.col_end - c.col_begin);
    EXPECT_EQ(covered, 256);
  }
}

TEST(RegionalPool, Errors) {
  EXPECT_THROW(regional_pool(Matrix::Zero(6, 2), 2, 3), ConfigError);
  EXPECT_THROW(regional_pool(Matrix::Zero(8, 2), 3, 3), DimensionError);
  EXPECT_THROW(RegionalFeatures(Matrix::Zero(13, 2)), DimensionError);
}

TEST(RegionalPool, BackwardIsTheAdjoint) {
  SplitMix64 rng(2);
  const Matrix patches = random_matrix(20, 3, rng);
  const Matrix probe = random_matrix(14, 3, rng);
  const double lhs = regional_pool(patches, 4, 5).rows().cwiseProduct(probe).sum();
  const double rhs = patches.cwiseProduct(regional_pool_backward(probe, 4, 5)).sum();
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

// ---------------------------------------------------------------------------
// agents

TEST(MakeAgents, Examples) {
  const Matrix x = (Matrix(3, 2) << 0, 0, 1, 3, 3, 1).finished();
  const Matrix y = (Matrix(2, 2) << 5, 6, 7, 8).finished();
  const AgentSet a = make_agents(x, y);
  EXPECT_EQ(a.m, Vector(x.row(0)));
  EXPECT_EQ(a.a, (Vector(2) << 2, 2).finished());
  EXPECT_EQ(a.t, (Vector(2) << 5, 6).finished());

  const Matrix same = (Matrix(3, 2) << 9, 9, 0.25, -1, 0.25, -1).finished();
  EXPECT_EQ(make_agents(same, y).a, (Vector(2) << 0.25, -1).finished());
  EXPECT_THROW(make_agents(Matrix::Zero(1, 2), y), DimensionError);
}

// ---------------------------------------------------------------------------
// cross-attention

ParamStore identity_layer(Index dim, const std::string& prefix) {
  SplitMix64 rng(0);
  ParamStore s;
  init_layer_params(s, prefix, dim, rng);
  for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) s.value(prefix + w) = Matrix::Identity(dim, dim);
  s.value(prefix + "mlp.W1").setZero();
  s.value(prefix + "mlp.W2").setZero();
  return s;
}

TEST(Mca, SingleKeyTakesAllTheWeight) {
  const std::string p = "L.";
  const ParamStore s = identity_layer(2, p);
  McaCache c;
  const Vector out = mca(Vector::Zero(2), (Matrix(1, 2) << 1, 2).finished(), s, p, 1, &c);
  EXPECT_EQ(c.attn, Matrix::Ones(1, 1));
  EXPECT_EQ(out, (Vector(2) << 1, 2).finished());
}

TEST(Mca, ZeroValueProjectionLeavesOnlyTheResidual) {
  const std::string p = "L.";
  SplitMix64 rng(3);
  ParamStore s;
  init_layer_params(s, p, 4, rng);
  s.value(p + "Wv").setZero();
  const Vector z = random_vector(4, rng);
  EXPECT_EQ(mca(z, random_matrix(5, 4, rng), s, p, 2), z);
}

TEST(Mca, ZeroQueryAveragesTheValues) {
  const std::string p = "L.";
  const ParamStore s = identity_layer(1, p);
  McaCache c;
  const Vector out = mca(Vector::Zero(1), (Matrix(2, 1) << 1, 3).finished(), s, p, 1, &c);
  EXPECT_DOUBLE_EQ(c.attn(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(c.attn(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(out[0], 2.0);
}

TEST(Mca, HeadCountMustDivideDimension) {
  const std::string p = "L.";
  const ParamStore s = identity_layer(4, p);
  EXPECT_THROW(mca(Vector::Zero(4), Matrix::Zero(2, 4), s, p, 3), ConfigError);
  EXPECT_THROW(mca(Vector::Zero(4), Matrix::Zero(0, 4), s, p, 2), DimensionError);
}

TEST(Mca, KeyOrderDoesNotMatter) {
  const std::string p = "L.";
  SplitMix64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    ParamStore s;
    init_layer_params(s, p, 6, rng);
    const Vector z = random_vector(6, rng);
    const Matrix keys = random_matrix(7, 6, rng);
    std::vector<Index> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    Matrix shuffled(7, 6);
    for (Index i = 0; i < 7; ++i) shuffled.row(i) = keys.row(perm[static_cast<std::size_t>(i)]);
    EXPECT_LE((mca(z, keys, s, p, 3) - mca(z, shuffled, s, p, 3)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// feed-forward block

TEST(Ffn, ZeroMlpReducesToLayerNorm) {
  const std::string p = "L.";
  const ParamStore s = identity_layer(3, p);
  const Vector z = (Vector(3) << 1, 5, -2).finished();
  const Vector ln = layer_norm(z, Vector::Ones(3), Vector::Zero(3), 1e-5);
  EXPECT_LE((ffn_block(z, s, p) - ln).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ffn, HandLayerNorm) {
  const std::string p = "L.";
  const ParamStore s = identity_layer(2, p);
  const Vector out = ffn_block((Vector(2) << 1, 3).finished(), s, p, true, 1e-12);
  EXPECT_NEAR(out[0], -1.0, 1e-6);
  EXPECT_NEAR(out[1], 1.0, 1e-6);
}

TEST(Ffn, OutputHasZeroMean) {
  const std::string p = "L.";
  SplitMix64 rng(5);
  ParamStore s;
  init_layer_params(s, p, 8, rng);
  s.value(p + "ln_in.gamma") = random_matrix(1, 8, rng);
  for (int trial = 0; trial < 20; ++trial) {
    EXPECT_LE(std::abs(ffn_block(random_vector(8, rng), s, p).sum()), 1e-6) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------
// fuse

struct FusionFixture {
  Matrix x = (Matrix(3, 2) << 1, 0, 0, 2, 2, 0).finished();
  Matrix y = (Matrix(2, 2) << 0, 1, 1, 1).finished();
  RegionalFeatures xa{Matrix::Ones(14, 2)};
  ParamStore store;

  FusionFixture() {
    SplitMix64 rng(0);
    init_cammf_params(store, 2, 1, rng);
    for (Branch b : kBranches) {
      const LayerNames n(layer_prefix(b, 1));
      for (const auto* w : {&n.wq, &n.wk, &n.wv, &n.wo}) store.value(*w) = Matrix::Identity(2, 2);
      // MLP: h0 = relu(u0), h1 = relu(u1); output = [-h1, h0]
      store.value(n.mlp_w1).setZero();
      store.value(n.mlp_w1)(0, 0) = 1;
      store.value(n.mlp_w1)(1, 1) = 1;
      store.value(n.mlp_w2).setZero();
      store.value(n.mlp_w2)(0, 1) = 1;
      store.value(n.mlp_w2)(1, 0) = -1;
    }
  }
};

// Expected values come from a scalar reference implementation of one layer
// evaluated independently with plain loops.
TEST(Fuse, HandSetSingleLayerMatchesScalarReference) {
  FusionFixture f;
  const FusionOutput out = fuse(f.x, f.y, f.xa, f.store, {1, 1, true, 1e-5});
  EXPECT_NEAR(out.agents.m[0], -0.99981661132748201, 1e-12);
  EXPECT_NEAR(out.agents.m[1], 0.99981661132748201, 1e-12);
  EXPECT_NEAR(out.agents.a[0], -0.99998869466703422, 1e-12);
  EXPECT_NEAR(out.agents.a[1], 0.99998869466703444, 1e-12);
  EXPECT_NEAR(out.agents.t[0], -0.99999567918526433, 1e-12);
  EXPECT_NEAR(out.agents.t[1], 0.99999567918526433, 1e-12);

  const Matrix& attn_m = out.attn[0][0];
  EXPECT_NEAR(attn_m(0, 0), 0.33023845067334312, 1e-14);
  EXPECT_NEAR(attn_m(0, 1), 0.66976154932665688, 1e-14);
  const Matrix& attn_t = out.attn[2][0];
  ASSERT_EQ(attn_t.cols(), 3 + 14);
  EXPECT_NEAR(attn_t(0, 0), 0.028979744794770935, 1e-14);
  EXPECT_NEAR(attn_t(0, 1), 0.11920094625412411, 1e-14);
  EXPECT_NEAR(attn_t(0, 2), 0.028979744794770935, 1e-14);
  EXPECT_NEAR(attn_t(0, 3), 0.058774254582595289, 1e-14);

  const FusionOutput pre = fuse(f.x, f.y, f.xa, f.store, {1, 1, false, 1e-5});
  EXPECT_NEAR(pre.agents.m[0], 1.6697615493266569, 1e-12);
  EXPECT_NEAR(pre.agents.m[1], 1.9999554178991783, 1e-12);
  EXPECT_NEAR(pre.agents.a[0], 0.66994488850129097, 1e-12);
  EXPECT_NEAR(pre.agents.a[1], 2.0, 1e-12);
  EXPECT_NEAR(pre.agents.t[0], -0.090206117322901735, 1e-12);
  EXPECT_NEAR(pre.agents.t[1], 2.0612414566645825, 1e-12);
}

TEST(Fuse, SeveredInformationFlowIteratesLayerNorm) {
  SplitMix64 rng(6);
  const int layers = 3;
  ParamStore s;
  init_cammf_params(s, 4, layers, rng);
  for (auto& [name, p] : s) {
    if (name.ends_with("Wv") || name.find("mlp.") != std::string::npos) p.value.setZero();
  }
  const Matrix x = random_matrix(5, 4, rng);
  const Matrix y = random_matrix(3, 4, rng);
  const RegionalFeatures xa(random_matrix(14, 4, rng));
  const FusionOutput out = fuse(x, y, xa, s, {layers, 2, true, 1e-5});
  const AgentSet init = make_agents(x, y);
  for (Branch b : kBranches) {
    Vector z = init[b];
    for (int l = 0; l < layers; ++l) z = layer_norm(z, Vector::Ones(4), Vector::Zero(4), 1e-5);
    EXPECT_EQ(out.agents[b], z) << branch_tag(b);
  }
}

TEST(Fuse, AttentionRowsSumToOne) {
  SplitMix64 rng(7);
  for (int draw = 0; draw < 100; ++draw) {
    const int layers = 1 + static_cast<int>(rng.below(3));
    ParamStore s;
    init_cammf_params(s, 8, layers, rng);
    const Matrix x = random_matrix(10, 8, rng, 2.0);
    const Matrix y = random_matrix(4, 8, rng, 2.0);
    const FusionOutput out = fuse(x, y, regional_pool(x.bottomRows(9), 3, 3), s, {layers, 2, true, 1e-5});
    for (const auto& branch : out.attn) {
      ASSERT_EQ(branch.size(), static_cast<std::size_t>(layers));
      for (const Matrix& a : branch) {
        ASSERT_EQ(a.rows(), 2);
        EXPECT_LE((a.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
      }
    }
  }
}

TEST(Fuse, ZeroValueProjectionsIsolateTheModalities) {
  SplitMix64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore s;
    init_cammf_params(s, 4, 2, rng);
    for (auto& [name, p] : s)
      if (name.ends_with("Wv")) p.value.setZero();
    const FuseConfig cfg{2, 2, true, 1e-5};
    const Matrix x = random_matrix(5, 4, rng);
    const Matrix y = random_matrix(3, 4, rng);
    const RegionalFeatures xa(random_matrix(14, 4, rng));
    const FusionOutput base = fuse(x, y, xa, s, cfg);

    // new text apart from the CLS row, which seeds z_t
    Matrix y2 = random_matrix(3, 4, rng);
    y2.row(0) = y.row(0);
    const FusionOutput text_changed = fuse(x, y2, xa, s, cfg);
    EXPECT_EQ(text_changed.agents.m, base.agents.m);
    EXPECT_EQ(text_changed.agents.a, base.agents.a);

    // new image tokens: z_t stays put
    const FusionOutput image_changed = fuse(random_matrix(5, 4, rng), y, RegionalFeatures(random_matrix(14, 4, rng)), s, cfg);
    EXPECT_EQ(image_changed.agents.t, base.agents.t);
  }
}

TEST(Fuse, ConfigurationErrors) {
  SplitMix64 rng(9);
  ParamStore s;
  init_cammf_params(s, 4, 1, rng);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix y = random_matrix(2, 4, rng);
  const RegionalFeatures xa(random_matrix(14, 4, rng));
  EXPECT_THROW(fuse(x, y, xa, s, {0, 2, true, 1e-5}), ConfigError);
  EXPECT_THROW(fuse(x, y, xa, s, {1, 3, true, 1e-5}), ConfigError);
  EXPECT_THROW(fuse(x, y, xa, s, {2, 2, true, 1e-5}), ConfigError);  // layer 2 parameters missing
  EXPECT_THROW(fuse(x, random_matrix(2, 3, rng), xa, s, {1, 2, true, 1e-5}), DimensionError);
  ParamStore wrong;
  init_cammf_params(wrong, 2, 1, rng);
  EXPECT_THROW(fuse(x, y, xa, wrong, {1, 2, true, 1e-5}), ConfigError);
}

TEST(Fuse, GradientsMatchFiniteDifferences) {
  SplitMix64 rng(10);
  GradCheckConfig limits;
  for (int trial = 0; trial < 4; ++trial) {
    const audit::Shape s = audit::draw_shape(limits, rng);
    for (bool strict : {true, false}) {
      const GradReport r = audit_fuse(s, strict, rng.next(), 1e-5, 1e-5);
      EXPECT_TRUE(r.pass) << s.str() << " strict=" << strict << " worst=" << r.worst();
    }
    const GradReport layer = audit_cammf_layer(s, true, rng.next(), 1e-5, 1e-5);
    EXPECT_TRUE(layer.pass) << s.str() << " worst=" << layer.worst();
  }
}

}  // namespace
}  // namespace mmvpr
