#pragma once

// Agent-based cross-attention fusion.
//
// Three agent tokens gather information from the other modality:
//   z_m  image CLS token            keys: recalibrated text Y'
//   z_a  mean of image patch tokens keys: recalibrated text Y'
//   z_t  text CLS token             keys: [X; X_a], image tokens plus 14 regional features
//
// Each agent runs L layers of
//   z_hat = MCA(z W^Q, R W^K, R W^V) W^O + z
//   z     = LN_out(MLP(LN_in(z_hat)) + z_hat)
// with independent parameters per (agent, layer). Cost per layer is O(K D^2)
// for K keys instead of the O(M N) of full token-to-token attention.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mmvpr/errors.hpp"
#include "mmvpr/seqcore.hpp"

namespace mmvpr {

// ---------------------------------------------------------------------------
// regional pooling

struct RegionCell {
  int level;  // 1, 2 or 3
  int index;  // row-major within the level
  Index row_begin, row_end, col_begin, col_end;
};

inline constexpr int kRegionCount = 14;

/// Cells of the 1x1, 2x2 and 3x3 partitions in output order. Segment i of a
/// level-l split covers [floor(i*n/l), floor((i+1)*n/l)).
inline std::vector<RegionCell> region_cells(Index grid_h, Index grid_w) {
  if (grid_h < 3 || grid_w < 3) {
    throw ConfigError("regional pooling needs a patch grid of at least 3x3, got " + shape_str(grid_h, grid_w));
  }
  std::vector<RegionCell> cells;
  cells.reserve(kRegionCount);
  for (int level = 1; level <= 3; ++level) {
    for (int i = 0; i < level; ++i) {
      for (int j = 0; j < level; ++j) {
        cells.push_back({level, i * level + j, i * grid_h / level, (i + 1) * grid_h / level, j * grid_w / level,
                         (j + 1) * grid_w / level});
      }
    }
  }
  return cells;
}

/// 14 x D matrix of average-pooled regional features.
class RegionalFeatures {
 public:
  explicit RegionalFeatures(Matrix rows) : rows_(std::move(rows)) {
    if (rows_.rows() != kRegionCount) {
      throw DimensionError("regional features must have 14 rows, got " + std::to_string(rows_.rows()));
    }
  }
  const Matrix& rows() const { return rows_; }

 private:
  Matrix rows_;
};

/// `patches` holds the grid_h * grid_w patch tokens in row-major grid order (no CLS row).
inline RegionalFeatures regional_pool(const Matrix& patches, Index grid_h, Index grid_w) {
  const auto cells = region_cells(grid_h, grid_w);
  if (patches.rows() != grid_h * grid_w) {
    throw DimensionError("regional_pool: " + std::to_string(patches.rows()) + " patch rows for a " +
                         shape_str(grid_h, grid_w) + " grid");
  }
  Matrix out = Matrix::Zero(kRegionCount, patches.cols());
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& c = cells[k];
    for (Index r = c.row_begin; r < c.row_end; ++r)
      for (Index col = c.col_begin; col < c.col_end; ++col) out.row(k) += patches.row(r * grid_w + col);
    out.row(k) /= static_cast<double>((c.row_end - c.row_begin) * (c.col_end - c.col_begin));
  }
  return RegionalFeatures(std::move(out));
}

/// Pooling is linear, so each cell's gradient is spread evenly over its patches.
inline Matrix regional_pool_backward(const Matrix& d_regions, Index grid_h, Index grid_w) {
  const auto cells = region_cells(grid_h, grid_w);
  Matrix d = Matrix::Zero(grid_h * grid_w, d_regions.cols());
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& c = cells[k];
    const double share = 1.0 / static_cast<double>((c.row_end - c.row_begin) * (c.col_end - c.col_begin));
    for (Index r = c.row_begin; r < c.row_end; ++r)
      for (Index col = c.col_begin; col < c.col_end; ++col) d.row(r * grid_w + col) += share * d_regions.row(k);
  }
  return d;
}

// ---------------------------------------------------------------------------
// agents

enum class Branch { ImageCls = 0, ImageAvg = 1, Text = 2 };
inline constexpr std::array<Branch, 3> kBranches{Branch::ImageCls, Branch::ImageAvg, Branch::Text};

inline const char* branch_tag(Branch b) {
  switch (b) {
    case Branch::ImageCls: return "m";
    case Branch::ImageAvg: return "a";
    case Branch::Text: return "t";
  }
  return "?";
}

struct AgentSet {
  Vector m;  // image CLS agent
  Vector a;  // image patch-average agent
  Vector t;  // text CLS agent

  Vector& operator[](Branch b) { return b == Branch::ImageCls ? m : (b == Branch::ImageAvg ? a : t); }
  const Vector& operator[](Branch b) const {
    return b == Branch::ImageCls ? m : (b == Branch::ImageAvg ? a : t);
  }
};

inline AgentSet make_agents(const Matrix& image, const Matrix& recalibrated_text) {
  if (image.rows() < 2) {
    throw DimensionError("make_agents: image sequence needs a CLS row and at least one patch, got " +
                         std::to_string(image.rows()) + " rows");
  }
  if (recalibrated_text.rows() < 1) throw DimensionError("make_agents: empty text sequence");
  return {image.row(0), image.bottomRows(image.rows() - 1).colwise().mean(), recalibrated_text.row(0)};
}

// ---------------------------------------------------------------------------
// parameters

struct FuseConfig {
  int layers = 3;
  int heads = 12;
  /// Outer LN wraps the residual sum. When false the conventional pre-norm form z_hat + MLP(LN(z_hat)) is used.
  bool post_norm = true;
  double ln_eps = 1e-5;
};

inline std::string layer_prefix(Branch b, int layer) {
  return std::string("cammf.") + branch_tag(b) + "." + std::to_string(layer) + ".";
}

/// Parameter names of one (agent, layer) block.
struct LayerNames {
  std::string wq, wk, wv, wo, ln_in_gamma, ln_in_beta, mlp_w1, mlp_w2, ln_out_gamma, ln_out_beta;

  explicit LayerNames(const std::string& prefix)
      : wq(prefix + "Wq"),
        wk(prefix + "Wk"),
        wv(prefix + "Wv"),
        wo(prefix + "Wo"),
        ln_in_gamma(prefix + "ln_in.gamma"),
        ln_in_beta(prefix + "ln_in.beta"),
        mlp_w1(prefix + "mlp.W1"),
        mlp_w2(prefix + "mlp.W2"),
        ln_out_gamma(prefix + "ln_out.gamma"),
        ln_out_beta(prefix + "ln_out.beta") {}
};

inline void init_layer_params(ParamStore& store, const std::string& prefix, Index dim, SplitMix64& rng) {
  const LayerNames n(prefix);
  add_linear(store, n.wq, dim, dim, rng);
  add_linear(store, n.wk, dim, dim, rng);
  add_linear(store, n.wv, dim, dim, rng);
  add_linear(store, n.wo, dim, dim, rng);
  store.add(n.ln_in_gamma, Matrix::Ones(1, dim));
  store.add(n.ln_in_beta, Matrix::Zero(1, dim));
  add_linear(store, n.mlp_w1, dim, 4 * dim, rng);
  add_linear(store, n.mlp_w2, 4 * dim, dim, rng);
  store.add(n.ln_out_gamma, Matrix::Ones(1, dim));
  store.add(n.ln_out_beta, Matrix::Zero(1, dim));
}

inline void init_cammf_params(ParamStore& store, Index dim, int layers, SplitMix64& rng) {
  for (Branch b : kBranches)
    for (int l = 1; l <= layers; ++l) init_layer_params(store, layer_prefix(b, l), dim, rng);
}

// ---------------------------------------------------------------------------
// multi-head cross-attention with residual

struct McaCache {
  Matrix query_in;  // 1 x D
  Matrix keys_in;   // K x D
  Matrix q;         // 1 x D
  Matrix k;         // K x D
  Matrix v;         // K x D
  Matrix attn;      // heads x K
  Matrix heads_out; // 1 x D, concatenated head outputs
};

inline Vector mca(const Vector& z, const Matrix& keys, const ParamStore& store, const std::string& prefix,
                  int heads, McaCache* cache = nullptr) {
  const Index dim = z.size();
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("mca: dimension " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (keys.rows() < 1) throw DimensionError("mca: key sequence is empty");
  if (keys.cols() != dim) {
    throw DimensionError("mca: query has " + std::to_string(dim) + " features, keys are " + shape_str(keys));
  }
  const LayerNames n(prefix);
  const Matrix z_row = z;
  Matrix q = linear(z_row, n.wq, store);
  Matrix k = linear(keys, n.wk, store);
  Matrix v = linear(keys, n.wv, store);
  if (q.cols() != dim || k.cols() != dim || v.cols() != dim) {
    throw ConfigError("mca '" + prefix + "': projections must map D to D");
  }

  const Index head_dim = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix attn(heads, keys.rows());
  Matrix heads_out(1, dim);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * head_dim, head_dim);
    const auto kh = k.middleCols(h * head_dim, head_dim);
    const auto vh = v.middleCols(h * head_dim, head_dim);
    const Vector logits = (qh * kh.transpose()) * scale;
    const Vector w = softmax(logits);
    attn.row(h) = w;
    heads_out.middleCols(h * head_dim, head_dim) = w * vh;
  }
  const Matrix projected = linear(heads_out, n.wo, store);
  Vector out = projected.row(0) + z;

  if (cache != nullptr) {
    cache->query_in = z_row;
    cache->keys_in = keys;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->heads_out = std::move(heads_out);
  }
  return out;
}

struct McaGrads {
  Vector query;  // dL/dz, residual included
  Matrix keys;   // dL/dR
};

inline McaGrads mca_backward(const McaCache& c, const Vector& d_out, ParamStore& store, const std::string& prefix,
                             int heads) {
  const LayerNames n(prefix);
  const Index dim = c.query_in.cols();
  const Index head_dim = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  const Matrix d_out_row = d_out;
  const Matrix d_heads = linear_backward(c.heads_out, d_out_row, n.wo, store);
  Matrix dq = Matrix::Zero(1, dim);
  Matrix dk = Matrix::Zero(c.k.rows(), dim);
  Matrix dv = Matrix::Zero(c.v.rows(), dim);
  for (int h = 0; h < heads; ++h) {
    const Index off = h * head_dim;
    const Vector w = c.attn.row(h);
    const Matrix d_oh = d_heads.middleCols(off, head_dim);
    // head output = w * V_h
    dv.middleCols(off, head_dim).noalias() += w.transpose() * d_oh;
    const Vector dw = d_oh * c.v.middleCols(off, head_dim).transpose();
    const Vector d_logits = softmax_backward(w, dw) * scale;
    dq.middleCols(off, head_dim).noalias() += d_logits * c.k.middleCols(off, head_dim);
    dk.middleCols(off, head_dim).noalias() += d_logits.transpose() * c.q.middleCols(off, head_dim);
  }
  McaGrads g;
  g.query = linear_backward(c.query_in, dq, n.wq, store).row(0) + d_out;
  g.keys = linear_backward(c.keys_in, dk, n.wk, store) + linear_backward(c.keys_in, dv, n.wv, store);
  return g;
}

// ---------------------------------------------------------------------------
// feed-forward block

struct FfnCache {
  LayerNormCache ln_in;
  LayerNormCache ln_out;
  Matrix normed;  // 1 x D, LN_in output
  Matrix pre;     // 1 x 4D
  Matrix hidden;  // 1 x 4D
};

/// strict: LN_out(MLP(LN_in(z_hat)) + z_hat). Otherwise z_hat + MLP(LN_in(z_hat)).
inline Vector ffn_block(const Vector& z_hat, const ParamStore& store, const std::string& prefix, bool strict = true,
                        double eps = 1e-5, FfnCache* cache = nullptr) {
  const LayerNames n(prefix);
  FfnCache local;
  FfnCache& c = cache != nullptr ? *cache : local;
  c.normed = layer_norm(z_hat, store.value(n.ln_in_gamma).row(0), store.value(n.ln_in_beta).row(0), eps, &c.ln_in);
  c.pre = linear(c.normed, n.mlp_w1, store);
  c.hidden = relu(c.pre);
  const Matrix mlp = linear(c.hidden, n.mlp_w2, store);
  const Vector sum = mlp.row(0) + z_hat;
  if (!strict) return sum;
  return layer_norm(sum, store.value(n.ln_out_gamma).row(0), store.value(n.ln_out_beta).row(0), eps, &c.ln_out);
}

inline Vector ffn_block_backward(const FfnCache& c, const Vector& d_out, ParamStore& store, const std::string& prefix,
                                 bool strict = true) {
  const LayerNames n(prefix);
  Vector d_sum = d_out;
  if (strict) {
    Param& g_out = store.at(n.ln_out_gamma);
    Param& b_out = store.at(n.ln_out_beta);
    Vector dg = Vector::Zero(d_out.size());
    Vector db = Vector::Zero(d_out.size());
    d_sum = layer_norm_backward(c.ln_out, g_out.value.row(0), d_out, dg, db);
    if (g_out.trainable) g_out.grad.row(0) += dg;
    if (b_out.trainable) b_out.grad.row(0) += db;
  }
  const Matrix d_mlp = d_sum;
  const Matrix d_hidden = linear_backward(c.hidden, d_mlp, n.mlp_w2, store);
  const Matrix d_pre = relu_backward(c.pre, d_hidden);
  const Matrix d_normed = linear_backward(c.normed, d_pre, n.mlp_w1, store);

  Param& g_in = store.at(n.ln_in_gamma);
  Param& b_in = store.at(n.ln_in_beta);
  Vector dg = Vector::Zero(d_out.size());
  Vector db = Vector::Zero(d_out.size());
  Vector d_zhat = layer_norm_backward(c.ln_in, g_in.value.row(0), d_normed.row(0), dg, db);
  if (g_in.trainable) g_in.grad.row(0) += dg;
  if (b_in.trainable) b_in.grad.row(0) += db;
  return d_zhat + d_sum;
}

// ---------------------------------------------------------------------------
// full fusion stack

struct FusionOutput {
  AgentSet agents;
  /// attn[branch][layer - 1] is a heads x K matrix; each row is one head's softmax over the branch's keys.
  std::array<std::vector<Matrix>, 3> attn;
};

struct FuseCache {
  struct Layer {
    McaCache mca;
    FfnCache ffn;
  };
  std::array<std::vector<Layer>, 3> layers;
  Index image_len = 0;
  Index text_len = 0;
};

/// Key sequence of the text agent: the image tokens followed by the regional features.
inline Matrix text_branch_keys(const Matrix& image, const RegionalFeatures& regions) {
  Matrix keys(image.rows() + kRegionCount, image.cols());
  keys << image, regions.rows();
  return keys;
}

inline FusionOutput fuse(const Matrix& image, const Matrix& recalibrated_text, const RegionalFeatures& regions,
                         const ParamStore& store, const FuseConfig& cfg, FuseCache* cache = nullptr) {
  if (cfg.layers < 1) throw ConfigError("fuse: layer count must be at least 1");
  if (image.cols() != recalibrated_text.cols() || regions.rows().cols() != image.cols()) {
    throw DimensionError("fuse: image " + shape_str(image) + ", text " + shape_str(recalibrated_text) +
                         " and regions " + shape_str(regions.rows()) + " must share D");
  }
  const Index dim = image.cols();
  if (dim % cfg.heads != 0) {
    throw ConfigError("fuse: dimension " + std::to_string(dim) + " is not divisible by " + std::to_string(cfg.heads) +
                      " heads");
  }
  for (Branch b : kBranches) {
    for (int l = 1; l <= cfg.layers; ++l) {
      const std::string p = layer_prefix(b, l);
      const Matrix& wq = store.value(LayerNames(p).wq);
      if (wq.rows() != dim || wq.cols() != dim) {
        throw ConfigError("fuse: '" + LayerNames(p).wq + "' is " + shape_str(wq) + ", expected " + shape_str(dim, dim));
      }
    }
  }

  FusionOutput out;
  out.agents = make_agents(image, recalibrated_text);
  const Matrix text_keys = text_branch_keys(image, regions);
  if (cache != nullptr) {
    cache->image_len = image.rows();
    cache->text_len = recalibrated_text.rows();
  }
  for (Branch b : kBranches) {
    const Matrix& keys = b == Branch::Text ? text_keys : recalibrated_text;
    const auto bi = static_cast<std::size_t>(b);
    Vector z = out.agents[b];
    if (cache != nullptr) cache->layers[bi].resize(static_cast<std::size_t>(cfg.layers));
    for (int l = 1; l <= cfg.layers; ++l) {
      const std::string p = layer_prefix(b, l);
      McaCache mc;
      FfnCache fc;
      const Vector z_hat = mca(z, keys, store, p, cfg.heads, &mc);
      z = ffn_block(z_hat, store, p, cfg.post_norm, cfg.ln_eps, &fc);
      out.attn[bi].push_back(mc.attn);
      if (cache != nullptr) cache->layers[bi][static_cast<std::size_t>(l - 1)] = {std::move(mc), std::move(fc)};
    }
    out.agents[b] = std::move(z);
  }
  return out;
}

struct FusionInputGrads {
  Matrix image;    // dL/dX
  Matrix text;     // dL/dY'
  Matrix regions;  // dL/dX_a
};

inline FusionInputGrads fuse_backward(const FuseCache& cache, const AgentSet& d_agents, ParamStore& store,
                                      const FuseConfig& cfg) {
  const Index dim = d_agents.m.size();
  const Index m = cache.image_len;
  FusionInputGrads g;
  g.image = Matrix::Zero(m, dim);
  g.text = Matrix::Zero(cache.text_len, dim);
  g.regions = Matrix::Zero(kRegionCount, dim);
  for (Branch b : kBranches) {
    const auto bi = static_cast<std::size_t>(b);
    Vector dz = d_agents[b];
    for (int l = cfg.layers; l >= 1; --l) {
      const std::string p = layer_prefix(b, l);
      const auto& layer = cache.layers[bi][static_cast<std::size_t>(l - 1)];
      const Vector d_zhat = ffn_block_backward(layer.ffn, dz, store, p, cfg.post_norm);
      McaGrads mg = mca_backward(layer.mca, d_zhat, store, p, cfg.heads);
      dz = std::move(mg.query);
      if (b == Branch::Text) {
        g.image += mg.keys.topRows(m);
        g.regions += mg.keys.bottomRows(kRegionCount);
      } else {
        g.text += mg.keys;
      }
    }
    switch (b) {
      case Branch::ImageCls: g.image.row(0) += dz; break;
      case Branch::ImageAvg: g.image.bottomRows(m - 1).rowwise() += dz / static_cast<double>(m - 1); break;
      case Branch::Text: g.text.row(0) += dz; break;
    }
  }
  return g;
}

}  // namespace mmvpr
