#pragma once

// Randomized finite-difference audits of every analytic backward pass.
//
// Inputs (token sequences, descriptors) are registered in the ParamStore
// under "input.*" so one grad_check covers parameter and input gradients.
// The scalar under test is a fixed random linear functional of the output.
// Draws whose ReLU pre-activations come within `kink_margin` of zero, or
// whose similarities sit within `kink_margin` of a mining threshold, are
// rejected and redrawn.

#include <cstdint>
#include <string>
#include <vector>

#include "mmvpr/atrec.hpp"
#include "mmvpr/cammf.hpp"
#include "mmvpr/config.hpp"
#include "mmvpr/metric.hpp"
#include "mmvpr/model.hpp"
#include "mmvpr/seqcore.hpp"

namespace mmvpr {

struct AuditEntry {
  std::string name;
  std::string shape;
  GradReport report;
};

struct AuditResult {
  std::vector<AuditEntry> entries;
  bool pass() const {
    for (const auto& e : entries)
      if (!e.report.pass) return false;
    return !entries.empty();
  }
  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.report.worst());
    return w;
  }
};

namespace audit {

inline constexpr double kink_margin = 1e-3;
inline constexpr int max_redraws = 200;

inline Matrix gaussian(Index rows, Index cols, SplitMix64& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.gaussian();
  return m;
}

inline bool clear_of_kink(const Matrix& pre) { return pre.size() == 0 || pre.cwiseAbs().minCoeff() >= kink_margin; }

/// Gain and offset of every layer norm get a random perturbation so their gradients are exercised off the identity.
inline void jitter_layer_norms(ParamStore& store, SplitMix64& rng) {
  for (auto& [name, p] : store) {
    if (name.find(".ln_") == std::string::npos) continue;
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += 0.3 * rng.gaussian();
  }
}

struct Shape {
  int dim, heads, image_len, text_len, hidden, layers, keys;
  std::string str() const {
    return "D=" + std::to_string(dim) + " heads=" + std::to_string(heads) + " M=" + std::to_string(image_len) +
           " N=" + std::to_string(text_len) + " T1=" + std::to_string(hidden) + " L=" + std::to_string(layers) +
           " K=" + std::to_string(keys);
  }
};

/// Random shape inside the limits of `g`.
inline Shape draw_shape(const GradCheckConfig& g, SplitMix64& rng) {
  Shape s{};
  do {
    s.heads = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(g.heads)));
    s.dim = s.heads * (1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(g.dim / s.heads))));
  } while (s.dim < 2 || g.dim % s.heads != 0);
  s.image_len = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(g.image_len - 1)));
  s.text_len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(g.text_len)));
  s.hidden = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(g.hidden)));
  s.layers = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(g.layers)));
  s.keys = 1 + static_cast<int>(rng.below(6));
  return s;
}

}  // namespace audit

// ---------------------------------------------------------------------------

inline GradReport audit_atrec(const audit::Shape& s, std::uint64_t seed, double eps, double tol) {
  for (int attempt = 0; attempt < audit::max_redraws; ++attempt) {
    SplitMix64 rng(mix_seed({seed, 0xA7ull, static_cast<std::uint64_t>(attempt)}));
    ParamStore store;
    init_atrec_params(store, s.image_len, s.text_len, s.hidden, rng);
    // offset the features so pooled means are not all near zero
    store.add("input.X", audit::gaussian(s.image_len, s.dim, rng).array() + 0.5);
    store.add("input.Y", audit::gaussian(s.text_len, s.dim, rng).array() + 0.5);
    const Matrix probe = audit::gaussian(s.text_len, s.dim, rng);

    AtrecCache cache;
    recalibrate(TokenSequence(store.value("input.X")), TokenSequence(store.value("input.Y")), store, &cache);
    if (!audit::clear_of_kink(cache.pre1) || !audit::clear_of_kink(cache.pre2) || relu(cache.pre2).sum() == 0.0) continue;

    auto loss = [&](ParamStore& st, bool backward) {
      AtrecCache c;
      const auto r = recalibrate(TokenSequence(st.value("input.X")), TokenSequence(st.value("input.Y")), st, &c);
      if (backward) {
        const AtrecInputGrads g = recalibrate_backward(c, probe, st);
        st.grad("input.X") += g.image;
        st.grad("input.Y") += g.text;
      }
      return r.recalibrated.cwiseProduct(probe).sum();
    };
    return grad_check(loss, store, eps, tol);
  }
  throw EvaluationError("audit_atrec: could not draw parameters away from ReLU kinks");
}

/// One (agent, layer) block: cross-attention followed by the feed-forward block.
inline GradReport audit_cammf_layer(const audit::Shape& s, bool strict, std::uint64_t seed, double eps, double tol) {
  const std::string prefix = layer_prefix(Branch::ImageCls, 1);
  for (int attempt = 0; attempt < audit::max_redraws; ++attempt) {
    SplitMix64 rng(mix_seed({seed, 0xCAull, static_cast<std::uint64_t>(attempt)}));
    ParamStore store;
    init_layer_params(store, prefix, s.dim, rng);
    audit::jitter_layer_norms(store, rng);
    store.add("input.z", audit::gaussian(1, s.dim, rng));
    store.add("input.R", audit::gaussian(s.keys, s.dim, rng));
    const Vector probe = audit::gaussian(1, s.dim, rng).row(0);

    auto run = [&](const ParamStore& st, McaCache* mc, FfnCache* fc) {
      const Vector z_hat = mca(st.value("input.z").row(0), st.value("input.R"), st, prefix, s.heads, mc);
      return ffn_block(z_hat, st, prefix, strict, 1e-5, fc);
    };
    McaCache mc;
    FfnCache fc;
    run(store, &mc, &fc);
    if (!audit::clear_of_kink(fc.pre)) continue;

    auto loss = [&](ParamStore& st, bool backward) {
      McaCache m;
      FfnCache f;
      const Vector out = run(st, &m, &f);
      if (backward) {
        const Vector d_zhat = ffn_block_backward(f, probe, st, prefix, strict);
        const McaGrads g = mca_backward(m, d_zhat, st, prefix, s.heads);
        st.grad("input.z").row(0) += g.query;
        st.grad("input.R") += g.keys;
      }
      return out.dot(probe);
    };
    return grad_check(loss, store, eps, tol);
  }
  throw EvaluationError("audit_cammf_layer: could not draw parameters away from ReLU kinks");
}

inline bool fuse_clear_of_kinks(const FuseCache& c) {
  for (const auto& branch : c.layers)
    for (const auto& layer : branch)
      if (!audit::clear_of_kink(layer.ffn.pre)) return false;
  return true;
}

/// The full L-layer stack of all three agents with X, Y' and X_a as inputs.
inline GradReport audit_fuse(const audit::Shape& s, bool strict, std::uint64_t seed, double eps, double tol) {
  const FuseConfig cfg{s.layers, s.heads, strict, 1e-5};
  for (int attempt = 0; attempt < audit::max_redraws; ++attempt) {
    SplitMix64 rng(mix_seed({seed, 0xF0ull, static_cast<std::uint64_t>(attempt)}));
    ParamStore store;
    init_cammf_params(store, s.dim, s.layers, rng);
    audit::jitter_layer_norms(store, rng);
    store.add("input.X", audit::gaussian(s.image_len, s.dim, rng));
    store.add("input.Yr", audit::gaussian(s.text_len, s.dim, rng));
    store.add("input.Xa", audit::gaussian(kRegionCount, s.dim, rng));
    const AgentSet probe{audit::gaussian(1, s.dim, rng).row(0), audit::gaussian(1, s.dim, rng).row(0),
                         audit::gaussian(1, s.dim, rng).row(0)};

    auto run = [&](const ParamStore& st, FuseCache* c) {
      return fuse(st.value("input.X"), st.value("input.Yr"), RegionalFeatures(st.value("input.Xa")), st, cfg, c);
    };
    FuseCache cache;
    run(store, &cache);
    if (!fuse_clear_of_kinks(cache)) continue;

    auto loss = [&](ParamStore& st, bool backward) {
      FuseCache c;
      const FusionOutput out = run(st, &c);
      if (backward) {
        const FusionInputGrads g = fuse_backward(c, probe, st, cfg);
        st.grad("input.X") += g.image;
        st.grad("input.Yr") += g.text;
        st.grad("input.Xa") += g.regions;
      }
      return out.agents.m.dot(probe.m) + out.agents.a.dot(probe.a) + out.agents.t.dot(probe.t);
    };
    return grad_check(loss, store, eps, tol);
  }
  throw EvaluationError("audit_fuse: could not draw parameters away from ReLU kinks");
}

/// Random unit descriptors for `places` x `per_place` samples.
inline GradReport audit_ms_loss(int places, int per_place, int dim, const MSHyper& hyper, std::uint64_t seed, double eps,
                                double tol) {
  std::vector<int> labels;
  for (int p = 0; p < places; ++p)
    for (int k = 0; k < per_place; ++k) labels.push_back(p);
  const auto batch = static_cast<Index>(labels.size());
  for (int attempt = 0; attempt < audit::max_redraws; ++attempt) {
    SplitMix64 rng(mix_seed({seed, 0x515ull, static_cast<std::uint64_t>(attempt)}));
    Matrix d = audit::gaussian(batch, dim, rng);
    d.rowwise().normalize();
    // reject draws with a similarity close to a mining boundary
    const Matrix sim = d * d.transpose();
    bool clear = true;
    for (Index i = 0; i < batch && clear; ++i) {
      double min_pos = 1e300, max_neg = -1e300;
      for (Index j = 0; j < batch; ++j) {
        if (j == i) continue;
        if (labels[j] == labels[i]) min_pos = std::min(min_pos, sim(i, j));
        else max_neg = std::max(max_neg, sim(i, j));
      }
      for (Index j = 0; j < batch && clear; ++j) {
        if (j == i) continue;
        const double bound = labels[j] == labels[i] ? max_neg + hyper.mining_margin : min_pos - hyper.mining_margin;
        if (hyper.mine && std::abs(sim(i, j) - bound) < audit::kink_margin) clear = false;
      }
    }
    if (!clear) continue;
    ParamStore store;
    store.add("input.descriptors", d);
    auto loss = [&](ParamStore& st, bool backward) {
      const MSLossResult r = ms_loss(st.value("input.descriptors"), labels, hyper);
      if (backward) st.grad("input.descriptors") += r.grad;
      return r.loss;
    };
    return grad_check(loss, store, eps, tol);
  }
  throw EvaluationError("audit_ms_loss: could not draw descriptors away from mining boundaries");
}

/// Whole descriptor model on a 3x3 patch grid, recalibration included.
inline GradReport audit_model(const ModelConfig& cfg, std::uint64_t seed, double eps, double tol) {
  for (int attempt = 0; attempt < audit::max_redraws; ++attempt) {
    SplitMix64 rng(mix_seed({seed, 0x30Dull, static_cast<std::uint64_t>(attempt)}));
    ParamStore store = init_model(cfg, rng.next());
    audit::jitter_layer_norms(store, rng);
    store.add("input.X", audit::gaussian(cfg.image_len(), cfg.dim, rng).array() + 0.5);
    store.add("input.Y", audit::gaussian(cfg.text_len, cfg.dim, rng).array() + 0.5);
    const Vector probe = audit::gaussian(1, cfg.descriptor_size(), rng).row(0);

    ModelCache cache;
    forward(cfg, store, TokenSequence(store.value("input.X")), TokenSequence(store.value("input.Y")), &cache);
    if (!fuse_clear_of_kinks(cache.fuse)) continue;
    if (cfg.use_atrec && (!audit::clear_of_kink(cache.atrec.pre1) || !audit::clear_of_kink(cache.atrec.pre2))) continue;

    auto loss = [&](ParamStore& st, bool backward) {
      ModelCache c;
      const ModelOutput out =
          forward(cfg, st, TokenSequence(st.value("input.X")), TokenSequence(st.value("input.Y")), &c);
      if (backward) {
        const ModelInputGrads g = mmvpr::backward(cfg, c, probe, st);
        st.grad("input.X") += g.image;
        st.grad("input.Y") += g.text;
      }
      return out.descriptor.values.dot(probe);
    };
    return grad_check(loss, store, eps, tol);
  }
  throw EvaluationError("audit_model: could not draw parameters away from ReLU kinks");
}

/// Runs every audit `trials` times on shapes drawn inside the configured limits.
inline AuditResult run_grad_audit(const GradCheckConfig& g, std::uint64_t seed) {
  AuditResult result;
  SplitMix64 rng(mix_seed({seed, 0x6AADull}));
  for (int trial = 0; trial < g.trials; ++trial) {
    const audit::Shape s = audit::draw_shape(g, rng);
    const std::uint64_t ts = rng.next();
    result.entries.push_back({"atrec", s.str(), audit_atrec(s, ts, g.eps, g.tol)});
    for (int l = 1; l <= s.layers; ++l) {
      result.entries.push_back({"cammf_layer" + std::to_string(l), s.str(),
                                audit_cammf_layer(s, true, mix_seed({ts, static_cast<std::uint64_t>(l)}), g.eps, g.tol)});
    }
    result.entries.push_back({"fuse", s.str(), audit_fuse(s, true, ts, g.eps, g.tol)});
    result.entries.push_back({"fuse_prenorm", s.str(), audit_fuse(s, false, ts, g.eps, g.tol)});
    const int per_place = 2 + static_cast<int>(rng.below(2));
    const int places = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(12 / per_place - 1)));
    MSHyper hyper;
    result.entries.push_back({"ms_loss", "B=" + std::to_string(places * per_place) + " dim=" + std::to_string(s.dim),
                              audit_ms_loss(places, per_place, s.dim, hyper, ts, g.eps, g.tol)});
    hyper.mine = false;
    hyper.beta = 5.0;
    result.entries.push_back({"ms_loss_unmined",
                              "B=" + std::to_string(places * per_place) + " dim=" + std::to_string(s.dim),
                              audit_ms_loss(places, per_place, s.dim, hyper, ts, g.eps, g.tol)});
    ModelConfig mc;
    mc.dim = s.dim;
    mc.heads = s.heads;
    mc.hidden = s.hidden;
    mc.layers = s.layers;
    mc.grid_h = 3;
    mc.grid_w = 3;
    mc.text_len = s.text_len;
    result.entries.push_back({"model", s.str() + " grid=3x3", audit_model(mc, ts, g.eps, g.tol)});
  }
  return result;
}

}  // namespace mmvpr
