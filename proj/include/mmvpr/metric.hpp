#pragma once

// Metric-learning supervision: Multi-Similarity loss with pair mining, P x K
// place batches, and a small deterministic trainer over the fusion model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "mmvpr/encoder.hpp"
#include "mmvpr/errors.hpp"
#include "mmvpr/model.hpp"
#include "mmvpr/rng.hpp"
#include "mmvpr/seqcore.hpp"

namespace mmvpr {

struct MSHyper {
  double alpha = 1.0;   // positive scale
  double beta = 50.0;   // negative scale
  double lambda = 0.5;  // similarity threshold
  double mining_margin = 0.1;
  /// When false every positive and every negative pair is used.
  bool mine = true;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("ms hyper: 'alpha' must be positive");
    if (!(beta > 0.0)) throw ConfigError("ms hyper: 'beta' must be positive");
    if (!(mining_margin >= 0.0)) throw ConfigError("ms hyper: 'mining_margin' must be non-negative");
  }
};

struct MSAnchorTerm {
  double positive = 0.0;  // (1/alpha) log(1 + sum_P exp(-alpha (S - lambda)))
  double negative = 0.0;  // (1/beta) log(1 + sum_N exp(beta (S - lambda)))
  std::vector<Index> positives;
  std::vector<Index> negatives;
};

struct MSLossResult {
  double loss = 0.0;
  Matrix grad;  // B x dim
  std::vector<MSAnchorTerm> anchors;
};

namespace detail {

/// Sum in ascending order so the result does not depend on the order terms were produced in.
inline double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace detail

/// `descriptors` rows must be L2-normalized; similarities are plain dot products.
inline MSLossResult ms_loss(const Matrix& descriptors, const std::vector<int>& labels, const MSHyper& hyper) {
  hyper.validate();
  const Index batch = descriptors.rows();
  if (static_cast<Index>(labels.size()) != batch) {
    throw DimensionError("ms_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(batch) +
                         " descriptors");
  }
  for (Index i = 0; i < batch; ++i) {
    const double n = descriptors.row(i).norm();
    if (std::abs(n - 1.0) > 1e-3) {
      throw ContractError("ms_loss: descriptor row " + std::to_string(i) + " has norm " + std::to_string(n) +
                          ", expected unit norm");
    }
  }
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
    throw ContractError("ms_loss: batch needs at least two distinct labels");
  }

  const Matrix sim = descriptors * descriptors.transpose();
  MSLossResult out;
  out.grad = Matrix::Zero(batch, descriptors.cols());
  out.anchors.resize(static_cast<std::size_t>(batch));
  std::vector<double> per_anchor;
  per_anchor.reserve(static_cast<std::size_t>(batch));
  const double inv_batch = 1.0 / static_cast<double>(batch);

  for (Index i = 0; i < batch; ++i) {
    auto& term = out.anchors[static_cast<std::size_t>(i)];
    double min_pos = std::numeric_limits<double>::infinity();
    double max_neg = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < batch; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        min_pos = std::min(min_pos, sim(i, j));
      } else {
        max_neg = std::max(max_neg, sim(i, j));
      }
    }
    for (Index j = 0; j < batch; ++j) {
      if (j == i) continue;
      const double s = sim(i, j);
      if (labels[j] == labels[i]) {
        if (!hyper.mine || s < max_neg + hyper.mining_margin) term.positives.push_back(j);
      } else {
        if (!hyper.mine || s > min_pos - hyper.mining_margin) term.negatives.push_back(j);
      }
    }

    std::vector<double> pos_exp;
    for (Index j : term.positives) pos_exp.push_back(std::exp(-hyper.alpha * (sim(i, j) - hyper.lambda)));
    std::vector<double> neg_exp;
    for (Index j : term.negatives) neg_exp.push_back(std::exp(hyper.beta * (sim(i, j) - hyper.lambda)));
    const double pos_sum = detail::sorted_sum(pos_exp);
    const double neg_sum = detail::sorted_sum(neg_exp);
    term.positive = std::log1p(pos_sum) / hyper.alpha;
    term.negative = std::log1p(neg_sum) / hyper.beta;
    per_anchor.push_back(term.positive + term.negative);

    // d/dS_ij of the anchor term, then S_ij = d_i . d_j
    for (std::size_t k = 0; k < term.positives.size(); ++k) {
      const Index j = term.positives[k];
      const double g = -pos_exp[k] / (1.0 + pos_sum) * inv_batch;
      out.grad.row(i) += g * descriptors.row(j);
      out.grad.row(j) += g * descriptors.row(i);
    }
    for (std::size_t k = 0; k < term.negatives.size(); ++k) {
      const Index j = term.negatives[k];
      const double g = neg_exp[k] / (1.0 + neg_sum) * inv_batch;
      out.grad.row(i) += g * descriptors.row(j);
      out.grad.row(j) += g * descriptors.row(i);
    }
  }
  out.loss = detail::sorted_sum(per_anchor) * inv_batch;
  return out;
}

// ---------------------------------------------------------------------------
// P x K batch sampling

struct LabeledId {
  std::string id;
  std::string place;
};

/// P distinct places with K distinct samples each, grouped by place.
/// Deterministic in seed; input order only matters through the place names and ids.
inline std::vector<std::string> sample_batch(const std::vector<LabeledId>& items, int places, int per_place,
                                             std::uint64_t seed) {
  if (places < 1 || per_place < 1) throw ConfigError("sample_batch: P and K must be positive");
  std::map<std::string, std::vector<std::string>> by_place;
  for (const auto& it : items) by_place[it.place].push_back(it.id);
  std::vector<const std::vector<std::string>*> eligible;
  for (auto& [_, ids] : by_place) {
    std::sort(ids.begin(), ids.end());
    if (static_cast<int>(ids.size()) >= per_place) eligible.push_back(&ids);
  }
  if (static_cast<int>(eligible.size()) < places) {
    throw DataError("sample_batch: need " + std::to_string(places) + " places with at least " +
                    std::to_string(per_place) + " samples, only " + std::to_string(eligible.size()) + " of " +
                    std::to_string(by_place.size()) + " places qualify");
  }
  SplitMix64 rng(mix_seed({seed, 0xBA7Cull}));
  auto shuffle = [&rng](auto& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  };
  shuffle(eligible);
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(places * per_place));
  for (int p = 0; p < places; ++p) {
    std::vector<std::string> ids = *eligible[static_cast<std::size_t>(p)];
    shuffle(ids);
    out.insert(out.end(), ids.begin(), ids.begin() + per_place);
  }
  return out;
}

inline std::vector<std::string> sample_batch(const std::vector<ManifestRecord>& manifest, int places, int per_place,
                                             std::uint64_t seed) {
  std::vector<LabeledId> items;
  items.reserve(manifest.size());
  for (const auto& r : manifest) items.push_back({r.id, r.place});
  return sample_batch(items, places, per_place, seed);
}

// ---------------------------------------------------------------------------
// optimizers

enum class OptimizerKind { AdamW, Sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// AdamW with decoupled weight decay, or plain gradient descent. Layer-norm
/// gains and offsets are not decayed.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(ParamStore& store, double lr) {
    ++t_;
    for (auto& [name, p] : store) {
      if (!p.trainable) continue;
      if (cfg_.kind == OptimizerKind::Sgd) {
        p.value -= lr * p.grad;
        continue;
      }
      auto& st = state_[name];
      if (st.m.size() == 0) {
        st.m = Matrix::Zero(p.value.rows(), p.value.cols());
        st.v = Matrix::Zero(p.value.rows(), p.value.cols());
      }
      st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * p.grad;
      st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
      const bool decay = name.find(".ln_") == std::string::npos;
      if (decay) p.value *= 1.0 - lr * cfg_.weight_decay;
      p.value.array() -= lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + cfg_.eps);
    }
  }

 private:
  struct Moments {
    Matrix m, v;
  };
  OptimizerConfig cfg_;
  std::map<std::string, Moments> state_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// toy trainer

struct TrainSample {
  std::string id;
  std::string place;
  TokenSequence image;
  TokenSequence text;
};

struct TrainConfig {
  int places = 8;     // P
  int per_place = 4;  // K
  int steps = 500;
  double lr = 1e-3;
  /// The learning rate decays linearly to lr * final_lr_fraction at the last step.
  double final_lr_fraction = 0.2;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  bool train_atrec = true;
  bool train_cammf = true;
  MSHyper hyper;
};

struct TracePoint {
  int step;
  double loss;
  double lr;
};

struct TrainResult {
  ParamStore store;
  std::vector<TracePoint> trace;
};

inline double scheduled_lr(const TrainConfig& cfg, int step) {
  if (cfg.steps <= 1) return cfg.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
  return cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
}

/// One P x K batch per step; batch k is drawn with seed mix(seed, k). The
/// trace records the loss before each update.
inline TrainResult train_toy(const ModelConfig& model, const TrainConfig& cfg, const std::vector<TrainSample>& samples,
                             ParamStore store) {
  model.validate();
  cfg.hyper.validate();
  if (cfg.steps < 0) throw ConfigError("train: 'steps' must be non-negative");
  if (model.normalization == Normalization::None) {
    throw ConfigError("train: descriptors must be normalized for the multi-similarity loss");
  }
  for (auto& [name, p] : store) {
    const bool is_atrec = name.rfind("atrec.", 0) == 0;
    const bool is_cammf = name.rfind("cammf.", 0) == 0;
    p.trainable = (is_atrec && cfg.train_atrec) || (is_cammf && cfg.train_cammf);
  }

  std::map<std::string, std::size_t> index;
  std::map<std::string, int> label_of;
  std::vector<LabeledId> items;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!index.emplace(samples[i].id, i).second) throw DataError("train: duplicate sample id '" + samples[i].id + "'");
    label_of.emplace(samples[i].place, static_cast<int>(label_of.size()));
    items.push_back({samples[i].id, samples[i].place});
  }

  Optimizer opt(cfg.optimizer);
  TrainResult result;
  result.trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    const auto ids = sample_batch(items, cfg.places, cfg.per_place,
                                  mix_seed({cfg.seed, static_cast<std::uint64_t>(step)}));
    const Index batch = static_cast<Index>(ids.size());
    std::vector<ModelCache> caches(ids.size());
    Matrix descriptors(batch, model.descriptor_size());
    std::vector<int> labels(ids.size());
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const TrainSample& s = samples[index.at(ids[b])];
      descriptors.row(static_cast<Index>(b)) = forward(model, store, s.image, s.text, &caches[b]).descriptor.values;
      labels[b] = label_of.at(s.place);
    }
    const MSLossResult ms = ms_loss(descriptors, labels, cfg.hyper);
    if (!std::isfinite(ms.loss)) throw EvaluationError("train: non-finite loss at step " + std::to_string(step));
    const double lr = scheduled_lr(cfg, step);
    result.trace.push_back({step, ms.loss, lr});

    store.zero_grad();
    for (std::size_t b = 0; b < ids.size(); ++b) {
      backward(model, caches[b], ms.grad.row(static_cast<Index>(b)), store);
    }
    opt.step(store, lr);
  }
  result.store = std::move(store);
  return result;
}

/// CSV with header `step,loss,lr`; values use 17 significant digits.
inline std::string trace_to_csv(const std::vector<TracePoint>& trace) {
  std::string out = "step,loss,lr\n";
  char buf[96];
  for (const auto& t : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", t.step, t.loss, t.lr);
    out += buf;
  }
  return out;
}

}  // namespace mmvpr
