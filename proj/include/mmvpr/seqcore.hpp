#pragma once

// Elementary differentiable operations over token sequences.
//
// Every forward op here has a matching *_backward that takes the upstream
// gradient and returns the gradient with respect to its input, accumulating
// parameter gradients into the ParamStore when the op owns parameters.
// All arithmetic is double precision.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmvpr/errors.hpp"
#include "mmvpr/rng.hpp"

namespace mmvpr {

using Matrix = Eigen::MatrixXd;
/// Token-sized vectors are row vectors so that `v * W` reads like the math.
using Vector = Eigen::RowVectorXd;
using Index = Eigen::Index;

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

template <typename Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

/// T x D token matrix; row 0 is the CLS token.
class TokenSequence {
 public:
  explicit TokenSequence(Matrix tokens) : tokens_(std::move(tokens)) {
    if (tokens_.rows() < 1 || tokens_.cols() < 1) {
      throw DimensionError("token sequence must be at least 1x1, got " + shape_str(tokens_));
    }
    if (!tokens_.allFinite()) throw DataError("token sequence contains non-finite values");
  }

  const Matrix& tokens() const { return tokens_; }
  Index length() const { return tokens_.rows(); }
  Index dim() const { return tokens_.cols(); }
  Vector cls() const { return tokens_.row(0); }

  friend bool operator==(const TokenSequence& a, const TokenSequence& b) {
    return a.tokens_.rows() == b.tokens_.rows() && a.tokens_.cols() == b.tokens_.cols() &&
           a.tokens_ == b.tokens_;
  }

 private:
  Matrix tokens_;
};

struct Param {
  Matrix value;
  Matrix grad;
  bool trainable = true;
};

/// Named parameters with gradient slots. Iteration order is by name, which
/// keeps optimizer updates and weight files deterministic.
///
/// Single-writer: backward passes accumulate into `grad` without locking.
class ParamStore {
 public:
  Param& add(const std::string& name, Matrix value, bool trainable = true) {
    if (entries_.count(name) != 0) throw ConfigError("duplicate parameter '" + name + "'");
    Matrix grad = Matrix::Zero(value.rows(), value.cols());
    return entries_.emplace(name, Param{std::move(value), std::move(grad), trainable})
        .first->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Param& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  const Param& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }

  Matrix& value(const std::string& name) { return at(name).value; }
  const Matrix& value(const std::string& name) const { return at(name).value; }
  Matrix& grad(const std::string& name) { return at(name).grad; }
  const Matrix& grad(const std::string& name) const { return at(name).grad; }

  void zero_grad() {
    for (auto& [_, p] : entries_) p.grad.setZero();
  }

  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, Param> entries_;
};

/// Uniform in +-sqrt(6 / (rows + cols)).
inline Matrix xavier_uniform(Index rows, Index cols, SplitMix64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

/// Registers an in x out weight `name` and, when requested, a 1 x out
/// bias `name.bias` which linear() then picks up automatically.
inline void add_linear(ParamStore& store, const std::string& name, Index in, Index out,
                       SplitMix64& rng, bool bias = false) {
  store.add(name, xavier_uniform(in, out, rng));
  if (bias) store.add(name + ".bias", Matrix::Zero(1, out));
}

// ---------------------------------------------------------------------------
// linear

inline Matrix linear(const Matrix& x, const std::string& name, const ParamStore& store) {
  const Matrix& w = store.value(name);
  if (x.cols() != w.rows()) {
    throw DimensionError("linear '" + name + "': input " + shape_str(x) + " does not conform to weight " +
                         shape_str(w));
  }
  Matrix y = x * w;
  const std::string bias = name + ".bias";
  if (store.contains(bias)) y.rowwise() += store.value(bias).row(0);
  return y;
}

/// Accumulates dL/dW (and dL/db) and returns dL/dx.
inline Matrix linear_backward(const Matrix& x, const Matrix& dy, const std::string& name,
                              ParamStore& store) {
  Param& w = store.at(name);
  if (w.trainable) w.grad.noalias() += x.transpose() * dy;
  const std::string bias = name + ".bias";
  if (store.contains(bias)) {
    Param& b = store.at(bias);
    if (b.trainable) b.grad.row(0) += dy.colwise().sum();
  }
  return dy * w.value.transpose();
}

// ---------------------------------------------------------------------------
// layer norm (population variance)

struct LayerNormCache {
  Vector normalized;  // (x - mean) / sqrt(var + eps)
  double inv_std = 0.0;
};

inline Vector layer_norm(const Vector& x, const Vector& gamma, const Vector& beta, double eps,
                         LayerNormCache* cache = nullptr) {
  if (x.size() == 0) throw DimensionError("layer_norm of a zero-length vector");
  if (gamma.size() != x.size() || beta.size() != x.size()) {
    throw DimensionError("layer_norm: x has " + std::to_string(x.size()) + " entries, gamma " +
                         std::to_string(gamma.size()) + ", beta " + std::to_string(beta.size()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const double n = static_cast<double>(x.size());
  const double mean = x.sum() / n;
  const Vector centered = x.array() - mean;
  const double var = centered.squaredNorm() / n;
  const double inv_std = 1.0 / std::sqrt(var + eps);
  Vector normalized = centered * inv_std;
  Vector y = normalized.cwiseProduct(gamma) + beta;
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return y;
}

/// Returns dL/dx; dL/dgamma and dL/dbeta are added to the given accumulators.
inline Vector layer_norm_backward(const LayerNormCache& cache, const Vector& gamma, const Vector& dy,
                                  Vector& dgamma, Vector& dbeta) {
  const Vector& xhat = cache.normalized;
  dgamma += dy.cwiseProduct(xhat);
  dbeta += dy;
  const Vector g = dy.cwiseProduct(gamma);
  const double n = static_cast<double>(g.size());
  const double mean_g = g.sum() / n;
  const double mean_gx = g.dot(xhat) / n;
  return cache.inv_std * (g.array() - mean_g - xhat.array() * mean_gx).matrix();
}

// ---------------------------------------------------------------------------
// softmax

inline Vector softmax(const Vector& v) {
  if (v.size() == 0) return v;
  const Vector e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

/// Vector-Jacobian product for y = softmax(v).
inline Vector softmax_backward(const Vector& y, const Vector& dy) {
  return y.cwiseProduct((dy.array() - y.dot(dy)).matrix());
}

// ---------------------------------------------------------------------------
// relu

template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
  return x.cwiseMax(0.0).eval();
}

/// Gradient through relu given its pre-activation. The kink at 0 takes slope 0.
template <typename A, typename B>
auto relu_backward(const Eigen::MatrixBase<A>& pre, const Eigen::MatrixBase<B>& dy) {
  return (pre.array() > 0.0).select(dy, 0.0).eval();
}

// ---------------------------------------------------------------------------
// mean over the feature dimension

/// Entry t is the mean of row t.
inline Vector mean_over_features(const Matrix& x) {
  if (x.rows() < 1 || x.cols() < 1) throw DimensionError("mean_over_features of " + shape_str(x));
  return x.rowwise().mean().transpose();
}

inline Vector mean_over_features(const TokenSequence& x) { return mean_over_features(x.tokens()); }

/// Each feature of row t receives d[t] / D.
inline Matrix mean_over_features_backward(const Vector& d, Index feature_dim) {
  return (d.transpose() / static_cast<double>(feature_dim)).replicate(1, feature_dim);
}

// ---------------------------------------------------------------------------
// finite-difference gradient verification

struct GradReport {
  std::map<std::string, double> max_rel_error;
  bool pass = true;
  double eps = 0.0;
  double tol = 0.0;

  double worst() const {
    double w = 0.0;
    for (const auto& [_, e] : max_rel_error) w = std::max(w, e);
    return w;
  }
};

/// `loss(store, backward)` must return the loss; when `backward` is true it
/// must also accumulate the analytic gradient into the (pre-zeroed) store.
using LossFn = std::function<double(ParamStore&, bool backward)>;

/// Central differences on every trainable scalar, compared with the analytic
/// gradient by |a - n| / max(1, |a|, |n|). Parameter values are restored
/// exactly; gradients are left holding the analytic values.
inline GradReport grad_check(const LossFn& loss, ParamStore& store, double eps = 1e-5,
                             double tol = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
  auto eval = [&](bool backward) {
    const double v = loss(store, backward);
    if (!std::isfinite(v)) throw EvaluationError("grad_check: loss is not finite");
    return v;
  };

  store.zero_grad();
  eval(true);

  GradReport report;
  report.eps = eps;
  report.tol = tol;
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    double worst = 0.0;
    for (Index k = 0; k < p.value.size(); ++k) {
      double& theta = p.value.data()[k];
      const double saved = theta;
      theta = saved + eps;
      const double up = eval(false);
      theta = saved - eps;
      const double down = eval(false);
      theta = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.grad.data()[k];
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    report.max_rel_error[name] = worst;
    if (worst > tol) report.pass = false;
  }
  return report;
}

}  // namespace mmvpr
