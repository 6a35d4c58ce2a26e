#pragma once

// Attention-based text recalibration.
//
//   Z  = [X; Y]                      (M+N) x D
//   z' = mean_over_features(Z)       row vector, length M+N
//   S  = relu(relu(z' W1) W2)        W1: (M+N) x T1, W2: T1 x N
//   Y'_i = S_i * Y_i
//
// z' is a row vector so that both products conform with the stated weight
// shapes. The CLS text row is rescaled like every other row.

#include <string>

#include "mmvpr/errors.hpp"
#include "mmvpr/seqcore.hpp"

namespace mmvpr {

namespace atrec {
inline const std::string kW1 = "atrec.W1";
inline const std::string kW2 = "atrec.W2";
}  // namespace atrec

inline void init_atrec_params(ParamStore& store, Index image_len, Index text_len, Index hidden,
                              SplitMix64& rng) {
  add_linear(store, atrec::kW1, image_len + text_len, hidden, rng);
  add_linear(store, atrec::kW2, hidden, text_len, rng);
}

struct RecalibrationResult {
  Vector weights;        // S, length N, non-negative
  Matrix recalibrated;   // Y', N x D
};

struct AtrecCache {
  Matrix pooled;   // 1 x (M+N)
  Matrix pre1;     // 1 x T1
  Matrix hidden;   // 1 x T1
  Matrix pre2;     // 1 x N
  Matrix text;     // Y
  Index image_len = 0;
  Index dim = 0;
};

inline RecalibrationResult recalibrate(const TokenSequence& image, const TokenSequence& text,
                                       const ParamStore& store, AtrecCache* cache = nullptr) {
  const Index m = image.length();
  const Index n = text.length();
  const Index d = image.dim();
  if (text.dim() != d) {
    throw DimensionError("recalibrate: image tokens are " + shape_str(image.tokens()) + ", text tokens " +
                         shape_str(text.tokens()));
  }
  const Matrix& w1 = store.value(atrec::kW1);
  const Matrix& w2 = store.value(atrec::kW2);
  if (w1.rows() != m + n || w2.rows() != w1.cols() || w2.cols() != n) {
    throw DimensionError("recalibrate: W1 " + shape_str(w1) + " and W2 " + shape_str(w2) +
                         " do not match M=" + std::to_string(m) + ", N=" + std::to_string(n));
  }

  Matrix pooled(1, m + n);
  pooled.leftCols(m) = mean_over_features(image);
  pooled.rightCols(n) = mean_over_features(text);
  Matrix pre1 = linear(pooled, atrec::kW1, store);
  Matrix hidden = relu(pre1);
  Matrix pre2 = linear(hidden, atrec::kW2, store);

  RecalibrationResult out;
  out.weights = relu(pre2).row(0);
  out.recalibrated = out.weights.transpose().asDiagonal() * text.tokens();

  if (cache != nullptr) {
    cache->pooled = std::move(pooled);
    cache->pre1 = std::move(pre1);
    cache->hidden = std::move(hidden);
    cache->pre2 = std::move(pre2);
    cache->text = text.tokens();
    cache->image_len = m;
    cache->dim = d;
  }
  return out;
}

struct AtrecInputGrads {
  Matrix image;  // dL/dX
  Matrix text;   // dL/dY
};

/// Backpropagates dL/dY' into W1, W2 and returns the gradients for X and Y.
inline AtrecInputGrads recalibrate_backward(const AtrecCache& cache, const Matrix& d_recalibrated,
                                            ParamStore& store) {
  const Matrix& text = cache.text;
  const Vector weights = relu(cache.pre2).row(0);
  // Y'_i = S_i * Y_i
  Matrix d_text = weights.transpose().asDiagonal() * d_recalibrated;
  const Matrix d_weights = d_recalibrated.cwiseProduct(text).rowwise().sum().transpose();

  const Matrix d_pre2 = relu_backward(cache.pre2, d_weights);
  const Matrix d_hidden = linear_backward(cache.hidden, d_pre2, atrec::kW2, store);
  const Matrix d_pre1 = relu_backward(cache.pre1, d_hidden);
  const Matrix d_pooled = linear_backward(cache.pooled, d_pre1, atrec::kW1, store);

  const Index m = cache.image_len;
  const Index n = text.rows();
  AtrecInputGrads g;
  g.image = mean_over_features_backward(d_pooled.leftCols(m), cache.dim);
  g.text = d_text + mean_over_features_backward(d_pooled.rightCols(n), cache.dim);
  return g;
}

}  // namespace mmvpr
