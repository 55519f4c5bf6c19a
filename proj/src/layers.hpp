// SPDX-License-Identifier: Apache-2.0
// Dense building blocks shared by the encoder and the task heads. Rows are
// independent samples (tokens); every op works on a whole row-major matrix.
#pragma once

#include <cmath>
#include <numbers>

#include "viny/backbone.hpp"

namespace viny::detail {

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct NormCache {
  Matrix<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

// Row statistics use a plain sequential loop: Eigen's vectorized rowwise()
// reductions pack several rows together, which would make a row's value
// depend on its position in the batch.
template <typename T>
Matrix<T> norm_forward(const Matrix<T> &x, const Norm<T> &n, NormCache<T> &cache) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index width = x.cols();
  cache.xhat.resize(rows, width);
  cache.rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T *src = x.data() + r * width;
    T *dst = cache.xhat.data() + r * width;
    T mean = 0;
    for (Eigen::Index j = 0; j < width; ++j)
      mean += src[j];
    mean /= static_cast<T>(width);
    T var = 0;
    for (Eigen::Index j = 0; j < width; ++j) {
      dst[j] = src[j] - mean;
      var += dst[j] * dst[j];
    }
    var /= static_cast<T>(width);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
    cache.rstd[r] = rstd;
    for (Eigen::Index j = 0; j < width; ++j)
      dst[j] *= rstd;
  }
  Matrix<T> y = cache.xhat;
  y.array().rowwise() *= n.scale.array();
  y.rowwise() += n.shift;
  return y;
}

template <typename T>
Matrix<T> norm_backward(const Matrix<T> &dy, const Norm<T> &n,
                        const NormCache<T> &cache, Norm<T> &grad) {
  grad.scale += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  grad.shift += dy.colwise().sum();
  Matrix<T> dxhat = dy;
  dxhat.array().rowwise() *= n.scale.array();
  const auto width = static_cast<T>(dy.cols());
  const Eigen::Matrix<T, Eigen::Dynamic, 1> mean_d = dxhat.rowwise().sum() / width;
  const Eigen::Matrix<T, Eigen::Dynamic, 1> mean_dx =
      (dxhat.array() * cache.xhat.array()).rowwise().sum() / width;
  Matrix<T> dx = dxhat.colwise() - mean_d;
  dx.array() -= cache.xhat.array().colwise() * mean_dx.array();
  dx.array().colwise() *= cache.rstd.array();
  return dx;
}

/// With block_rows > 0 the product runs separately on each run of
/// block_rows rows, so an image's result does not depend on where it sits in
/// the batch (GEMM kernels round differently at panel edges).
template <typename T>
Matrix<T> affine_forward(const Matrix<T> &x, const Affine<T> &a, Eigen::Index block_rows = 0) {
  Matrix<T> y(x.rows(), a.weight.cols());
  if (block_rows <= 0 || block_rows >= x.rows()) {
    y.noalias() = x * a.weight;
  } else {
    for (Eigen::Index r = 0; r < x.rows(); r += block_rows)
      y.middleRows(r, block_rows).noalias() = x.middleRows(r, block_rows) * a.weight;
  }
  if (a.has_bias())
    y.rowwise() += a.bias;
  return y;
}

/// Accumulates weight / bias gradients and returns d(loss)/dx.
template <typename T>
Matrix<T> affine_backward(const Matrix<T> &dy, const Matrix<T> &x,
                          const Affine<T> &a, Affine<T> &grad) {
  grad.weight.noalias() += x.transpose() * dy;
  if (a.has_bias())
    grad.bias += dy.colwise().sum();
  return dy * a.weight.transpose();
}

/// Same as affine_backward without the input gradient.
template <typename T>
void affine_backward_params(const Matrix<T> &dy, const Matrix<T> &x,
                            const Affine<T> &a, Affine<T> &grad) {
  grad.weight.noalias() += x.transpose() * dy;
  if (a.has_bias())
    grad.bias += dy.colwise().sum();
}

// Exact Gaussian error linear unit, x * Phi(x).
template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) *
                static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

} // namespace viny::detail
