#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "han/tensor.hpp"

// Dense kernels shared by the fusion units. All of them are pure functions.
namespace han {

enum class PoolMode { Average, Max };

constexpr double kNormEpsilon = 1e-5;

Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& a);
// Vector-Jacobian product of softmax_rows given its output y.
Tensor softmax_rows_backward(const Tensor& y, const Tensor& grad_y);

// Global pooling of a C x H x W map to a length-C vector.
Tensor spatial_pool(const FeatureMap& f, PoolMode mode);
// Flat spatial index of the first maximum of every channel, scanning row-major.
std::vector<std::size_t> spatial_argmax(const FeatureMap& f);

// Zero-padded "same" 1-D convolution with an odd kernel shared by all positions:
// y[i] = sum_d w[d + r] * x[i + d] for d in [-r, r], r = (k - 1) / 2.
Tensor conv1d_same(const Tensor& x, const Tensor& w);
void conv1d_same_backward(const Tensor& x, const Tensor& w, const Tensor& grad_y, Tensor& grad_x,
                          Tensor& grad_w);

// Standardizes every row of a (groups x positions) matrix:
// (a - mean) / (std + eps), with std the population deviation.
// Rows with no spread at all map to zeros.
Tensor normalize_spatial(const Tensor& a, double eps = kNormEpsilon);
Tensor normalize_spatial_backward(const Tensor& a, const Tensor& grad_y, double eps = kNormEpsilon);

inline double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double relu(double x) noexcept { return x > 0 ? x : 0.0; }
// relu'(0) is taken as 0.
inline double relu_grad(double x) noexcept { return x > 0 ? 1.0 : 0.0; }

}  // namespace han
