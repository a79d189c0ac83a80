#include "han/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "han/error.hpp"

namespace han {

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_string(t.dims()));
}

void require_vector(const Tensor& t, const char* what) {
  if (t.rank() != 1) throw ShapeError(std::string(what) + ": expected a vector, got " + shape_string(t.dims()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims differ " + shape_string(a.dims()) + " x " + shape_string(b.dims()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  Tensor y(a.dims());
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* in = a.data() + r * n;
    double* out = y.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
  }
  return y;
}

Tensor softmax_rows_backward(const Tensor& y, const Tensor& grad_y) {
  require_same_shape(y, grad_y, "softmax_rows_backward");
  Tensor g(y.dims());
  const std::size_t n = y.cols();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    const double* yr = y.data() + r * n;
    const double* gr = grad_y.data() + r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += yr[j] * gr[j];
    for (std::size_t j = 0; j < n; ++j) g(r, j) = yr[j] * (gr[j] - s);
  }
  return g;
}

Tensor spatial_pool(const FeatureMap& f, PoolMode mode) {
  require_feature_map(f, "spatial_pool");
  const std::size_t channels = f.dim(0);
  Tensor out({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    auto plane = f.channel(c);
    if (mode == PoolMode::Average) {
      double s = 0.0;
      for (double v : plane) s += v;
      out[c] = s / static_cast<double>(plane.size());
    } else {
      out[c] = *std::max_element(plane.begin(), plane.end());
    }
  }
  return out;
}

std::vector<std::size_t> spatial_argmax(const FeatureMap& f) {
  require_feature_map(f, "spatial_argmax");
  std::vector<std::size_t> idx(f.dim(0));
  for (std::size_t c = 0; c < idx.size(); ++c) {
    auto plane = f.channel(c);
    idx[c] = static_cast<std::size_t>(std::max_element(plane.begin(), plane.end()) - plane.begin());
  }
  return idx;
}

namespace {

void check_kernel(const Tensor& x, const Tensor& w) {
  require_vector(x, "conv1d_same");
  require_vector(w, "conv1d_same");
  if (w.size() % 2 == 0) throw ConfigError("k", "conv1d kernel length must be odd");
  if (w.size() > 2 * x.size() - 1) throw ConfigError("k", "conv1d kernel longer than 2C-1");
}

}  // namespace

Tensor conv1d_same(const Tensor& x, const Tensor& w) {
  check_kernel(x, w);
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto r = static_cast<std::ptrdiff_t>(w.size() / 2);
  Tensor y({x.size()});
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::ptrdiff_t d = -r; d <= r; ++d) {
      const std::ptrdiff_t j = i + d;
      if (j >= 0 && j < n) s += w[static_cast<std::size_t>(d + r)] * x[static_cast<std::size_t>(j)];
    }
    y[static_cast<std::size_t>(i)] = s;
  }
  return y;
}

void conv1d_same_backward(const Tensor& x, const Tensor& w, const Tensor& grad_y, Tensor& grad_x,
                          Tensor& grad_w) {
  check_kernel(x, w);
  require_same_shape(x, grad_y, "conv1d_same_backward");
  grad_x = Tensor(x.dims());
  if (grad_w.empty()) grad_w = Tensor(w.dims());
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto r = static_cast<std::ptrdiff_t>(w.size() / 2);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double g = grad_y[static_cast<std::size_t>(i)];
    for (std::ptrdiff_t d = -r; d <= r; ++d) {
      const std::ptrdiff_t j = i + d;
      if (j < 0 || j >= n) continue;
      const auto wi = static_cast<std::size_t>(d + r);
      grad_w[wi] += g * x[static_cast<std::size_t>(j)];
      grad_x[static_cast<std::size_t>(j)] += g * w[wi];
    }
  }
}

namespace {

struct RowStats {
  double mean = 0.0;
  double std = 0.0;
  bool flat = true;
};

RowStats row_stats(const double* row, std::size_t n) {
  RowStats st;
  const auto [lo, hi] = std::minmax_element(row, row + n);
  st.flat = *lo == *hi;
  if (st.flat) return st;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += row[i];
  st.mean = s / static_cast<double>(n);
  double v = 0.0;
  for (std::size_t i = 0; i < n; ++i) v += (row[i] - st.mean) * (row[i] - st.mean);
  st.std = std::sqrt(v / static_cast<double>(n));
  return st;
}

}  // namespace

Tensor normalize_spatial(const Tensor& a, double eps) {
  require_matrix(a, "normalize_spatial");
  if (!(eps > 0)) throw ConfigError("eps", "normalization eps must be positive");
  Tensor y(a.dims());
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* row = a.data() + r * n;
    const RowStats st = row_stats(row, n);
    if (st.flat) continue;
    const double denom = st.std + eps;
    for (std::size_t i = 0; i < n; ++i) y(r, i) = (row[i] - st.mean) / denom;
  }
  return y;
}

Tensor normalize_spatial_backward(const Tensor& a, const Tensor& grad_y, double eps) {
  require_matrix(a, "normalize_spatial_backward");
  require_same_shape(a, grad_y, "normalize_spatial_backward");
  Tensor g(a.dims());
  const std::size_t n = a.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* row = a.data() + r * n;
    const double* gy = grad_y.data() + r * n;
    const RowStats st = row_stats(row, n);
    if (st.flat) continue;
    // y = d / s with d = a - mean, s = std + eps, dstd/da_i = d_i / (n std).
    const double s = st.std + eps;
    double gmean = 0.0, gd = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      gmean += gy[i];
      gd += gy[i] * (row[i] - st.mean);
    }
    gmean *= inv_n;
    const double coef = gd / (s * s) * inv_n / st.std;
    for (std::size_t i = 0; i < n; ++i) {
      g(r, i) = (gy[i] - gmean) / s - coef * (row[i] - st.mean);
    }
  }
  return g;
}

}  // namespace han
