#include "han/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "han/error.hpp"

namespace han {

namespace {

std::size_t checked_product(const std::vector<std::size_t>& dims) {
  if (dims.empty() || dims.size() > 3) {
    throw ShapeError("tensor rank must be 1..3, got " + std::to_string(dims.size()));
  }
  std::size_t n = 1;
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be positive: " + shape_string(dims));
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> dims, double fill)
    : dims_(std::move(dims)), data_(checked_product(dims_), fill) {}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  if (checked_product(dims_) != data_.size()) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match dims " +
                     shape_string(dims_));
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

std::span<double> Tensor::channel(std::size_t c) {
  const std::size_t plane = dims_[1] * dims_[2];
  return std::span<double>(data_).subspan(c * plane, plane);
}

std::span<const double> Tensor::channel(std::size_t c) const {
  const std::size_t plane = dims_[1] * dims_[2];
  return std::span<const double>(data_).subspan(c * plane, plane);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape(*this, other, "tensor +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

FeatureMap make_feature_map(std::size_t channels, std::size_t height, std::size_t width,
                            double fill) {
  return Tensor({channels, height, width}, fill);
}

void require_feature_map(const Tensor& t, const char* what) {
  if (t.rank() != 3) {
    throw ShapeError(std::string(what) + ": expected a C x H x W feature map, got " +
                     shape_string(t.dims()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.dims()) + " vs " +
                     shape_string(b.dims()));
  }
}

std::string shape_string(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

Tensor transpose(const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_string(m.dims()));
  Tensor t({m.cols(), m.rows()});
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  }
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  return dot(a.values(), b.values());
}

double frobenius_norm(const Tensor& t) {
  const auto v = t.values();
  return std::sqrt(dot(v, v));
}

double pair_norm(const ModalityPair& p) {
  const double a = frobenius_norm(p.rgb);
  const double b = frobenius_norm(p.tir);
  return std::sqrt(a * a + b * b);
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  auto xs = x.values();
  auto ys = y.values();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] += alpha * xs[i];
}

}  // namespace han
