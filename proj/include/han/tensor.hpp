#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace han {

/// Dense row-major tensor of doubles with rank 1 to 3.
///
/// A default-constructed tensor is empty (rank 0) and only serves as a
/// placeholder; every constructor taking dims enforces the rank and
/// positivity constraints.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);
  Tensor(std::vector<std::size_t> dims, std::vector<double> data);

  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Views into the tensor's storage; not available on temporaries, whose
  // storage would be gone before the view is used.
  std::span<double> values() & noexcept { return data_; }
  std::span<const double> values() const& noexcept { return data_; }
  std::span<const double> values() const&& = delete;
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Matrix access; valid for rank-2 tensors.
  double& operator()(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

  // Feature-map access; valid for rank-3 tensors.
  double& operator()(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * dims_[1] + h) * dims_[2] + w];
  }
  double operator()(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * dims_[1] + h) * dims_[2] + w];
  }

  std::size_t rows() const { return dims_.at(0); }
  std::size_t cols() const { return dims_.at(1); }

  // Flat view of channel c of a rank-3 tensor (H*W values).
  std::span<double> channel(std::size_t c);
  std::span<const double> channel(std::size_t c) const;

  void fill(double v);
  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return dims_ == other.dims_; }

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

/// A C x H x W tensor. Channel-major, so one channel is a contiguous plane.
using FeatureMap = Tensor;

/// The paired RGB and thermal streams that flow through every fusion unit.
struct ModalityPair {
  FeatureMap rgb;
  FeatureMap tir;

  friend bool operator==(const ModalityPair&, const ModalityPair&) = default;
};

FeatureMap make_feature_map(std::size_t channels, std::size_t height, std::size_t width,
                            double fill = 0.0);

// Throws ShapeError unless t is rank 3.
void require_feature_map(const Tensor& t, const char* what);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

std::string shape_string(const std::vector<std::size_t>& dims);

Tensor transpose(const Tensor& m);
double dot(std::span<const double> a, std::span<const double> b);
double dot(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& t);
double pair_norm(const ModalityPair& p);

// y += alpha * x, elementwise.
void axpy(double alpha, const Tensor& x, Tensor& y);

}  // namespace han
