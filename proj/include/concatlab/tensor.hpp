#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace concatlab {

// Error taxonomy: every throw carries a human-readable message naming the
// offending shapes/values.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};
class ContractError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_size(const Shape& s);  // product; throws on negative dims

// Dense row-major tensor of 64-bit floats. Rank is arbitrary for storage;
// differentiable graph ops accept rank <= 2 (masks are sliced before use).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(shape_size(shape_)), 0.0);
  }
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v) { return full({1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_.at(static_cast<std::size_t>(i)); }
  // 2D accessors (rows/cols) used pervasively; throw on wrong rank.
  std::int64_t rows() const;
  std::int64_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& at(std::int64_t flat) { return data_[static_cast<std::size_t>(flat)]; }
  double at(std::int64_t flat) const { return data_[static_cast<std::size_t>(flat)]; }
  double& at2(std::int64_t i, std::int64_t j);
  double at2(std::int64_t i, std::int64_t j) const;
  double& at3(std::int64_t i, std::int64_t j, std::int64_t k);
  double at3(std::int64_t i, std::int64_t j, std::int64_t k) const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  double item() const;  // size-1 tensors only

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Slice [K,H,W] -> H x W copy of slab k.
Tensor slice_first(const Tensor& t, std::int64_t k);

}  // namespace concatlab
