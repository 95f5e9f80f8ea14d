#include "concatlab/tensor.hpp"

#include <cmath>
#include <sstream>

namespace concatlab {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_size(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

std::int64_t Tensor::rows() const {
  if (shape_.size() != 2) throw ShapeError("expected rank-2 tensor, got shape " + shape_str(shape_));
  return shape_[0];
}

std::int64_t Tensor::cols() const {
  if (shape_.size() != 2) throw ShapeError("expected rank-2 tensor, got shape " + shape_str(shape_));
  return shape_[1];
}

double& Tensor::at2(std::int64_t i, std::int64_t j) {
  return data_[static_cast<std::size_t>(i * cols() + j)];
}
double Tensor::at2(std::int64_t i, std::int64_t j) const {
  return data_[static_cast<std::size_t>(i * cols() + j)];
}

double& Tensor::at3(std::int64_t i, std::int64_t j, std::int64_t k) {
  if (shape_.size() != 3) throw ShapeError("expected rank-3 tensor, got shape " + shape_str(shape_));
  return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
}
double Tensor::at3(std::int64_t i, std::int64_t j, std::int64_t k) const {
  if (shape_.size() != 3) throw ShapeError("expected rank-3 tensor, got shape " + shape_str(shape_));
  return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
}

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() requires a size-1 tensor, got shape " + shape_str(shape_));
  return data_[0];
}

Tensor slice_first(const Tensor& t, std::int64_t k) {
  if (t.rank() != 3) throw ShapeError("slice_first expects rank-3 tensor, got shape " + shape_str(t.shape()));
  const std::int64_t h = t.shape()[1], w = t.shape()[2];
  if (k < 0 || k >= t.shape()[0]) throw ShapeError("slice index " + std::to_string(k) + " out of range for shape " + shape_str(t.shape()));
  Tensor out({h, w});
  const double* src = t.data() + k * h * w;
  for (std::int64_t i = 0; i < h * w; ++i) out.data()[i] = src[i];
  return out;
}

}  // namespace concatlab
