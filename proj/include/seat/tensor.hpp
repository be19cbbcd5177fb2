#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "seat/error.hpp"

namespace seat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/**
 * Dense row-major array of doubles.
 *
 * A rank-0 tensor (empty shape) holds one scalar. Constructing from external
 * data validates the element count and rejects NaN/Inf; the zero-filled
 * constructor is for internal buffers.
 */
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_))
      throw Error("tensor of shape " + shape_str(shape_) + " needs " +
                  std::to_string(shape_size(shape_)) + " values, got " + std::to_string(data_.size()));
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!std::isfinite(data_[i]))
        throw Error("non-finite tensor value at flat index " + std::to_string(i));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Element (r, c) of a rank-2 tensor.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1) throw Error("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  /// Same data, new shape with the same element count.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  /// Rows [begin, end) along the leading axis.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) throw Error("slice_rows out of range");
    const std::size_t row = data_.size() / shape_[0];
    Shape s = shape_;
    s[0] = end - begin;
    Tensor t(std::move(s));
    std::copy(data_.begin() + begin * row, data_.begin() + end * row, t.data_.begin());
    return t;
  }

  /// Gather rows along the leading axis.
  Tensor gather_rows(std::span<const std::size_t> rows) const {
    if (shape_.empty()) throw Error("gather_rows on scalar");
    const std::size_t row = data_.size() / shape_[0];
    Shape s = shape_;
    s[0] = rows.size();
    Tensor t(std::move(s));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= shape_[0]) throw Error("gather_rows index out of range");
      std::copy_n(data_.begin() + rows[i] * row, row, t.data_.begin() + i * row);
    }
    return t;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_)
      if (d == 0) throw Error("tensor dimensions must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

}  // namespace seat
