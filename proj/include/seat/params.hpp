#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seat/error.hpp"
#include "seat/tensor.hpp"

namespace seat {

struct LayoutEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;

  friend bool operator==(const LayoutEntry&, const LayoutEntry&) = default;
};

using ParamLayout = std::vector<LayoutEntry>;

/// Builds a contiguous layout from (name, shape) pairs.
inline ParamLayout make_layout(const std::vector<std::pair<std::string, Shape>>& entries) {
  ParamLayout layout;
  std::size_t offset = 0;
  for (const auto& [name, shape] : entries) {
    layout.push_back({name, shape, offset});
    offset += shape_size(shape);
  }
  return layout;
}

inline std::size_t layout_size(const ParamLayout& layout) {
  std::size_t n = 0;
  for (const auto& e : layout) n += shape_size(e.shape);
  return n;
}

/// Throws LayoutError naming the first entry where the layouts disagree.
inline void require_same_layout(const ParamLayout& a, const ParamLayout& b) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!(a[i] == b[i]))
      throw LayoutError("layout mismatch at entry " + std::to_string(i) + ": '" + a[i].name + "' " +
                        shape_str(a[i].shape) + "@" + std::to_string(a[i].offset) + " vs '" + b[i].name + "' " +
                        shape_str(b[i].shape) + "@" + std::to_string(b[i].offset));
  }
  if (a.size() != b.size())
    throw LayoutError("layout mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                      " entries");
}

/**
 * Flattened model parameters tagged with their layout.
 *
 * This is the object weight ensembling operates on: any two vectors with the
 * same layout can be combined element-wise.
 */
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(ParamLayout layout) : layout_(std::move(layout)) {
    validate();
    data_.assign(layout_size(layout_), 0.0);
  }

  ParamVector(ParamLayout layout, std::vector<double> data) : layout_(std::move(layout)), data_(std::move(data)) {
    validate();
    if (data_.size() != layout_size(layout_))
      throw LayoutError("parameter data has " + std::to_string(data_.size()) + " values, layout needs " +
                        std::to_string(layout_size(layout_)));
  }

  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<const double> view(const LayoutEntry& e) const { return {data_.data() + e.offset, shape_size(e.shape)}; }
  std::span<double> view(const LayoutEntry& e) { return {data_.data() + e.offset, shape_size(e.shape)}; }

  const LayoutEntry& entry(const std::string& name) const {
    for (const auto& e : layout_)
      if (e.name == name) return e;
    throw LayoutError("no parameter named '" + name + "'");
  }

  void require_compatible(const ParamVector& other) const { require_same_layout(layout_, other.layout_); }

  /// this = a * this + b * other
  void blend(double a, const ParamVector& other, double b) {
    require_compatible(other);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] = a * data_[i] + b * other.data_[i];
  }

  double norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.layout_ == b.layout_ && a.data_ == b.data_;
  }

 private:
  void validate() const {
    std::size_t offset = 0;
    for (const auto& e : layout_) {
      if (e.offset != offset)
        throw LayoutError("layout entry '" + e.name + "' has offset " + std::to_string(e.offset) + ", expected " +
                          std::to_string(offset));
      offset += shape_size(e.shape);
    }
  }

  ParamLayout layout_;
  std::vector<double> data_;
};

}  // namespace seat
