#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmcl {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& what, const Shape& expected, const Shape& actual)
      : std::invalid_argument(what + ": expected " + to_string(expected) + ", got " +
                              to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  const Shape& expected() const noexcept { return expected_; }
  const Shape& actual() const noexcept { return actual_; }

 private:
  Shape expected_;
  Shape actual_;
};

// Dense row-major array.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_extents();
    values_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents();
    if (values_.size() != element_count(shape_))
      throw ShapeError("tensor value count", shape_, Shape{values_.size()});
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }

  T& operator[](std::size_t i) noexcept { return values_[i]; }
  const T& operator[](std::size_t i) const noexcept { return values_[i]; }

  T& at(std::initializer_list<std::size_t> index) { return values_[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const { return values_[offset(index)]; }

  void reshape(Shape shape) {
    if (element_count(shape) != values_.size()) throw ShapeError("reshape", shape_, shape);
    shape_ = std::move(shape);
  }

  bool all_finite() const {
    for (const T& v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(values_.begin(), values_.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw std::invalid_argument("tensor extents must be positive, got " + to_string(shape_));
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) throw std::out_of_range("tensor index rank mismatch");
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> values_;
};

}  // namespace dmcl
