#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace reclab {

#ifdef RECLAB_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of Real. A rank-0 tensor is a scalar.
///
/// Tensors are plain values: copying copies the data. Once handed to a Graph
/// they are treated as immutable.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Real value);
  static Tensor scalar(Real value) { return Tensor(Shape{}, {value}); }
  static Tensor vector(std::vector<Real> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<Real> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;

  // Rank-2 view helpers. Rank-1 tensors count as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }
  std::vector<Real>& storage() noexcept { return data_; }
  const std::vector<Real>& storage() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Value of a single-element tensor.
  Real item() const;

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

/// Throws DimensionError naming both shapes when they differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

/// Largest elementwise |a - b|.
Real max_abs_diff(const Tensor& a, const Tensor& b);

/// True when every element matches bit for bit.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace reclab
