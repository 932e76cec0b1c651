#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtm {

/// Raised whenever operand shapes are inconsistent. No operation broadcasts silently.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a documented precondition does not hold.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a computation produces NaN/Inf where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape4 {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

/// Dense rank-4 array in (batch, channel, height, width) order, row-major.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, double fill = 0.0);
  Tensor4(Shape4 shape, std::vector<double> values);

  static Tensor4 scalar(double v) { return Tensor4(Shape4{1, 1, 1, 1}, v); }

  const Shape4& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int b, int ch, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_.c + ch) * shape_.h + y) *
               shape_.w +
           x;
  }
  double& at(int b, int ch, int y, int x) { return data_[offset(b, ch, y, x)]; }
  double at(int b, int ch, int y, int x) const {
    return data_[offset(b, ch, y, x)];
  }

  /// Pointer to the (b, ch) plane.
  double* plane(int b, int ch) { return data_.data() + offset(b, ch, 0, 0); }
  const double* plane(int b, int ch) const {
    return data_.data() + offset(b, ch, 0, 0);
  }

  /// The single value of a 1x1x1x1 tensor.
  double item() const;

  Tensor4 reshaped(Shape4 shape) const;
  bool all_finite() const;

 private:
  Shape4 shape_{};
  std::vector<double> data_;
};

void require_valid(const Shape4& s, const char* what);
void require_same_shape(const Tensor4& a, const Tensor4& b, const char* what);

/// Row-major 2D matrix used by the mapping network statistics and the metrics.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0);
  Matrix(int rows, int cols, std::vector<double> values);

  static Matrix identity(int n);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  double& operator()(int r, int c) {
    return data_[static_cast<std::size_t>(r) * cols_ + c];
  }
  double operator()(int r, int c) const {
    return data_[static_cast<std::size_t>(r) * cols_ + c];
  }
  std::span<const double> data() const { return data_; }
  Matrix transposed() const;
  bool operator==(const Matrix&) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

/// Row-by-column product, accumulating left to right over the inner index.
Matrix matmul(const Matrix& a, const Matrix& b);

// Elementwise and resampling primitives (no taping).
Tensor4 leaky_relu(const Tensor4& x, double slope);
Tensor4 upsample_nearest2x(const Tensor4& x);
/// 2x2 mean, evaluated as ((a + b) + (c + d)) * 0.25. Requires even h and w.
Tensor4 mean_pool2x2(const Tensor4& x);

}  // namespace mtm
