#include "mtm/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mtm {

std::string Shape4::str() const {
  std::ostringstream os;
  os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
  return os.str();
}

void require_valid(const Shape4& s, const char* what) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ShapeError(std::string(what) + ": every dimension must be >= 1, got " +
                     s.str());
  }
}

void require_same_shape(const Tensor4& a, const Tensor4& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

Tensor4::Tensor4(Shape4 shape, double fill) : shape_(shape) {
  require_valid(shape, "Tensor4");
  data_.assign(shape.size(), fill);
}

Tensor4::Tensor4(Shape4 shape, std::vector<double> values)
    : shape_(shape), data_(std::move(values)) {
  require_valid(shape, "Tensor4");
  if (data_.size() != shape.size()) {
    throw ShapeError("Tensor4: data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape.str());
  }
}

double Tensor4::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_.str());
  }
  return data_[0];
}

Tensor4 Tensor4::reshaped(Shape4 shape) const {
  if (shape.size() != data_.size()) {
    throw ShapeError("reshape " + shape_.str() + " -> " + shape.str());
  }
  return Tensor4(shape, data_);
}

bool Tensor4::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Matrix::Matrix(int rows, int cols, double fill) : rows_(rows), cols_(cols) {
  if (rows < 0 || cols < 0) throw ShapeError("Matrix: negative dimension");
  data_.assign(static_cast<std::size_t>(rows) * cols, fill);
}

Matrix::Matrix(int rows, int cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (rows < 0 || cols < 0 ||
      data_.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("Matrix: data length does not match rows*cols");
  }
}

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (int r = 0; r < rows_; ++r)
    for (int c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " times " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

Tensor4 leaky_relu(const Tensor4& x, double slope) {
  Tensor4 y(x.shape());
  const auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = in[i] >= 0.0 ? in[i] : slope * in[i];
  }
  return y;
}

Tensor4 upsample_nearest2x(const Tensor4& x) {
  const Shape4 s = x.shape();
  Tensor4 y(Shape4{s.n, s.c, 2 * s.h, 2 * s.w});
  for (int b = 0; b < s.n; ++b) {
    for (int ch = 0; ch < s.c; ++ch) {
      const double* src = x.plane(b, ch);
      double* dst = y.plane(b, ch);
      const int ow = 2 * s.w;
      for (int i = 0; i < 2 * s.h; ++i) {
        const double* row = src + static_cast<std::size_t>(i / 2) * s.w;
        double* orow = dst + static_cast<std::size_t>(i) * ow;
        for (int j = 0; j < ow; ++j) orow[j] = row[j / 2];
      }
    }
  }
  return y;
}

Tensor4 mean_pool2x2(const Tensor4& x) {
  const Shape4 s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("mean_pool2x2 needs even spatial size, got " + s.str());
  }
  const int oh = s.h / 2;
  const int ow = s.w / 2;
  Tensor4 y(Shape4{s.n, s.c, oh, ow});
  for (int b = 0; b < s.n; ++b) {
    for (int ch = 0; ch < s.c; ++ch) {
      const double* src = x.plane(b, ch);
      double* dst = y.plane(b, ch);
      for (int i = 0; i < oh; ++i) {
        const double* r0 = src + static_cast<std::size_t>(2 * i) * s.w;
        const double* r1 = r0 + s.w;
        for (int j = 0; j < ow; ++j) {
          dst[static_cast<std::size_t>(i) * ow + j] =
              ((r0[2 * j] + r0[2 * j + 1]) + (r1[2 * j] + r1[2 * j + 1])) * 0.25;
        }
      }
    }
  }
  return y;
}

}  // namespace mtm
