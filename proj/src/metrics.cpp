#include "mtm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mtm/conv.hpp"
#include "mtm/rng.hpp"

namespace mtm {
namespace {

Tensor4 scaled_randn(Shape4 s, Rng& rng) {
  Tensor4 t = randn(s, rng);
  const double g = 1.0 / std::sqrt(static_cast<double>(s.c) * s.h * s.w);
  for (double& v : t.data()) v *= g;
  return t;
}

void require_symmetric(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) throw ShapeError(std::string(what) + ": matrix is not square");
  for (int i = 0; i < m.rows(); ++i)
    for (int j = i + 1; j < m.cols(); ++j)
      if (std::abs(m(i, j) - m(j, i)) > 1e-9) {
        throw ContractError(std::string(what) + ": covariance is not symmetric");
      }
}

double trace(const Matrix& m) {
  double t = 0.0;
  for (int i = 0; i < m.rows(); ++i) t += m(i, i);
  return t;
}

}  // namespace

FeatureExtractor::FeatureExtractor(int resolution, std::uint64_t seed)
    : resolution_(resolution) {
  if (resolution < 4 || resolution % 4 != 0) {
    throw ShapeError("FeatureExtractor: resolution must be a positive multiple of 4");
  }
  Rng rng(seed);
  w1_ = scaled_randn(Shape4{8, 1, 3, 3}, rng);
  w2_ = scaled_randn(Shape4{kDim, 8, 3, 3}, rng);
}

Matrix FeatureExtractor::extract(const Tensor4& images) const {
  if (images.c() != 1 || images.h() != resolution_ || images.w() != resolution_) {
    throw ShapeError("extract_features: expected (n, 1, " + std::to_string(resolution_) +
                     ", " + std::to_string(resolution_) + "), got " + images.shape().str());
  }
  const Tensor4 h1 = mean_pool2x2(leaky_relu(conv2d(images, w1_), 0.2));
  const Tensor4 h2 = mean_pool2x2(leaky_relu(conv2d(h1, w2_), 0.2));
  Matrix f(images.n(), kDim);
  const std::size_t plane = h2.shape().plane();
  for (int b = 0; b < images.n(); ++b) {
    for (int c = 0; c < kDim; ++c) {
      const double* p = h2.plane(b, c);
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      f(b, c) = s / static_cast<double>(plane);
    }
  }
  return f;
}

double FeatureExtractor::first_layer_checksum() const {
  double s = 0.0;
  for (double v : w1_.data()) s += v;
  return s;
}

GaussianStats fit_gaussian(const Matrix& features) {
  const int n = features.rows(), d = features.cols();
  if (n < 2) throw ContractError("fit_gaussian: need at least 2 samples");
  GaussianStats g;
  g.mean.assign(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) g.mean[j] += features(i, j);
  for (double& m : g.mean) m /= n;
  g.cov = Matrix(d, d);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b)
        g.cov(a, b) += (features(i, a) - g.mean[a]) * (features(i, b) - g.mean[b]);
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) {
      g.cov(a, b) /= (n - 1);
      g.cov(b, a) = g.cov(a, b);
    }
  return g;
}

Eigen symmetric_eigen(const Matrix& input, double tol, int max_sweeps) {
  require_symmetric(input, "symmetric_eigen");
  const int n = input.rows();
  Matrix a = input;
  Matrix v = Matrix::identity(n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) < tol) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  Eigen e;
  e.values.resize(n);
  for (int i = 0; i < n; ++i) e.values[i] = a(i, i);
  e.vectors = v;
  return e;
}

Matrix sqrt_psd(const Matrix& a) {
  const Eigen e = symmetric_eigen(a);
  const int n = a.rows();
  Matrix r(n, n);
  for (int k = 0; k < n; ++k) {
    const double s = std::sqrt(std::max(e.values[k], 0.0));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) r(i, j) += s * e.vectors(i, k) * e.vectors(j, k);
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) r(i, j) = r(j, i) = 0.5 * (r(i, j) + r(j, i));
  return r;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  const int d = static_cast<int>(a.mean.size());
  if (static_cast<int>(b.mean.size()) != d || a.cov.rows() != d || b.cov.rows() != d) {
    throw ShapeError("frechet_distance: dimension mismatch");
  }
  require_symmetric(a.cov, "frechet_distance");
  require_symmetric(b.cov, "frechet_distance");
  double mu = 0.0;
  for (int i = 0; i < d; ++i) mu += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Matrix ra = sqrt_psd(a.cov);
  Matrix m = matmul(matmul(ra, b.cov), ra);
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) m(i, j) = m(j, i) = 0.5 * (m(i, j) + m(j, i));
  const Eigen e = symmetric_eigen(m);
  double tr_root = 0.0;
  for (double v : e.values) tr_root += std::sqrt(std::max(v, 0.0));
  double dist = mu + trace(a.cov) + trace(b.cov) - 2.0 * tr_root;
  if (dist < -1e-8) throw NumericError("frechet_distance: negative result " + std::to_string(dist));
  return std::max(dist, 0.0);
}

double rffd(const Tensor4& images_a, const Tensor4& images_b,
            const FeatureExtractor& extractor) {
  if (images_a.n() < 32 || images_b.n() < 32) {
    throw ContractError("rffd: each set needs at least 32 images, got " +
                        std::to_string(images_a.n()) + " and " + std::to_string(images_b.n()));
  }
  return frechet_distance(fit_gaussian(extractor.extract(images_a)),
                          fit_gaussian(extractor.extract(images_b)));
}

double rffd(const Tensor4& images_a, const Tensor4& images_b) {
  return rffd(images_a, images_b, FeatureExtractor(images_a.h()));
}

OffsetStats offset_stats(const std::vector<Tensor4>& fields) {
  if (fields.empty()) throw ContractError("offset_stats: no fields");
  const int taps = fields.front().c() / 2;
  OffsetStats s;
  s.per_tap_mean_abs.assign(taps, 0.0);
  std::vector<std::size_t> per_tap_count(taps, 0);
  double total = 0.0;
  for (const Tensor4& f : fields) {
    if (f.c() != 2 * taps) throw ShapeError("offset_stats: tap count differs between fields");
    const std::size_t plane = f.shape().plane();
    for (int b = 0; b < f.n(); ++b) {
      for (int c = 0; c < f.c(); ++c) {
        const double* p = f.plane(b, c);
        double part = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const double a = std::abs(p[i]);
          part += a;
          s.max_abs = std::max(s.max_abs, a);
        }
        total += part;
        s.per_tap_mean_abs[c / 2] += part;
        per_tap_count[c / 2] += plane;
      }
    }
    s.count += f.size();
  }
  s.mean_abs = total / static_cast<double>(s.count);
  for (int t = 0; t < taps; ++t) s.per_tap_mean_abs[t] /= static_cast<double>(per_tap_count[t]);
  return s;
}

double mean_pairwise_l2(const Tensor4& images) {
  const int n = images.n();
  if (n < 2) throw ContractError("mean_pairwise_l2: need at least 2 samples");
  const std::size_t per = images.size() / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double* a = images.ptr() + i * per;
      const double* b = images.ptr() + j * per;
      double sq = 0.0;
      for (std::size_t k = 0; k < per; ++k) sq += (a[k] - b[k]) * (a[k] - b[k]);
      total += std::sqrt(sq);
    }
  return total / (0.5 * n * (n - 1));
}

}  // namespace mtm
