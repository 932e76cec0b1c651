#pragma once

// Random-feature Frechet distance and offset-field statistics.

#include <cstdint>
#include <vector>

#include "mtm/tensor.hpp"

namespace mtm {

/// Fixed, untrained features: conv 3x3 1->8, leaky_relu, pool, conv 3x3 8->16,
/// leaky_relu, pool, global mean. Weights are N(0, 1 / fan_in) from Rng(seed).
class FeatureExtractor {
 public:
  static constexpr int kDim = 16;
  static constexpr std::uint64_t kDefaultSeed = 12345;

  explicit FeatureExtractor(int resolution, std::uint64_t seed = kDefaultSeed);

  int resolution() const { return resolution_; }
  /// (n, 1, R, R) images -> n x 16 feature matrix.
  Matrix extract(const Tensor4& images) const;
  /// Sum of the first-layer weights, for determinism checks.
  double first_layer_checksum() const;

 private:
  int resolution_;
  Tensor4 w1_;
  Tensor4 w2_;
};

struct GaussianStats {
  std::vector<double> mean;
  Matrix cov;
};

/// Mean and unbiased (n - 1) covariance of the rows, summed in row order.
GaussianStats fit_gaussian(const Matrix& features);

struct Eigen {
  std::vector<double> values;
  Matrix vectors;  ///< column j is the eigenvector of values[j]
};

/// Cyclic Jacobi rotations until the off-diagonal norm is below tol.
Eigen symmetric_eigen(const Matrix& a, double tol = 1e-12, int max_sweeps = 100);

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are
/// clamped to zero.
Matrix sqrt_psd(const Matrix& a);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the root taken
/// as Tr sqrt(S_a^(1/2) S_b S_a^(1/2)). Results in [-1e-8, 0) are clamped to 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

/// Frechet distance of the extractor's features; both sets need >= 32 images.
double rffd(const Tensor4& images_a, const Tensor4& images_b,
            const FeatureExtractor& extractor);
double rffd(const Tensor4& images_a, const Tensor4& images_b);

struct OffsetStats {
  double mean_abs = 0.0;
  double max_abs = 0.0;
  std::vector<double> per_tap_mean_abs;  ///< mean of |dy| and |dx| per tap
  std::size_t count = 0;                 ///< number of scalar offsets aggregated
};

/// Fields of shape (n, 2 taps, h, w); all fields must have the same tap count.
OffsetStats offset_stats(const std::vector<Tensor4>& fields);

/// Mean L2 distance over all unordered pairs of samples.
double mean_pairwise_l2(const Tensor4& images);

}  // namespace mtm
