#pragma once

// Deformable convolution with latent-modulated offset prediction.
//
// An offset field has shape (n, 2 * k * k, h, w). For tap i, taken row-major
// over the kernel grid, channels 2i and 2i + 1 hold (dy, dx) in pixels at every
// output location. Sampling positions p + p_i + dp_i are read by bilinear
// interpolation with zero padding outside the image. No clamping is applied.

#include <cstddef>
#include <utility>

#include "mtm/autodiff.hpp"
#include "mtm/conv.hpp"
#include "mtm/rng.hpp"
#include "mtm/tensor.hpp"

namespace mtm {

/// Bilinear read of channel c of sample b at fractional (qy, qx). Neighbors
/// outside [0, h-1] x [0, w-1] contribute zero.
double bilinear_sample(const Tensor4& x, int b, int c, double qy, double qx);

/// Gather with a dense coordinate grid of shape (n, 2, H, W) holding absolute
/// (qy, qx) positions. Returns (n, c, H, W).
Tensor4 sample_bilinear(const Tensor4& x, const Tensor4& grid);

struct BilinearGrads {
  Tensor4 grad_x;
  Tensor4 grad_grid;
};
BilinearGrads sample_bilinear_backward(const Tensor4& x, const Tensor4& grid,
                                       const Tensor4& grad_out);

/// Throws ShapeError unless offsets is (n, 2 k^2, h, w).
void validate_offsets(const Tensor4& offsets, int k, int n, int h, int w);

/// y(p) = sum_i w_i x(p + p_i + dp_i), per output channel, with the same
/// weight layout and fma order as conv2d.
Tensor4 deform_conv2d(const Tensor4& x, const Tensor4& w, const Tensor4& offsets,
                      bool per_sample = false);

struct DeformConvGrads {
  Tensor4 grad_x;
  Tensor4 grad_w;
  Tensor4 grad_offsets;
};
DeformConvGrads deform_conv2d_backward(const Tensor4& x, const Tensor4& w,
                                       const Tensor4& offsets, const Tensor4& grad_out,
                                       bool per_sample);

/// Distance from the nearest integer, minimised over all values. Sampling
/// positions are integer grid points plus these values, so this is how far the
/// field sits from the kinks of bilinear interpolation.
double lattice_margin(const Tensor4& values);

/// Parameters of one modulated transformation module.
struct MtmLayer {
  Tensor4 weight;                ///< (c_out, c_in, k, k)
  Tensor4 bias;                  ///< (1, c_out, 1, 1)
  Tensor4 affine_weight;         ///< (c_in, style_dim, 1, 1)
  Tensor4 affine_bias;           ///< (1, c_in, 1, 1)
  Tensor4 offset_weight;         ///< (2 k^2, c_in, k, k), zero at init
  Tensor4 offset_bias;           ///< (1, 2 k^2, 1, 1), zero at init
  Tensor4 offset_affine_weight;  ///< (c_in, offset_style_dim, 1, 1)
  Tensor4 offset_affine_bias;    ///< (1, c_in, 1, 1)
  bool offsets_enabled = true;

  /// Main kernel ~ N(0, 1), affine weights ~ N(0, 1), affine biases 1, offset
  /// head zero.
  static MtmLayer create(int c_in, int c_out, int k, int style_dim,
                         int offset_style_dim, Rng& rng);

  int k() const { return weight.h(); }
  int c_in() const { return weight.c(); }
  int c_out() const { return weight.n(); }
};

struct MtmParamCount {
  std::size_t main_params = 0;
  std::size_t offset_params = 0;
};

/// main: c_out c_in k^2 + c_out + style_dim c_in + c_in
/// offset: c_in 2k^2 k^2 + 2k^2 + offset_style_dim c_in + c_in
MtmParamCount mtm_param_count(int c_in, int c_out, int k, int style_dim,
                              int offset_style_dim);
MtmParamCount mtm_param_count(const MtmLayer& layer);

/// Offsets from the modulated offset head: demodulated, bias added, no activation.
Tensor4 predict_offsets(const Tensor4& x, const Tensor4& offset_style,
                        const Tensor4& head_w, const Tensor4& head_b);

/// Returns (output, offsets). Styles are per-sample (n, c_in, 1, 1) vectors.
std::pair<Tensor4, Tensor4> mtm_forward(const MtmLayer& layer, const Tensor4& x,
                                        const Tensor4& main_style,
                                        const Tensor4& offset_style);

namespace ad {

Var sample_bilinear(const Var& x, const Var& grid);
Var deform_conv2d(const Var& x, const Var& w, const Var& offsets, bool per_sample = false);
Var predict_offsets(const Var& x, const Var& offset_style, const Var& head_w,
                    const Var& head_b);

struct MtmParams {
  Var weight;
  Var bias;
  Var offset_weight;
  Var offset_bias;
  bool offsets_enabled = true;
};

struct MtmResult {
  Var output;
  Var offsets;
};

MtmResult mtm_forward(const MtmParams& layer, const Var& x, const Var& main_style,
                      const Var& offset_style);

}  // namespace ad
}  // namespace mtm
