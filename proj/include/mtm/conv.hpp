#pragma once

// Regular and style-modulated 2D convolution.
//
// Weights are stored as (groups * c_out, c_in, k, k). With `per_sample` the
// group count equals the batch size and sample b uses its own kernel block;
// otherwise a single kernel block is shared by the whole batch.
//
// Stride and dilation are 1, padding is zero and (k - 1) / 2 wide, so the
// output has the input's spatial size. Every output value is an fma chain over
// (input channel, tap row, tap column) in ascending order; deform_conv2d uses
// the identical chain, which makes the two bit-comparable at zero offsets.

#include <utility>

#include "mtm/autodiff.hpp"
#include "mtm/tensor.hpp"

namespace mtm {

struct ConvSpec {
  int k = 3;

  int radius() const { return (k - 1) / 2; }
  int taps() const { return k * k; }
  /// Tap i (row-major over the kernel) as a (dy, dx) displacement.
  std::pair<int, int> tap(int i) const { return {i / k - radius(), i % k - radius()}; }
  void validate() const;

  /// Kernel size of a weight tensor, which must be square with odd size.
  static ConvSpec of(const Tensor4& weights);
};

Tensor4 conv2d(const Tensor4& x, const Tensor4& w, bool per_sample = false);

/// d(loss)/d(w) for conv2d given the output gradient. Summed over the batch
/// unless per_sample is set.
Tensor4 conv2d_weight_grad(const Tensor4& x, const Tensor4& grad_out, int k,
                           bool per_sample = false);

/// (g*c_out, c_in, k, k) -> (g*c_in, c_out, k, k) with both spatial axes
/// reversed; conv2d with the result is the adjoint of conv2d with w.
Tensor4 flip_transpose(const Tensor4& w, int groups);

/// Scale input channel i of w by styles[b, i] for every sample b, then divide
/// each output channel by sqrt(sum of its squares + eps).
/// w: (c_out, c_in, k, k), styles: (n, c_in, 1, 1) -> (n * c_out, c_in, k, k).
Tensor4 modulate_demodulate(const Tensor4& w, const Tensor4& styles,
                            double eps = 1e-8);

struct ModDemodGrads {
  Tensor4 grad_w;
  Tensor4 grad_styles;
};
ModDemodGrads modulate_demodulate_backward(const Tensor4& w, const Tensor4& styles,
                                           const Tensor4& grad_out, double eps);

/// Per-sample conv2d with modulated and demodulated kernels, bias added after.
/// `bias` may be null.
Tensor4 modulated_conv2d(const Tensor4& x, const Tensor4& w, const Tensor4& styles,
                         const Tensor4* bias, double eps = 1e-8);

/// Adds a (1, c, 1, 1) bias.
Tensor4 add_bias(const Tensor4& x, const Tensor4& bias);

namespace detail {
/// Output rows per GEMM tile for a plane of the given width.
int tile_rows(int width);
/// Zero-padded shifted copies of rows [r0, r1) of every channel of sample b.
/// Row (i * k * k + tap) of `col` holds channel i shifted by that tap.
void im2col(const Tensor4& x, int b, int k, int r0, int r1, double* col);
}  // namespace detail

namespace ad {

Var conv2d(const Var& x, const Var& w, bool per_sample = false);
Var conv2d_weight_grad(const Var& x, const Var& grad_out, int k, bool per_sample);
Var flip_transpose(const Var& w, int groups);
/// Taped modulation/demodulation. Its backward is first order only.
Var modulate_demodulate(const Var& w, const Var& styles, double eps = 1e-8);
/// `bias` may be an invalid Var for no bias.
Var modulated_conv2d(const Var& x, const Var& w, const Var& styles,
                     const Var& bias, double eps = 1e-8);
/// Fully connected layer on (n, in, 1, 1) inputs with (out, in, 1, 1) weights.
Var linear(const Var& x, const Var& w);

}  // namespace ad
}  // namespace mtm
