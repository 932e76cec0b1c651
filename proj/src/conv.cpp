#include "mtm/conv.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mtm/detail/gemm.hpp"

namespace mtm {

void ConvSpec::validate() const {
  if (k < 1 || k % 2 == 0) {
    throw ShapeError("kernel size must be odd and positive, got " + std::to_string(k));
  }
}

ConvSpec ConvSpec::of(const Tensor4& weights) {
  if (weights.h() != weights.w()) {
    throw ShapeError("kernel must be square, got " + weights.shape().str());
  }
  ConvSpec spec{weights.h()};
  spec.validate();
  return spec;
}

namespace detail {

int tile_rows(int width) { return std::max(1, 256 / std::max(1, width)); }

void im2col(const Tensor4& x, int b, int k, int r0, int r1, double* col) {
  const int h = x.h();
  const int w = x.w();
  const int r = (k - 1) / 2;
  const std::size_t cols = static_cast<std::size_t>(r1 - r0) * w;
  std::size_t row = 0;
  for (int ch = 0; ch < x.c(); ++ch) {
    const double* src = x.plane(b, ch);
    for (int ky = 0; ky < k; ++ky) {
      const int dy = ky - r;
      for (int kx = 0; kx < k; ++kx, ++row) {
        const int dx = kx - r;
        double* dst = col + row * cols;
        const int lo = std::max(0, -dx);
        const int hi = std::min(w, w - dx);
        for (int y = r0; y < r1; ++y) {
          double* out = dst + static_cast<std::size_t>(y - r0) * w;
          const int yy = y + dy;
          if (yy < 0 || yy >= h || lo >= hi) {
            std::fill_n(out, w, 0.0);
            continue;
          }
          const double* in = src + static_cast<std::size_t>(yy) * w;
          std::fill_n(out, lo, 0.0);
          std::copy(in + lo + dx, in + hi + dx, out + lo);
          std::fill(out + hi, out + w, 0.0);
        }
      }
    }
  }
}

}  // namespace detail

namespace {

struct ConvDims {
  int c_in, c_out, k, groups;
};

ConvDims check_conv(const Tensor4& x, const Tensor4& w, bool per_sample,
                    const char* what) {
  const ConvSpec spec = ConvSpec::of(w);
  if (x.c() != w.c()) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(x.c()) +
                     " channels, kernel expects " + std::to_string(w.c()));
  }
  const int groups = per_sample ? x.n() : 1;
  if (w.n() % groups != 0) {
    throw ShapeError(std::string(what) + ": kernel " + w.shape().str() +
                     " is not divisible into " + std::to_string(groups) +
                     " per-sample blocks");
  }
  return ConvDims{x.c(), w.n() / groups, spec.k, groups};
}

void transpose(const double* src, int rows, int cols, double* dst) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
}

}  // namespace

Tensor4 conv2d(const Tensor4& x, const Tensor4& w, bool per_sample) {
  const ConvDims d = check_conv(x, w, per_sample, "conv2d");
  const int h = x.h();
  const int wd = x.w();
  const int kk = d.c_in * d.k * d.k;
  const int hw = h * wd;
  Tensor4 y(Shape4{x.n(), d.c_out, h, wd});
  const int rows = detail::tile_rows(wd);
  std::vector<double> col(static_cast<std::size_t>(kk) * rows * wd);
  for (int b = 0; b < x.n(); ++b) {
    const double* wb = w.ptr() + (per_sample ? static_cast<std::size_t>(b) * d.c_out * kk : 0);
    for (int r0 = 0; r0 < h; r0 += rows) {
      const int r1 = std::min(h, r0 + rows);
      const int np = (r1 - r0) * wd;
      detail::im2col(x, b, d.k, r0, r1, col.data());
      detail::gemm(d.c_out, np, kk, wb, kk, col.data(), np,
                   y.plane(b, 0) + static_cast<std::size_t>(r0) * wd, hw, false);
    }
  }
  return y;
}

Tensor4 conv2d_weight_grad(const Tensor4& x, const Tensor4& grad_out, int k,
                           bool per_sample) {
  ConvSpec{k}.validate();
  if (grad_out.n() != x.n() || grad_out.h() != x.h() || grad_out.w() != x.w()) {
    throw ShapeError("conv2d_weight_grad: input " + x.shape().str() +
                     " vs output gradient " + grad_out.shape().str());
  }
  const int c_in = x.c();
  const int c_out = grad_out.c();
  const int groups = per_sample ? x.n() : 1;
  const int h = x.h();
  const int wd = x.w();
  const int kk = c_in * k * k;
  const int hw = h * wd;
  Tensor4 gw(Shape4{groups * c_out, c_in, k, k});
  const int rows = detail::tile_rows(wd);
  std::vector<double> col(static_cast<std::size_t>(kk) * rows * wd);
  std::vector<double> colt(col.size());
  for (int b = 0; b < x.n(); ++b) {
    double* gb = gw.ptr() + (per_sample ? static_cast<std::size_t>(b) * c_out * kk : 0);
    for (int r0 = 0; r0 < h; r0 += rows) {
      const int r1 = std::min(h, r0 + rows);
      const int np = (r1 - r0) * wd;
      detail::im2col(x, b, k, r0, r1, col.data());
      transpose(col.data(), kk, np, colt.data());
      detail::gemm(c_out, kk, np, grad_out.plane(b, 0) + static_cast<std::size_t>(r0) * wd,
                   hw, colt.data(), kk, gb, kk, true);
    }
  }
  return gw;
}

Tensor4 flip_transpose(const Tensor4& w, int groups) {
  const ConvSpec spec = ConvSpec::of(w);
  if (groups < 1 || w.n() % groups != 0) {
    throw ShapeError("flip_transpose: " + w.shape().str() + " into " +
                     std::to_string(groups) + " groups");
  }
  const int c_out = w.n() / groups;
  const int c_in = w.c();
  const int k = spec.k;
  Tensor4 out(Shape4{groups * c_in, c_out, k, k});
  for (int g = 0; g < groups; ++g)
    for (int o = 0; o < c_out; ++o)
      for (int i = 0; i < c_in; ++i)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            out.at(g * c_in + i, o, k - 1 - ky, k - 1 - kx) = w.at(g * c_out + o, i, ky, kx);
  return out;
}

Tensor4 modulate_demodulate(const Tensor4& w, const Tensor4& styles, double eps) {
  ConvSpec::of(w);
  const int c_out = w.n();
  const int c_in = w.c();
  if (styles.c() != c_in || styles.h() != 1 || styles.w() != 1) {
    throw ShapeError("modulate_demodulate: styles " + styles.shape().str() +
                     " for kernel " + w.shape().str());
  }
  const int n = styles.n();
  const std::size_t taps = w.shape().plane();
  const std::size_t per_out = static_cast<std::size_t>(c_in) * taps;
  Tensor4 out(Shape4{n * c_out, c_in, w.h(), w.w()});
  for (int b = 0; b < n; ++b) {
    for (int o = 0; o < c_out; ++o) {
      const double* src = w.ptr() + static_cast<std::size_t>(o) * per_out;
      double* dst = out.ptr() + (static_cast<std::size_t>(b) * c_out + o) * per_out;
      double sq = 0.0;
      for (int i = 0; i < c_in; ++i) {
        const double s = styles[static_cast<std::size_t>(b) * c_in + i];
        for (std::size_t t = 0; t < taps; ++t) {
          const double v = src[i * taps + t] * s;
          dst[i * taps + t] = v;
          sq += v * v;
        }
      }
      const double sigma = std::sqrt(sq + eps);
      for (std::size_t j = 0; j < per_out; ++j) dst[j] /= sigma;
    }
  }
  return out;
}

ModDemodGrads modulate_demodulate_backward(const Tensor4& w, const Tensor4& styles,
                                           const Tensor4& grad_out, double eps) {
  const int c_out = w.n();
  const int c_in = w.c();
  const int n = styles.n();
  if (grad_out.shape() != Shape4{n * c_out, c_in, w.h(), w.w()}) {
    throw ShapeError("modulate_demodulate_backward: gradient " + grad_out.shape().str());
  }
  const std::size_t taps = w.shape().plane();
  const std::size_t per_out = static_cast<std::size_t>(c_in) * taps;
  ModDemodGrads g{Tensor4(w.shape()), Tensor4(styles.shape())};
  std::vector<double> wmod(per_out);
  std::vector<double> gmod(per_out);
  for (int b = 0; b < n; ++b) {
    const double* sb = styles.ptr() + static_cast<std::size_t>(b) * c_in;
    for (int o = 0; o < c_out; ++o) {
      const double* src = w.ptr() + static_cast<std::size_t>(o) * per_out;
      const double* up = grad_out.ptr() + (static_cast<std::size_t>(b) * c_out + o) * per_out;
      double sq = 0.0;
      for (int i = 0; i < c_in; ++i)
        for (std::size_t t = 0; t < taps; ++t) {
          const double v = src[i * taps + t] * sb[i];
          wmod[i * taps + t] = v;
          sq += v * v;
        }
      const double sigma = std::sqrt(sq + eps);
      // out = wmod / sigma; d out / d wmod applied to up:
      // (up - out * <up, out>) / sigma
      double dot = 0.0;
      for (std::size_t j = 0; j < per_out; ++j) dot += up[j] * (wmod[j] / sigma);
      for (std::size_t j = 0; j < per_out; ++j)
        gmod[j] = (up[j] - (wmod[j] / sigma) * dot) / sigma;
      double* gw = g.grad_w.ptr() + static_cast<std::size_t>(o) * per_out;
      double* gs = g.grad_styles.ptr() + static_cast<std::size_t>(b) * c_in;
      for (int i = 0; i < c_in; ++i) {
        double acc = 0.0;
        for (std::size_t t = 0; t < taps; ++t) {
          acc += gmod[i * taps + t] * src[i * taps + t];
          gw[i * taps + t] += gmod[i * taps + t] * sb[i];
        }
        gs[i] += acc;
      }
    }
  }
  return g;
}

Tensor4 add_bias(const Tensor4& x, const Tensor4& bias) {
  if (bias.shape() != Shape4{1, x.c(), 1, 1}) {
    throw ShapeError("add_bias: bias " + bias.shape().str() + " for " + x.shape().str());
  }
  Tensor4 y = x;
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c) {
      double* p = y.plane(b, c);
      for (std::size_t i = 0; i < x.shape().plane(); ++i) p[i] += bias[c];
    }
  return y;
}

Tensor4 modulated_conv2d(const Tensor4& x, const Tensor4& w, const Tensor4& styles,
                         const Tensor4* bias, double eps) {
  if (styles.n() != x.n()) {
    throw ShapeError("modulated_conv2d: " + std::to_string(styles.n()) +
                     " styles for a batch of " + std::to_string(x.n()));
  }
  Tensor4 y = conv2d(x, modulate_demodulate(w, styles, eps), true);
  return bias ? add_bias(y, *bias) : y;
}

namespace ad {

Var conv2d(const Var& x, const Var& w, bool per_sample) {
  Tape& t = x.tape();
  Tensor4 y = mtm::conv2d(x.value(), w.value(), per_sample);
  const int groups = per_sample ? x.shape().n : 1;
  const int k = w.shape().h;
  return t.record("conv2d", {x, w}, std::move(y),
                  [x, w, groups, k, per_sample](const Var&, const Var& g,
                                                const std::vector<bool>& needs) {
                    return std::vector<Var>{
                        needs[0] ? conv2d(g, flip_transpose(w, groups), per_sample) : Var(),
                        needs[1] ? conv2d_weight_grad(x, g, k, per_sample) : Var()};
                  });
}

Var conv2d_weight_grad(const Var& x, const Var& grad_out, int k, bool per_sample) {
  Tape& t = x.tape();
  Tensor4 gw = mtm::conv2d_weight_grad(x.value(), grad_out.value(), k, per_sample);
  const int groups = per_sample ? x.shape().n : 1;
  return t.record("conv2d_weight_grad", {x, grad_out}, std::move(gw),
                  [x, grad_out, groups, per_sample](const Var&, const Var& g,
                                                    const std::vector<bool>& needs) {
                    return std::vector<Var>{
                        needs[0] ? conv2d(grad_out, flip_transpose(g, groups), per_sample)
                                 : Var(),
                        needs[1] ? conv2d(x, g, per_sample) : Var()};
                  });
}

Var flip_transpose(const Var& w, int groups) {
  return w.tape().record("flip_transpose", {w}, mtm::flip_transpose(w.value(), groups),
                         [groups](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{flip_transpose(g, groups)};
                         });
}

Var modulate_demodulate(const Var& w, const Var& styles, double eps) {
  Tape& t = w.tape();
  return t.record(
      "modulate_demodulate", {w, styles},
      mtm::modulate_demodulate(w.value(), styles.value(), eps),
      [w, styles, eps](const Var&, const Var& g, const std::vector<bool>& needs) {
        ModDemodGrads r =
            modulate_demodulate_backward(w.value(), styles.value(), g.value(), eps);
        const std::vector<Var> deps{w, styles, g};
        return std::vector<Var>{
            needs[0] ? first_order_result("modulate_demodulate", deps, std::move(r.grad_w))
                     : Var(),
            needs[1] ? first_order_result("modulate_demodulate", deps,
                                          std::move(r.grad_styles))
                     : Var()};
      });
}

Var modulated_conv2d(const Var& x, const Var& w, const Var& styles, const Var& bias,
                     double eps) {
  if (styles.shape().n != x.shape().n) {
    throw ShapeError("modulated_conv2d: " + std::to_string(styles.shape().n) +
                     " styles for a batch of " + std::to_string(x.shape().n));
  }
  Var y = conv2d(x, modulate_demodulate(w, styles, eps), true);
  return bias.valid() ? bias_add(y, bias) : y;
}

Var linear(const Var& x, const Var& w) {
  const Shape4 s = x.shape();
  if (s.h != 1 || s.w != 1 || w.shape().h != 1 || w.shape().w != 1) {
    throw ShapeError("linear: expects (n, in, 1, 1) input and (out, in, 1, 1) weights");
  }
  return conv2d(x, w, false);
}

}  // namespace ad
}  // namespace mtm
