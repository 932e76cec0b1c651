#include "mtm/deform.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mtm/detail/gemm.hpp"

namespace mtm {
namespace {

// Bilinear cell of a sampling position. A position on the lattice belongs to
// the cell that starts there (left-closed convention).
struct Cell {
  int y0 = 0;
  int x0 = 0;
  double fy = 0.0;
  double fx = 0.0;
  bool outside = true;  // every neighbor is out of range
};

Cell make_cell(double qy, double qx, int h, int w) {
  Cell c;
  if (!(qy > -1.0 && qy < h && qx > -1.0 && qx < w)) return c;
  const double fy0 = std::floor(qy);
  const double fx0 = std::floor(qx);
  c.y0 = static_cast<int>(fy0);
  c.x0 = static_cast<int>(fx0);
  c.fy = qy - fy0;
  c.fx = qx - fx0;
  c.outside = false;
  return c;
}

inline double pixel(const double* plane, int h, int w, int y, int x) {
  return (y >= 0 && y < h && x >= 0 && x < w) ? plane[static_cast<std::size_t>(y) * w + x]
                                              : 0.0;
}

inline double interpolate(const double* plane, int h, int w, const Cell& c) {
  if (c.outside) return 0.0;
  const double wy0 = 1.0 - c.fy;
  const double wx0 = 1.0 - c.fx;
  double acc = 0.0;
  acc += (wy0 * wx0) * pixel(plane, h, w, c.y0, c.x0);
  acc += (wy0 * c.fx) * pixel(plane, h, w, c.y0, c.x0 + 1);
  acc += (c.fy * wx0) * pixel(plane, h, w, c.y0 + 1, c.x0);
  acc += (c.fy * c.fx) * pixel(plane, h, w, c.y0 + 1, c.x0 + 1);
  return acc;
}

// d value / d (qy, qx) inside the cell.
inline std::pair<double, double> interpolate_grad(const double* plane, int h, int w,
                                                  const Cell& c) {
  if (c.outside) return {0.0, 0.0};
  const double v00 = pixel(plane, h, w, c.y0, c.x0);
  const double v01 = pixel(plane, h, w, c.y0, c.x0 + 1);
  const double v10 = pixel(plane, h, w, c.y0 + 1, c.x0);
  const double v11 = pixel(plane, h, w, c.y0 + 1, c.x0 + 1);
  const double dy = (1.0 - c.fx) * (v10 - v00) + c.fx * (v11 - v01);
  const double dx = (1.0 - c.fy) * (v01 - v00) + c.fy * (v11 - v10);
  return {dy, dx};
}

inline void scatter(double* plane, int h, int w, const Cell& c, double g) {
  if (c.outside) return;
  const double wy0 = 1.0 - c.fy;
  const double wx0 = 1.0 - c.fx;
  const auto put = [&](int y, int x, double v) {
    if (y >= 0 && y < h && x >= 0 && x < w) plane[static_cast<std::size_t>(y) * w + x] += v;
  };
  put(c.y0, c.x0, g * (wy0 * wx0));
  put(c.y0, c.x0 + 1, g * (wy0 * c.fx));
  put(c.y0 + 1, c.x0, g * (c.fy * wx0));
  put(c.y0 + 1, c.x0 + 1, g * (c.fy * c.fx));
}

// Cells for every (tap, pixel) of output rows [r0, r1) of sample b.
void build_cells(const Tensor4& offsets, int b, int k, int h, int w, int r0, int r1,
                 std::vector<Cell>& cells) {
  const int taps = k * k;
  const int r = (k - 1) / 2;
  const int np = (r1 - r0) * w;
  cells.resize(static_cast<std::size_t>(taps) * np);
  for (int t = 0; t < taps; ++t) {
    const int ty = t / k - r;
    const int tx = t % k - r;
    const double* oy = offsets.plane(b, 2 * t);
    const double* ox = offsets.plane(b, 2 * t + 1);
    for (int y = r0; y < r1; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        cells[static_cast<std::size_t>(t) * np + (y - r0) * w + x] =
            make_cell(y + ty + oy[p], x + tx + ox[p], h, w);
      }
  }
}

void deform_im2col(const Tensor4& x, int b, int taps, int np,
                   const std::vector<Cell>& cells, double* col) {
  const int h = x.h();
  const int w = x.w();
  std::size_t row = 0;
  for (int ch = 0; ch < x.c(); ++ch) {
    const double* plane = x.plane(b, ch);
    for (int t = 0; t < taps; ++t, ++row) {
      const Cell* tc = cells.data() + static_cast<std::size_t>(t) * np;
      double* dst = col + row * np;
      for (int p = 0; p < np; ++p) dst[p] = interpolate(plane, h, w, tc[p]);
    }
  }
}

struct DeformDims {
  int c_in, c_out, k, groups;
};

DeformDims check_deform(const Tensor4& x, const Tensor4& w, const Tensor4& offsets,
                        bool per_sample) {
  const ConvSpec spec = ConvSpec::of(w);
  if (x.c() != w.c()) {
    throw ShapeError("deform_conv2d: input has " + std::to_string(x.c()) +
                     " channels, kernel expects " + std::to_string(w.c()));
  }
  const int groups = per_sample ? x.n() : 1;
  if (w.n() % groups != 0) {
    throw ShapeError("deform_conv2d: kernel " + w.shape().str() +
                     " is not divisible into per-sample blocks");
  }
  validate_offsets(offsets, spec.k, x.n(), x.h(), x.w());
  return DeformDims{x.c(), w.n() / groups, spec.k, groups};
}

void transpose(const double* src, int rows, int cols, double* dst) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
}

}  // namespace

double bilinear_sample(const Tensor4& x, int b, int c, double qy, double qx) {
  if (b < 0 || b >= x.n() || c < 0 || c >= x.c()) {
    throw ShapeError("bilinear_sample: index out of range for " + x.shape().str());
  }
  return interpolate(x.plane(b, c), x.h(), x.w(), make_cell(qy, qx, x.h(), x.w()));
}

Tensor4 sample_bilinear(const Tensor4& x, const Tensor4& grid) {
  if (grid.n() != x.n() || grid.c() != 2) {
    throw ShapeError("sample_bilinear: grid " + grid.shape().str() + " for input " +
                     x.shape().str());
  }
  Tensor4 out(Shape4{x.n(), x.c(), grid.h(), grid.w()});
  const std::size_t np = grid.shape().plane();
  std::vector<Cell> cells(np);
  for (int b = 0; b < x.n(); ++b) {
    const double* gy = grid.plane(b, 0);
    const double* gx = grid.plane(b, 1);
    for (std::size_t p = 0; p < np; ++p) cells[p] = make_cell(gy[p], gx[p], x.h(), x.w());
    for (int c = 0; c < x.c(); ++c) {
      const double* plane = x.plane(b, c);
      double* dst = out.plane(b, c);
      for (std::size_t p = 0; p < np; ++p) dst[p] = interpolate(plane, x.h(), x.w(), cells[p]);
    }
  }
  return out;
}

BilinearGrads sample_bilinear_backward(const Tensor4& x, const Tensor4& grid,
                                       const Tensor4& grad_out) {
  BilinearGrads g{Tensor4(x.shape()), Tensor4(grid.shape())};
  const std::size_t np = grid.shape().plane();
  std::vector<Cell> cells(np);
  for (int b = 0; b < x.n(); ++b) {
    const double* gy = grid.plane(b, 0);
    const double* gx = grid.plane(b, 1);
    for (std::size_t p = 0; p < np; ++p) cells[p] = make_cell(gy[p], gx[p], x.h(), x.w());
    double* ggy = g.grad_grid.plane(b, 0);
    double* ggx = g.grad_grid.plane(b, 1);
    for (int c = 0; c < x.c(); ++c) {
      const double* plane = x.plane(b, c);
      const double* up = grad_out.plane(b, c);
      double* gx_plane = g.grad_x.plane(b, c);
      for (std::size_t p = 0; p < np; ++p) {
        scatter(gx_plane, x.h(), x.w(), cells[p], up[p]);
        const auto [dy, dx] = interpolate_grad(plane, x.h(), x.w(), cells[p]);
        ggy[p] += up[p] * dy;
        ggx[p] += up[p] * dx;
      }
    }
  }
  return g;
}

void validate_offsets(const Tensor4& offsets, int k, int n, int h, int w) {
  const Shape4 want{n, 2 * k * k, h, w};
  if (offsets.shape() != want) {
    throw ShapeError("offset field " + offsets.shape().str() + ", expected " + want.str());
  }
}

Tensor4 deform_conv2d(const Tensor4& x, const Tensor4& w, const Tensor4& offsets,
                      bool per_sample) {
  const DeformDims d = check_deform(x, w, offsets, per_sample);
  const int h = x.h();
  const int wd = x.w();
  const int taps = d.k * d.k;
  const int kk = d.c_in * taps;
  const int hw = h * wd;
  Tensor4 y(Shape4{x.n(), d.c_out, h, wd});
  const int rows = detail::tile_rows(wd);
  std::vector<double> col(static_cast<std::size_t>(kk) * rows * wd);
  std::vector<Cell> cells;
  for (int b = 0; b < x.n(); ++b) {
    const double* wb = w.ptr() + (per_sample ? static_cast<std::size_t>(b) * d.c_out * kk : 0);
    for (int r0 = 0; r0 < h; r0 += rows) {
      const int r1 = std::min(h, r0 + rows);
      const int np = (r1 - r0) * wd;
      build_cells(offsets, b, d.k, h, wd, r0, r1, cells);
      deform_im2col(x, b, taps, np, cells, col.data());
      detail::gemm(d.c_out, np, kk, wb, kk, col.data(), np,
                   y.plane(b, 0) + static_cast<std::size_t>(r0) * wd, hw, false);
    }
  }
  return y;
}

DeformConvGrads deform_conv2d_backward(const Tensor4& x, const Tensor4& w,
                                       const Tensor4& offsets, const Tensor4& grad_out,
                                       bool per_sample) {
  const DeformDims d = check_deform(x, w, offsets, per_sample);
  if (grad_out.shape() != Shape4{x.n(), d.c_out, x.h(), x.w()}) {
    throw ShapeError("deform_conv2d_backward: gradient " + grad_out.shape().str());
  }
  const int h = x.h();
  const int wd = x.w();
  const int taps = d.k * d.k;
  const int kk = d.c_in * taps;
  const int hw = h * wd;
  DeformConvGrads g{Tensor4(x.shape()), Tensor4(w.shape()), Tensor4(offsets.shape())};
  const int rows = detail::tile_rows(wd);
  const std::size_t tile = static_cast<std::size_t>(kk) * rows * wd;
  std::vector<double> col(tile), colt(tile), gcol(tile);
  std::vector<double> wt(static_cast<std::size_t>(kk) * d.c_out);
  std::vector<Cell> cells;
  for (int b = 0; b < x.n(); ++b) {
    const std::size_t wofs = per_sample ? static_cast<std::size_t>(b) * d.c_out * kk : 0;
    transpose(w.ptr() + wofs, d.c_out, kk, wt.data());
    double* gwb = g.grad_w.ptr() + wofs;
    for (int r0 = 0; r0 < h; r0 += rows) {
      const int r1 = std::min(h, r0 + rows);
      const int np = (r1 - r0) * wd;
      const double* gout = grad_out.plane(b, 0) + static_cast<std::size_t>(r0) * wd;
      build_cells(offsets, b, d.k, h, wd, r0, r1, cells);

      deform_im2col(x, b, taps, np, cells, col.data());
      transpose(col.data(), kk, np, colt.data());
      detail::gemm(d.c_out, kk, np, gout, hw, colt.data(), kk, gwb, kk, true);

      detail::gemm(kk, np, d.c_out, wt.data(), d.c_out, gout, hw, gcol.data(), np, false);
      for (int ch = 0; ch < d.c_in; ++ch) {
        const double* plane = x.plane(b, ch);
        double* gplane = g.grad_x.plane(b, ch);
        for (int t = 0; t < taps; ++t) {
          const Cell* tc = cells.data() + static_cast<std::size_t>(t) * np;
          const double* gc = gcol.data() + (static_cast<std::size_t>(ch) * taps + t) * np;
          double* goy = g.grad_offsets.plane(b, 2 * t) + static_cast<std::size_t>(r0) * wd;
          double* gox = g.grad_offsets.plane(b, 2 * t + 1) + static_cast<std::size_t>(r0) * wd;
          for (int p = 0; p < np; ++p) {
            scatter(gplane, h, wd, tc[p], gc[p]);
            const auto [dy, dx] = interpolate_grad(plane, h, wd, tc[p]);
            goy[p] += gc[p] * dy;
            gox[p] += gc[p] * dx;
          }
        }
      }
    }
  }
  return g;
}

double lattice_margin(const Tensor4& values) {
  double m = std::numeric_limits<double>::infinity();
  for (double v : values.data()) m = std::min(m, std::abs(v - std::round(v)));
  return m;
}

MtmLayer MtmLayer::create(int c_in, int c_out, int k, int style_dim, int offset_style_dim,
                          Rng& rng) {
  ConvSpec{k}.validate();
  MtmLayer l;
  l.weight = randn(Shape4{c_out, c_in, k, k}, rng);
  l.bias = Tensor4(Shape4{1, c_out, 1, 1});
  l.affine_weight = randn(Shape4{c_in, style_dim, 1, 1}, rng);
  l.affine_bias = Tensor4(Shape4{1, c_in, 1, 1}, 1.0);
  l.offset_weight = Tensor4(Shape4{2 * k * k, c_in, k, k});
  l.offset_bias = Tensor4(Shape4{1, 2 * k * k, 1, 1});
  l.offset_affine_weight = randn(Shape4{c_in, offset_style_dim, 1, 1}, rng);
  l.offset_affine_bias = Tensor4(Shape4{1, c_in, 1, 1}, 1.0);
  return l;
}

MtmParamCount mtm_param_count(int c_in, int c_out, int k, int style_dim,
                              int offset_style_dim) {
  const std::size_t taps = static_cast<std::size_t>(k) * k;
  MtmParamCount c;
  c.main_params = static_cast<std::size_t>(c_out) * c_in * taps + c_out +
                  static_cast<std::size_t>(style_dim) * c_in + c_in;
  c.offset_params = static_cast<std::size_t>(c_in) * 2 * taps * taps + 2 * taps +
                    static_cast<std::size_t>(offset_style_dim) * c_in + c_in;
  return c;
}

MtmParamCount mtm_param_count(const MtmLayer& layer) {
  MtmParamCount c;
  c.main_params = layer.weight.size() + layer.bias.size() + layer.affine_weight.size() +
                  layer.affine_bias.size();
  c.offset_params = layer.offset_weight.size() + layer.offset_bias.size() +
                    layer.offset_affine_weight.size() + layer.offset_affine_bias.size();
  return c;
}

Tensor4 predict_offsets(const Tensor4& x, const Tensor4& offset_style,
                        const Tensor4& head_w, const Tensor4& head_b) {
  const int k = ConvSpec::of(head_w).k;
  if (head_w.n() != 2 * k * k) {
    throw ShapeError("offset head must have " + std::to_string(2 * k * k) +
                     " output channels, got " + std::to_string(head_w.n()));
  }
  return modulated_conv2d(x, head_w, offset_style, &head_b);
}

std::pair<Tensor4, Tensor4> mtm_forward(const MtmLayer& layer, const Tensor4& x,
                                        const Tensor4& main_style,
                                        const Tensor4& offset_style) {
  Tensor4 offsets = layer.offsets_enabled
                        ? predict_offsets(x, offset_style, layer.offset_weight,
                                          layer.offset_bias)
                        : Tensor4(Shape4{x.n(), 2 * layer.k() * layer.k(), x.h(), x.w()});
  if (main_style.n() != x.n()) {
    throw ShapeError("mtm_forward: main style batch does not match input");
  }
  Tensor4 y = deform_conv2d(x, modulate_demodulate(layer.weight, main_style), offsets, true);
  return {add_bias(y, layer.bias), std::move(offsets)};
}

namespace ad {

Var sample_bilinear(const Var& x, const Var& grid) {
  Tape& t = x.tape();
  t.note_kink_distance(lattice_margin(grid.value()));
  return t.record("sample_bilinear", {x, grid},
                  mtm::sample_bilinear(x.value(), grid.value()),
                  [x, grid](const Var&, const Var& g, const std::vector<bool>& needs) {
                    BilinearGrads r =
                        sample_bilinear_backward(x.value(), grid.value(), g.value());
                    const std::vector<Var> deps{x, grid, g};
                    return std::vector<Var>{
                        needs[0] ? first_order_result("sample_bilinear", deps,
                                                      std::move(r.grad_x))
                                 : Var(),
                        needs[1] ? first_order_result("sample_bilinear", deps,
                                                      std::move(r.grad_grid))
                                 : Var()};
                  });
}

Var deform_conv2d(const Var& x, const Var& w, const Var& offsets, bool per_sample) {
  Tape& t = x.tape();
  t.note_kink_distance(lattice_margin(offsets.value()));
  return t.record(
      "deform_conv2d", {x, w, offsets},
      mtm::deform_conv2d(x.value(), w.value(), offsets.value(), per_sample),
      [x, w, offsets, per_sample](const Var&, const Var& g, const std::vector<bool>& needs) {
        DeformConvGrads r = deform_conv2d_backward(x.value(), w.value(), offsets.value(),
                                                   g.value(), per_sample);
        const std::vector<Var> deps{x, w, offsets, g};
        return std::vector<Var>{
            needs[0] ? first_order_result("deform_conv2d", deps, std::move(r.grad_x)) : Var(),
            needs[1] ? first_order_result("deform_conv2d", deps, std::move(r.grad_w)) : Var(),
            needs[2] ? first_order_result("deform_conv2d", deps, std::move(r.grad_offsets))
                     : Var()};
      });
}

Var predict_offsets(const Var& x, const Var& offset_style, const Var& head_w,
                    const Var& head_b) {
  const int k = ConvSpec::of(head_w.value()).k;
  if (head_w.shape().n != 2 * k * k) {
    throw ShapeError("offset head must have " + std::to_string(2 * k * k) +
                     " output channels, got " + std::to_string(head_w.shape().n));
  }
  return modulated_conv2d(x, head_w, offset_style, head_b);
}

MtmResult mtm_forward(const MtmParams& layer, const Var& x, const Var& main_style,
                      const Var& offset_style) {
  const int k = ConvSpec::of(layer.weight.value()).k;
  const Shape4 s = x.shape();
  Var offsets = layer.offsets_enabled
                    ? predict_offsets(x, offset_style, layer.offset_weight, layer.offset_bias)
                    : x.tape().constant(Tensor4(Shape4{s.n, 2 * k * k, s.h, s.w}));
  if (main_style.shape().n != s.n) {
    throw ShapeError("mtm_forward: main style batch does not match input");
  }
  Var y = deform_conv2d(x, modulate_demodulate(layer.weight, main_style), offsets, true);
  if (layer.bias.valid()) y = bias_add(y, layer.bias);
  return MtmResult{y, offsets};
}

}  // namespace ad
}  // namespace mtm
