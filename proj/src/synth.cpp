#include "mtm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace mtm {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kRootLo = 0.3, kRootHi = 0.7;
constexpr double kJointMax = 2.4;
constexpr double kOmegaMax = 0.3;
constexpr double kDriftMax = 0.02;

double segment_distance(double py, double px, double ay, double ax, double by, double bx) {
  const double dy = by - ay, dx = bx - ax;
  const double len2 = dy * dy + dx * dx;
  double t = len2 > 0.0 ? ((py - ay) * dy + (px - ax) * dx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qy = ay + t * dy - py, qx = ax + t * dx - px;
  return std::sqrt(qy * qy + qx * qx);
}

double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Feasible interval for a per-frame velocity keeping x + v t in [lo, hi]
// for t in [0, steps].
std::pair<double, double> velocity_range(double x, double lo, double hi, int steps,
                                         double vmax) {
  if (steps <= 0) return {-vmax, vmax};
  return {std::max(-vmax, (lo - x) / steps), std::min(vmax, (hi - x) / steps)};
}

}  // namespace

bool PoseParams::valid() const {
  return cy >= kRootLo && cy <= kRootHi && cx >= kRootLo && cx <= kRootHi && theta0 >= 0.0 &&
         theta0 < kTwoPi && theta1 >= -kJointMax && theta1 <= kJointMax && length >= 0.25 &&
         length <= 0.4 && radius >= 0.03 && radius <= 0.06;
}

PoseParams sample_pose(Rng& rng) {
  PoseParams p;
  p.cy = rng.uniform(kRootLo, kRootHi);
  p.cx = rng.uniform(kRootLo, kRootHi);
  p.theta0 = rng.uniform(0.0, kTwoPi);
  p.theta1 = rng.uniform(-kJointMax, kJointMax);
  p.length = rng.uniform(0.25, 0.4);
  p.radius = rng.uniform(0.03, 0.06);
  return p;
}

PoseParams advance(const PoseParams& p, const MotionParams& m, int t) {
  PoseParams q = p;
  q.theta0 = std::fmod(p.theta0 + m.omega0 * t, kTwoPi);
  if (q.theta0 < 0.0) q.theta0 += kTwoPi;
  q.theta1 = std::clamp(p.theta1 + m.omega1 * t, -kJointMax, kJointMax);
  q.cy = std::clamp(p.cy + m.vy * t, kRootLo, kRootHi);
  q.cx = std::clamp(p.cx + m.vx * t, kRootLo, kRootHi);
  return q;
}

Tensor4 render_pose(const PoseParams& p, int resolution) {
  if (resolution < 1) throw ShapeError("render_pose: resolution must be positive");
  const double ey = p.cy - p.length * std::sin(p.theta0);
  const double ex = p.cx + p.length * std::cos(p.theta0);
  const double a1 = p.theta0 + p.theta1;
  const double ty = ey - p.length * std::sin(a1);
  const double tx = ex + p.length * std::cos(a1);
  const double r = static_cast<double>(resolution);
  Tensor4 img(Shape4{1, 1, resolution, resolution});
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      const double py = (i + 0.5) / r, px = (j + 0.5) / r;
      const double d = std::min(segment_distance(py, px, p.cy, p.cx, ey, ex),
                                segment_distance(py, px, ey, ex, ty, tx)) -
                       p.radius;
      const double coverage = 1.0 - smoothstep01(d * r);
      img.at(0, 0, i, j) = -1.0 + 2.0 * coverage;
    }
  }
  return img;
}

Dataset sample_dataset(int n, std::uint64_t seed, int resolution) {
  if (n < 1) throw ContractError("sample_dataset: n must be at least 1");
  Dataset d;
  d.images = Tensor4(Shape4{n, 1, resolution, resolution});
  d.poses.reserve(n);
  for (int i = 0; i < n; ++i) {
    Rng rng(seed + static_cast<std::uint64_t>(i));
    d.poses.push_back(sample_pose(rng));
    const Tensor4 img = render_pose(d.poses.back(), resolution);
    std::copy_n(img.ptr(), img.size(), d.images.plane(i, 0));
  }
  return d;
}

Clip render_clip(const PoseParams& start, const MotionParams& m, int frames, int resolution) {
  if (frames < 1) throw ContractError("render_clip: T must be at least 1");
  Clip c;
  c.motion = m;
  c.frames = Tensor4(Shape4{frames, 1, resolution, resolution});
  for (int t = 0; t < frames; ++t) {
    c.poses.push_back(advance(start, m, t));
    const Tensor4 img = render_pose(c.poses.back(), resolution);
    std::copy_n(img.ptr(), img.size(), c.frames.plane(t, 0));
  }
  return c;
}

Clip sample_video(std::uint64_t seed, int frames, int resolution) {
  if (frames < 1) throw ContractError("sample_video: T must be at least 1");
  Rng rng(seed);
  const PoseParams p = sample_pose(rng);
  const int steps = frames - 1;
  MotionParams m;
  m.omega0 = rng.uniform(-kOmegaMax, kOmegaMax);
  auto [w_lo, w_hi] = velocity_range(p.theta1, -kJointMax, kJointMax, steps, kOmegaMax);
  m.omega1 = rng.uniform(w_lo, w_hi);
  auto [y_lo, y_hi] = velocity_range(p.cy, kRootLo, kRootHi, steps, kDriftMax);
  m.vy = rng.uniform(y_lo, y_hi);
  auto [x_lo, x_hi] = velocity_range(p.cx, kRootLo, kRootHi, steps, kDriftMax);
  m.vx = rng.uniform(x_lo, x_hi);
  return render_clip(p, m, frames, resolution);
}

Tensor4 sample_video_batch(int n, std::uint64_t seed, int frames, int resolution) {
  if (n < 1) throw ContractError("sample_video_batch: n must be at least 1");
  Tensor4 out(Shape4{n * frames, 1, resolution, resolution});
  for (int i = 0; i < n; ++i) {
    const Clip c = sample_video(seed + static_cast<std::uint64_t>(i), frames, resolution);
    std::copy_n(c.frames.ptr(), c.frames.size(), out.plane(i * frames, 0));
  }
  return out;
}

}  // namespace mtm
