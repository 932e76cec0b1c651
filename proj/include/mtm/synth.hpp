#pragma once

// Articulated two-segment "stick limb" images and clips.
//
// Geometry is in fractions of the image side; y grows downwards and angles are
// measured counter-clockwise from +x, so theta0 = pi/2 points straight up.

#include <cstdint>
#include <vector>

#include "mtm/rng.hpp"
#include "mtm/tensor.hpp"

namespace mtm {

struct PoseParams {
  double cy = 0.5;
  double cx = 0.5;
  double theta0 = 0.0;  ///< [0, 2 pi)
  double theta1 = 0.0;  ///< [-2.4, 2.4]
  double length = 0.3;  ///< [0.25, 0.4]
  double radius = 0.04; ///< [0.03, 0.06]

  bool valid() const;
};

struct MotionParams {
  double omega0 = 0.0;  ///< rad / frame
  double omega1 = 0.0;
  double vy = 0.0;      ///< fraction / frame
  double vx = 0.0;
};

PoseParams sample_pose(Rng& rng);

/// Pose after t frames of motion. theta0 wraps into [0, 2 pi).
PoseParams advance(const PoseParams& p, const MotionParams& m, int t);

/// (1, 1, R, R) image in [-1, 1]: background -1, strokes +1, one pixel of
/// smoothstep antialiasing outside the stroke edge.
Tensor4 render_pose(const PoseParams& p, int resolution);

struct Dataset {
  Tensor4 images;                 ///< (n, 1, R, R)
  std::vector<PoseParams> poses;
};

/// Sample i is drawn from Rng(seed + i).
Dataset sample_dataset(int n, std::uint64_t seed, int resolution);

struct Clip {
  Tensor4 frames;                 ///< (T, 1, R, R)
  std::vector<PoseParams> poses;  ///< one per frame
  MotionParams motion;
};

/// Random initial pose and a motion that keeps every frame valid.
Clip sample_video(std::uint64_t seed, int frames, int resolution);
Clip render_clip(const PoseParams& start, const MotionParams& m, int frames, int resolution);

/// Clips for seeds seed + i, frames stacked clip-major: (n * T, 1, R, R).
Tensor4 sample_video_batch(int n, std::uint64_t seed, int frames, int resolution);

}  // namespace mtm
