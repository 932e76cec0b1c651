#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mtm/synth.hpp"

using namespace mtm;

namespace {

double mean_abs_diff(const Tensor4& a, int ia, const Tensor4& b, int ib) {
  const std::size_t n = static_cast<std::size_t>(a.h()) * a.w();
  const double* pa = a.plane(ia, 0);
  const double* pb = b.plane(ib, 0);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(pa[i] - pb[i]);
  return s / static_cast<double>(n);
}

int foreground(const Tensor4& img, int b) {
  int count = 0;
  const double* p = img.plane(b, 0);
  for (int i = 0; i < img.h() * img.w(); ++i) count += p[i] > 0.0;
  return count;
}

}  // namespace

TEST(Render, VerticalPoseIsMirrorSymmetric) {
  PoseParams p;
  p.cy = 0.6;
  p.cx = 0.5;
  p.theta0 = std::numbers::pi / 2;
  p.theta1 = 0.0;
  for (int R : {16, 32, 33}) {
    const Tensor4 img = render_pose(p, R);
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < R; ++j)
        EXPECT_NEAR(img.at(0, 0, i, j), img.at(0, 0, i, R - 1 - j), 1e-9);
    EXPECT_GT(foreground(img, 0), 0);
  }
}

TEST(Render, StrokeFollowsAngle) {
  PoseParams p;
  p.theta0 = std::numbers::pi / 2;  // straight up from the centre
  const Tensor4 img = render_pose(p, 32);
  EXPECT_EQ(img.at(0, 0, 10, 16), 1.0);  // above the root
  EXPECT_EQ(img.at(0, 0, 28, 16), -1.0); // below the root
  EXPECT_EQ(img.at(0, 0, 10, 2), -1.0);
}

TEST(Render, Pure) {
  Rng rng(3);
  const PoseParams p = sample_pose(rng);
  const Tensor4 a = render_pose(p, 16), b = render_pose(p, 16);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Render, ForegroundAreaBoundsOverValidPoses) {
  const Dataset d = sample_dataset(2000, 77, 16);
  for (int i = 0; i < 2000; ++i) {
    ASSERT_TRUE(d.poses[i].valid());
    const int fg = foreground(d.images, i);
    EXPECT_GT(fg, 0);
    EXPECT_LT(fg, 0.5 * 16 * 16);
  }
  // extreme corners of the parameter box
  for (double len : {0.25, 0.4})
    for (double rad : {0.03, 0.06})
      for (double cy : {0.3, 0.7})
        for (int a = 0; a < 16; ++a) {
          PoseParams p{cy, 0.3, a * std::numbers::pi / 8, 0.0, len, rad};
          for (int R : {16, 32}) {
            const int fg = foreground(render_pose(p, R), 0);
            EXPECT_GT(fg, 0);
            EXPECT_LT(fg, 0.5 * R * R);
          }
        }
}

TEST(Render, RangeAndBothClassesPresent) {
  const Dataset d = sample_dataset(300, 5, 16);
  for (int i = 0; i < 300; ++i) {
    double lo = 1e9, hi = -1e9;
    for (int k = 0; k < 256; ++k) {
      const double v = d.images.plane(i, 0)[k];
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    EXPECT_LT(lo, 0.0);
    EXPECT_GT(hi, 0.0);
  }
}

TEST(Dataset, SeededAndReproducible) {
  const Dataset a = sample_dataset(20, 9, 16), b = sample_dataset(20, 9, 16);
  EXPECT_TRUE(std::equal(a.images.data().begin(), a.images.data().end(),
                         b.images.data().begin()));
  // sample i depends only on seed + i
  const Dataset c = sample_dataset(10, 19, 16);
  for (std::size_t k = 0; k < c.images.size(); ++k)
    ASSERT_EQ(c.images[k], a.images[10 * 256 + k]);
}

TEST(Dataset, JointAngleMean) {
  const Dataset d = sample_dataset(1000, 1000, 8);
  double s = 0.0;
  for (const auto& p : d.poses) s += p.theta1;
  EXPECT_NEAR(s / 1000.0, 0.0, 0.1);
}

TEST(Dataset, DisjointSeedsGiveDistinctImages) {
  const Dataset a = sample_dataset(100, 0, 16), b = sample_dataset(100, 100, 16);
  for (int i = 0; i < 100; ++i)
    for (int j = 0; j < 100; ++j) EXPECT_GT(mean_abs_diff(a.images, i, b.images, j), 0.0);
}

TEST(Dataset, PoseDiversity) {
  const Dataset d = sample_dataset(100, 42, 16);
  std::vector<double> dist;
  for (int i = 0; i < 100; ++i)
    for (int j = i + 1; j < 100; ++j) {
      double s = 0.0;
      for (int k = 0; k < 256; ++k) {
        const double e = d.images.plane(i, 0)[k] - d.images.plane(j, 0)[k];
        s += e * e;
      }
      dist.push_back(std::sqrt(s));
    }
  double mean = 0.0, var = 0.0;
  for (double v : dist) mean += v;
  mean /= dist.size();
  for (double v : dist) var += (v - mean) * (v - mean);
  var /= dist.size();
  EXPECT_GT(std::sqrt(var) / mean, 0.1);
}

TEST(Video, FramesStayValid) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const Clip c = sample_video(s, 8, 16);
    ASSERT_EQ(c.poses.size(), 8u);
    for (const auto& p : c.poses) EXPECT_TRUE(p.valid());
    EXPECT_LE(std::abs(c.motion.omega0), 0.3);
    EXPECT_LE(std::abs(c.motion.omega1), 0.3);
  }
}

TEST(Video, StillMotionRepeatsFrame) {
  Rng rng(1);
  const PoseParams p = sample_pose(rng);
  const Clip c = render_clip(p, MotionParams{}, 5, 16);
  for (int t = 1; t < 5; ++t) EXPECT_EQ(mean_abs_diff(c.frames, 0, c.frames, t), 0.0);
}

TEST(Video, SingleFrameIsInitialPose) {
  const Clip c = sample_video(11, 1, 16);
  Rng rng(11);
  const Tensor4 img = render_pose(sample_pose(rng), 16);
  EXPECT_EQ(mean_abs_diff(c.frames, 0, img, 0), 0.0);
}

TEST(Video, ConsecutiveFramesCloserThanUnrelated) {
  double consecutive = 0.0, unrelated = 0.0;
  int nc = 0, nu = 0;
  std::vector<Clip> clips;
  for (std::uint64_t s = 0; s < 100; ++s) clips.push_back(sample_video(500 + s, 4, 16));
  for (int i = 0; i < 100; ++i) {
    for (int t = 0; t + 1 < 4; ++t, ++nc)
      consecutive += mean_abs_diff(clips[i].frames, t, clips[i].frames, t + 1);
    unrelated += mean_abs_diff(clips[i].frames, 0, clips[(i + 37) % 100].frames, 2);
    ++nu;
  }
  EXPECT_LT(consecutive / nc, unrelated / nu);
}

TEST(Video, BatchIsClipMajor) {
  const Tensor4 b = sample_video_batch(3, 20, 4, 16);
  ASSERT_EQ(b.n(), 12);
  const Clip c = sample_video(21, 4, 16);
  for (int t = 0; t < 4; ++t) EXPECT_EQ(mean_abs_diff(b, 4 + t, c.frames, t), 0.0);
}

TEST(Video, Contracts) {
  EXPECT_THROW(sample_video(0, 0, 16), ContractError);
  EXPECT_THROW(sample_dataset(0, 0, 16), ContractError);
}
