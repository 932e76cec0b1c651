#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "mtm/io.hpp"
#include "mtm/rng.hpp"

using namespace mtm;

TEST(Ppm, ByteMapping) {
  EXPECT_EQ(to_byte(-1.0), 0);
  EXPECT_EQ(to_byte(1.0), 255);
  EXPECT_EQ(to_byte(0.0), 128);  // round(127.5)
  EXPECT_EQ(to_byte(-7.0), 0);
  EXPECT_EQ(to_byte(3.0), 255);
  EXPECT_EQ(to_byte(0.5), 191);  // round(0.75 * 255) = round(191.25)
}

TEST(Ppm, HandEncodedImage) {
  const Tensor4 t(Shape4{1, 1, 1, 2}, std::vector<double>{-1.0, 1.0});
  const std::string expected = std::string("P6\n2 1\n255\n") + std::string(3, '\0') +
                               std::string(3, static_cast<char>(255));
  EXPECT_EQ(encode_ppm(t), expected);
}

TEST(Ppm, RoundTripIsByteExact) {
  Rng rng(1);
  Tensor4 t = randn(Shape4{2, 1, 5, 7}, rng);
  const std::string path = ::testing::TempDir() + "/rt.ppm";
  write_ppm(path, t, 1);
  const Tensor4 back = read_ppm(path);
  ASSERT_EQ(back.shape(), (Shape4{1, 1, 5, 7}));
  EXPECT_EQ(encode_ppm(back), encode_ppm(t, 1));
  for (std::size_t i = 0; i < back.size(); ++i)
    EXPECT_NEAR(back[i], std::clamp(t.plane(1, 0)[i], -1.0, 1.0), 1.0 / 255 + 1e-12);
  EXPECT_THROW(encode_ppm(t, 2), ShapeError);
  EXPECT_THROW(read_ppm("/nonexistent.ppm"), IoError);
}

TEST(Grid, LayoutAndGutters) {
  Tensor4 t(Shape4{5, 1, 4, 4}, 0.5);
  for (int b = 0; b < 5; ++b) t.at(b, 0, 0, 0) = 0.1 * b;
  const Tensor4 g = make_grid(t, 2);
  ASSERT_EQ(g.shape(), (Shape4{1, 1, 3 * 4 + 2 * 2, 2 * 4 + 2}));
  EXPECT_EQ(g.at(0, 0, 0, 6), 0.1);       // sample 1
  EXPECT_EQ(g.at(0, 0, 12, 0), 0.1 * 4);  // sample 4
  EXPECT_EQ(g.at(0, 0, 4, 3), -1.0);      // horizontal gutter
  EXPECT_EQ(g.at(0, 0, 1, 5), -1.0);      // vertical gutter
  EXPECT_EQ(g.at(0, 0, 13, 7), -1.0);     // empty cell
}

TEST(Fmt, TenSignificantDigits) {
  EXPECT_EQ(fmt(0.5), "0.5");
  EXPECT_EQ(fmt(1.0 / 3.0), "0.3333333333");
  EXPECT_EQ(fmt(2.0611536e-9), "2.0611536e-09");
}
