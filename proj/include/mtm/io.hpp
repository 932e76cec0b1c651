#pragma once

// Binary PPM (P6) images and CSV helpers.

#include <string>
#include <vector>

#include "mtm/tensor.hpp"

namespace mtm {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// round(clamp((v + 1) / 2, 0, 1) * 255)
unsigned char to_byte(double v);

/// Sample b, channel 0 of `images`, grey replicated to RGB.
std::string encode_ppm(const Tensor4& images, int b = 0);
void write_ppm(const std::string& path, const Tensor4& images, int b = 0);
/// Reads a P6 file with maxval 255 into (1, 1, H, W), v = byte / 127.5 - 1,
/// taking the red channel.
Tensor4 read_ppm(const std::string& path);

/// Row-major tiling of the n samples (channel 0) with 2-pixel black gutters
/// between tiles. Returns (1, 1, H, W).
Tensor4 make_grid(const Tensor4& images, int cols);

/// "%.10g"
std::string fmt(double v);

void write_text(const std::string& path, const std::string& content);

}  // namespace mtm
