#include "mtm/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mtm {

unsigned char to_byte(double v) {
  const double u = std::clamp((v + 1.0) / 2.0, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(u * 255.0));
}

std::string encode_ppm(const Tensor4& images, int b) {
  if (b < 0 || b >= images.n()) throw ShapeError("encode_ppm: sample index out of range");
  const int h = images.h(), w = images.w();
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const double* p = images.plane(b, 0);
  out.reserve(out.size() + static_cast<std::size_t>(3) * h * w);
  for (int i = 0; i < h * w; ++i) {
    const char c = static_cast<char>(to_byte(p[i]));
    out.append(3, c);
  }
  return out;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("write failed for " + path);
}

void write_ppm(const std::string& path, const Tensor4& images, int b) {
  write_text(path, encode_ppm(images, b));
}

Tensor4 read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || w < 1 || h < 1 || maxval != 255) {
    throw IoError(path + ": not a P6 image with maxval 255");
  }
  f.get();
  std::string bytes(static_cast<std::size_t>(3) * w * h, '\0');
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(path + ": truncated pixel data");
  Tensor4 t(Shape4{1, 1, h, w});
  for (int i = 0; i < h * w; ++i) {
    t[i] = static_cast<unsigned char>(bytes[3 * static_cast<std::size_t>(i)]) / 127.5 - 1.0;
  }
  return t;
}

Tensor4 make_grid(const Tensor4& images, int cols) {
  constexpr int kGutter = 2;
  const int n = images.n();
  cols = std::max(1, std::min(cols, n));
  const int rows = (n + cols - 1) / cols;
  const int th = images.h(), tw = images.w();
  Tensor4 g(Shape4{1, 1, rows * th + (rows - 1) * kGutter, cols * tw + (cols - 1) * kGutter},
            -1.0);
  for (int b = 0; b < n; ++b) {
    const int oy = (b / cols) * (th + kGutter), ox = (b % cols) * (tw + kGutter);
    for (int y = 0; y < th; ++y)
      for (int x = 0; x < tw; ++x) g.at(0, 0, oy + y, ox + x) = images.at(b, 0, y, x);
  }
  return g;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace mtm
