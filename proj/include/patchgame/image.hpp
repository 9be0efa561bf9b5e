#pragma once

// Binary PPM (P6) reading and writing for CHW float images in [0, 1].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchgame {

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;  // 3 x H x W

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
};

inline RgbImage make_image(std::size_t h, std::size_t w, float fill = 0.0f) { return {h, w, std::vector<float>(3 * h * w, fill)}; }

inline void write_ppm(const std::string& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        row[x * 3 + c] = static_cast<unsigned char>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("cannot write image: " + path);
}

namespace detail {
inline std::size_t ppm_field(std::istream& in, const std::string& path) {
  int ch;
  while ((ch = in.peek()) != EOF) {
    if (std::isspace(ch)) {
      in.get();
    } else if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(in >> v)) throw std::runtime_error(path + ": malformed PPM header");
  return v;
}
}  // namespace detail

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read image: " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw std::runtime_error(path + ": not a binary PPM (P6)");
  const std::size_t w = detail::ppm_field(in, path), h = detail::ppm_field(in, path);
  const std::size_t maxval = detail::ppm_field(in, path);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw std::runtime_error(path + ": unsupported PPM dimensions");
  in.get();
  std::vector<unsigned char> raw(w * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw std::runtime_error(path + ": truncated PPM");
  RgbImage img = make_image(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(raw[(y * w + x) * 3 + c]) / static_cast<float>(maxval);
  return img;
}

// Nearest-neighbour resample.
inline RgbImage resize_nearest(const RgbImage& src, std::size_t h, std::size_t w) {
  RgbImage out = make_image(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = y * src.height / h, sx = x * src.width / w;
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = src.at(c, sy, sx);
    }
  return out;
}

}  // namespace patchgame
