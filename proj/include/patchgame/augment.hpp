#pragma once

// Two-view augmentation on CHW float images.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "patchgame/rng.hpp"

namespace patchgame {

struct AugmentConfig {
  double crop_min = 0.5, crop_max = 1.0;  // area fraction
  double flip_prob = 0.5;
  double brightness = 0.4, contrast = 0.4, saturation = 0.4;
  double blur_prob = 0.5, blur_sigma_min = 0.1, blur_sigma_max = 1.0;
  double solarize_prob = 0.2, solarize_threshold = 0.5;

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0 && p <= 1)) throw std::invalid_argument(std::string("AugmentConfig: ") + name + " must be in [0, 1]");
    };
    prob(flip_prob, "flip_prob");
    prob(blur_prob, "blur_prob");
    prob(solarize_prob, "solarize_prob");
    if (!(crop_min > 0 && crop_min <= crop_max && crop_max <= 1))
      throw std::invalid_argument("AugmentConfig: crop scale range must lie in (0, 1]");
    if (brightness < 0 || contrast < 0 || saturation < 0 || brightness > 1 || contrast > 1 || saturation > 1)
      throw std::invalid_argument("AugmentConfig: jitter strengths must be in [0, 1]");
    if (!(blur_sigma_min > 0 && blur_sigma_min <= blur_sigma_max)) throw std::invalid_argument("AugmentConfig: bad blur sigma range");
  }

  static AugmentConfig identity() { return {1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.1, 0.0, 0.5}; }
};

struct ImageDims {
  std::size_t channels, height, width;
  std::size_t size() const { return channels * height * width; }
};

inline std::vector<float> horizontal_flip(std::span<const float> img, ImageDims d) {
  std::vector<float> out(img.size());
  for (std::size_t c = 0; c < d.channels; ++c)
    for (std::size_t y = 0; y < d.height; ++y)
      for (std::size_t x = 0; x < d.width; ++x)
        out[(c * d.height + y) * d.width + x] = img[(c * d.height + y) * d.width + (d.width - 1 - x)];
  return out;
}

// Pixels at or above the threshold are inverted.
inline void solarize(std::vector<float>& img, double threshold) {
  const auto t = static_cast<float>(threshold);
  for (auto& v : img)
    if (v >= t) v = 1.0f - v;
}

// Bilinear resize of the window [y0, y0+h) x [x0, x0+w) to the full size.
inline std::vector<float> crop_resize(std::span<const float> img, ImageDims d, double y0, double x0, double h, double w) {
  std::vector<float> out(img.size());
  for (std::size_t y = 0; y < d.height; ++y) {
    const double sy = std::clamp(y0 + (y + 0.5) * h / d.height - 0.5, 0.0, d.height - 1.0);
    const auto iy = static_cast<std::size_t>(std::floor(sy));
    const std::size_t iy1 = std::min(iy + 1, d.height - 1);
    const double fy = sy - iy;
    for (std::size_t x = 0; x < d.width; ++x) {
      const double sx = std::clamp(x0 + (x + 0.5) * w / d.width - 0.5, 0.0, d.width - 1.0);
      const auto ix = static_cast<std::size_t>(std::floor(sx));
      const std::size_t ix1 = std::min(ix + 1, d.width - 1);
      const double fx = sx - ix;
      for (std::size_t c = 0; c < d.channels; ++c) {
        const float* p = img.data() + c * d.height * d.width;
        double v = p[iy * d.width + ix];
        if (fy != 0 || fx != 0)
          v = (1 - fy) * ((1 - fx) * p[iy * d.width + ix] + fx * p[iy * d.width + ix1]) +
              fy * ((1 - fx) * p[iy1 * d.width + ix] + fx * p[iy1 * d.width + ix1]);
        out[(c * d.height + y) * d.width + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline void gaussian_blur(std::vector<float>& img, ImageDims d, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  std::vector<float> tmp(img.size());
  const auto h = static_cast<int>(d.height), w = static_cast<int>(d.width);
  for (std::size_t c = 0; c < d.channels; ++c) {
    float* p = img.data() + c * d.height * d.width;
    float* q = tmp.data() + c * d.height * d.width;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * p[y * w + std::clamp(x + i, 0, w - 1)];
        q[y * w + x] = static_cast<float>(s);
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * q[std::clamp(y + i, 0, h - 1) * w + x];
        p[y * w + x] = static_cast<float>(s);
      }
  }
}

inline void color_jitter(std::vector<float>& img, ImageDims d, const AugmentConfig& cfg, Rng& rng) {
  const std::size_t hw = d.height * d.width;
  const double b = 1 + rng.uniform(-cfg.brightness, cfg.brightness);
  const double c = 1 + rng.uniform(-cfg.contrast, cfg.contrast);
  const double s = 1 + rng.uniform(-cfg.saturation, cfg.saturation);
  for (auto& v : img) v = std::clamp(static_cast<float>(v * b), 0.0f, 1.0f);
  double mean = 0;
  for (float v : img) mean += v;
  mean /= static_cast<double>(img.size());
  for (auto& v : img) v = std::clamp(static_cast<float>(mean + (v - mean) * c), 0.0f, 1.0f);
  if (d.channels == 3) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double grey = 0.299 * img[i] + 0.587 * img[hw + i] + 0.114 * img[2 * hw + i];
      for (std::size_t ch = 0; ch < 3; ++ch) {
        float& v = img[ch * hw + i];
        v = std::clamp(static_cast<float>(grey + (v - grey) * s), 0.0f, 1.0f);
      }
    }
  }
}

inline std::vector<float> augment(std::span<const float> img, ImageDims d, const AugmentConfig& cfg, Rng& rng) {
  if (img.size() != d.size()) throw std::invalid_argument("augment: image size mismatch");
  std::vector<float> out;
  const double area = rng.uniform(cfg.crop_min, cfg.crop_max);
  double ch = d.height * std::sqrt(area), cw = d.width * std::sqrt(area);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double ratio = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    const double h = d.height * std::sqrt(area / ratio), w = d.width * std::sqrt(area * ratio);
    if (h <= d.height && w <= d.width) {
      ch = h;
      cw = w;
      break;
    }
  }
  const double y0 = rng.uniform(0, d.height - ch), x0 = rng.uniform(0, d.width - cw);
  out = crop_resize(img, d, ch < d.height ? y0 : 0.0, cw < d.width ? x0 : 0.0, ch, cw);
  if (rng.bernoulli(cfg.flip_prob)) out = horizontal_flip(out, d);
  if (cfg.brightness > 0 || cfg.contrast > 0 || cfg.saturation > 0) color_jitter(out, d, cfg, rng);
  if (rng.bernoulli(cfg.blur_prob)) gaussian_blur(out, d, rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max));
  if (rng.bernoulli(cfg.solarize_prob)) solarize(out, cfg.solarize_threshold);
  for (auto& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

inline std::pair<std::vector<float>, std::vector<float>> two_views(std::span<const float> img, ImageDims d,
                                                                   const AugmentConfig& cfg, Rng& rng) {
  auto a = augment(img, d, cfg, rng);
  auto b = augment(img, d, cfg, rng);
  return {std::move(a), std::move(b)};
}

}  // namespace patchgame
