#pragma once

// Procedural labeled toy images and their on-disk container.
//
// Class c draws shape c % 5 (circle, square, triangle, cross, ring) filled
// with pattern (c / 5) % 2 (solid, striped) in a class-specific hue, at a
// random position, scale and rotation. Backgrounds come from texture
// families shared by all classes, at low contrast, with a few grey clutter
// blobs, so only object patches carry class information.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchgame/binio.hpp"
#include "patchgame/image.hpp"
#include "patchgame/rng.hpp"

namespace patchgame {

struct LabeledImage {
  std::vector<float> pixels;  // C x H x W in [0, 1]
  std::size_t label = 0;
  std::uint64_t id = 0;
  std::span<const float> view() const { return pixels; }
};

struct CorpusSpec {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 200;
  std::size_t channels = 3;
  std::size_t resolution = 64;
  std::string background = "mixed";  // mixed | stripes | checker | waves | flat
  double object_min = 0.22, object_max = 0.38;  // object radius as a fraction of the side
  std::uint64_t seed = 0;

  bool operator==(const CorpusSpec&) const = default;
};

struct Corpus {
  CorpusSpec spec;
  std::vector<LabeledImage> images;

  std::size_t size() const { return images.size(); }
  std::size_t image_size() const { return spec.channels * spec.resolution * spec.resolution; }
};

inline const std::vector<std::string>& background_families() {
  static const std::vector<std::string> names{"mixed", "stripes", "checker", "waves", "flat"};
  return names;
}

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0), f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Signed-ish coverage of shape `kind` at local coordinates (u, v), object
// radius 1. Returns the distance inside the boundary (positive = inside).
inline double shape_depth(std::size_t kind, double u, double v) {
  const double r = std::hypot(u, v);
  switch (kind) {
    case 0: return 1.0 - r;
    case 1: return 0.8 - std::max(std::abs(u), std::abs(v));
    case 2: {
      // Equilateral triangle with circumradius 1, apex up.
      const double a = v - 0.5;
      const double b = -0.5 * v + 0.8660254 * u - 0.5;
      const double c = -0.5 * v - 0.8660254 * u - 0.5;
      return -std::max({a, b, c});
    }
    case 3: {
      const double bar1 = std::min(0.3 - std::abs(u), 1.0 - std::abs(v));
      const double bar2 = std::min(0.3 - std::abs(v), 1.0 - std::abs(u));
      return std::max(bar1, bar2);
    }
    default: return std::min(1.0 - r, r - 0.5);
  }
}

inline double background_texture(std::size_t family, double x, double y, const std::array<double, 6>& p) {
  switch (family) {
    case 0: return std::sin((x * std::cos(p[0]) + y * std::sin(p[0])) * p[1] + p[2]);
    case 1: {
      const double cell = 4.0 + p[1] * 2.0;
      const long gx = static_cast<long>(std::floor((x + p[2] * 10) / cell));
      const long gy = static_cast<long>(std::floor((y + p[3] * 10) / cell));
      return ((gx + gy) % 2 == 0) ? 1.0 : -1.0;
    }
    case 2:
      return 0.5 * (std::sin(x * p[1] * 0.35 + p[2]) + std::sin(y * p[4] * 0.35 + p[3]));
    default: return 0.0;
  }
}

}  // namespace detail

inline LabeledImage render_sample(const CorpusSpec& spec, std::size_t label, std::size_t index) {
  if (spec.channels != 3) throw std::invalid_argument("generate: only 3-channel images are supported");
  Rng rng(derive_seed(spec.seed, "corpus", label, index));
  const std::size_t n = spec.resolution;
  const double side = static_cast<double>(n);
  LabeledImage out;
  out.label = label;
  out.id = label * spec.samples_per_class + index;
  out.pixels.assign(3 * n * n, 0.0f);

  // Background.
  std::size_t family = 3;
  if (spec.background == "mixed") family = rng.below(3);
  else if (spec.background == "stripes") family = 0;
  else if (spec.background == "checker") family = 1;
  else if (spec.background == "waves") family = 2;
  else if (spec.background != "flat") throw std::invalid_argument("generate: unknown background family " + spec.background);
  const double grey = rng.uniform(0.35, 0.65);
  const double amp = rng.uniform(0.04, 0.10);
  const std::array<double, 3> tint{rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)};
  std::array<double, 6> tex{};
  tex[0] = rng.uniform(0, std::numbers::pi);
  tex[1] = rng.uniform(0.4, 1.2);
  for (std::size_t i = 2; i < 6; ++i) tex[i] = rng.uniform(0, 2 * std::numbers::pi);
  std::vector<double> bg(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      bg[y * n + x] = grey + amp * detail::background_texture(family, static_cast<double>(x), static_cast<double>(y), tex);

  // Grey clutter blobs.
  const std::size_t blobs = 2 + rng.below(3);
  for (std::size_t b = 0; b < blobs; ++b) {
    const double cx = rng.uniform(0, side), cy = rng.uniform(0, side), rad = rng.uniform(0.04, 0.09) * side;
    const double shade = rng.uniform(-0.12, 0.12);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
        if (d < rad) bg[y * n + x] += shade;
      }
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n * n; ++i)
      out.pixels[c * n * n + i] = static_cast<float>(bg[i] + tint[c] + 0.02 * rng.normal());

  // Object.
  const std::size_t kind = label % 5;
  const bool striped = (label / 5) % 2 == 1;
  const double hue = (static_cast<double>(label) + 0.5) / static_cast<double>(spec.num_classes) + rng.uniform(-0.02, 0.02);
  const auto rgb = detail::hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0));
  const double radius = rng.uniform(spec.object_min, spec.object_max) * side;
  const double cx = rng.uniform(radius, side - radius), cy = rng.uniform(radius, side - radius);
  const double rot = kind == 0 || kind == 4 ? 0.0 : rng.uniform(-0.4, 0.4);
  const double stripe_angle = rng.uniform(0, std::numbers::pi), stripe_period = rng.uniform(5.0, 7.0);
  const double cr = std::cos(rot), sr = std::sin(rot);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (cr * dx + sr * dy) / radius, v = (-sr * dx + cr * dy) / radius;
      const double cover = std::clamp(detail::shape_depth(kind, u, v) * radius + 0.5, 0.0, 1.0);
      if (cover <= 0) continue;
      double shade = 1.0;
      if (striped) {
        const double t = (dx * std::cos(stripe_angle) + dy * std::sin(stripe_angle)) / stripe_period;
        if (t - std::floor(t) < 0.5) shade = 0.35;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        float& px = out.pixels[(c * n + y) * n + x];
        px = static_cast<float>((1 - cover) * px + cover * rgb[c] * shade);
      }
    }
  for (auto& p : out.pixels) p = std::clamp(p, 0.0f, 1.0f);
  return out;
}

// Deterministic in spec (each sample has its own derived stream).
inline Corpus generate(const CorpusSpec& spec) {
  if (spec.num_classes == 0 || spec.samples_per_class == 0 || spec.resolution < 8)
    throw std::invalid_argument("generate: empty corpus spec");
  Corpus c{spec, {}};
  c.images.reserve(spec.num_classes * spec.samples_per_class);
  for (std::size_t label = 0; label < spec.num_classes; ++label)
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) c.images.push_back(render_sample(spec, label, i));
  return c;
}

struct Split {
  Corpus train, val;
};

// Stratified split. Every class contributes round(fraction * size) validation
// samples, at least one.
inline Split split(const Corpus& corpus, double val_fraction, std::uint64_t seed, std::ostream* warn = &std::cerr) {
  if (!(val_fraction > 0 && val_fraction < 1)) throw std::invalid_argument("split: fraction must be in (0, 1)");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < corpus.images.size(); ++i) by_class[corpus.images[i].label].push_back(i);
  std::vector<std::uint8_t> is_val(corpus.images.size(), 0);
  for (auto& [label, idx] : by_class) {
    Rng rng(derive_seed(seed, "split", label));
    rng.shuffle(idx);
    if (idx.size() * val_fraction < 1.0 && warn)
      *warn << "warning: class " << label << " has " << idx.size() << " samples, fewer than 1/fraction\n";
    const std::size_t n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(val_fraction * idx.size())), 1,
                                                      idx.size() > 1 ? idx.size() - 1 : 1);
    for (std::size_t j = 0; j < n_val; ++j) is_val[idx[j]] = 1;
  }
  Split s{{corpus.spec, {}}, {corpus.spec, {}}};
  for (std::size_t i = 0; i < corpus.images.size(); ++i) (is_val[i] ? s.val : s.train).images.push_back(corpus.images[i]);
  return s;
}

inline constexpr char kCorpusMagic[9] = "PGCORPUS";
inline constexpr std::uint32_t kCorpusVersion = 1;

inline void save(const Corpus& c, const std::string& path) {
  BinaryWriter w(path);
  w.put_bytes(kCorpusMagic, 8);
  w.put<std::uint32_t>(kCorpusVersion);
  const auto& s = c.spec;
  w.put<std::uint64_t>(s.num_classes);
  w.put<std::uint64_t>(s.samples_per_class);
  w.put<std::uint64_t>(s.channels);
  w.put<std::uint64_t>(s.resolution);
  w.put_string(s.background);
  w.put<double>(s.object_min);
  w.put<double>(s.object_max);
  w.put<std::uint64_t>(s.seed);
  w.put<std::uint64_t>(c.images.size());
  for (const auto& img : c.images) {
    if (img.pixels.size() != c.image_size()) throw std::invalid_argument("save: image size mismatch");
    w.put<std::uint64_t>(img.label);
    w.put<std::uint64_t>(img.id);
    w.put_array(img.pixels);
  }
  w.close();
}

// Validates every invariant before returning; nothing partial escapes.
inline Corpus load(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kCorpusMagic);
  r.expect_version(kCorpusVersion);
  Corpus c;
  auto& s = c.spec;
  s.num_classes = r.get<std::uint64_t>();
  s.samples_per_class = r.get<std::uint64_t>();
  s.channels = r.get<std::uint64_t>();
  s.resolution = r.get<std::uint64_t>();
  s.background = r.get_string(256);
  s.object_min = r.get<double>();
  s.object_max = r.get<double>();
  s.seed = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  if (s.channels == 0 || s.resolution == 0 || s.channels * s.resolution * s.resolution > (1u << 26) || count > (1u << 24))
    throw FormatError(path + ": implausible header");
  c.images.resize(count);
  for (auto& img : c.images) {
    img.label = r.get<std::uint64_t>();
    img.id = r.get<std::uint64_t>();
    img.pixels = r.get_array<float>(c.image_size());
    if (img.label >= s.num_classes) throw FormatError(path + ": label " + std::to_string(img.label) + " out of range");
    for (float p : img.pixels)
      if (!(p >= 0.0f && p <= 1.0f)) throw FormatError(path + ": pixel outside [0, 1]");
  }
  if (!r.at_end()) throw FormatError(path + ": trailing bytes after last sample");
  return c;
}

// Imports <root>/<label>/*.ppm; labels are the sorted subdirectory names.
inline Corpus import_ppm_directory(const std::string& root, std::size_t resolution, std::vector<std::string>* label_names = nullptr) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("import: not a directory: " + root);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  Corpus c;
  c.spec.num_classes = dirs.size();
  c.spec.resolution = resolution;
  c.spec.background = "imported";
  c.spec.samples_per_class = 0;
  std::uint64_t id = 0;
  for (std::size_t label = 0; label < dirs.size(); ++label) {
    if (label_names) label_names->push_back(dirs[label].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dirs[label]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    c.spec.samples_per_class = std::max(c.spec.samples_per_class, files.size());
    for (const auto& f : files) {
      auto img = resize_nearest(read_ppm(f.string()), resolution, resolution);
      c.images.push_back({std::move(img.pixels), label, id++});
    }
  }
  if (c.images.empty()) throw std::runtime_error("import: no .ppm files under " + root);
  return c;
}

}  // namespace patchgame
