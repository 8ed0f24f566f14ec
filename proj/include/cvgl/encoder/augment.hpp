#pragma once

// SimCLR-style view generation for intra-view contrastive learning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/geometry/image.hpp"
#include "cvgl/geometry/projection.hpp"

namespace cvgl {

struct AugmentationConfig {
  double flip_prob = 0.0;
  // Retained area fraction of the crop, drawn from [crop_min, crop_max].
  double crop_min = 1.0;
  double crop_max = 1.0;
  double brightness = 0.0;  // offset in [-brightness, brightness]
  double contrast = 0.0;    // factor in [1 - contrast, 1 + contrast]
  double saturation = 0.0;  // factor in [1 - saturation, 1 + saturation]
  double grayscale_prob = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    const auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(flip_prob) || !prob(grayscale_prob))
      throw ConfigError("AugmentationConfig: probabilities must lie in [0,1]");
    if (!(crop_min >= 0.5 && crop_min <= crop_max && crop_max <= 1.0))
      throw ConfigError("AugmentationConfig: need 0.5 <= crop_min <= crop_max <= 1");
    if (brightness < 0 || contrast < 0 || saturation < 0)
      throw ConfigError("AugmentationConfig: jitter magnitudes must be nonnegative");
  }
};

inline ImageBuffer augment(const ImageBuffer& img, const AugmentationConfig& cfg, std::uint64_t draw) {
  cfg.validate();
  if (img.empty()) return img;
  Rng rng(derive_seed(cfg.rng_seed, draw));
  const std::size_t w = img.width(), h = img.height(), ch = img.channels();

  const bool flip = rng.bernoulli(cfg.flip_prob);
  const double area = rng.uniform(cfg.crop_min, cfg.crop_max);
  const double cx = rng.uniform();
  const double cy = rng.uniform();
  const double brightness = rng.uniform(-cfg.brightness, cfg.brightness);
  const double contrast = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast);
  const double saturation = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation);
  const bool gray = rng.bernoulli(cfg.grayscale_prob);

  ImageBuffer out = img;
  if (flip) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w / 2; ++x)
        for (std::size_t c = 0; c < ch; ++c) std::swap(out.at(x, y, c), out.at(w - 1 - x, y, c));
  }

  if (area < 1.0 && w > 1 && h > 1) {
    const double side = std::sqrt(area);
    const double cw = side * static_cast<double>(w - 1);
    const double chh = side * static_cast<double>(h - 1);
    const double x0 = cx * (static_cast<double>(w - 1) - cw);
    const double y0 = cy * (static_cast<double>(h - 1) - chh);
    const ImageBuffer src = out;
    // The crop is separable: column taps are shared by every row.
    std::vector<std::size_t> xa(w), xb(w);
    std::vector<double> fx(w);
    for (std::size_t x = 0; x < w; ++x) {
      const double sx = x0 + cw * static_cast<double>(x) / static_cast<double>(w - 1);
      xa[x] = std::min(static_cast<std::size_t>(std::floor(sx)), w - 1);
      xb[x] = std::min(xa[x] + 1, w - 1);
      fx[x] = sx - static_cast<double>(xa[x]);
    }
    const float* sp = src.data().data();
    float* op = out.data().data();
    for (std::size_t y = 0; y < h; ++y) {
      const double sy = y0 + chh * static_cast<double>(y) / static_cast<double>(h - 1);
      const std::size_t ya = std::min(static_cast<std::size_t>(std::floor(sy)), h - 1);
      const std::size_t yb = std::min(ya + 1, h - 1);
      const double fy = sy - static_cast<double>(ya);
      const float* ra = sp + ya * w * ch;
      const float* rb = sp + yb * w * ch;
      float* row = op + y * w * ch;
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t a = xa[x] * ch, b = xb[x] * ch;
        const double f = fx[x];
        for (std::size_t c = 0; c < ch; ++c) {
          const double top = (1 - f) * ra[a + c] + f * ra[b + c];
          const double bottom = (1 - f) * rb[a + c] + f * rb[b + c];
          row[x * ch + c] = static_cast<float>((1 - fy) * top + fy * bottom);
        }
      }
    }
  }

  const bool photometric = brightness != 0.0 || contrast != 1.0 || (ch == 3 && (saturation != 1.0 || gray));
  if (photometric) {
    for (std::size_t p = 0; p < w * h; ++p) {
      float* px = &out.data()[p * ch];
      for (std::size_t c = 0; c < ch; ++c) px[c] = static_cast<float>((px[c] - 0.5) * contrast + 0.5 + brightness);
      if (ch == 3) {
        const double lum = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        const double sat = gray ? 0.0 : saturation;
        for (std::size_t c = 0; c < 3; ++c) px[c] = static_cast<float>(lum + sat * (px[c] - lum));
      }
    }
    out.clamp();
  }
  return out;
}

}  // namespace cvgl
