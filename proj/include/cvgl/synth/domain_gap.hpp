#pragma once

// Parameterized imaging gap between projected BEV images and real overhead
// tiles: illumination, colour response, sensor noise, occluders, and the
// optional shift / rotation perturbations used for robustness runs.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>

#include "cvgl/core.hpp"
#include "cvgl/geometry/image.hpp"

namespace cvgl::synth {

struct DomainGapConfig {
  // Brightness offset drawn from [-brightness_shift, brightness_shift].
  double brightness_shift = 0.0;
  // Contrast factor drawn from [1 - contrast_scale, 1 + contrast_scale].
  double contrast_scale = 0.0;
  // Off-identity entries of the 3x3 colour mix drawn from [-channel_mix, channel_mix].
  double channel_mix = 0.0;
  double noise_sigma = 0.0;
  int occlusion_count = 0;
  int occlusion_min = 0;
  int occlusion_max = 0;
  int shift_max = 0;
  bool rotate = false;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (brightness_shift < 0 || contrast_scale < 0 || channel_mix < 0 || noise_sigma < 0 ||
        occlusion_count < 0 || occlusion_min < 0 || occlusion_max < occlusion_min || shift_max < 0)
      throw ConfigError("DomainGapConfig: magnitudes must be nonnegative and ranges ordered");
  }
};

// Named presets, with occluder sizes scaled to the tile size.
inline DomainGapConfig gap_preset(const std::string& name, std::size_t tile_size) {
  DomainGapConfig cfg;
  const double s = static_cast<double>(tile_size);
  if (name == "none") return cfg;
  if (name == "mild") {
    cfg.brightness_shift = 0.06;
    cfg.contrast_scale = 0.12;
    cfg.channel_mix = 0.06;
    cfg.noise_sigma = 0.03;
    cfg.occlusion_count = 2;
    cfg.occlusion_min = static_cast<int>(0.04 * s);
    cfg.occlusion_max = static_cast<int>(0.12 * s);
    return cfg;
  }
  if (name == "hard") {
    cfg.brightness_shift = 0.15;
    cfg.contrast_scale = 0.30;
    cfg.channel_mix = 0.15;
    cfg.noise_sigma = 0.08;
    cfg.occlusion_count = 5;
    cfg.occlusion_min = static_cast<int>(0.06 * s);
    cfg.occlusion_max = static_cast<int>(0.18 * s);
    return cfg;
  }
  throw ConfigError("unknown gap preset: " + name);
}

// Stages run in a fixed order: affine intensity, channel mix, noise,
// occluders, cyclic shift, rotation by a multiple of 90 degrees.
inline ImageBuffer apply_domain_gap(const ImageBuffer& img, const DomainGapConfig& cfg) {
  cfg.validate();
  if (img.empty()) return img;
  Rng rng(cfg.rng_seed);
  const std::size_t w = img.width(), h = img.height(), ch = img.channels();
  std::vector<float> buf(img.data().begin(), img.data().end());

  const double brightness = cfg.brightness_shift > 0 ? rng.uniform(-cfg.brightness_shift, cfg.brightness_shift) : 0.0;
  const double contrast = cfg.contrast_scale > 0 ? rng.uniform(1 - cfg.contrast_scale, 1 + cfg.contrast_scale) : 1.0;
  if (brightness != 0.0 || contrast != 1.0)
    for (float& v : buf) v = static_cast<float>((v - 0.5) * contrast + 0.5 + brightness);

  if (cfg.channel_mix > 0 && ch == 3) {
    std::array<double, 9> m{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        m[i * 3 + j] = (i == j ? 1.0 : 0.0) + rng.uniform(-cfg.channel_mix, cfg.channel_mix);
    for (std::size_t p = 0; p < w * h; ++p) {
      float* px = &buf[p * 3];
      const double r = px[0], g = px[1], b = px[2];
      for (int i = 0; i < 3; ++i)
        px[i] = static_cast<float>(m[i * 3] * r + m[i * 3 + 1] * g + m[i * 3 + 2] * b);
    }
  }

  if (cfg.noise_sigma > 0)
    for (float& v : buf) v += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));

  for (int k = 0; k < cfg.occlusion_count && w > 0 && h > 0; ++k) {
    const auto ow = static_cast<std::size_t>(rng.integer(cfg.occlusion_min, cfg.occlusion_max));
    const auto oh = static_cast<std::size_t>(rng.integer(cfg.occlusion_min, cfg.occlusion_max));
    const auto x0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(w) - 1));
    const auto y0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(h) - 1));
    const float fill = static_cast<float>(rng.uniform(0.0, 1.0));
    for (std::size_t y = y0; y < std::min(h, y0 + oh); ++y)
      for (std::size_t x = x0; x < std::min(w, x0 + ow); ++x)
        for (std::size_t c = 0; c < ch; ++c) buf[(y * w + x) * ch + c] = fill;
  }

  for (float& v : buf) v = std::clamp(v, 0.0f, 1.0f);

  if (cfg.shift_max > 0) {
    const auto dx = rng.integer(-cfg.shift_max, cfg.shift_max);
    const auto dy = rng.integer(-cfg.shift_max, cfg.shift_max);
    std::vector<float> shifted(buf.size());
    const auto sw = static_cast<std::int64_t>(w), sh = static_cast<std::int64_t>(h);
    for (std::int64_t y = 0; y < sh; ++y)
      for (std::int64_t x = 0; x < sw; ++x) {
        const auto sx = ((x - dx) % sw + sw) % sw;
        const auto sy = ((y - dy) % sh + sh) % sh;
        for (std::size_t c = 0; c < ch; ++c)
          shifted[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * ch + c] =
              buf[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * ch + c];
      }
    buf.swap(shifted);
  }

  if (cfg.rotate) {
    require(w == h, "apply_domain_gap: rotation requires a square (overhead) image");
    const auto turns = rng.integer(0, 3);
    for (std::int64_t t = 0; t < turns; ++t) {
      std::vector<float> rotated(buf.size());
      // 90 degrees clockwise: (x, y) -> (h - 1 - y, x).
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t c = 0; c < ch; ++c)
            rotated[(x * w + (h - 1 - y)) * ch + c] = buf[(y * w + x) * ch + c];
      buf.swap(rotated);
    }
  }

  return ImageBuffer(w, h, ch, std::move(buf));
}

}  // namespace cvgl::synth
