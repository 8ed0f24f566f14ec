#pragma once

// Procedural paired worlds: textured overhead tiles and the ground panoramas
// a camera at each tile centre would see under the ground-plane model.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/geometry/image.hpp"
#include "cvgl/geometry/projection.hpp"

namespace cvgl::synth {

struct TextureConfig {
  std::size_t channels = 3;
  int min_polygons = 6;
  int max_polygons = 12;
  int min_strips = 1;
  int max_strips = 3;
  int min_blobs = 3;
  int max_blobs = 8;
  // Polygon / blob radius range as a fraction of the tile size.
  double min_radius = 0.08;
  double max_radius = 0.30;
  // Strip width range as a fraction of the tile size.
  double min_strip_width = 0.04;
  double max_strip_width = 0.12;
  // Box blur radius in pixels applied after drawing (0 disables).
  int blur_radius = 1;
  // Maximum raw-pixel cosine similarity between any two scenes.
  double similarity_ceiling = 0.97;
  int max_attempts = 64;
};

struct Scene {
  std::uint64_t scene_id = 0;
  ImageBuffer overhead;
  std::uint64_t layout_seed = 0;
};

struct World {
  std::uint64_t seed = 0;
  std::vector<Scene> scenes;
  ProjectionParams params = ProjectionParams::make(128, 128, std::numbers::pi / 4);
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;

  std::size_t size() const { return scenes.size(); }
};

namespace detail {

using Color = std::array<float, 3>;

inline Color random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform(0.05, 0.95)), static_cast<float>(rng.uniform(0.05, 0.95)),
          static_cast<float>(rng.uniform(0.05, 0.95))};
}

inline void put(ImageBuffer& img, std::size_t x, std::size_t y, const Color& c, float alpha = 1.0f) {
  for (std::size_t ch = 0; ch < img.channels(); ++ch) {
    // Single-channel tiles use the colour's luminance.
    const float v = img.channels() == 1 ? 0.299f * c[0] + 0.587f * c[1] + 0.114f * c[2] : c[ch];
    float& px = img.at(x, y, ch);
    px = (1.0f - alpha) * px + alpha * v;
  }
}

inline void draw_polygon(ImageBuffer& img, Rng& rng, const TextureConfig& cfg) {
  const double size = static_cast<double>(img.width());
  const double cx = rng.uniform(0, size);
  const double cy = rng.uniform(0, size);
  const double radius = rng.uniform(cfg.min_radius, cfg.max_radius) * size;
  const int k = static_cast<int>(rng.integer(3, 7));
  std::vector<double> angles(k);
  for (auto& a : angles) a = rng.uniform(0, 2 * std::numbers::pi);
  std::sort(angles.begin(), angles.end());
  std::vector<std::array<double, 2>> pts;
  for (double a : angles) {
    const double r = radius * rng.uniform(0.6, 1.0);
    pts.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
  }
  const Color c = random_color(rng);
  const auto x0 = static_cast<std::size_t>(std::clamp(cx - radius, 0.0, size - 1));
  const auto x1 = static_cast<std::size_t>(std::clamp(cx + radius, 0.0, size - 1));
  const auto y0 = static_cast<std::size_t>(std::clamp(cy - radius, 0.0, size - 1));
  const auto y1 = static_cast<std::size_t>(std::clamp(cy + radius, 0.0, size - 1));
  for (std::size_t y = y0; y <= y1; ++y) {
    for (std::size_t x = x0; x <= x1; ++x) {
      // Even-odd rule.
      bool inside = false;
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
        const auto& a = pts[i];
        const auto& b = pts[j];
        if ((a[1] > py) != (b[1] > py) &&
            px < (b[0] - a[0]) * (py - a[1]) / (b[1] - a[1]) + a[0])
          inside = !inside;
      }
      if (inside) put(img, x, y, c);
    }
  }
}

// A straight band across the whole tile, optionally with a centre line.
inline void draw_strip(ImageBuffer& img, Rng& rng, const TextureConfig& cfg) {
  const double size = static_cast<double>(img.width());
  const double angle = rng.uniform(0, std::numbers::pi);
  const double nx = -std::sin(angle), ny = std::cos(angle);
  const double offset = rng.uniform(-0.4, 0.4) * size;
  const double half_width = 0.5 * rng.uniform(cfg.min_strip_width, cfg.max_strip_width) * size;
  const float gray = static_cast<float>(rng.uniform(0.15, 0.45));
  const Color road{gray, gray, static_cast<float>(gray * rng.uniform(0.9, 1.1))};
  const bool centre_line = rng.bernoulli(0.5);
  const Color line{0.9f, 0.9f, 0.8f};
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < img.width(); ++x) {
      const double dist = (static_cast<double>(x) - size / 2) * nx +
                          (static_cast<double>(y) - size / 2) * ny - offset;
      if (std::abs(dist) <= half_width) {
        put(img, x, y, centre_line && std::abs(dist) < 0.15 * half_width ? line : road);
      }
    }
  }
}

// Soft-edged disc blended over the tile.
inline void draw_blob(ImageBuffer& img, Rng& rng, const TextureConfig& cfg) {
  const double size = static_cast<double>(img.width());
  const double cx = rng.uniform(0, size);
  const double cy = rng.uniform(0, size);
  const double radius = rng.uniform(cfg.min_radius, cfg.max_radius) * 0.7 * size;
  const Color c = random_color(rng);
  const auto x0 = static_cast<std::size_t>(std::clamp(cx - radius, 0.0, size - 1));
  const auto x1 = static_cast<std::size_t>(std::clamp(cx + radius, 0.0, size - 1));
  const auto y0 = static_cast<std::size_t>(std::clamp(cy - radius, 0.0, size - 1));
  const auto y1 = static_cast<std::size_t>(std::clamp(cy + radius, 0.0, size - 1));
  for (std::size_t y = y0; y <= y1; ++y) {
    for (std::size_t x = x0; x <= x1; ++x) {
      const double r = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy) / radius;
      if (r < 1.0) put(img, x, y, c, static_cast<float>(0.8 * (1.0 - r * r)));
    }
  }
}

inline ImageBuffer box_blur(const ImageBuffer& img, int radius) {
  if (radius <= 0) return img;
  const auto w = static_cast<std::ptrdiff_t>(img.width());
  const auto h = static_cast<std::ptrdiff_t>(img.height());
  const std::size_t ch = img.channels();
  ImageBuffer tmp(img.width(), img.height(), ch), out(img.width(), img.height(), ch);
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        float acc = 0;
        int n = 0;
        for (std::ptrdiff_t k = std::max<std::ptrdiff_t>(0, x - radius);
             k <= std::min(w - 1, x + radius); ++k, ++n)
          acc += img.at(k, y, c);
        tmp.at(x, y, c) = acc / static_cast<float>(n);
      }
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        float acc = 0;
        int n = 0;
        for (std::ptrdiff_t k = std::max<std::ptrdiff_t>(0, y - radius);
             k <= std::min(h - 1, y + radius); ++k, ++n)
          acc += tmp.at(x, k, c);
        out.at(x, y, c) = std::clamp(acc / static_cast<float>(n), 0.0f, 1.0f);
      }
  return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  // Eight float lanes per 4096-element block, folded into a double.
  double total = 0;
  for (std::size_t start = 0; start < a.size(); start += 4096) {
    const std::size_t end = std::min(a.size(), start + 4096);
    float lanes[8] = {};
    std::size_t i = start;
    for (; i + 8 <= end; i += 8)
      for (int k = 0; k < 8; ++k) lanes[k] += a[i + k] * b[i + k];
    double block = 0;
    for (float l : lanes) block += l;
    for (; i < end; ++i) block += static_cast<double>(a[i]) * b[i];
    total += block;
  }
  return total;
}

inline double cosine(const ImageBuffer& a, const ImageBuffer& b) {
  const double aa = dot(a.data(), a.data());
  const double bb = dot(b.data(), b.data());
  if (aa == 0 || bb == 0) return 0.0;
  return dot(a.data(), b.data()) / std::sqrt(aa * bb);
}

}  // namespace detail

// Draws one overhead tile from a layout seed.
inline ImageBuffer generate_overhead(std::uint64_t layout_seed, std::size_t size,
                                     const TextureConfig& cfg) {
  Rng rng(layout_seed);
  ImageBuffer img(size, size, cfg.channels);
  const detail::Color bg = detail::random_color(rng);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) detail::put(img, x, y, bg);
  const auto n_poly = rng.integer(cfg.min_polygons, cfg.max_polygons);
  for (std::int64_t i = 0; i < n_poly; ++i) detail::draw_polygon(img, rng, cfg);
  const auto n_strip = rng.integer(cfg.min_strips, cfg.max_strips);
  for (std::int64_t i = 0; i < n_strip; ++i) detail::draw_strip(img, rng, cfg);
  const auto n_blob = rng.integer(cfg.min_blobs, cfg.max_blobs);
  for (std::int64_t i = 0; i < n_blob; ++i) detail::draw_blob(img, rng, cfg);
  return detail::box_blur(img, cfg.blur_radius);
}

// Scene i draws from derive_seed(seed, i, attempt) until its tile is below the
// similarity ceiling against every earlier scene. The train/val split is a
// seeded permutation; the last round(val_fraction * n) entries form val.
inline World generate_world(std::uint64_t seed, std::size_t n_scenes, const ProjectionParams& params,
                            const TextureConfig& cfg = {}, double val_fraction = 0.2) {
  if (n_scenes < 2) throw ConfigError("generate_world: need at least 2 scenes");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw ConfigError("generate_world: val_fraction must lie in [0, 1)");
  World world{seed, {}, params, {}, {}};
  world.scenes.reserve(n_scenes);
  std::vector<double> sims, norms;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    bool accepted = false;
    for (int attempt = 0; attempt < cfg.max_attempts && !accepted; ++attempt) {
      const std::uint64_t layout = derive_seed(seed, i, attempt);
      ImageBuffer tile = generate_overhead(layout, params.bev_width(), cfg);
      const double tile_norm = std::sqrt(detail::dot(tile.data(), tile.data()));
      sims.assign(i, 0.0);
      parallel_for(0, i, [&](std::size_t j) {
        const double denom = tile_norm * norms[j];
        sims[j] = denom > 0 ? detail::dot(tile.data(), world.scenes[j].overhead.data()) / denom : 0.0;
      });
      if (std::all_of(sims.begin(), sims.end(), [&](double s) { return s < cfg.similarity_ceiling; })) {
        norms.push_back(tile_norm);
        world.scenes.push_back(Scene{i, std::move(tile), layout});
        accepted = true;
      }
    }
    if (!accepted)
      throw ConfigError("generate_world: could not satisfy similarity ceiling for scene " +
                        std::to_string(i));
  }
  std::vector<std::size_t> order(n_scenes);
  for (std::size_t i = 0; i < n_scenes; ++i) order[i] = i;
  Rng split_rng(derive_seed(seed, 0x5917ULL));
  split_rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n_scenes)));
  world.train.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
  world.val.assign(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(world.train.begin(), world.train.end());
  std::sort(world.val.begin(), world.val.end());
  return world;
}

// Ground panorama seen from the tile centre. Rows at or above the horizon are
// sky; ground rays that leave the tile get the far-field intensity.
inline ImageBuffer render_panorama(const Scene& scene, const ProjectionParams& params,
                                   float sky_intensity = 0.9f, float far_field = 0.5f) {
  const ImageBuffer& tile = scene.overhead;
  require(tile.width() == params.bev_width() && tile.height() == params.bev_height(),
          "render_panorama: overhead dimensions do not match params");
  require(sky_intensity >= 0 && sky_intensity <= 1 && far_field >= 0 && far_field <= 1,
          "render_panorama: fill intensities must lie in [0,1]");
  const std::size_t wg = params.pano_width();
  const std::size_t hg = params.pano_height();
  ImageBuffer pano(wg, hg, tile.channels(), sky_intensity);
  parallel_for(0, hg, [&](std::size_t y) {
    if (static_cast<double>(y) <= static_cast<double>(hg) / 2) return;
    float px[3];
    for (std::size_t x = 0; x < wg; ++x) {
      const auto src = inverse_project_point(static_cast<double>(x), static_cast<double>(y), params);
      if (src) {
        bilinear_sample(tile, src->u, src->v, px);
        for (std::size_t c = 0; c < tile.channels(); ++c) pano.at(x, y, c) = px[c];
      } else {
        for (std::size_t c = 0; c < tile.channels(); ++c) pano.at(x, y, c) = far_field;
      }
    }
  });
  return pano;
}

}  // namespace cvgl::synth
