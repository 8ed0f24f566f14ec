#pragma once

// Ground-plane projection between an equirectangular panorama and a square
// bird's-eye-view (BEV) image centred on the camera.
//
// Forward map, BEV pixel (u_s, v_s) -> panorama pixel (u_g, v_g):
//
//   d   = sqrt((W_s/2 - u_s)^2 + (H_s/2 - v_s)^2)
//   u_g = [1 - atan2(W_s/2 - u_s, H_s/2 - v_s) / pi] * W_g / 2
//   v_g = [0.5 - atan2(-f, d) / pi] * H_g,        f = 0.5 * W_s / tan(fov)
//
// d = 0 lands on the bottom (nadir) row and d -> inf approaches the horizon
// row H_g/2. Coordinates are pixel indices, not pixel-centre offsets.

#include <cmath>
#include <numbers>
#include <optional>
#include <utility>

#include "cvgl/core.hpp"
#include "cvgl/geometry/image.hpp"

namespace cvgl {

inline double focal_length(double bev_width, double fov) {
  if (!(bev_width > 0.0)) throw NumericError("focal_length: bev_width must be positive");
  if (!(fov > 0.0 && fov < std::numbers::pi / 2))
    throw NumericError("focal_length: fov must lie in (0, pi/2)");
  return 0.5 * bev_width / std::tan(fov);
}

class ProjectionParams {
 public:
  ProjectionParams(std::size_t pano_width, std::size_t pano_height, std::size_t bev_width,
                   std::size_t bev_height, double fov)
      : pano_width_(pano_width), pano_height_(pano_height), bev_width_(bev_width),
        bev_height_(bev_height), fov_(fov) {
    require(pano_height > 0 && pano_width == 2 * pano_height,
            "ProjectionParams: panorama must satisfy W_g = 2 H_g");
    require(bev_width > 0 && bev_width == bev_height, "ProjectionParams: BEV must be square");
    focal_ = focal_length(static_cast<double>(bev_width), fov);
  }

  // Common case: panorama of width 2*pano_height, square BEV.
  static ProjectionParams make(std::size_t pano_height, std::size_t bev_size, double fov) {
    return {2 * pano_height, pano_height, bev_size, bev_size, fov};
  }

  std::size_t pano_width() const { return pano_width_; }
  std::size_t pano_height() const { return pano_height_; }
  std::size_t bev_width() const { return bev_width_; }
  std::size_t bev_height() const { return bev_height_; }
  double fov() const { return fov_; }
  double focal() const { return focal_; }

  friend bool operator==(const ProjectionParams&, const ProjectionParams&) = default;

 private:
  std::size_t pano_width_;
  std::size_t pano_height_;
  std::size_t bev_width_;
  std::size_t bev_height_;
  double fov_;
  double focal_;
};

struct PanoPoint {
  double u = 0.0;
  double v = 0.0;
};

struct BevPoint {
  double u = 0.0;
  double v = 0.0;
};

// Unclamped forward map; v may equal H_g exactly at the nadir.
inline PanoPoint project_point(double u_s, double v_s, const ProjectionParams& p) {
  const double ws = static_cast<double>(p.bev_width());
  const double hs = static_cast<double>(p.bev_height());
  const double wg = static_cast<double>(p.pano_width());
  const double hg = static_cast<double>(p.pano_height());
  require(u_s >= 0.0 && u_s < ws && v_s >= 0.0 && v_s < hs,
          "project_point: BEV coordinate outside frame");
  const double dx = ws / 2 - u_s;
  const double dy = hs / 2 - v_s;
  const double d = std::hypot(dx, dy);
  // atan2(0, 0) == 0 under IEEE, so the nadir takes azimuth 0.
  const double azimuth = (dx == 0.0 && dy == 0.0) ? 0.0 : std::atan2(dx, dy);
  double u_g = (1.0 - azimuth / std::numbers::pi) * wg / 2;
  if (u_g >= wg) u_g -= wg;
  if (u_g < 0.0) u_g = 0.0;
  double v_g = (0.5 - std::atan2(-p.focal(), d) / std::numbers::pi) * hg;
  v_g = std::clamp(v_g, 0.0, hg);
  return {u_g, v_g};
}

// Analytic inverse of project_point. Empty at or above the horizon and when
// the ground point falls outside [0, W_s-1] x [0, H_s-1].
inline std::optional<BevPoint> inverse_project_point(double u_g, double v_g,
                                                     const ProjectionParams& p) {
  const double ws = static_cast<double>(p.bev_width());
  const double hs = static_cast<double>(p.bev_height());
  const double wg = static_cast<double>(p.pano_width());
  const double hg = static_cast<double>(p.pano_height());
  require(u_g >= 0.0 && u_g < wg && v_g >= 0.0 && v_g <= hg,
          "inverse_project_point: panorama coordinate outside frame");
  if (v_g <= hg / 2) return std::nullopt;
  const double alpha = std::numbers::pi * (v_g / hg - 0.5);
  // alpha = pi/2 at the nadir; tan overflows to a huge value there, so pin d.
  const double d = (v_g >= hg) ? 0.0 : p.focal() / std::tan(alpha);
  const double psi = std::numbers::pi * (1.0 - 2.0 * u_g / wg);
  const double u_s = ws / 2 - d * std::sin(psi);
  const double v_s = hs / 2 - d * std::cos(psi);
  // Rounding slack so frame-edge points survive the trigonometric round trip.
  constexpr double kSlack = 1e-9;
  if (!(u_s >= -kSlack && u_s <= ws - 1 + kSlack && v_s >= -kSlack && v_s <= hs - 1 + kSlack))
    return std::nullopt;
  return BevPoint{std::clamp(u_s, 0.0, ws - 1), std::clamp(v_s, 0.0, hs - 1)};
}

// Bilinear blend of the four neighbours of (x, y); writes channels() values.
inline void bilinear_sample(const ImageBuffer& img, double x, double y, std::span<float> out) {
  require(!img.empty(), "bilinear_sample: empty image");
  require(x >= 0.0 && x <= static_cast<double>(img.width() - 1) && y >= 0.0 &&
              y <= static_cast<double>(img.height() - 1),
          "bilinear_sample: coordinate out of range");
  require(out.size() >= img.channels(), "bilinear_sample: output span too small");
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
  const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  for (std::size_t c = 0; c < img.channels(); ++c) {
    const double top = (1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
    const double bottom = (1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
    out[c] = static_cast<float>((1 - fy) * top + fy * bottom);
  }
}

inline std::vector<float> bilinear_sample(const ImageBuffer& img, double x, double y) {
  std::vector<float> out(img.channels());
  bilinear_sample(img, x, y, out);
  return out;
}

namespace detail {

// Bilinear sample of a panorama that wraps horizontally (azimuth is periodic).
inline void sample_panorama(const ImageBuffer& pano, double x, double y, std::span<float> out) {
  const std::size_t w = pano.width();
  const auto x0 = static_cast<std::size_t>(std::floor(x)) % w;
  const std::size_t x1 = (x0 + 1) % w;
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t y1 = std::min(y0 + 1, pano.height() - 1);
  const double fx = x - std::floor(x);
  const double fy = y - static_cast<double>(y0);
  for (std::size_t c = 0; c < pano.channels(); ++c) {
    const double top = (1 - fx) * pano.at(x0, y0, c) + fx * pano.at(x1, y0, c);
    const double bottom = (1 - fx) * pano.at(x0, y1, c) + fx * pano.at(x1, y1, c);
    out[c] = static_cast<float>((1 - fy) * top + fy * bottom);
  }
}

}  // namespace detail

struct BevWarp {
  ImageBuffer image;
  ValidMask mask;
};

// Resamples a panorama onto the BEV grid. Pixels whose source lies at or
// above the horizon are masked out and set to 0.
inline BevWarp warp_panorama_to_bev(const ImageBuffer& pano, const ProjectionParams& p) {
  require(!pano.empty(), "warp_panorama_to_bev: empty panorama");
  require(pano.width() == p.pano_width() && pano.height() == p.pano_height(),
          "warp_panorama_to_bev: panorama dimensions do not match params");
  const std::size_t ws = p.bev_width();
  const std::size_t hs = p.bev_height();
  const double hg = static_cast<double>(p.pano_height());
  BevWarp out{ImageBuffer(ws, hs, pano.channels()), ValidMask(ws, hs)};
  parallel_for(0, hs, [&](std::size_t y) {
    float px[3];
    for (std::size_t x = 0; x < ws; ++x) {
      auto [u, v] = project_point(static_cast<double>(x), static_cast<double>(y), p);
      if (!(v > hg / 2)) continue;
      v = std::min(v, hg - 1);
      detail::sample_panorama(pano, u, v, px);
      for (std::size_t c = 0; c < pano.channels(); ++c)
        out.image.at(x, y, c) = std::clamp(px[c], 0.0f, 1.0f);
      out.mask.set(x, y, true);
    }
  });
  return out;
}

// Distance of BEV pixel (x, y) from the projection centre.
inline double bev_radius(double x, double y, const ProjectionParams& p) {
  return std::hypot(static_cast<double>(p.bev_width()) / 2 - x,
                    static_cast<double>(p.bev_height()) / 2 - y);
}

}  // namespace cvgl
