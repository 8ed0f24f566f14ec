#pragma once

// Materialized image sets for a World (ground panoramas, real overhead tiles,
// projected fakes) plus the on-disk world directory written by `synth gen`.

#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/geometry/image.hpp"
#include "cvgl/geometry/projection.hpp"
#include "cvgl/io.hpp"
#include "cvgl/synth/domain_gap.hpp"
#include "cvgl/synth/world.hpp"

namespace cvgl::synth {

struct RenderSettings {
  std::string gap_preset = "mild";
  float sky_intensity = 0.9f;
  float far_field = 0.5f;
  int shift_max = 0;
  bool rotate = false;
};

// All images are held on the 8-bit CVIM grid so that an in-memory dataset and
// one reloaded from disk are identical.
struct Dataset {
  World world;
  RenderSettings render;
  std::vector<ImageBuffer> ground;
  std::vector<ImageBuffer> satellite;
  std::vector<ImageBuffer> fake;

  std::size_t size() const { return ground.size(); }
};

inline DomainGapConfig fake_gap_config(const Dataset& ds, std::size_t scene) {
  DomainGapConfig cfg = gap_preset(ds.render.gap_preset, ds.world.params.bev_width());
  cfg.shift_max = ds.render.shift_max;
  cfg.rotate = ds.render.rotate;
  cfg.rng_seed = derive_seed(ds.world.seed, scene, 0xfa4eULL);
  return cfg;
}

// Projected, domain-gapped fake for one ground panorama.
inline ImageBuffer make_fake(const ImageBuffer& ground, const ProjectionParams& params,
                             const DomainGapConfig& gap) {
  return quantized(apply_domain_gap(warp_panorama_to_bev(ground, params).image, gap));
}

inline Dataset build_dataset(World world, const RenderSettings& render = {}) {
  Dataset ds{std::move(world), render, {}, {}, {}};
  const std::size_t n = ds.world.size();
  ds.ground.resize(n);
  ds.satellite.resize(n);
  ds.fake.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Scene& scene = ds.world.scenes[i];
    ds.satellite[i] = quantized(scene.overhead);
    ds.ground[i] = quantized(render_panorama(scene, ds.world.params, render.sky_intensity, render.far_field));
    ds.fake[i] = make_fake(ds.ground[i], ds.world.params, fake_gap_config(ds, i));
  }
  return ds;
}

// Replaces fakes with externally produced images fake_<id>.cvim from dir.
inline void load_external_fakes(Dataset& ds, const std::filesystem::path& dir) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ImageBuffer img = read_cvim(dir / ("fake_" + std::to_string(ds.world.scenes[i].scene_id) + ".cvim"));
    require(img.width() == ds.world.params.bev_width() && img.height() == ds.world.params.bev_height() &&
                img.channels() == ds.satellite[i].channels(),
            "external fake image has wrong dimensions");
    ds.fake[i] = std::move(img);
  }
}

// ---------------------------------------------------------------------------
// world.manifest

namespace detail {

inline std::string join_indices(const std::vector<std::size_t>& v) {
  std::ostringstream ss;
  for (std::size_t i = 0; i < v.size(); ++i) ss << (i ? "," : "") << v[i];
  return ss.str();
}

inline std::vector<std::size_t> split_indices(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(tok)));
    } catch (const std::exception&) {
      throw ContractError("manifest: bad index '" + tok + "'");
    }
  }
  return out;
}

}  // namespace detail

struct WorldManifest {
  std::uint64_t seed = 0;
  std::size_t scenes = 0;
  std::size_t pano_width = 0, pano_height = 0, bev_width = 0, bev_height = 0;
  double fov = 0;
  RenderSettings render;
  std::vector<std::size_t> train, val;
};

inline std::string format_manifest(const WorldManifest& m) {
  std::ostringstream ss;
  ss.precision(17);
  ss << "format = cvgl-world\n"
     << "version = 1\n"
     << "seed = " << m.seed << "\n"
     << "scenes = " << m.scenes << "\n"
     << "pano_width = " << m.pano_width << "\n"
     << "pano_height = " << m.pano_height << "\n"
     << "bev_width = " << m.bev_width << "\n"
     << "bev_height = " << m.bev_height << "\n"
     << "fov = " << m.fov << "\n"
     << "gap_preset = " << m.render.gap_preset << "\n"
     << "sky_intensity = " << m.render.sky_intensity << "\n"
     << "far_field = " << m.render.far_field << "\n"
     << "shift_max = " << m.render.shift_max << "\n"
     << "rotate = " << (m.render.rotate ? 1 : 0) << "\n"
     << "train = " << detail::join_indices(m.train) << "\n"
     << "val = " << detail::join_indices(m.val) << "\n";
  return ss.str();
}

inline WorldManifest parse_manifest(const std::string& text, const std::string& source) {
  WorldManifest m;
  bool have_format = false;
  try {
    for (const auto& [k, v] : io::parse_key_values(text, source)) {
      if (k == "format") {
        if (v != "cvgl-world") throw ContractError(source + ": not a world manifest");
        have_format = true;
      } else if (k == "version") {
        if (v != "1") throw ContractError(source + ": unsupported manifest version " + v);
      } else if (k == "seed") m.seed = std::stoull(v);
      else if (k == "scenes") m.scenes = std::stoull(v);
      else if (k == "pano_width") m.pano_width = std::stoull(v);
      else if (k == "pano_height") m.pano_height = std::stoull(v);
      else if (k == "bev_width") m.bev_width = std::stoull(v);
      else if (k == "bev_height") m.bev_height = std::stoull(v);
      else if (k == "fov") m.fov = std::stod(v);
      else if (k == "gap_preset") m.render.gap_preset = v;
      else if (k == "sky_intensity") m.render.sky_intensity = std::stof(v);
      else if (k == "far_field") m.render.far_field = std::stof(v);
      else if (k == "shift_max") m.render.shift_max = std::stoi(v);
      else if (k == "rotate") m.render.rotate = v == "1" || v == "true";
      else if (k == "train") m.train = detail::split_indices(v);
      else if (k == "val") m.val = detail::split_indices(v);
      else throw ContractError(source + ": unknown manifest key " + k);
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ContractError*>(&e) || dynamic_cast<const ConfigError*>(&e)) throw;
    throw ContractError(source + ": malformed manifest value (" + e.what() + ")");
  }
  if (!have_format) throw ContractError(source + ": missing format line");
  if (m.train.size() + m.val.size() != m.scenes)
    throw ContractError(source + ": split does not cover all scenes");
  return m;
}

inline WorldManifest manifest_of(const Dataset& ds) {
  const auto& p = ds.world.params;
  return {ds.world.seed, ds.world.size(), p.pano_width(), p.pano_height(), p.bev_width(), p.bev_height(),
          p.fov(), ds.render, ds.world.train, ds.world.val};
}

inline WorldManifest read_manifest(const std::filesystem::path& path) {
  return parse_manifest(io::read_text(path), path.string());
}

inline void write_world_dir(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  io::write_text(dir / "world.manifest", format_manifest(manifest_of(ds)));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string id = std::to_string(ds.world.scenes[i].scene_id);
    write_cvim(dir / ("sat_" + id + ".cvim"), ds.satellite[i]);
    write_cvim(dir / ("grd_" + id + ".cvim"), ds.ground[i]);
    write_cvim(dir / ("fake_" + id + ".cvim"), ds.fake[i]);
  }
}

// Loads a world directory. Overhead tiles come from sat_<id>.cvim; layout
// seeds are not persisted and read back as 0.
inline Dataset load_world_dir(const std::filesystem::path& dir) {
  const WorldManifest m = read_manifest(dir / "world.manifest");
  World world{m.seed, {}, ProjectionParams(m.pano_width, m.pano_height, m.bev_width, m.bev_height, m.fov),
              m.train, m.val};
  Dataset ds{std::move(world), m.render, {}, {}, {}};
  for (std::size_t i = 0; i < m.scenes; ++i) {
    const std::string id = std::to_string(i);
    ImageBuffer sat = read_cvim(dir / ("sat_" + id + ".cvim"));
    ImageBuffer grd = read_cvim(dir / ("grd_" + id + ".cvim"));
    ImageBuffer fake = read_cvim(dir / ("fake_" + id + ".cvim"));
    require(sat.width() == m.bev_width && sat.height() == m.bev_height, "sat_" + id + ": wrong size");
    require(grd.width() == m.pano_width && grd.height() == m.pano_height, "grd_" + id + ": wrong size");
    require(fake.width() == m.bev_width && fake.height() == m.bev_height, "fake_" + id + ": wrong size");
    ds.world.scenes.push_back(Scene{i, sat, 0});
    ds.satellite.push_back(std::move(sat));
    ds.ground.push_back(std::move(grd));
    ds.fake.push_back(std::move(fake));
  }
  return ds;
}

}  // namespace cvgl::synth
