#include "cvgl/evalcli/cli.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "cvgl/core.hpp"
#include "cvgl/encoder/embedding.hpp"
#include "cvgl/evalcli/metrics.hpp"
#include "cvgl/geometry/projection.hpp"
#include "cvgl/io.hpp"
#include "cvgl/matcher/labels.hpp"
#include "cvgl/pipeline/stages.hpp"
#include "cvgl/synth/dataset.hpp"
#include "json.hpp"

namespace cvgl {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::optional<std::uint64_t> seed;

  // synth gen
  std::uint64_t gen_seed = 0;
  std::size_t scenes = 500;
  std::size_t bev = 256;
  std::string pano = "512x256";
  double fov = 0.7854;
  std::string gap_preset = "mild";
  double val_fraction = 0.2;

  // shared paths
  std::string out, config, model, world, labels, in, mask, run;

  // project
  std::size_t project_bev = 0;

  // embed
  std::string tower = "ground";
  std::string images;
  std::string split = "all";

  // match
  std::string grd, sat;
  double tau = 0.05;
  bool one_sided = false;

  // audit
  std::string gt;

  // train semi
  std::optional<double> gt_ratio;
};

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  require(x != std::string::npos, "expected WxH, got '" + s + "'");
  try {
    std::size_t used_w = 0, used_h = 0;
    const std::string ws = s.substr(0, x), hs = s.substr(x + 1);
    const auto w = std::stoull(ws, &used_w), h = std::stoull(hs, &used_h);
    require(used_w == ws.size() && used_h == hs.size() && w > 0 && h > 0, "expected WxH, got '" + s + "'");
    return {w, h};
  } catch (const std::logic_error&) {
    throw ContractError("expected WxH, got '" + s + "'");
  }
}

PipelineConfig load_config(const Options& o) {
  PipelineConfig cfg = read_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

class Timer {
 public:
  void lap(const std::string& name) {
    const auto now = std::chrono::steady_clock::now();
    laps_[name] = std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }
  // Wall-clock times are kept out of report.json so that reports stay
  // byte-identical between runs.
  void write(const fs::path& dir) const { io::write_text(dir / "timing.json", laps_.dump(2) + "\n"); }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
  nlohmann::ordered_json laps_ = nlohmann::ordered_json::object();
};

std::vector<std::size_t> split_scenes(const synth::Dataset& ds, const std::string& split) {
  if (split == "train") return ds.world.train;
  if (split == "val") return ds.world.val;
  require(split == "all", "--split must be train, val or all");
  return identity_pairing(ds.size());
}

// ---------------------------------------------------------------------------

void cmd_synth_gen(const Options& o, std::ostream& out) {
  const auto [w, h] = parse_size(o.pano);
  const ProjectionParams params(w, h, o.bev, o.bev, o.fov);
  synth::RenderSettings render;
  render.gap_preset = o.gap_preset;
  const std::uint64_t seed = o.seed ? *o.seed : o.gen_seed;
  const synth::Dataset ds =
      synth::build_dataset(synth::generate_world(seed, o.scenes, params, {}, o.val_fraction), render);
  synth::write_world_dir(ds, o.out);
  out << "wrote " << ds.size() << " scenes to " << o.out << "\n";
}

void cmd_project(const Options& o, std::ostream& out) {
  const ImageBuffer pano = read_cvim(o.in);
  const std::size_t bev = o.project_bev ? o.project_bev : pano.height();
  const ProjectionParams params(pano.width(), pano.height(), bev, bev, o.fov);
  const BevWarp warp = warp_panorama_to_bev(pano, params);
  write_cvim(o.out, warp.image);
  if (!o.mask.empty()) {
    ImageBuffer m(bev, bev, 1);
    for (std::size_t y = 0; y < bev; ++y)
      for (std::size_t x = 0; x < bev; ++x) m.at(x, y, 0) = warp.mask(x, y) ? 1.0f : 0.0f;
    write_cvim(o.mask, m);
  }
  out << "projected " << pano.width() << "x" << pano.height() << " -> " << bev << "x" << bev << " ("
      << warp.mask.count() << " valid pixels)\n";
}

void cmd_embed(const Options& o, std::ostream& out) {
  require(o.tower == "ground" || o.tower == "overhead", "--tower must be ground or overhead");
  const std::string images = o.images.empty() ? (o.tower == "ground" ? "grd" : "sat") : o.images;
  require(images == "grd" || images == "sat" || images == "fake", "--images must be grd, sat or fake");
  require((o.tower == "ground") == (images == "grd"), "--images " + images + " does not belong to the " + o.tower + " tower");
  const TwoTower models = read_cvmd(o.model);
  const synth::Dataset ds = synth::load_world_dir(o.world);
  const auto& set = images == "grd" ? ds.ground : images == "sat" ? ds.satellite : ds.fake;
  std::vector<const ImageBuffer*> ptrs;
  std::vector<std::uint64_t> ids;
  for (std::size_t i : split_scenes(ds, o.split)) {
    ptrs.push_back(&set[i]);
    ids.push_back(ds.world.scenes[i].scene_id);
  }
  require(!ptrs.empty(), "embed: split " + o.split + " is empty");
  const EmbeddingMatrix e = embed_all(ptrs, o.tower == "ground" ? models.ground : models.overhead, ids);
  write_cveb(o.out, e);
  out << "embedded " << e.n() << " images (d = " << e.d() << ")\n";
}

void cmd_match(const Options& o, std::ostream& out) {
  const EmbeddingMatrix g = read_cveb(o.grd);
  const EmbeddingMatrix s = read_cveb(o.sat);
  require(g.d() == s.d(), "match: embedding dimensions differ");
  PseudoLabelSet labels = threshold_filter(mutual_match(similarity_matrix(g, s)), o.tau, o.one_sided);
  for (auto& r : labels.records) {
    r.g = g.ids()[r.g];
    r.s = s.ids()[r.s];
  }
  write_labels(o.out, labels);
  out << "kept " << labels.size() << " mutual matches at tau = " << o.tau << "\n";
}

void cmd_audit(const Options& o, std::ostream& out) {
  const PseudoLabelSet labels = read_labels(o.labels);
  const synth::WorldManifest m = synth::read_manifest(o.gt);
  // Scene id i's ground panorama belongs to overhead tile i.
  std::vector<std::size_t> gt = identity_pairing(m.scenes);
  const Audit a = label_audit(labels, gt);
  nlohmann::ordered_json j{{"labels", a.total}, {"correct", a.correct}, {"precision", a.precision()}};
  out << j.dump() << "\n";
}

void finish_run(const RunWriter& w, const std::vector<StageReport>& reports, Timer& t, std::ostream& out) {
  w.report(reports);
  t.lap("total");
  t.write(w.dir());
  const RetrievalReport& r = reports.back().retrieval;
  for (const auto& s : reports)
    for (const auto& warning : s.warnings) out << "warning: " << warning << "\n";
  out << reports.back().stage << ": " << r.split << " R@1 = " << r.r_at(1) << " over " << r.n_queries << " queries\n";
}

void cmd_cold_start(const Options& o, std::ostream& out) {
  Timer t;
  const Experiment ex = make_experiment(load_config(o));
  t.lap("load");
  const RunWriter w(o.out);
  w.config(ex.cfg);
  const StageResult cold = cold_start_stage(ex, initial_models(ex));
  t.lap("cold_start");
  w.model(0, cold.models);
  finish_run(w, {cold.report}, t, out);
}

void cmd_curriculum(const Options& o, std::ostream& out) {
  Timer t;
  PipelineConfig cfg = load_config(o);
  if (!o.model.empty()) cfg.init_model = o.model;
  const Experiment ex = make_experiment(cfg);
  t.lap("load");
  const PseudoLabelSet labels = labels_to_train_rows(read_labels(o.labels), ex);
  const RunWriter w(o.out);
  w.config(ex.cfg);
  const StageResult semi = semi_supervised_stage(ex, initial_models(ex), labels, {}, &w, "curriculum");
  t.lap("curriculum");
  finish_run(w, {semi.report}, t, out);
}

void cmd_semi(const Options& o, std::ostream& out) {
  Timer t;
  PipelineConfig cfg = load_config(o);
  if (o.gt_ratio) cfg.gt_ratio = *o.gt_ratio;
  const Experiment ex = make_experiment(cfg);
  t.lap("load");
  const RunWriter w(o.out);
  const RunResult run = run_pipeline(ex, &w);
  t.lap("pipeline");
  finish_run(w, run.reports, t, out);
}

void cmd_eval(const Options& o, std::ostream& out) {
  const Experiment ex = make_experiment(load_config(o));
  const TwoTower models = read_cvmd(o.model);
  require(models.ground.spec() == ex.cfg.ground_spec() && models.overhead.spec() == ex.cfg.overhead_spec(),
          o.model + ": checkpoint towers do not match the configured encoder");
  const RetrievalReport r = evaluate(models, ex, o.split);
  const std::string text = to_json(r).dump(2) + "\n";
  if (!o.out.empty()) io::write_text(o.out, text);
  out << text;
}

void cmd_report_trend(const Options& o, std::ostream& out) {
  const fs::path report = fs::path(o.run) / "report.json";
  const auto reports = parse_stage_reports(io::read_text(report), report.string());
  emit_trend_csv(reports, o.out);
  out << "wrote " << o.out << "\n";
}

// ---------------------------------------------------------------------------

struct Command {
  CLI::App* app;
  std::function<void(const Options&, std::ostream&)> run;
};

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Cross-view geo-localization toolkit: synthetic worlds, training and evaluation", "cvgl"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", o.seed, "override the training seed (synth gen: the world seed)");
  std::vector<Command> commands;

  auto* synth = app.add_subcommand("synth", "synthetic world generation")->require_subcommand(1);
  auto* gen = synth->add_subcommand("gen", "generate a world directory");
  gen->add_option("--seed", o.gen_seed, "world seed");
  gen->add_option("--scenes", o.scenes, "scene count")->check(CLI::Range(std::size_t{2}, std::size_t{1} << 24));
  gen->add_option("--bev", o.bev, "overhead tile size in pixels")->check(CLI::PositiveNumber);
  gen->add_option("--pano", o.pano, "panorama size WxH with W = 2H");
  gen->add_option("--fov", o.fov, "half field of view in radians");
  gen->add_option("--gap-preset", o.gap_preset, "domain gap of the fake images")
      ->check(CLI::IsMember({"none", "mild", "hard"}));
  gen->add_option("--val-fraction", o.val_fraction, "share of scenes held out for validation");
  gen->add_option("--out", o.out, "output directory")->required();
  commands.push_back({gen, cmd_synth_gen});

  auto* project = app.add_subcommand("project", "warp a panorama CVIM onto the bird's-eye grid");
  project->add_option("--in", o.in, "panorama .cvim")->required();
  project->add_option("--bev", o.project_bev, "output size (default: panorama height)");
  project->add_option("--fov", o.fov, "half field of view in radians");
  project->add_option("--mask", o.mask, "also write the valid mask as a 1-channel .cvim");
  project->add_option("--out", o.out, "output .cvim")->required();
  commands.push_back({project, cmd_project});

  auto* embed = app.add_subcommand("embed", "embed the images of a world with one tower");
  embed->add_option("--model", o.model, "checkpoint .cvmd")->required();
  embed->add_option("--world", o.world, "world directory")->required();
  embed->add_option("--tower", o.tower, "ground or overhead")->check(CLI::IsMember({"ground", "overhead"}));
  embed->add_option("--images", o.images, "grd, sat or fake (default: grd / sat by tower)")
      ->check(CLI::IsMember({"grd", "sat", "fake"}));
  embed->add_option("--split", o.split, "train, val or all")->check(CLI::IsMember({"train", "val", "all"}));
  embed->add_option("--out", o.out, "output .cveb")->required();
  commands.push_back({embed, cmd_embed});

  auto* match = app.add_subcommand("match", "mutual nearest-neighbour pseudo-labels");
  match->add_option("--grd", o.grd, "ground embeddings .cveb")->required();
  match->add_option("--sat", o.sat, "overhead embeddings .cveb")->required();
  match->add_option("--tau", o.tau, "minimum similarity gap")->check(CLI::NonNegativeNumber);
  match->add_flag("--one-sided", o.one_sided, "use the ground-side gap only");
  match->add_option("--out", o.out, "output labels .jsonl")->required();
  commands.push_back({match, cmd_match});

  auto* audit = app.add_subcommand("audit", "precision of a label file against a world");
  audit->add_option("--labels", o.labels, "labels .jsonl")->required();
  audit->add_option("--gt", o.gt, "world.manifest")->required();
  commands.push_back({audit, cmd_audit});

  auto* train = app.add_subcommand("train", "training stages")->require_subcommand(1);
  auto* cold = train->add_subcommand("cold-start", "train on ground / fake pairs");
  cold->add_option("--config", o.config, "run.cfg")->required();
  cold->add_option("--out", o.out, "run directory")->required();
  commands.push_back({cold, cmd_cold_start});
  auto* curriculum = train->add_subcommand("curriculum", "self-training from a label file");
  curriculum->add_option("--config", o.config, "run.cfg")->required();
  curriculum->add_option("--labels", o.labels, "labels .jsonl (scene ids)")->required();
  curriculum->add_option("--model", o.model, "starting checkpoint (default: init_model from the config)");
  curriculum->add_option("--out", o.out, "run directory")->required();
  commands.push_back({curriculum, cmd_curriculum});
  auto* semi = train->add_subcommand("semi", "cold start, then pseudo-label or ground-truth fine-tuning");
  semi->add_option("--config", o.config, "run.cfg")->required();
  semi->add_option("--gt-ratio", o.gt_ratio, "share of training pairs with ground truth")
      ->check(CLI::Range(0.0, 1.0));
  semi->add_option("--out", o.out, "run directory")->required();
  commands.push_back({semi, cmd_semi});

  auto* eval = app.add_subcommand("eval", "retrieval recall of a checkpoint");
  eval->add_option("--config", o.config, "run.cfg naming the world")->required();
  eval->add_option("--model", o.model, "checkpoint .cvmd")->required();
  eval->add_option("--split", o.split, "train or val")->check(CLI::IsMember({"train", "val"}))->default_val("val");
  eval->add_option("--out", o.out, "also write the report JSON here");
  commands.push_back({eval, cmd_eval});

  auto* report = app.add_subcommand("report", "reporting")->require_subcommand(1);
  auto* trend = report->add_subcommand("trend", "per-round CSV from a run directory");
  trend->add_option("--run", o.run, "run directory")->required();
  trend->add_option("--out", o.out, "output .csv")->required();
  commands.push_back({trend, cmd_report_trend});

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    for (const auto& c : commands)
      if (c.app->parsed()) {
        c.run(o, out);
        return kExitOk;
      }
    err << app.help();
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace cvgl
