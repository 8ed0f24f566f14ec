#pragma once

// The training pipeline: cold start on ground-fake pairs, pseudo-label
// bootstrap, curriculum-refreshed semi-supervised training, and the
// ground-truth-ratio variant, plus the run directory they write.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/encoder/augment.hpp"
#include "cvgl/encoder/train.hpp"
#include "cvgl/evalcli/metrics.hpp"
#include "cvgl/matcher/labels.hpp"
#include "cvgl/matcher/similarity.hpp"
#include "cvgl/pipeline/config.hpp"
#include "cvgl/synth/dataset.hpp"

namespace cvgl {

// A dataset plus the un-augmented pooled features every stage reuses.
struct Experiment {
  PipelineConfig cfg;
  synth::Dataset data;
  Matrix ground_features;    // all scenes, ground-tower grid
  Matrix satellite_features; // all scenes, overhead-tower grid
  Matrix fake_features;      // all scenes, overhead-tower grid

  const std::vector<std::size_t>& train() const { return data.world.train; }
  const std::vector<std::size_t>& val() const { return data.world.val; }
  std::string config_hash() const { return io::hex64(cfg.hash()); }
};

namespace detail {

inline std::vector<const ImageBuffer*> pointers(const std::vector<ImageBuffer>& v) {
  std::vector<const ImageBuffer*> out;
  out.reserve(v.size());
  for (const auto& i : v) out.push_back(&i);
  return out;
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Embeds pooled features in fixed chunks so results do not depend on the
// worker count.
inline Matrix embed_rows(const EncoderModel& model, const Matrix& features) {
  constexpr std::size_t kChunk = 64;
  const auto n = static_cast<std::size_t>(features.rows());
  Matrix out(features.rows(), static_cast<Eigen::Index>(model.spec().output_dim()));
  parallel_for(0, (n + kChunk - 1) / kChunk, [&](std::size_t c) {
    const auto begin = static_cast<Eigen::Index>(c * kChunk);
    const auto rows = static_cast<Eigen::Index>(std::min(kChunk, n - c * kChunk));
    out.middleRows(begin, rows) = model.embed_features(features.middleRows(begin, rows));
  });
  return out;
}

inline std::uint64_t tag(const char* s) { return io::fnv1a(s); }

}  // namespace detail

inline synth::Dataset load_or_generate(const PipelineConfig& cfg) {
  if (!cfg.world.empty()) return synth::load_world_dir(cfg.world);
  const auto params = ProjectionParams::make(cfg.pano_height, cfg.bev_size, cfg.fov);
  synth::RenderSettings render;
  render.gap_preset = cfg.gap_preset;
  render.shift_max = cfg.shift_max;
  render.rotate = cfg.rotate;
  return synth::build_dataset(synth::generate_world(cfg.world_seed, cfg.world_scenes, params, {}, cfg.val_fraction),
                              render);
}

inline Experiment make_experiment(const PipelineConfig& cfg, synth::Dataset data) {
  cfg.validate();
  require(!data.world.train.empty() && !data.world.val.empty(), "experiment: world needs train and val scenes");
  const EncoderModel g(TowerId::ground, cfg.ground_spec());
  const EncoderModel o(TowerId::overhead, cfg.overhead_spec());
  Experiment ex{cfg, std::move(data), {}, {}, {}};
  ex.ground_features = g.pool(detail::pointers(ex.data.ground));
  ex.satellite_features = o.pool(detail::pointers(ex.data.satellite));
  ex.fake_features = o.pool(detail::pointers(ex.data.fake));
  return ex;
}

inline Experiment make_experiment(const PipelineConfig& cfg) { return make_experiment(cfg, load_or_generate(cfg)); }

// A checkpoint when init_model is set; otherwise a fresh seeded init whose
// first layers are standardized on the training images (ground panoramas
// for the ground tower, real and fake overhead images for the other).
inline TwoTower initial_models(const Experiment& ex) {
  const PipelineConfig& cfg = ex.cfg;
  if (!cfg.init_model.empty()) {
    TwoTower m = read_cvmd(cfg.init_model);
    require(m.ground.spec() == cfg.ground_spec() && m.overhead.spec() == cfg.overhead_spec(),
            cfg.init_model + ": checkpoint towers do not match the configured encoder");
    return m;
  }
  TwoTower m = TwoTower::initialized(cfg.ground_spec(), cfg.overhead_spec(), cfg.loss(),
                                     derive_seed(cfg.seed, detail::tag("init")));
  const Matrix sat = detail::gather_rows(ex.satellite_features, ex.train());
  const Matrix fake = detail::gather_rows(ex.fake_features, ex.train());
  Matrix overhead(sat.rows() + fake.rows(), sat.cols());
  overhead << sat, fake;
  m.ground.standardize_inputs(detail::gather_rows(ex.ground_features, ex.train()));
  m.overhead.standardize_inputs(overhead);
  return m;
}

// ---------------------------------------------------------------------------

// Ground rows embedded with the ground tower against real overhead rows of
// the same scenes; ground row i's true match is overhead row i.
inline SimilarityMatrix split_similarity(const TwoTower& m, const Experiment& ex, std::span<const std::size_t> scenes) {
  const Matrix g = detail::embed_rows(m.ground, detail::gather_rows(ex.ground_features, scenes));
  const Matrix s = detail::embed_rows(m.overhead, detail::gather_rows(ex.satellite_features, scenes));
  return similarity_matrix(g, s);
}

inline RetrievalReport evaluate(const TwoTower& m, const Experiment& ex, const std::string& split = "val") {
  require(split == "val" || split == "train", "evaluate: split must be train or val");
  const auto& scenes = split == "val" ? ex.val() : ex.train();
  RetrievalReport r = retrieval_report(split_similarity(m, ex, scenes), identity_pairing(scenes.size()),
                                       ex.cfg.eval_ks, ex.cfg.eval_percent, split);
  r.config_hash = ex.config_hash();
  return r;
}

// ---------------------------------------------------------------------------
// Run directory: config.snapshot, model_round_<r>.cvmd, labels_round_<r>.jsonl
// (scene ids on both sides), report.json.

class RunWriter {
 public:
  explicit RunWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
  }

  const std::filesystem::path& dir() const { return dir_; }

  void config(const PipelineConfig& cfg) const { io::write_text(dir_ / "config.snapshot", format_config(cfg)); }
  void model(int round, const TwoTower& m) const { write_cvmd(dir_ / model_name(round), m); }
  void labels(int round, const PseudoLabelSet& rows, const Experiment& ex) const {
    PseudoLabelSet ids = rows;
    for (auto& r : ids.records) {
      r.g = ex.data.world.scenes[ex.train()[r.g]].scene_id;
      r.s = ex.data.world.scenes[ex.train()[r.s]].scene_id;
    }
    write_labels(dir_ / labels_name(round), ids);
  }
  void report(const std::vector<StageReport>& reports) const {
    io::write_text(dir_ / "report.json", format_stage_reports(reports));
  }

  static std::string model_name(int round) { return "model_round_" + std::to_string(round) + ".cvmd"; }
  static std::string labels_name(int round) { return "labels_round_" + std::to_string(round) + ".jsonl"; }

 private:
  std::filesystem::path dir_;
};

// Converts a label file keyed by scene ids into train-row labels.
inline PseudoLabelSet labels_to_train_rows(const PseudoLabelSet& ids, const Experiment& ex) {
  std::vector<std::size_t> row_of(ex.data.size(), SIZE_MAX);
  for (std::size_t r = 0; r < ex.train().size(); ++r) row_of[ex.data.world.scenes[ex.train()[r]].scene_id] = r;
  PseudoLabelSet out = ids;
  for (auto& r : out.records) {
    require(r.g < row_of.size() && row_of[r.g] != SIZE_MAX, "labels: ground id " + std::to_string(r.g) + " is not a training scene");
    require(r.s < row_of.size() && row_of[r.s] != SIZE_MAX, "labels: satellite id " + std::to_string(r.s) + " is not a training scene");
    r.g = row_of[r.g];
    r.s = row_of[r.s];
  }
  out.validate(ex.train().size(), ex.train().size());
  return out;
}

// ---------------------------------------------------------------------------

// Raised when a semi-supervised stage has no positive pairs to train on.
class NoLabelsError : public ContractError {
 public:
  using ContractError::ContractError;
};

struct StageResult {
  TwoTower models;
  StageReport report;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> batches(std::vector<std::size_t> items, std::size_t batch_size, Rng& rng) {
  rng.shuffle(items);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < items.size(); b += batch_size)
    out.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(b),
                     items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), b + batch_size)));
  // A trailing singleton has no in-batch negative; fold it into the previous batch.
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

// Two augmented views of each image, pooled.
inline std::pair<Matrix, Matrix> augmented_views(const EncoderModel& tower, const std::vector<ImageBuffer>& images,
                                                 std::span<const std::size_t> scenes, const AugmentationConfig& aug,
                                                 std::uint64_t epoch_seed) {
  std::vector<ImageBuffer> views(2 * scenes.size());
  parallel_for(0, views.size(), [&](std::size_t i) {
    const std::size_t scene = scenes[i / 2];
    views[i] = augment(images[scene], aug, derive_seed(epoch_seed, scene, i % 2));
  });
  std::vector<const ImageBuffer*> a, b;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    a.push_back(&views[2 * i]);
    b.push_back(&views[2 * i + 1]);
  }
  return {tower.pool(a), tower.pool(b)};
}

}  // namespace detail

// Intra-view epochs contrast augmented views of each tower's own images;
// cross-view epochs add lambda times the ground-fake contrastive term.
inline StageResult cold_start_stage(const Experiment& ex, TwoTower models) {
  const PipelineConfig& cfg = ex.cfg;
  StageReport report;
  report.stage = "cold-start";
  report.config_hash = ex.config_hash();
  OptimizerState opt;
  AugmentationConfig aug = cfg.augment;
  aug.rng_seed = derive_seed(cfg.seed, detail::tag("augment"));
  const int total = cfg.intra_epochs + cfg.cross_epochs;
  for (int epoch = 0; epoch < total; ++epoch) {
    const bool cross = epoch >= cfg.intra_epochs && cfg.cross_weight > 0;
    Rng rng(derive_seed(cfg.seed, detail::tag("cold-start"), static_cast<std::uint64_t>(epoch)));
    const auto ground_batches = detail::batches(ex.train(), cfg.batch_size, rng);
    const auto overhead_batches = detail::batches(ex.train(), cfg.batch_size, rng);
    double sum = 0;
    for (std::size_t b = 0; b < ground_batches.size(); ++b) {
      const auto& gb = ground_batches[b];
      const auto& ob = overhead_batches[b];
      const std::uint64_t es = derive_seed(aug.rng_seed, static_cast<std::uint64_t>(epoch), b);
      auto [g1, g2] = detail::augmented_views(models.ground, ex.data.ground, gb, aug, derive_seed(es, 1));
      auto [o1, o2] = detail::augmented_views(models.overhead, ex.data.satellite, ob, aug, derive_seed(es, 2));
      std::vector<LossTerm> terms;
      terms.push_back({TowerId::ground, std::move(g1), TowerId::ground, std::move(g2),
                       pairs_from_bijection(identity_pairing(gb.size())), 1.0});
      terms.push_back({TowerId::overhead, std::move(o1), TowerId::overhead, std::move(o2),
                       pairs_from_bijection(identity_pairing(ob.size())), 1.0});
      if (cross)
        terms.push_back({TowerId::ground, detail::gather_rows(ex.ground_features, gb), TowerId::overhead,
                         detail::gather_rows(ex.fake_features, gb), pairs_from_bijection(identity_pairing(gb.size())),
                         cfg.cross_weight});
      const auto value = loss_gradient(models, terms);
      optimizer_step(models, value.grad, opt, cfg.lr, cfg.weight_decay);
      sum += value.loss;
    }
    report.epoch_losses.push_back(sum / static_cast<double>(ground_batches.size()));
  }
  report.retrieval = evaluate(models, ex);
  return {std::move(models), std::move(report)};
}

struct Bootstrap {
  PseudoLabelSet labels;
  Audit audit;
  std::vector<std::string> warnings;
};

// Mutual matches between all training ground and overhead images, kept when
// their gap exceeds tau0. Rows index the training split on both sides.
inline Bootstrap pseudo_label_bootstrap(const TwoTower& models, const Experiment& ex, double tau0) {
  Bootstrap b;
  b.labels = threshold_filter(mutual_match(split_similarity(models, ex, ex.train())), tau0, ex.cfg.one_sided);
  b.audit = label_audit(b.labels, identity_pairing(ex.train().size()));
  if (b.labels.empty()) b.warnings.push_back("bootstrap produced no pseudo-labels at tau0 = " + detail::fmt(tau0));
  return b;
}

// Ground-truth pairs for a seeded gt_ratio share of the training scenes,
// at least one when gt_ratio > 0.
inline PseudoLabelSet ground_truth_labels(const Experiment& ex, double gt_ratio) {
  PseudoLabelSet out;
  if (gt_ratio <= 0) return out;
  const std::size_t n = ex.train().size();
  const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(gt_ratio * static_cast<double>(n))), 1, n);
  Rng rng(derive_seed(ex.cfg.seed, detail::tag("gt-sample")));
  auto rows = rng.sample_without_replacement(n, k);
  std::sort(rows.begin(), rows.end());
  for (std::size_t r : rows) out.records.push_back({r, r, kInfiniteGap, kInfiniteGap, 0});
  return out;
}

namespace detail {

inline RoundRecord round_record(int round, double threshold, const PseudoLabelSet& labels, std::size_t frozen,
                                const TwoTower& m, const Experiment& ex) {
  const Audit a = label_audit(labels, identity_pairing(ex.train().size()));
  return {round, threshold, a.total, a.correct, frozen, evaluate(m, ex).r_at(1)};
}

// Unlabeled rows sampled without replacement from rows outside `used`.
inline std::vector<std::size_t> pad_rows(std::size_t n, const std::vector<bool>& used, std::size_t count, Rng& rng) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n; ++i)
    if (!used[i]) pool.push_back(i);
  count = std::min(count, pool.size());
  std::vector<std::size_t> out;
  for (std::size_t k : rng.sample_without_replacement(pool.size(), count)) out.push_back(pool[k]);
  return out;
}

inline double semi_epoch(TwoTower& models, OptimizerState& opt, const Experiment& ex, const PseudoLabelSet& labels,
                         int epoch) {
  const PipelineConfig& cfg = ex.cfg;
  const double lr = cfg.lr_decay ? cfg.semi_lr * (1.0 - static_cast<double>(epoch) / cfg.semi_epochs) : cfg.semi_lr;
  const std::size_t n = ex.train().size();
  Rng rng(derive_seed(cfg.seed, tag("semi"), static_cast<std::uint64_t>(epoch)));
  std::vector<bool> labeled_g(n, false), labeled_s(n, false);
  for (const auto& r : labels.records) labeled_g[r.g] = labeled_s[r.s] = true;
  const auto order = batches(identity_pairing(labels.size()), cfg.batch_size, rng);
  double sum = 0;
  for (const auto& batch : order) {
    std::vector<std::size_t> grows, srows;
    for (std::size_t k : batch) {
      grows.push_back(ex.train()[labels.records[k].g]);
      srows.push_back(ex.train()[labels.records[k].s]);
    }
    for (std::size_t r : pad_rows(n, labeled_g, cfg.unlabeled_pad, rng)) grows.push_back(ex.train()[r]);
    for (std::size_t r : pad_rows(n, labeled_s, cfg.unlabeled_pad, rng)) srows.push_back(ex.train()[r]);
    if (grows.size() < 2 || srows.size() < 2) continue;
    const std::vector<LossTerm> terms{{TowerId::ground, gather_rows(ex.ground_features, grows), TowerId::overhead,
                                       gather_rows(ex.satellite_features, srows),
                                       pairs_from_bijection(identity_pairing(batch.size())), 1.0}};
    const auto value = loss_gradient(models, terms);
    optimizer_step(models, value.grad, opt, lr, cfg.weight_decay);
    sum += value.loss;
  }
  return order.empty() ? 0.0 : sum / static_cast<double>(order.size());
}

}  // namespace detail

// Trains on labeled pairs padded with unlabeled negatives. Every
// refresh_every epochs the training images are re-embedded and, while
// curriculum rounds remain, the labels are rebuilt at the next threshold.
// `seed_labels` must already contain `frozen`.
inline StageResult semi_supervised_stage(const Experiment& ex, TwoTower models, const PseudoLabelSet& seed_labels,
                                         const PseudoLabelSet& frozen, const RunWriter* writer = nullptr,
                                         const std::string& stage = "semi-supervised") {
  const PipelineConfig& cfg = ex.cfg;
  if (seed_labels.empty())
    throw NoLabelsError(stage + ": no positive pairs (empty pseudo-label set and no ground-truth labels)");
  const std::size_t n = ex.train().size();
  seed_labels.validate(n, n);
  StageReport report;
  report.stage = stage;
  report.config_hash = ex.config_hash();
  CurriculumState state = CurriculumState::start(cfg.tau0, cfg.tau_min, cfg.curriculum_rounds(), cfg.one_sided);
  state.frozen = frozen;
  state.labels = seed_labels;
  report.rounds.push_back(detail::round_record(0, cfg.tau0, state.labels, frozen.size(), models, ex));
  if (writer) {
    writer->model(0, models);
    writer->labels(0, state.labels, ex);
  }
  OptimizerState opt;
  const int blocks = cfg.semi_epochs / cfg.refresh_every;
  int epoch = 0;
  for (int b = 1; b <= blocks; ++b) {
    for (int e = 0; e < cfg.refresh_every; ++e, ++epoch)
      report.epoch_losses.push_back(detail::semi_epoch(models, opt, ex, state.labels, epoch));
    if (writer) writer->model(b, models);
    if (state.round < state.total_rounds) {
      curriculum_step(state, split_similarity(models, ex, ex.train()));
      if (state.labels.empty())
        throw NoLabelsError(stage + ": curriculum round " + std::to_string(state.round) + " left no labels");
      report.rounds.push_back(detail::round_record(state.round, state.threshold, state.labels, frozen.size(), models, ex));
      if (writer) writer->labels(state.round, state.labels, ex);
    }
  }
  report.retrieval = evaluate(models, ex);
  return {std::move(models), std::move(report)};
}

// Seeds the label set with immutable ground-truth pairs, fills the rest with
// bootstrap pseudo-labels, then runs the semi-supervised stage.
inline StageResult fine_tune_with_gt(const Experiment& ex, TwoTower models, double gt_ratio,
                                     const RunWriter* writer = nullptr) {
  require(gt_ratio > 0 && gt_ratio <= 1, "fine_tune_with_gt: gt_ratio must lie in (0, 1]");
  const PseudoLabelSet frozen = ground_truth_labels(ex, gt_ratio);
  const Bootstrap boot = pseudo_label_bootstrap(models, ex, ex.cfg.tau0);
  const std::size_t n = ex.train().size();
  StageResult out = semi_supervised_stage(ex, std::move(models), merge_with_frozen(frozen, boot.labels, n, n), frozen,
                                          writer, "fine-tune-gt");
  return out;
}

// ---------------------------------------------------------------------------

struct RunResult {
  TwoTower models;
  std::vector<StageReport> reports;
  RetrievalReport final;
  std::optional<Bootstrap> bootstrap;
};

// cold start, then either fine_tune_with_gt (gt_ratio > 0) or bootstrap +
// semi-supervised training. A semi stage that cannot start (no labels) is
// recorded as a warning and the cold-start models are kept.
inline RunResult run_pipeline(const Experiment& ex, const RunWriter* writer = nullptr) {
  const PipelineConfig& cfg = ex.cfg;
  if (writer) writer->config(cfg);
  RunResult run;
  StageResult cold = cold_start_stage(ex, initial_models(ex));
  run.reports.push_back(cold.report);
  run.models = cold.models;
  Bootstrap boot = pseudo_label_bootstrap(run.models, ex, cfg.tau0);
  run.bootstrap = boot;
  try {
    StageResult semi = [&] {
      if (cfg.gt_ratio > 0) return fine_tune_with_gt(ex, run.models, cfg.gt_ratio, writer);
      return semi_supervised_stage(ex, run.models, boot.labels, {}, writer);
    }();
    semi.report.warnings.insert(semi.report.warnings.begin(), boot.warnings.begin(), boot.warnings.end());
    run.models = std::move(semi.models);
    run.reports.push_back(std::move(semi.report));
  } catch (const NoLabelsError& e) {
    run.reports.back().warnings.push_back(e.what());
    if (writer) writer->model(0, run.models);
  }
  run.final = run.reports.back().retrieval;
  if (writer) writer->report(run.reports);
  return run;
}

}  // namespace cvgl
