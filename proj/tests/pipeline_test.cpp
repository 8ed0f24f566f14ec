#include <filesystem>
#include <map>

#include "cvgl/core.hpp"
#include "cvgl/io.hpp"
#include "cvgl/pipeline/config.hpp"
#include "cvgl/pipeline/stages.hpp"
#include "gtest/gtest.h"

namespace cvgl {
namespace {

namespace fs = std::filesystem;

// Small enough to train in well under a second.
PipelineConfig TinyConfig() {
  PipelineConfig c;
  c.world_scenes = 30;
  c.val_fraction = 0.2;
  c.pano_height = 32;
  c.bev_size = 32;
  c.ground_grid_rows = 4;
  c.ground_grid_cols = 8;
  c.overhead_grid_rows = 4;
  c.overhead_grid_cols = 4;
  c.widths = {16, 8};
  c.intra_epochs = 2;
  c.cross_epochs = 4;
  c.semi_epochs = 4;
  c.refresh_every = 2;
  c.batch_size = 8;
  c.unlabeled_pad = 4;
  return c;
}

const Experiment& TinyExperiment() {
  static const Experiment ex = make_experiment(TinyConfig());
  return ex;
}

Experiment WithConfig(const PipelineConfig& cfg) { return make_experiment(cfg, TinyExperiment().data); }

fs::path TempDir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cvgl_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string ReadFile(const fs::path& p) { return io::read_text(p); }

TEST(PipelineConfig, DefaultsRoundTrip) {
  const PipelineConfig c;
  const std::string text = format_config(c);
  const PipelineConfig back = parse_config(text, "defaults");
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.hash(), c.hash());
}

TEST(PipelineConfig, EditedValuesRoundTrip) {
  PipelineConfig c = TinyConfig();
  c.gt_ratio = 0.05;
  c.one_sided = true;
  c.eval_ks = {1, 3};
  c.augment.flip_prob = 0.25;
  const PipelineConfig back = parse_config(format_config(c), "edited");
  EXPECT_EQ(format_config(back), format_config(c));
  EXPECT_EQ(back.ground_spec(), c.ground_spec());
  EXPECT_DOUBLE_EQ(back.augment.flip_prob, 0.25);
  EXPECT_NE(back.hash(), PipelineConfig{}.hash());
}

TEST(PipelineConfig, EveryKeyIsDocumentedOrSelfExplanatory) {
  const std::string text = format_config(PipelineConfig{});
  for (const auto& k : detail::config_keys()) EXPECT_NE(text.find(std::string(k.name) + " = "), std::string::npos);
}

TEST(PipelineConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config("no_such_key = 1\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("lr = fast\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("batch_size = 12abc\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("world_scenes = -5\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("ground_grid = 16by32\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("symmetric = maybe\n", "t"), ConfigError);
}

TEST(PipelineConfig, ValidatesInvariants) {
  EXPECT_THROW(parse_config("semi_epochs = 7\nrefresh_every = 5\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("gt_ratio = 1.5\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("intra_epochs = -1\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("tau0 = 0.01\ntau_min = 0.02\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("rounds = 9\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("label_smoothing = 0.5\n", "t"), ConfigError);
  EXPECT_THROW(parse_config("aug_crop_min = 0.4\n", "t"), ConfigError);
}

TEST(PipelineConfig, CurriculumRounds) {
  PipelineConfig c;
  EXPECT_EQ(c.curriculum_rounds(), 6);
  c.rounds = 0;
  EXPECT_EQ(c.curriculum_rounds(), 0);
  c.rounds = 3;
  EXPECT_EQ(c.curriculum_rounds(), 3);
}

TEST(Experiment, FeaturesCoverEveryScene) {
  const Experiment& ex = TinyExperiment();
  EXPECT_EQ(ex.train().size() + ex.val().size(), 30u);
  EXPECT_EQ(ex.val().size(), 6u);
  EXPECT_EQ(ex.ground_features.rows(), 30);
  EXPECT_EQ(ex.ground_features.cols(), 4 * 8 * 3);
  EXPECT_EQ(ex.satellite_features.cols(), 4 * 4 * 3);
  EXPECT_EQ(ex.fake_features.rows(), 30);
}

TEST(Stages, InitialModelsAreStandardized) {
  const Experiment& ex = TinyExperiment();
  const TwoTower m = initial_models(ex);
  // The first dense layer maps the mean training input to (nearly) zero.
  const Matrix g = detail::gather_rows(ex.ground_features, ex.train());
  const Eigen::VectorXd mean = g.colwise().mean().transpose();
  const Eigen::VectorXd pre = m.ground.weight(0) * mean + m.ground.bias(0);
  EXPECT_LT(pre.cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_TRUE(same_parameters(initial_models(ex), m));
}

TEST(Stages, ZeroEpochColdStartIsIdentity) {
  PipelineConfig c = TinyConfig();
  c.intra_epochs = 0;
  c.cross_epochs = 0;
  const Experiment ex = WithConfig(c);
  const TwoTower init = initial_models(ex);
  const StageResult r = cold_start_stage(ex, init);
  EXPECT_TRUE(same_parameters(r.models, init));
  EXPECT_TRUE(r.report.epoch_losses.empty());
  EXPECT_EQ(r.report.stage, "cold-start");
}

TEST(Stages, ZeroEpochSemiStageIsIdentity) {
  PipelineConfig c = TinyConfig();
  c.semi_epochs = 0;
  c.rounds = 0;
  const Experiment ex = WithConfig(c);
  const TwoTower init = initial_models(ex);
  const PseudoLabelSet labels = ground_truth_labels(ex, 1.0);
  const StageResult r = semi_supervised_stage(ex, init, labels, {});
  EXPECT_TRUE(same_parameters(r.models, init));
  EXPECT_TRUE(r.report.epoch_losses.empty());
  ASSERT_EQ(r.report.rounds.size(), 1u);
  EXPECT_EQ(r.report.rounds[0].labels, labels.size());
}

TEST(Stages, ColdStartRecordsOneLossPerEpoch) {
  const Experiment& ex = TinyExperiment();
  const StageResult r = cold_start_stage(ex, initial_models(ex));
  EXPECT_EQ(r.report.epoch_losses.size(), 6u);
  for (double l : r.report.epoch_losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(r.report.retrieval.n_queries, ex.val().size());
  EXPECT_EQ(r.report.config_hash, ex.config_hash());
  EXPECT_FALSE(same_parameters(r.models, initial_models(ex)));
}

// A hand-built retrieval where each query's true match sits at rank two.
TEST(Evaluate, PlantedRankTwo) {
  const std::size_t n = 10;
  SimilarityMatrix m{Matrix::Zero(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 0.8;
    m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>((i + 1) % n)) = 0.9;
  }
  const RetrievalReport r = retrieval_report(m, identity_pairing(n), {1, 2, 5}, 10.0, "val");
  EXPECT_DOUBLE_EQ(r.r_at(1), 0.0);
  EXPECT_DOUBLE_EQ(r.r_at(2), 1.0);
  EXPECT_DOUBLE_EQ(r.r_at(5), 1.0);
  EXPECT_EQ(r.percent_k, 1u);
  EXPECT_DOUBLE_EQ(r.recall_at_percent, 0.0);
}

// Both towers share weights and read the satellite features, so every
// query's true match is an exact copy of it.
TEST(Evaluate, OracleFeaturesRetrievePerfectly) {
  Experiment ex = TinyExperiment();
  ex.ground_features = ex.satellite_features;
  PipelineConfig c = ex.cfg;
  c.ground_grid_rows = c.overhead_grid_rows;
  c.ground_grid_cols = c.overhead_grid_cols;
  ex.cfg = c;
  TwoTower m = TwoTower::initialized(c.ground_spec(), c.overhead_spec(), c.loss(), 3);
  m.ground = m.overhead;
  const RetrievalReport r = evaluate(m, ex);
  EXPECT_DOUBLE_EQ(r.r_at(1), 1.0);
  EXPECT_DOUBLE_EQ(r.recall_at_percent, 1.0);
}

TEST(Evaluate, PercentCutoffAtHundredQueries) {
  EXPECT_EQ(percent_k(1.0, 100), 1u);
  EXPECT_EQ(percent_k(1.0, 101), 2u);
  EXPECT_EQ(percent_k(1.0, 5), 1u);
}

// Towers with zero weights embed every image as the same vector.
TwoTower ConstantModels(const PipelineConfig& c) {
  TwoTower m = TwoTower::initialized(c.ground_spec(), c.overhead_spec(), c.loss(), 5);
  for (EncoderModel* t : {&m.ground, &m.overhead}) {
    for (std::size_t l = 0; l < t->layers(); ++l) t->weight(l).setZero();
    t->bias(t->layers() - 1).setConstant(1.0);
  }
  return m;
}

TEST(Bootstrap, DegenerateModelGivesEmptySetWithWarning) {
  const Experiment& ex = TinyExperiment();
  const TwoTower m = ConstantModels(ex.cfg);
  EXPECT_LE(mutual_match(split_similarity(m, ex, ex.train())).size(), 1u);
  const Bootstrap b = pseudo_label_bootstrap(m, ex, 0.05);
  EXPECT_TRUE(b.labels.empty());
  ASSERT_EQ(b.warnings.size(), 1u);
  EXPECT_NE(b.warnings[0].find("no pseudo-labels"), std::string::npos);
}

TEST(Bootstrap, LabelsAreMutualAndAudited) {
  const Experiment& ex = TinyExperiment();
  const TwoTower m = cold_start_stage(ex, initial_models(ex)).models;
  const Bootstrap b = pseudo_label_bootstrap(m, ex, 0.0);
  b.labels.validate(ex.train().size(), ex.train().size());
  EXPECT_EQ(b.audit, label_audit(b.labels, identity_pairing(ex.train().size())));
  for (const auto& r : b.labels.records) {
    EXPECT_EQ(r.round_added, 0);
    EXPECT_GT(std::min(r.gap_g, r.gap_s), 0.0);
  }
}

TEST(Stages, SemiStageWithoutLabelsAborts) {
  const Experiment& ex = TinyExperiment();
  EXPECT_THROW(semi_supervised_stage(ex, initial_models(ex), {}, {}), NoLabelsError);
}

TEST(Pipeline, EmptyBootstrapWithoutGroundTruthKeepsColdStart) {
  PipelineConfig c = TinyConfig();
  c.tau0 = 0.9;  // no gap can exceed this on a tiny cold start
  c.tau_min = 0.9;
  const Experiment ex = WithConfig(c);
  const fs::path dir = TempDir("empty");
  const RunWriter writer(dir);
  const RunResult run = run_pipeline(ex, &writer);
  ASSERT_EQ(run.reports.size(), 1u);
  EXPECT_EQ(run.reports[0].stage, "cold-start");
  ASSERT_FALSE(run.reports[0].warnings.empty());
  EXPECT_NE(run.reports[0].warnings.back().find("no positive pairs"), std::string::npos);
  EXPECT_EQ(run.final, run.reports[0].retrieval);
  EXPECT_TRUE(fs::exists(dir / "model_round_0.cvmd"));
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_EQ(parse_stage_reports(ReadFile(dir / "report.json"), "report"), run.reports);
}

TEST(GroundTruth, SampleSizeAndDeterminism) {
  const Experiment& ex = TinyExperiment();
  const std::size_t n = ex.train().size();
  EXPECT_TRUE(ground_truth_labels(ex, 0.0).empty());
  EXPECT_EQ(ground_truth_labels(ex, 1e-6).size(), 1u);
  EXPECT_EQ(ground_truth_labels(ex, 0.5).size(), static_cast<std::size_t>(std::llround(0.5 * n)));
  EXPECT_EQ(ground_truth_labels(ex, 1.0).size(), n);
  EXPECT_EQ(ground_truth_labels(ex, 0.5), ground_truth_labels(ex, 0.5));
  for (const auto& r : ground_truth_labels(ex, 0.5).records) EXPECT_EQ(r.g, r.s);
}

TEST(GroundTruth, SingleFrozenPairSurvivesEveryRound) {
  PipelineConfig c = TinyConfig();
  c.gt_ratio = 1e-6;
  const Experiment ex = WithConfig(c);
  const PseudoLabelSet frozen = ground_truth_labels(ex, c.gt_ratio);
  ASSERT_EQ(frozen.size(), 1u);
  const fs::path dir = TempDir("gt1");
  const RunWriter writer(dir);
  const StageResult r = fine_tune_with_gt(ex, cold_start_stage(ex, initial_models(ex)).models, c.gt_ratio, &writer);
  EXPECT_EQ(r.report.stage, "fine-tune-gt");
  ASSERT_EQ(r.report.rounds.size(), 3u);
  const auto id = ex.data.world.scenes[ex.train()[frozen.records[0].g]].scene_id;
  for (const auto& rr : r.report.rounds) {
    EXPECT_EQ(rr.frozen, 1u);
    EXPECT_GE(rr.correct, 1u);
    const PseudoLabelSet on_disk = read_labels(dir / RunWriter::labels_name(rr.round));
    ASSERT_FALSE(on_disk.empty());
    EXPECT_EQ(on_disk.records[0].g, id);
    EXPECT_EQ(on_disk.records[0].s, id);
    EXPECT_FALSE(std::isfinite(on_disk.records[0].gap_g));
  }
}

TEST(Pipeline, RunDirectoryLayout) {
  PipelineConfig c = TinyConfig();
  c.tau0 = 0.0;
  const Experiment ex = WithConfig(c);
  const fs::path dir = TempDir("layout");
  const RunWriter writer(dir);
  const RunResult run = run_pipeline(ex, &writer);
  ASSERT_EQ(run.reports.size(), 2u);
  EXPECT_EQ(run.reports[1].stage, "semi-supervised");
  EXPECT_EQ(parse_config(ReadFile(dir / "config.snapshot"), "snapshot").hash(), c.hash());
  for (int r = 0; r <= 2; ++r) {
    EXPECT_TRUE(fs::exists(dir / RunWriter::model_name(r))) << r;
    EXPECT_TRUE(fs::exists(dir / RunWriter::labels_name(r))) << r;
  }
  EXPECT_TRUE(same_parameters(read_cvmd(dir / RunWriter::model_name(2)), run.models));
  EXPECT_EQ(parse_stage_reports(ReadFile(dir / "report.json"), "report"), run.reports);
  // Label files hold scene ids, which map back onto train rows.
  const PseudoLabelSet last = read_labels(dir / RunWriter::labels_name(2));
  const PseudoLabelSet rows = labels_to_train_rows(last, ex);
  EXPECT_EQ(label_audit(rows, identity_pairing(ex.train().size())).total, run.reports[1].rounds.back().labels);
  EXPECT_EQ(label_audit(rows, identity_pairing(ex.train().size())).correct, run.reports[1].rounds.back().correct);
}

TEST(Pipeline, LabelFileWithValidationSceneIsRejected) {
  const Experiment& ex = TinyExperiment();
  PseudoLabelSet ids;
  const auto v = ex.data.world.scenes[ex.val()[0]].scene_id;
  ids.records.push_back({v, v, 0.1, 0.1, 0});
  EXPECT_THROW(labels_to_train_rows(ids, ex), ContractError);
}

std::map<std::string, std::string> DirContents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = ReadFile(e.path());
  return out;
}

TEST(Pipeline, ByteIdenticalAcrossThreadCounts) {
  PipelineConfig c = TinyConfig();
  c.tau0 = 0.0;
  const Experiment ex = WithConfig(c);
  std::vector<std::map<std::string, std::string>> runs;
  for (int threads : {1, 3}) {
    set_thread_count(threads);
    const fs::path dir = TempDir("det" + std::to_string(threads));
    const Experiment fresh = WithConfig(c);
    const RunWriter writer(dir);
    run_pipeline(fresh, &writer);
    runs.push_back(DirContents(dir));
  }
  set_thread_count(-1);
  ASSERT_EQ(runs[0].size(), runs[1].size());
  for (const auto& [name, bytes] : runs[0]) EXPECT_TRUE(runs[1].at(name) == bytes) << name;
}

}  // namespace
}  // namespace cvgl
