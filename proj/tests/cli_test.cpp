#include <filesystem>
#include <sstream>

#include "cvgl/evalcli/cli.hpp"
#include "cvgl/evalcli/metrics.hpp"
#include "cvgl/io.hpp"
#include "cvgl/matcher/labels.hpp"
#include "cvgl/pipeline/config.hpp"
#include "cvgl/synth/dataset.hpp"
#include "gtest/gtest.h"
#include "json.hpp"

namespace cvgl {
namespace {

namespace fs = std::filesystem;

struct Result {
  int status;
  std::string out, err;
};

Result Cvgl(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int status = cli_dispatch(args, out, err);
  return {status, out.str(), err.str()};
}

fs::path TempDir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cvgl_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Cli, HelpAtEveryLevelExitsZero) {
  for (const std::vector<std::string>& args :
       {std::vector<std::string>{"--help"}, {"eval", "--help"}, {"synth", "--help"}, {"synth", "gen", "--help"},
        {"train", "--help"}, {"train", "semi", "--help"}, {"report", "trend", "--help"}, {"project", "--help"}}) {
    const Result r = Cvgl(args);
    EXPECT_EQ(r.status, kExitOk) << args.back();
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << args.front();
  }
  EXPECT_NE(Cvgl({"eval", "--help"}).out.find("--model"), std::string::npos);
}

TEST(Cli, UsageErrorsExitOne) {
  for (const std::vector<std::string>& args :
       {std::vector<std::string>{}, {"frobnicate"}, {"eval", "--bogus"}, {"train"}, {"train", "warm-start"},
        {"match", "--grd", "a.cveb"}, {"synth", "gen", "--out", "x", "--gap-preset", "extreme"},
        {"match", "--grd", "a", "--sat", "b", "--out", "c", "--tau", "-1"}}) {
    const Result r = Cvgl(args);
    EXPECT_EQ(r.status, kExitUsage) << (args.empty() ? "<none>" : args.back());
    EXPECT_FALSE(r.err.empty());
  }
}

TEST(Cli, MissingInputIsIoError) {
  const fs::path dir = TempDir("missing");
  EXPECT_EQ(Cvgl({"match", "--grd", (dir / "none.cveb").string(), "--sat", (dir / "none.cveb").string(), "--out",
                 (dir / "l.jsonl").string()})
                .status,
            kExitIo);
  EXPECT_EQ(Cvgl({"report", "trend", "--run", dir.string(), "--out", (dir / "t.csv").string()}).status, kExitIo);
}

TEST(Cli, BadConfigIsUsageError) {
  const fs::path dir = TempDir("badcfg");
  io::write_text(dir / "run.cfg", "no_such_key = 3\n");
  const Result r = Cvgl({"train", "cold-start", "--config", (dir / "run.cfg").string(), "--out", (dir / "run").string()});
  EXPECT_EQ(r.status, kExitUsage);
  EXPECT_NE(r.err.find("no_such_key"), std::string::npos);
  io::write_text(dir / "run.cfg", "semi_epochs = 7\nrefresh_every = 2\n");
  EXPECT_EQ(Cvgl({"train", "cold-start", "--config", (dir / "run.cfg").string(), "--out", (dir / "run").string()}).status,
            kExitUsage);
}

TEST(Cli, ProjectWritesImageAndMask) {
  const fs::path dir = TempDir("project");
  write_cvim(dir / "pano.cvim", ImageBuffer(64, 32, 3, 0.25f));
  const Result r = Cvgl({"project", "--in", (dir / "pano.cvim").string(), "--bev", "24", "--out",
                        (dir / "bev.cvim").string(), "--mask", (dir / "mask.cvim").string()});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  const ImageBuffer bev = read_cvim(dir / "bev.cvim");
  const ImageBuffer mask = read_cvim(dir / "mask.cvim");
  EXPECT_EQ(bev.width(), 24u);
  EXPECT_EQ(mask.channels(), 1u);
  for (std::size_t y = 0; y < 24; ++y)
    for (std::size_t x = 0; x < 24; ++x)
      if (mask.at(x, y, 0) > 0.5f) EXPECT_NEAR(bev.at(x, y, 0), 0.25f, 1.0f / 255);
  EXPECT_EQ(Cvgl({"project", "--in", (dir / "pano.cvim").string(), "--fov", "2", "--out", (dir / "b.cvim").string()}).status,
            kExitUsage);
}

// synth gen -> train cold-start -> embed -> match -> audit -> train curriculum
// -> eval -> report trend on a 50-scene world.
TEST(Cli, SmokeSequence) {
  const fs::path dir = TempDir("smoke");
  const std::string world = (dir / "world").string();
  Result r = Cvgl({"--seed", "3", "synth", "gen", "--scenes", "50", "--bev", "32", "--pano", "64x32", "--gap-preset",
                  "mild", "--out", world});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  const synth::WorldManifest m = synth::read_manifest(dir / "world" / "world.manifest");
  EXPECT_EQ(m.seed, 3u);
  EXPECT_EQ(m.scenes, 50u);
  EXPECT_EQ(m.val.size(), 10u);
  for (const char* prefix : {"sat_", "grd_", "fake_"}) EXPECT_TRUE(fs::exists(dir / "world" / (std::string(prefix) + "49.cvim")));

  io::write_text(dir / "run.cfg",
                 "world = " + world +
                     "\nground_grid = 4x8\noverhead_grid = 4x4\nwidths = 32,16\nintra_epochs = 2\ncross_epochs = 6\n"
                     "semi_epochs = 4\nrefresh_every = 2\nbatch_size = 8\nunlabeled_pad = 4\ntau0 = 0.01\n");
  const std::string cfg = (dir / "run.cfg").string();
  const fs::path cold = dir / "cold";
  r = Cvgl({"train", "cold-start", "--config", cfg, "--out", cold.string()});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  for (const char* f : {"config.snapshot", "model_round_0.cvmd", "report.json", "timing.json"})
    EXPECT_TRUE(fs::exists(cold / f)) << f;
  const std::string model = (cold / "model_round_0.cvmd").string();

  const std::string grd = (dir / "grd.cveb").string(), sat = (dir / "sat.cveb").string();
  ASSERT_EQ(Cvgl({"embed", "--model", model, "--world", world, "--tower", "ground", "--split", "train", "--out", grd}).status,
            kExitOk);
  ASSERT_EQ(Cvgl({"embed", "--model", model, "--world", world, "--tower", "overhead", "--split", "train", "--out", sat})
                .status,
            kExitOk);
  EXPECT_EQ(read_cveb(grd).n(), 40u);
  EXPECT_EQ(Cvgl({"embed", "--model", model, "--world", world, "--tower", "ground", "--images", "sat", "--out", grd}).status,
            kExitUsage);

  const std::string labels = (dir / "labels.jsonl").string();
  r = Cvgl({"match", "--grd", grd, "--sat", sat, "--tau", "0", "--out", labels});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  const PseudoLabelSet l = read_labels(labels);
  ASSERT_FALSE(l.empty());
  for (const auto& rec : l.records)
    EXPECT_TRUE(std::binary_search(m.train.begin(), m.train.end(), rec.g)) << "labels carry scene ids";

  r = Cvgl({"audit", "--labels", labels, "--gt", world + "/world.manifest"});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  const auto audit = nlohmann::json::parse(r.out);
  EXPECT_EQ(audit.at("labels").get<std::size_t>(), l.size());
  std::size_t correct = 0;
  for (const auto& rec : l.records) correct += rec.g == rec.s;
  EXPECT_EQ(audit.at("correct").get<std::size_t>(), correct);

  const fs::path cur = dir / "curriculum";
  r = Cvgl({"train", "curriculum", "--config", cfg, "--labels", labels, "--model", model, "--out", cur.string()});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  for (const char* f : {"config.snapshot", "model_round_0.cvmd", "model_round_2.cvmd", "labels_round_0.jsonl",
                        "labels_round_2.jsonl", "report.json"})
    EXPECT_TRUE(fs::exists(cur / f)) << f;
  EXPECT_EQ(io::read_text(cur / "model_round_0.cvmd"), io::read_text(cold / "model_round_0.cvmd"));

  r = Cvgl({"eval", "--config", cfg, "--model", (cur / "model_round_2.cvmd").string(), "--out",
           (dir / "eval.json").string()});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  const RetrievalReport ev = retrieval_from_json(nlohmann::json::parse(io::read_text(dir / "eval.json")));
  const auto reports = parse_stage_reports(io::read_text(cur / "report.json"), "report.json");
  EXPECT_EQ(ev.n_queries, 10u);
  EXPECT_EQ(ev.recall_at, reports.back().retrieval.recall_at);

  r = Cvgl({"report", "trend", "--run", cur.string(), "--out", (dir / "trend.csv").string()});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  EXPECT_EQ(io::read_text(dir / "trend.csv"), format_trend_csv(reports));
}

TEST(Cli, SemiWithGroundTruthRatio) {
  const fs::path dir = TempDir("semi");
  io::write_text(dir / "run.cfg",
                 "world_scenes = 30\npano_height = 32\nbev_size = 32\nground_grid = 4x8\noverhead_grid = 4x4\n"
                 "widths = 16,8\nintra_epochs = 1\ncross_epochs = 2\nsemi_epochs = 2\nrefresh_every = 2\n"
                 "batch_size = 8\nunlabeled_pad = 4\n");
  const fs::path run = dir / "run";
  const Result r = Cvgl({"--seed", "9", "train", "semi", "--config", (dir / "run.cfg").string(), "--gt-ratio", "0.1",
                        "--out", run.string()});
  ASSERT_EQ(r.status, kExitOk) << r.err;
  const auto reports = parse_stage_reports(io::read_text(run / "report.json"), "report.json");
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[1].stage, "fine-tune-gt");
  EXPECT_EQ(reports[1].rounds.front().frozen, 2u);  // round(0.1 * 24 train scenes)
  const PipelineConfig snap = read_config(run / "config.snapshot");
  EXPECT_EQ(snap.seed, 9u);
  EXPECT_DOUBLE_EQ(snap.gt_ratio, 0.1);
}

}  // namespace
}  // namespace cvgl
