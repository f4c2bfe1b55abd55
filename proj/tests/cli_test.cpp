// End-to-end command runs on a tiny model and a handful of synthetic clips.

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "glc/cli.hpp"
#include "test_util.hpp"

namespace {

using testing_util::TempDir;

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in) << path;
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Result {
  int code;
  std::string out, err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<TempDir>("cli");
    config_ = dir_->path() / "config.json";
    std::ofstream(config_) << nlohmann::json{{"overrides",
                                              {{"preset", "tiny"},
                                               {"dataset", (dir_->path() / "data").string()},
                                               {"synth.train_clips", 4},
                                               {"synth.test_clips", 2},
                                               {"steps", 6},
                                               {"batch", 2},
                                               {"eval_every", 3},
                                               {"checkpoint_every", 3},
                                               {"threads", 1}}}}
                                  .dump();
  }

  Result run(const std::string& command, std::vector<std::string> sets = {}, bool with_config = true) const {
    std::vector<std::string> args{command};
    if (with_config) args.insert(args.end(), {"--config", config_.string()});
    for (auto& s : sets) args.insert(args.end(), {"--set", s});
    std::ostringstream out, err;
    const int code = glc::run_cli(args, out, err);
    return {code, out.str(), err.str()};
  }

  std::string out(const std::string& name) const { return "output=" + (dir_->path() / name).string(); }
  std::filesystem::path path(const std::string& name) const { return dir_->path() / name; }

  void synth() const { ASSERT_EQ(run("synth").code, 0); }

  std::unique_ptr<TempDir> dir_;
  std::filesystem::path config_;
};

// ---------------------------------------------------------------------------
// usage and exit codes

TEST_F(Cli, UsageErrorsExitTwo) {
  std::ostringstream out, err;
  EXPECT_EQ(glc::run_cli({}, out, err), 2);
  EXPECT_EQ(glc::run_cli({"fly", "--config", config_.string()}, out, err), 2);
  EXPECT_EQ(run("train", {}, false).code, 2);
  EXPECT_EQ(glc::run_cli({"train", "--config", config_.string(), "--threads", "many"}, out, err), 2);
}

TEST_F(Cli, HelpExitsZero) {
  std::ostringstream out, err;
  EXPECT_EQ(glc::run_cli({"--help"}, out, err), 0);
  EXPECT_NE(out.str().find("export-maps"), std::string::npos);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(run("train", {"no_such_key=1"}).code, 2);
  EXPECT_EQ(run("train", {"variant=mvit+e"}).code, 2);
  EXPECT_EQ(run("train", {"steps=-1"}).code, 2);
  EXPECT_EQ(run("train", {"nokeyvalue"}).code, 2);
  std::ofstream(path("bad.json")) << R"({"overrides": {}, "extra": 1})";
  std::ostringstream out, err;
  EXPECT_EQ(glc::run_cli({"eval", "--config", path("bad.json").string()}, out, err), 2);
  EXPECT_NE(err.str().find("extra"), std::string::npos) << err.str();
  EXPECT_EQ(glc::run_cli({"eval", "--config", path("missing.json").string()}, out, err), 2);
}

TEST_F(Cli, MissingDatasetExitsThree) {
  const auto r = run("train", {"dataset=" + path("nothing").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("manifest"), std::string::npos) << r.err;
}

TEST_F(Cli, CorruptDatasetExitsThree) {
  synth();
  {
    std::fstream f(path("data") / "data.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x7f');
  }
  EXPECT_EQ(run("eval").code, 3);
}

TEST_F(Cli, MissingCheckpointExitsFive) {
  synth();
  EXPECT_EQ(run("eval", {out("nowhere")}).code, 5);
}

TEST_F(Cli, UnwritableOutputExitsFive) {
  synth();
  std::ofstream(path("file")) << "x";
  EXPECT_EQ(run("train", {"output=" + (path("file") / "sub").string()}).code, 5);
}

TEST_F(Cli, NonFiniteLossExitsFour) {
  synth();
  const auto r = run("train", {out("boom"), "lr=1e30", "warmup=0"});
  EXPECT_EQ(r.code, 4) << r.err;
}

// ---------------------------------------------------------------------------
// commands

TEST_F(Cli, TrainWritesLogCheckpointAndReport) {
  synth();
  const auto r = run("train", {out("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream log(slurp(path("run") / "log.csv"));
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "step,train_loss,eval_f1");
  int rows = 0;
  while (std::getline(log, line)) {
    ++rows;
    const auto first = line.find(','), second = line.find(',', first + 1);
    EXPECT_EQ(std::stoi(line.substr(0, first)), rows - 1);
    if (rows > 1) EXPECT_TRUE(std::isfinite(std::stod(line.substr(first + 1, second - first - 1)))) << line;
    if (rows - 1 == 3 || rows - 1 == 6 || rows == 1) EXPECT_NE(second + 1, line.size()) << line;
  }
  EXPECT_EQ(rows, 7);
  EXPECT_TRUE(std::filesystem::exists(path("run") / "checkpoint" / "weights.bin"));
  const auto report = nlohmann::json::parse(slurp(path("run") / "eval.json")).get<glc::EvalReport>();
  EXPECT_GT(report.frames, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out).get<glc::EvalReport>().f1, report.f1);
}

TEST_F(Cli, SameSeedRunsAreByteIdentical) {
  synth();
  for (const auto* name : {"a", "b"}) {
    ASSERT_EQ(run("train", {out(name)}).code, 0);
    ASSERT_EQ(run("infer", {out(name)}).code, 0);
    ASSERT_EQ(run("export-maps", {out(name)}).code, 0);
  }
  for (const auto* file : {"log.csv", "eval.json", "predictions.json", "checkpoint/weights.bin",
                           "checkpoint/weights.json", "clip0004_head0.pgm", "clip0004_frame0_pred.pgm"}) {
    EXPECT_EQ(slurp(path("a") / file), slurp(path("b") / file)) << file;
  }
  ASSERT_EQ(run("train", {out("c"), "seed=1"}).code, 0);
  EXPECT_NE(slurp(path("a") / "checkpoint/weights.bin"), slurp(path("c") / "checkpoint/weights.bin"));
}

TEST_F(Cli, EvalReproducesTrainReport) {
  synth();
  ASSERT_EQ(run("train", {out("run")}).code, 0);
  const auto trained = slurp(path("run") / "eval.json");
  const auto r = run("eval", {out("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(path("run") / "eval.json"), trained);
}

TEST_F(Cli, EvalWithMismatchedConfigNamesTheStage) {
  synth();
  ASSERT_EQ(run("train", {out("run")}).code, 0);
  const auto r = run("eval", {out("run"), "dim=16"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("stage 'local token embedding'"), std::string::npos) << r.err;
  const auto v = run("eval", {out("run"), "variant=mvit+d+sa"});
  EXPECT_EQ(v.code, 2);
  EXPECT_NE(v.err.find("self-attention"), std::string::npos) << v.err;
}

TEST_F(Cli, EvalOnEmptyTestSplit) {
  ASSERT_EQ(run("synth", {"synth.test_clips=0"}).code, 0);
  ASSERT_EQ(run("train", {out("run"), "steps=0"}).code, 0);
  const auto r = run("eval", {out("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(r.out).get<glc::EvalReport>();
  EXPECT_EQ(report.frames, 0);
  EXPECT_EQ(report.f1, 0.0);
}

TEST_F(Cli, InferWritesPerFrameArgmax) {
  synth();
  ASSERT_EQ(run("train", {out("run"), "steps=0"}).code, 0);
  ASSERT_EQ(run("infer", {out("run")}).code, 0);
  const auto j = nlohmann::json::parse(slurp(path("run") / "predictions.json"));
  ASSERT_EQ(j.at("clips").size(), 2u);
  for (const auto& clip : j.at("clips")) {
    ASSERT_EQ(clip.at("frames").size(), 8u);
    for (const auto& f : clip.at("frames")) {
      EXPECT_GE(f.at("x").get<double>(), 0.0);
      EXPECT_LT(f.at("x").get<double>(), 32.0);
      EXPECT_EQ(std::fmod(f.at("y").get<double>(), 4.0), 0.0);
      EXPECT_GT(f.at("probability").get<double>(), 0.0);
    }
  }
  ASSERT_EQ(run("infer", {out("one"), "checkpoint=" + (path("run") / "checkpoint").string(), "clip=clip0001"}).code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(path("one") / "predictions.json")).at("clips").size(), 1u);
}

TEST_F(Cli, ExportMapsWritesPgm) {
  synth();
  ASSERT_EQ(run("train", {out("run"), "steps=0"}).code, 0);
  const auto r = run("export-maps", {out("run"), "clip=clip0001"});
  ASSERT_EQ(r.code, 0) << r.err;
  glc::GazeModel<float> model(glc::ModelConfig::tiny(), 0);
  int heads = 0;
  for (const auto& entry : std::filesystem::directory_iterator(path("run"))) {
    const auto name = entry.path().filename().string();
    if (!name.ends_with(".pgm")) continue;
    EXPECT_TRUE(name.starts_with("clip0001_")) << name;
    heads += name.find("_head") != std::string::npos;
    const auto bytes = slurp(entry.path());
    const std::string header = "P5\n32 32\n255\n";
    ASSERT_EQ(bytes.substr(0, header.size()), header) << name;
    ASSERT_EQ(bytes.size(), header.size() + 32 * 32);
    unsigned char peak = 0;
    for (std::size_t i = header.size(); i < bytes.size(); ++i) peak = std::max(peak, static_cast<unsigned char>(bytes[i]));
    EXPECT_EQ(peak, 255) << name;
  }
  EXPECT_EQ(heads, model.fusion_heads());
  EXPECT_TRUE(std::filesystem::exists(path("run") / "clip0001_frame7_pred.pgm"));
  EXPECT_EQ(run("export-maps", {out("run"), "variant=mvit+d+sa"}).code, 2);
}

TEST_F(Cli, GradcheckPassesAndDetectsABrokenRule) {
  const auto ok = run("gradcheck");
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("gradient checks passed"), std::string::npos);
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
  const auto bad = run("gradcheck", {"gradcheck.inject_fault=softmax"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("softmax"), std::string::npos) << bad.err;
  EXPECT_NE(bad.out.find("softmax: FAIL"), std::string::npos);
  EXPECT_EQ(run("gradcheck", {"gradcheck.inject_fault=nothing"}).code, 2);
}

TEST_F(Cli, AblateKeepsRequestOrder) {
  synth();
  const auto r = run("ablate", {out("abl"), "steps=2", "variants=mvit+d+glc,mvit,mvit+d+sa"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(path("abl") / "ablation.csv"));
  std::string line;
  std::vector<std::string> order;
  std::vector<std::string> params;
  std::getline(csv, line);
  EXPECT_EQ(line, "variant,f1,recall,precision,params,step0_f1");
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 6u) << line;
    order.push_back(cells[0]);
    params.push_back(cells[4]);
  }
  EXPECT_EQ(order, (std::vector<std::string>{"mvit+d+glc", "mvit", "mvit+d+sa"}));
  EXPECT_EQ(params[0], params[2]);
  EXPECT_NE(params[0], params[1]);
  EXPECT_EQ(r.out, slurp(path("abl") / "ablation.csv"));
  EXPECT_TRUE(std::filesystem::exists(path("abl") / "mvit" / "log.csv"));
}

// ---------------------------------------------------------------------------
// evaluation protocol

TEST_F(Cli, OracleAndUniformPredictors) {
  synth();
  const glc::Dataset data(path("data"));
  const auto cfg = glc::ModelConfig::tiny();
  const auto geometry = glc::LabelGeometry::for_crop(cfg.width);
  const auto o = cfg.output_grid();
  const auto oracle = glc::evaluate(data, cfg, geometry, 0, [&](const glc::Example& ex) {
    std::vector<float> heat;
    for (const auto& g : ex.gaze) {
      const auto disk = glc::gaze_disk(o.h, o.w, g.x / 4, g.y / 4, geometry.radius);
      heat.insert(heat.end(), disk.begin(), disk.end());
    }
    return heat;
  });
  EXPECT_GT(oracle.frames, 0);
  EXPECT_EQ(oracle.f1, 1.0);
  const auto uniform = glc::evaluate(data, cfg, geometry, 0, [&](const glc::Example& ex) {
    return std::vector<float>(ex.gaze.size() * o.h * o.w, 1.0f);
  });
  // every cell predicted: full recall, precision = disk share of the grid
  EXPECT_EQ(uniform.recall, 1.0);
  EXPECT_LT(uniform.precision, 0.2);
  EXPECT_NEAR(uniform.f1, 2 * uniform.precision / (1 + uniform.precision), 1e-12);
  glc::GazeModel<float> model(cfg, 0);
  const auto untrained = glc::evaluate(data, cfg, geometry, 0, glc::model_predictor(model));
  EXPECT_GE(untrained.f1, 0.9 * uniform.f1);
  EXPECT_LE(untrained.f1, 1.0);
}

TEST(Parity, SaAndGlcCountsMatchAndMismatchIsACheckError) {
  EXPECT_NO_THROW(glc::check_parity({"mvit+d+sa", "mvit+d+glc", "mvit"}, glc::ModelConfig::desk(), 0));
  EXPECT_EQ(glc::fusion_counterpart("mvit+d+glc"), "mvit+d+sa");
  EXPECT_EQ(glc::fusion_counterpart("mvit+b+sa"), "mvit+b+glc");
  EXPECT_EQ(glc::fusion_counterpart("mvit+c"), "");
}

TEST(Exit, KindsMapToCodes) {
  using K = glc::ErrorKind;
  EXPECT_EQ(glc::exit_code(K::check), 1);
  EXPECT_EQ(glc::exit_code(K::config), 2);
  EXPECT_EQ(glc::exit_code(K::shape), 2);
  EXPECT_EQ(glc::exit_code(K::usage), 2);
  EXPECT_EQ(glc::exit_code(K::dataset), 3);
  EXPECT_EQ(glc::exit_code(K::version), 3);
  EXPECT_EQ(glc::exit_code(K::checksum), 3);
  EXPECT_EQ(glc::exit_code(K::truncated), 3);
  EXPECT_EQ(glc::exit_code(K::numeric), 4);
  EXPECT_EQ(glc::exit_code(K::io), 5);
}

}  // namespace
