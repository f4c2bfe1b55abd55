// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [criterion numbers...]  (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "architecture_tables.hpp"
#include "glc/cli.hpp"
#include "oracles.hpp"

namespace {

using glc::ModelConfig;
using glc::Tensor;
using testing_util::flatten;
using testing_util::Matrix;
using testing_util::to_matrix;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor<double> random_tensor(glc::Shape shape, glc::Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(static_cast<std::size_t>(glc::numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) : path_(std::filesystem::temp_directory_path() / ("glc_accept_" + tag)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

int cli(const std::vector<std::string>& args, std::string* out_text = nullptr) {
  std::ostringstream out, err;
  const int code = glc::run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (code != 0) std::fprintf(stderr, "  command failed (%d): %s", code, err.str().c_str());
  return code;
}

std::string write_config(const std::filesystem::path& dir, const nlohmann::json& overrides) {
  const auto path = dir / "config.json";
  std::ofstream(path) << nlohmann::json{{"overrides", overrides}}.dump();
  return path.string();
}

// ---------------------------------------------------------------------------

Outcome glc_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  glc::Rng rng(11);
  double worst_dense = 0, worst_closed = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t n = rng.index(17), d = 1 + rng.index(8);
    const auto q = random_tensor({n + 1, d}, rng, -3, 3), k = random_tensor({n + 1, d}, rng, -3, 3),
               v = random_tensor({n + 1, d}, rng, -3, 3);
    const auto got = flatten(to_matrix(glc::glc(q, k, v, glc::build_suppression(n))));
    const auto qm = to_matrix(q), km = to_matrix(k), vm = to_matrix(v);
    worst_dense = std::max(worst_dense, max_abs_diff(got, flatten(testing_util::dense_mha(qm, km, vm, 1, true))));
    worst_closed = std::max(worst_closed, max_abs_diff(got, flatten(testing_util::glc_closed_form(qm, km, vm))));
  }
  const double elapsed = seconds_since(t0);
  o.require(worst_dense <= 1e-12, "dense oracle error " + fmt("%.3g", worst_dense));
  o.require(worst_closed <= 1e-10, "closed-form error " + fmt("%.3g", worst_closed));
  o.require(elapsed < 10, "took " + fmt("%.1f s", elapsed));
  o.detail = o.pass ? "200 instances, max err dense " + fmt("%.2g", worst_dense) + ", closed form " +
                          fmt("%.2g", worst_closed) + ", " + fmt("%.2f s", elapsed)
                    : o.detail;
  return o;
}

Outcome mask_support() {
  Outcome o;
  glc::Rng rng(12);
  double worst = 0;
  for (const std::int64_t d : {1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 768, 1024}) {
    for (int rep = 0; rep < 4; ++rep) {
      const std::int64_t n = 1 + rng.index(16);
      const auto q = random_tensor({n + 1, d}, rng, -4, 4), k = random_tensor({n + 1, d}, rng, -4, 4);
      const auto mask = glc::build_suppression(n, 1e8);
      std::vector<double> probs(static_cast<std::size_t>((n + 1) * (n + 1)));
      glc::detail::attention_probs(q.data().data(), k.data().data(), n + 1, n + 1, d, &mask, probs.data());
      for (std::int64_t i = 0; i <= n; ++i) {
        double leak = 0;
        for (std::int64_t j = 1; j <= n; ++j)
          if (j != i) leak += probs[static_cast<std::size_t>(i * (n + 1) + j)];
        worst = std::max(worst, leak);
      }
    }
  }
  o.require(worst < 1e-30, "leaked mass " + fmt("%.3g", worst));
  if (o.pass) o.detail = "lambda 1e8, D up to 1024, worst off-support mass " + fmt("%.3g", worst);
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  ScratchDir dir("gradcheck");
  const auto t0 = Clock::now();
  std::string out;
  const int code = cli({"gradcheck", "--config", write_config(dir.path(), nlohmann::json::object()), "--threads", "1"}, &out);
  const double elapsed = seconds_since(t0);
  const auto lines = std::count(out.begin(), out.end(), '\n');
  o.require(code == 0, "gradcheck exit " + std::to_string(code));
  o.require(elapsed < 300, "took " + fmt("%.0f s", elapsed));
  if (o.pass) o.detail = std::to_string(lines - 1) + " checks passed in " + fmt("%.1f s", elapsed);
  return o;
}

Outcome shape_ledger() {
  Outcome o;
  const auto paper = glc::infer_shapes(ModelConfig::paper());
  const auto& want = testing_util::paper_stages();
  o.require(paper.size() == want.size(), "paper ledger has " + std::to_string(paper.size()) + " rows");
  for (std::size_t i = 0; o.pass && i < want.size(); ++i) {
    o.require(paper[i].name == want[i].name && paper[i].size() == want[i].size &&
                  (want[i].linear_in == 0 || paper[i].linear_in == want[i].linear_in),
              "row " + want[i].name + ": got " + paper[i].name + " " + paper[i].size());
  }
  glc::GazeModel<float> model(ModelConfig::desk(), 0);
  glc::StageShapes trace;
  {
    glc::NoGradGuard no_grad;
    model.forward(Tensor<float>::zeros({3, 8, 64, 64}), &trace);
  }
  o.require(trace == glc::infer_shapes(model.config()), "desk ledger differs from the forward trace");
  const auto& desk = testing_util::desk_stages();
  for (std::size_t i = 0; o.pass && i < desk.size(); ++i) {
    o.require(trace[i].size() == desk[i].size, "desk row " + desk[i].name + ": " + trace[i].size());
  }
  if (o.pass) o.detail = "13/13 paper rows; desk ledger equals forward trace (" + std::to_string(trace.size()) + " stages)";
  return o;
}

Outcome distributions() {
  Outcome o;
  double worst_frame = 0;
  auto check_heat = [&](const Tensor<float>& heat) {
    const auto v = heat.data();
    const std::int64_t cells = heat.dim(1) * heat.dim(2);
    for (std::int64_t f = 0; f < heat.dim(0); ++f) {
      double total = 0;
      for (std::int64_t i = 0; i < cells; ++i) {
        if (v[f * cells + i] < 0) worst_frame = INFINITY;
        total += v[f * cells + i];
      }
      worst_frame = std::max(worst_frame, std::abs(total - 1.0));
    }
  };
  glc::Rng rng(13);
  glc::NoGradGuard no_grad;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto cfg = ModelConfig::tiny();
    glc::GazeModel<float> model(cfg, seed);
    const auto clip = random_tensor({3, cfg.frames, cfg.height, cfg.width}, rng, 0, 1);
    check_heat(model.forward(Tensor<float>(clip.shape(), std::vector<float>(clip.data().begin(), clip.data().end()))));
  }
  {
    glc::GazeModel<float> model(ModelConfig::desk(), 5);
    const auto clip = random_tensor({3, 8, 64, 64}, rng, 0, 1);
    check_heat(model.forward(Tensor<float>(clip.shape(), std::vector<float>(clip.data().begin(), clip.data().end()))));
  }
  o.require(worst_frame <= 1e-6, "heatmap frame sum off by " + fmt("%.3g", worst_frame));

  double worst_label = 0, worst_self_kl = 0, min_kl = INFINITY;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::int64_t h = 4 + rng.index(61), w = 4 + rng.index(61);
    const double x = rng.uniform(-0.5, w - 0.5), y = rng.uniform(-0.5, h - 0.5);
    const auto label = glc::gaussian_label(h, w, x, y, std::int64_t{19}, 3.0);
    worst_label = std::max(worst_label, std::abs(std::accumulate(label.begin(), label.end(), 0.0) - 1.0));
    const Tensor<double> l({1, h * w}, label);
    worst_self_kl = std::max(worst_self_kl, std::abs(glc::kl_div(l, l).item()));
    std::vector<double> p(static_cast<std::size_t>(h * w));
    for (auto& v : p) v = rng.uniform(1e-6, 1.0);
    const double z = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& v : p) v /= z;
    min_kl = std::min(min_kl, glc::kl_div(Tensor<double>({1, h * w}, p), l).item());
  }
  o.require(worst_label <= 1e-9, "label sum off by " + fmt("%.3g", worst_label));
  o.require(worst_self_kl < 1e-9, "kl(l, l) = " + fmt("%.3g", worst_self_kl));
  o.require(min_kl >= 0, "negative kl " + fmt("%.3g", min_kl));
  if (o.pass) {
    o.detail = "frame sum err " + fmt("%.2g", worst_frame) + ", label sum err " + fmt("%.2g", worst_label) +
               ", kl(l,l) " + fmt("%.2g", worst_self_kl) + ", min kl " + fmt("%.3g", min_kl);
  }
  return o;
}

Outcome parity() {
  Outcome o;
  std::int64_t counts[2];
  int k = 0;
  for (const auto* tag : {"mvit+d+sa", "mvit+d+glc"}) {
    auto cfg = ModelConfig::desk();
    cfg.apply_variant(tag);
    counts[k++] = glc::GazeModel<float>(cfg, 0).params().count();
  }
  o.require(counts[0] == counts[1],
            "sa " + std::to_string(counts[0]) + " vs glc " + std::to_string(counts[1]) + " parameters");
  if (o.pass) o.detail = "desk +d+sa and +d+glc both have " + std::to_string(counts[0]) + " parameters";
  return o;
}

Outcome ablation() {
  Outcome o;
  ScratchDir dir("ablation");
  const auto config = write_config(dir.path(), {{"dataset", (dir.path() / "data").string()},
                                                {"output", (dir.path() / "out").string()},
                                                {"preset", "desk"},
                                                {"steps", 2000},
                                                {"batch", 4},
                                                {"variants", "mvit,mvit+d+sa,mvit+d+glc"}});
  if (cli({"synth", "--config", config}) != 0) {
    o.require(false, "synth failed");
    return o;
  }
  const auto t0 = Clock::now();
  std::string csv;
  const int code = cli({"ablate", "--config", config, "--threads", "1", "--seed", "0"}, &csv);
  const double elapsed = seconds_since(t0);
  o.require(code == 0, "ablate exit " + std::to_string(code));
  if (!o.pass) return o;
  std::printf("%s", csv.c_str());
  std::map<std::string, double> f1;
  std::istringstream in(slurp(dir.path() / "out" / "ablation.csv"));
  std::string line;
  std::getline(in, line);
  o.require(line == "variant,f1,recall,precision,params,step0_f1", "unexpected CSV header " + line);
  while (std::getline(in, line)) f1[line.substr(0, line.find(','))] = std::stod(line.substr(line.find(',') + 1));
  o.require(f1.contains("mvit") && f1.contains("mvit+d+glc"), "CSV lacks a variant row");
  if (!o.pass) return o;
  o.require(f1["mvit+d+glc"] >= 0.50, "GLC F1 " + fmt("%.4f", f1["mvit+d+glc"]) + " < 0.50");
  o.require(f1["mvit+d+glc"] >= f1["mvit"] - 0.02,
            "GLC F1 " + fmt("%.4f", f1["mvit+d+glc"]) + " below MViT " + fmt("%.4f", f1["mvit"]) + " - 0.02");
  o.require(elapsed < 1800, "took " + fmt("%.0f s", elapsed));
  if (o.pass) {
    o.detail = "F1 mvit " + fmt("%.4f", f1["mvit"]) + ", +d+sa " + fmt("%.4f", f1["mvit+d+sa"]) + ", +d+glc " +
               fmt("%.4f", f1["mvit+d+glc"]) + ", " + fmt("%.0f s", elapsed);
  }
  return o;
}

Outcome determinism() {
  Outcome o;
  ScratchDir dir("determinism");
  const auto config = write_config(dir.path(), {{"dataset", (dir.path() / "data").string()},
                                                {"preset", "tiny"},
                                                {"synth.train_clips", 4},
                                                {"synth.test_clips", 2},
                                                {"steps", 8},
                                                {"batch", 2},
                                                {"eval_every", 4},
                                                {"variants", "mvit,mvit+d+glc"}});
  o.require(cli({"synth", "--config", config}) == 0, "synth failed");
  const auto first = slurp(dir.path() / "data" / "data.bin");
  o.require(cli({"synth", "--config", config}) == 0 && slurp(dir.path() / "data" / "data.bin") == first,
            "synth output differs");
  const std::vector<std::string> commands{"train", "eval", "infer", "export-maps", "ablate"};
  for (const auto* run : {"a", "b"}) {
    const auto out = "output=" + (dir.path() / run).string();
    for (const auto& c : commands) o.require(cli({c, "--config", config, "--set", out, "--threads", "1"}) == 0, c + " failed");
  }
  if (!o.pass) return o;
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir.path() / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), dir.path() / "a");
    o.require(slurp(entry.path()) == slurp(dir.path() / "b" / rel), rel.string() + " differs between runs");
    ++files;
  }
  if (o.pass) o.detail = std::to_string(files) + " output files byte-identical across two runs (CSV, JSON, PGM, checkpoints)";
  return o;
}

Outcome data_pipeline() {
  Outcome o;
  ScratchDir dir("data");
  glc::SynthParams p;
  p.seed = 3;
  p.train_clips = 2;
  p.test_clips = 1;
  std::vector<glc::ClipRecord> clips;
  for (std::int64_t i = 0; i < 3; ++i) clips.push_back(glc::synthesize_clip(p, i));
  glc::write_dataset(dir.path(), clips);
  const glc::Dataset data(dir.path());
  for (std::size_t i = 0; i < 3; ++i) {
    auto back = data.load(i);
    back.target = clips[i].target;
    o.require(back == clips[i], "round trip differs for " + clips[i].id);
  }
  o.require(glc::sample_indices(0) == std::vector<std::int64_t>{0, 8, 16, 24, 32, 40, 48, 56}, "sampler indices");

  glc::Rng rng(14);
  std::vector<float> frames(2 * 64 * 64);
  for (auto& v : frames) v = static_cast<float>(rng.uniform());
  o.require(glc::flip_horizontal(glc::flip_horizontal(frames, 64), 64) == frames, "flip is not an involution");
  o.require(glc::flip_gaze({true, 10, 5}, 64).x == 53, "flip gaze");

  double worst_marker = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto tf = glc::CropTransform::center(64, 64, 56, 56);
    tf.flip = rng.bernoulli(0.5);
    tf.zoom = 1.1;
    tf.cx += rng.uniform(-3, 3);
    tf.cy += rng.uniform(-3, 3);
    const std::int64_t mx = 16 + rng.index(32), my = 16 + rng.index(32);
    std::vector<float> marker(64 * 64, 0.0f);
    marker[static_cast<std::size_t>(my * 64 + mx)] = 1.0f;
    const auto warped = glc::apply_crop(marker, 1, tf);
    double sx = 0, sy = 0, sw = 0;
    for (std::int64_t v = 0; v < 56; ++v)
      for (std::int64_t u = 0; u < 56; ++u) {
        const double w = warped[static_cast<std::size_t>(v * 56 + u)];
        sx += w * u, sy += w * v, sw += w;
      }
    const auto g = tf.apply({true, static_cast<double>(mx), static_cast<double>(my)});
    worst_marker = sw > 0 && g.tracked ? std::max(worst_marker, std::hypot(sx / sw - g.x, sy / sw - g.y)) : INFINITY;
  }
  o.require(worst_marker <= 0.5, "marker off by " + fmt("%.3f px", worst_marker));

  // generated tracks: injected jumps of three thresholds are exactly the saccades
  glc::SynthParams s = p;
  s.train_clips = 30;
  s.jitter = 0;
  s.gap_rate = 0;
  s.saccade_rate = 0.05;
  const double threshold = glc::LabelGeometry::for_crop(s.width).saccade_threshold;
  s.saccade_jump = 3 * threshold;
  std::size_t jumps = 0;
  for (std::int64_t i = 0; i < s.train_clips; ++i) {
    const auto rec = glc::synthesize_clip(s, i);
    const auto kinds = glc::fixation_filter(rec.track, threshold);
    std::vector<std::int64_t> found;
    for (std::size_t f = 0; f < kinds.size(); ++f)
      if (kinds[f] == glc::GazeKind::saccade) found.push_back(static_cast<std::int64_t>(f));
    o.require(found == rec.saccades, "saccades differ on " + rec.id);
    jumps += rec.saccades.size();
  }
  if (o.pass) {
    o.detail = "round trip exact; sampler [0..56]; flip involution; marker err " + fmt("%.3f px", worst_marker) + "; " +
               std::to_string(jumps) + " injected saccades recovered";
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"GLC oracle equivalence", glc_oracle},
      {"mask support", mask_support},
      {"gradient suite", gradient_suite},
      {"shape ledger", shape_ledger},
      {"distribution contracts", distributions},
      {"parameter parity", parity},
      {"scaled ablation", ablation},
      {"determinism", determinism},
      {"data pipeline", data_pipeline}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  glc::set_num_threads(1);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d (%s): %s - %s\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
