#pragma once

// Command-line front end:
//   glc_tool {train|eval|infer|export-maps|gradcheck|ablate|synth} --config PATH
//            [--set key=value]... [--threads N] [--seed N]
// Exit codes: 0 ok, 1 check failure, 2 config, 3 dataset, 4 numeric, 5 I/O.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "glc/checkpoint.hpp"
#include "glc/data.hpp"
#include "glc/error.hpp"
#include "glc/export.hpp"
#include "glc/gradcheck_suite.hpp"
#include "glc/parallel.hpp"
#include "glc/run_config.hpp"
#include "glc/train.hpp"

namespace glc {

enum ExitCode { exit_ok = 0, exit_check = 1, exit_config = 2, exit_dataset = 3, exit_numeric = 4, exit_io = 5 };

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::check: return exit_check;
    case ErrorKind::shape:
    case ErrorKind::config:
    case ErrorKind::usage: return exit_config;
    case ErrorKind::dataset:
    case ErrorKind::version:
    case ErrorKind::checksum:
    case ErrorKind::truncated: return exit_dataset;
    case ErrorKind::numeric: return exit_numeric;
    case ErrorKind::io: return exit_io;
  }
  return exit_check;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) fail(ErrorKind::io, "cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string());
  out << text;
  out.close();
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
}

inline void load_model(GazeModel<float>& model, const RunConfig& rc) {
  load_checkpoint(rc.checkpoint_dir(), rc.model, model.params());
}

/// The requested clip, or the first test clip (first clip when the test split is empty).
inline std::size_t pick_clip(const Dataset& data, const std::string& id) {
  if (!id.empty()) return data.find(id);
  const auto test = data.split(Split::test);
  if (!test.empty()) return test.front();
  if (data.entries().empty()) fail(ErrorKind::dataset, "the dataset has no clips");
  return 0;
}

inline int cmd_synth(const RunConfig& rc, std::ostream& out) {
  generate_dataset(rc.dataset, rc.synth);
  out << "wrote " << rc.synth.clip_count() << " clips to " << rc.dataset.string() << '\n';
  return exit_ok;
}

inline int cmd_train(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const Dataset data(rc.dataset);
  const auto result = train_model(data, rc, rc.model, rc.output, rc.checkpoint_dir(), &err);
  const std::string report = nlohmann::json(result.final).dump(1) + '\n';
  write_text(rc.output / "eval.json", report);
  out << report;
  return exit_ok;
}

inline int cmd_eval(const RunConfig& rc, std::ostream& out) {
  const Dataset data(rc.dataset);
  check_compatible(data, rc.model);
  GazeModel<float> model(rc.model, rc.seed);
  load_model(model, rc);
  const auto report = evaluate(data, rc.model, rc.geometry(), rc.eval_clips, model_predictor(model));
  const std::string text = nlohmann::json(report).dump(1) + '\n';
  write_text(rc.output / "eval.json", text);
  out << text;
  return exit_ok;
}

/// Per-frame argmax of the predicted heatmap, in input pixels (cell * stride).
inline int cmd_infer(const RunConfig& rc, std::ostream& out) {
  const Dataset data(rc.dataset);
  check_compatible(data, rc.model);
  GazeModel<float> model(rc.model, rc.seed);
  load_model(model, rc);
  std::vector<std::size_t> clips;
  if (rc.clip.empty()) clips = data.split(Split::test);
  else clips.push_back(data.find(rc.clip));
  const Grid o = rc.model.output_grid();
  nlohmann::json result = nlohmann::json::array();
  const auto predict = model_predictor(model);
  for (const auto c : clips) {
    const auto ex = make_example(data, c, rc.model.height, rc.model.width, rc.geometry().saccade_threshold, nullptr);
    const auto heat = predict(ex);
    nlohmann::json frames = nlohmann::json::array();
    for (std::int64_t f = 0; f < o.t; ++f) {
      const auto begin = heat.begin() + f * o.h * o.w;
      const auto best = std::max_element(begin, begin + o.h * o.w) - begin;
      frames.push_back({{"x", static_cast<double>((best % o.w) * rc.model.patch_stride.w)},
                        {"y", static_cast<double>((best / o.w) * rc.model.patch_stride.h)},
                        {"probability", static_cast<double>(begin[best])}});
    }
    result.push_back({{"id", data.entries()[c].id}, {"start", ex.start}, {"frames", frames}});
  }
  const std::string text = nlohmann::json{{"clips", result}}.dump(1) + '\n';
  write_text(rc.output / "predictions.json", text);
  out << "wrote " << (rc.output / "predictions.json").string() << '\n';
  return exit_ok;
}

inline int cmd_export_maps(const RunConfig& rc, std::ostream& out) {
  const Dataset data(rc.dataset);
  check_compatible(data, rc.model);
  GazeModel<float> model(rc.model, rc.seed);
  load_model(model, rc);
  const auto c = pick_clip(data, rc.clip);
  const auto ex = make_example(data, c, rc.model.height, rc.model.width, rc.geometry().saccade_threshold, nullptr);
  const auto clip = example_tensor(ex);
  const auto& id = data.entries()[c].id;
  std::error_code ec;
  std::filesystem::create_directories(rc.output, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + rc.output.string() + ": " + ec.message());
  const auto heads = head_maps_at_input(model, clip);
  for (std::size_t h = 0; h < heads.size(); ++h) {
    write_pgm(rc.output / (id + "_head" + std::to_string(h) + ".pgm"), heads[h], rc.model.height, rc.model.width);
  }
  const auto preds = predictions_at_input(model, clip);
  for (std::size_t f = 0; f < preds.size(); ++f) {
    write_pgm(rc.output / (id + "_frame" + std::to_string(f) + "_pred.pgm"), preds[f], rc.model.height, rc.model.width);
  }
  out << "wrote " << heads.size() << " head maps and " << preds.size() << " frame predictions for " << id << " to "
      << rc.output.string() << '\n';
  return exit_ok;
}

inline int cmd_gradcheck(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto reports = run_gradcheck_suite(rc.gradcheck);
  std::vector<std::string> failed;
  for (const auto& r : reports) {
    out << r.summary() << '\n';
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) {
    out << "all " << reports.size() << " gradient checks passed\n";
    return exit_ok;
  }
  err << "gradient check failed:";
  for (const auto& name : failed) err << ' ' << name;
  err << '\n';
  return exit_check;
}

inline int cmd_ablate(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const Dataset data(rc.dataset);
  run_ablation(data, rc, &err);
  std::ifstream csv(rc.output / "ablation.csv");
  out << csv.rdbuf();
  return exit_ok;
}

}  // namespace detail

/// Parses `args` (without the program name) and runs the command.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Egocentric gaze estimation with global-local correlation"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "train one variant and write a checkpoint plus log.csv"},
      {"eval", "score a checkpoint on the test split"},
      {"infer", "write per-frame gaze predictions"},
      {"export-maps", "write global-local correlation head maps and predicted heatmaps as PGM"},
      {"gradcheck", "run the finite-difference gradient suite"},
      {"ablate", "train several variants and write ablation.csv"},
      {"synth", "generate the seeded synthetic dataset"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON file {\"overrides\": {...}}")->required();
    sub->add_option("--set", sets, "override a config key (key=value)")->take_all();
    sub->add_option("--threads", threads, "worker threads (default: $GLC_THREADS, else the config)");
    sub->add_option("--seed", seed, "run seed");
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return exit_config;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    auto settings = read_config_file(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) fail(ErrorKind::config, "--set expects key=value, got '" + s + "'");
      settings.emplace_back(s.substr(0, eq), parse_set_value(s.substr(eq + 1)));
    }
    if (!threads) {
      if (const char* env = std::getenv("GLC_THREADS"); env && *env) {
        try {
          threads = std::stoi(env);
        } catch (const std::exception&) {
          fail(ErrorKind::config, std::string("GLC_THREADS is not a number: ") + env);
        }
      }
    }
    if (threads) settings.emplace_back("threads", *threads);
    if (seed) settings.emplace_back("seed", *seed);
    const RunConfig rc = resolve_run_config(settings);
    set_num_threads(rc.threads);

    if (command == "synth") return detail::cmd_synth(rc, out);
    if (command == "train") return detail::cmd_train(rc, out, err);
    if (command == "eval") return detail::cmd_eval(rc, out);
    if (command == "infer") return detail::cmd_infer(rc, out);
    if (command == "export-maps") return detail::cmd_export_maps(rc, out);
    if (command == "gradcheck") return detail::cmd_gradcheck(rc, out, err);
    return detail::cmd_ablate(rc, out, err);
  } catch (const Error& e) {
    err << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return exit_io;
  }
}

}  // namespace glc
