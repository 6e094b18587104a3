/*
 * Copyright 2026 The LesionFuse Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// lesionfuse command line: one subcommand per pipeline stage plus `run`.
// Exit codes: 0 success, 1 stage failure, 2 usage error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lesionfuse/pipeline/stages.hpp"

namespace {

using lf::pipeline::json;
namespace fs = std::filesystem;
namespace pl = lf::pipeline;

struct Common {
  std::string config;
  std::optional<int> setting;
  std::optional<std::string> profile;
  std::optional<int> jobs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> work_dir;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "pipeline config (JSON)")->envname("LF_CONFIG");
  // Values are range-checked by the config validation, which also covers
  // the environment fallbacks.
  app->add_option("--setting", c.setting, "setting 1..7")->envname("LF_SETTING");
  app->add_option("--profile", c.profile, "desk | paper")->envname("LF_PROFILE");
  app->add_option("--jobs", c.jobs, "concurrent model jobs")->envname("LF_JOBS");
  app->add_option("--seed", c.seed, "master seed")->envname("LF_SEED");
  app->add_option("--work-dir", c.work_dir, "artifact root")->envname("LF_WORK_DIR");
  app->add_flag("--quiet", c.quiet, "no progress log")->envname("LF_QUIET");
}

// Flags (and their LF_ environment fallbacks) override the config file,
// which overrides the profile defaults.
pl::PipelineConfig resolve(const Common& c) {
  json user = json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) lf::raise<lf::IoError>("cannot read config ", c.config);
    try {
      in >> user;
    } catch (const json::exception& e) {
      lf::raise<lf::FormatError>(c.config, ": ", e.what());
    }
  }
  if (c.profile) user["profile"] = *c.profile;
  if (c.setting) user["setting"] = *c.setting;
  if (c.jobs) user["jobs"] = *c.jobs;
  if (c.seed) user["seed"] = *c.seed;
  if (c.work_dir) user["work_dir"] = *c.work_dir;
  auto cfg = pl::config_from_json(user);
  cfg.validate();
  return cfg;
}

std::vector<int> settings_of(const pl::PipelineConfig& cfg, const std::vector<int>& explicit_list, bool all) {
  if (all) return {1, 2, 3, 4, 5, 6, 7};
  if (!explicit_list.empty()) return explicit_list;
  return {cfg.setting};
}

void print_metrics(const pl::SettingResult& r) {
  std::cout << json{{"setting", r.setting}, {"dir", r.stage.dir.string()}, {"metrics", pl::to_json(r.metrics)}}.dump()
            << std::endl;
}

int run_upstream(const Common& common, const std::string& target, const std::vector<int>& settings) {
  const auto cfg = resolve(common);
  pl::Workspace ws(cfg, {common.quiet});
  ws.set_runnable({target});
  pl::prepare_upstream(ws, settings_of(cfg, settings, false), target);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lesionfuse: lesion segmentation pipeline with false-positive filtering"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pl::kVersion);

  Common common;
  std::vector<int> settings;
  bool all = false;

  struct Sub {
    CLI::App* app;
    std::string stage;
  };
  std::vector<Sub> stage_cmds;
  auto stage_cmd = [&](const std::string& name, const std::string& stage, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, common);
    s->add_option("--settings", settings, "settings whose inputs to build")->check(CLI::Range(1, 7));
    stage_cmds.push_back({s, stage});
    return s;
  };
  stage_cmd("synth", "data", "generate (or register) the train/test cohorts");
  stage_cmd("preprocess", "preprocess", "bias-correct, crop and normalize every case");
  stage_cmd("train-seg", "train-seg", "train the segmentation networks");
  stage_cmd("predict", "predict", "probability maps for test and out-of-fold cases");
  stage_cmd("train-clf", "train-clf", "train the axial slice classifier");
  stage_cmd("train-fpclf", "train-fpclf", "train the radiomics false-positive classifier");

  CLI::App* post = app.add_subcommand("postprocess", "fuse, binarize, filter and score one or more settings");
  add_common(post, common);
  post->add_option("--settings", settings)->check(CLI::Range(1, 7));
  post->add_flag("--all", all, "settings 1..7");

  CLI::App* run = app.add_subcommand("run", "every stage for the chosen settings, then the report");
  add_common(run, common);
  run->add_option("--settings", settings)->check(CLI::Range(1, 7));
  run->add_flag("--all", all, "settings 1..7");

  CLI::App* report = app.add_subcommand("report", "results table, scatter, heatmaps and t-tests");
  add_common(report, common);
  report->add_option("--settings", settings)->check(CLI::Range(1, 7));
  report->add_flag("--all", all, "settings 1..7");

  std::vector<std::string> maps;
  std::vector<double> weights;
  std::string out;
  CLI::App* ens = app.add_subcommand("ensemble", "weighted voxelwise mean of probability maps");
  ens->add_option("--map", maps, "probability map (NIfTI), repeatable")->required()->check(CLI::ExistingFile);
  ens->add_option("--weights", weights, "one weight per map");
  ens->add_option("--out", out, "output NIfTI")->required();

  std::string truth, pred, eval_out;
  double min_volume = 0.0;
  CLI::App* evaluate = app.add_subcommand("evaluate", "score predicted masks against ground truth");
  evaluate->add_option("--truth", truth, "manifest with ground-truth masks")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--pred", pred, "manifest whose mask entries are predictions")
      ->required()
      ->check(CLI::ExistingFile);
  evaluate->add_option("--out", eval_out, "output directory")->required();
  evaluate->add_option("--min-volume", min_volume, "lesion-present volume threshold (mm^3)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (const auto& s : stage_cmds) {
      if (s.app->parsed()) return run_upstream(common, s.stage, settings);
    }
    if (post->parsed() || run->parsed() || report->parsed()) {
      const auto cfg = resolve(common);
      pl::Workspace ws(cfg, {common.quiet});
      const auto list = settings_of(cfg, settings, all);
      if (post->parsed()) {
        std::set<std::string> names;
        for (int s : list) names.insert("setting" + std::to_string(s));
        ws.set_runnable(names);
      } else if (report->parsed()) {
        ws.set_runnable({"report"});
      }
      const auto up = pl::prepare_upstream(ws, list);
      std::vector<pl::SettingResult> results;
      for (int s : list) {
        results.push_back(pl::run_setting(ws, up, s));
        print_metrics(results.back());
      }
      if (!post->parsed()) {
        const auto ref = pl::report_stage(ws, up, results);
        std::cout << json{{"report", ref.dir.string()}}.dump() << std::endl;
      }
      return 0;
    }
    if (ens->parsed()) {
      std::vector<lf::Volume> vols;
      for (const auto& m : maps) vols.push_back(lf::nifti::read(m));
      lf::nifti::write(lf::postprocess::ensemble_average(vols, weights), out);
      return 0;
    }
    if (evaluate->parsed()) {
      const auto gt = lf::eval::read_manifest(truth);
      const auto pr = lf::eval::read_manifest(pred);
      std::map<std::string, std::string> pred_of;
      for (const auto& e : pr) pred_of[e.id] = e.mask;
      std::vector<lf::eval::CaseResult> results;
      for (const auto& e : gt) {
        const auto it = pred_of.find(e.id);
        if (it == pred_of.end()) lf::raise<lf::DatasetError>("no prediction for case ", e.id);
        if (e.mask.empty()) lf::raise<lf::DatasetError>("no ground truth for case ", e.id);
        results.push_back(lf::eval::evaluate_case(e.id, lf::nifti::read_mask(it->second),
                                                  lf::nifti::read_mask(e.mask), min_volume));
      }
      const auto m = lf::eval::stratified_dsc(results);
      fs::create_directories(eval_out);
      lf::eval::write_case_results((fs::path(eval_out) / "cases.csv").string(), results);
      pl::write_json(fs::path(eval_out) / "metrics.json", pl::to_json(m));
      std::cout << pl::to_json(m).dump() << std::endl;
      return 0;
    }
  } catch (const lf::UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 2;
  } catch (const lf::ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
