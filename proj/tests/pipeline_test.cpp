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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "lesionfuse/pipeline/stages.hpp"

namespace {

namespace fs = std::filesystem;
using lf::pipeline::json;
namespace pl = lf::pipeline;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lf_pipeline_test_" + name);
  fs::remove_all(p);
  return p;
}

// Small enough to train every model in a few seconds.
pl::PipelineConfig tiny(const fs::path& work, int folds = 2) {
  json j = json::parse(R"({
    "data": {"train_cases": 4, "test_cases": 2, "test_no_lesion": 1,
             "phantom": {"shape": [24, 24, 24], "lesion_radius_range": [2.0, 3.0]}},
    "unet": {"base_width": 2, "depth": 2},
    "unetpp": {"base_width": 2, "depth": 2},
    "train": {"epochs": 1, "iterations_per_epoch": 1, "batch_size": 1, "patch": [16, 16, 16]},
    "slice_classifier": {"epochs": 1, "iterations_per_epoch": 1, "batch_size": 2, "slice_size": [16, 16]},
    "radiomics": {"gbt": {"trees": 3}}
  })");
  j["work_dir"] = work.string();
  j["folds"] = folds;
  return pl::config_from_json(j);
}

TEST(PipelineConfig, JsonRoundTripIsStable) {
  const auto c = pl::paper_profile();
  const json a = pl::to_json(c);
  const json b = pl::to_json(pl::from_json_full(a));
  EXPECT_EQ(a, b);
  EXPECT_EQ(pl::content_hash(a), pl::content_hash(b));
  EXPECT_EQ(pl::content_hash(a).size(), 16u);
}

TEST(PipelineConfig, PartialDocumentOverlaysProfile) {
  const auto c = pl::config_from_json(json{{"profile", "paper"}, {"seed", 7}});
  EXPECT_EQ(c.folds, 5);
  EXPECT_EQ(c.train.epochs, 1000);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(pl::config_from_json(json::object()).folds, 2);
}

TEST(PipelineConfig, RejectsUnknownKeysAndBadSettings) {
  EXPECT_THROW(pl::config_from_json(json{{"trian", {{"epochs", 3}}}}), lf::ArgumentError);
  EXPECT_THROW(pl::config_from_json(json{{"train", {{"epoch", 3}}}}), lf::ArgumentError);
  auto c = pl::desk_profile();
  c.setting = 8;
  EXPECT_THROW(c.validate(), lf::ArgumentError);
  c.setting = 1;
  c.postprocess.voxel_gate = -1;
  EXPECT_THROW(c.validate(), lf::ArgumentError);
}

TEST(Workspace, CompletedStageIsReused) {
  const fs::path work = scratch("cache");
  pl::Workspace ws(tiny(work), {true});
  int runs = 0;
  auto produce = [&](const fs::path& dir) {
    ++runs;
    std::ofstream(dir / "out.txt") << "x";
  };
  const auto a = ws.stage("demo", json{{"k", 1}}, produce);
  const auto b = ws.stage("demo", json{{"k", 1}}, produce);
  EXPECT_EQ(runs, 1);
  EXPECT_EQ(a.dir, b.dir);
  ws.stage("demo", json{{"k", 2}}, produce);
  EXPECT_EQ(runs, 2);
  fs::remove_all(work);
}

TEST(Workspace, IncompleteStageIsRedone) {
  const fs::path work = scratch("partial");
  pl::Workspace ws(tiny(work), {true});
  int runs = 0;
  bool fail = true;
  auto produce = [&](const fs::path&) {
    ++runs;
    if (fail) throw lf::TrainingError("boom");
  };
  EXPECT_THROW(ws.stage("demo", json{{"k", 1}}, produce), lf::TrainingError);
  fail = false;
  ws.stage("demo", json{{"k", 1}}, produce);
  EXPECT_EQ(runs, 2);
  fs::remove_all(work);
}

TEST(Workspace, MissingUpstreamNamesTheStage) {
  const fs::path work = scratch("missing");
  pl::Workspace ws(tiny(work), {true});
  ws.set_runnable({"preprocess"});
  try {
    pl::prepare_upstream(ws, {1}, "preprocess");
    FAIL() << "expected a stage error";
  } catch (const lf::StageError& e) {
    EXPECT_NE(std::string(e.what()).find("'data'"), std::string::npos) << e.what();
  }
  fs::remove_all(work);
}

TEST(Pipeline, ParallelJobsMatchSerial) {
  std::vector<int> out(9, 0);
  pl::parallel_for(9, 3, [&](int i) { out[static_cast<std::size_t>(i)] = i * i; });
  for (int i = 0; i < 9; ++i) EXPECT_EQ(out[static_cast<std::size_t>(i)], i * i);
  EXPECT_THROW(pl::parallel_for(4, 2, [](int i) {
                 if (i == 2) throw lf::StageError("x");
               }),
               lf::StageError);
}

class TinyPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    work_ = new fs::path(scratch("tiny"));
    ws_ = new pl::Workspace(tiny(*work_), {true});
    up_ = new pl::Upstream(pl::prepare_upstream(*ws_, {1, 2, 3, 4, 5, 6, 7}));
  }
  static void TearDownTestSuite() {
    delete up_;
    delete ws_;
    fs::remove_all(*work_);
    delete work_;
  }
  static fs::path* work_;
  static pl::Workspace* ws_;
  static pl::Upstream* up_;
};

fs::path* TinyPipeline::work_ = nullptr;
pl::Workspace* TinyPipeline::ws_ = nullptr;
pl::Upstream* TinyPipeline::up_ = nullptr;

TEST_F(TinyPipeline, EverySettingWritesItsArtifacts) {
  for (int s = 1; s <= 7; ++s) {
    const auto r = pl::run_setting(*ws_, *up_, s);
    EXPECT_EQ(r.metrics.n, 2u);
    for (const char* f : {"metrics.json", "cases.csv", "filters.json", "provenance.json", "stage.json"}) {
      EXPECT_TRUE(fs::exists(r.stage.dir / f)) << s << " " << f;
    }
    const json filters = pl::read_json(r.stage.dir / "filters.json");
    const std::size_t expected = (pl::uses_slice_filter(s) ? 2u : 0u) + (pl::uses_radiomics_filter(s) ? 2u : 0u);
    EXPECT_EQ(filters.size(), expected) << s;
  }
}

TEST_F(TinyPipeline, RerunIsANoOpAndReportIsWritten) {
  const auto stamp = fs::last_write_time(up_->unet_models[0].dir / "stage.json");
  const auto again = pl::prepare_upstream(*ws_, {1, 2, 3, 4, 5, 6, 7});
  EXPECT_EQ(again.unet_models[0].hash, up_->unet_models[0].hash);
  EXPECT_EQ(fs::last_write_time(up_->unet_models[0].dir / "stage.json"), stamp);
  std::vector<pl::SettingResult> rs;
  for (int s : {1, 2, 7}) rs.push_back(pl::run_setting(*ws_, *up_, s));
  const auto rep = pl::report_stage(*ws_, *up_, rs);
  EXPECT_TRUE(fs::exists(rep.dir / "results.csv"));
  EXPECT_TRUE(fs::exists(rep.dir / "setting7_heatmap_fp.nii"));
  EXPECT_EQ(pl::read_json(rep.dir / "summary.json").at("ttests").size(), 3u);
}

TEST_F(TinyPipeline, IdenticalMapsMakeSettingSevenEqualSettingOne) {
  pl::Upstream same = *up_;
  same.unet_test = {up_->unet_test[0]};
  same.unetpp_test = up_->unet_test[0];
  const auto s1 = pl::run_setting(*ws_, same, 1);
  const auto s7 = pl::run_setting(*ws_, same, 7);
  for (const auto& c : s1.cases) {
    const std::string f = c.id + "_mask.nii";
    EXPECT_EQ(slurp(s1.stage.dir / "masks" / f), slurp(s7.stage.dir / "masks" / f));
  }
  EXPECT_EQ(slurp(s1.stage.dir / "cases.csv"), slurp(s7.stage.dir / "cases.csv"));
}

TEST_F(TinyPipeline, SliceFilterAboveGateLeavesSettingOneUnchanged) {
  auto cfg = ws_->config();
  cfg.postprocess.volume_gate_mm3 = 0.0;
  pl::Workspace ws(cfg, {true});
  const auto s1 = pl::run_setting(ws, *up_, 1);
  const auto s3 = pl::run_setting(ws, *up_, 3);
  EXPECT_EQ(slurp(s1.stage.dir / "cases.csv"), slurp(s3.stage.dir / "cases.csv"));
  for (const auto& f : pl::read_json(s3.stage.dir / "filters.json")) EXPECT_FALSE(f.at("applied").get<bool>());
}

TEST_F(TinyPipeline, SameSeedReproducesBitIdenticalArtifacts) {
  const fs::path other = scratch("tiny_again");
  pl::Workspace ws(tiny(other), {true});
  const auto up = pl::prepare_upstream(ws, {1, 2, 5});
  for (int s : {1, 2, 5}) {
    const auto a = pl::run_setting(*ws_, *up_, s);
    const auto b = pl::run_setting(ws, up, s);
    EXPECT_EQ(a.stage.hash, b.stage.hash);
    for (const auto& c : a.cases) {
      const std::string f = c.id + "_mask.nii";
      EXPECT_EQ(slurp(a.stage.dir / "masks" / f), slurp(b.stage.dir / "masks" / f));
    }
    EXPECT_EQ(slurp(a.stage.dir / "metrics.json"), slurp(b.stage.dir / "metrics.json"));
  }
  EXPECT_EQ(slurp(up_->unet_models[1].dir / "model.ckpt"), slurp(up.unet_models[1].dir / "model.ckpt"));
  fs::remove_all(other);
}

TEST_F(TinyPipeline, ConcurrentJobsGiveTheSameModels) {
  const fs::path other = scratch("tiny_jobs");
  auto cfg = tiny(other);
  cfg.jobs = 3;
  pl::Workspace ws(cfg, {true});
  const auto up = pl::prepare_upstream(ws, {7}, "train-seg");
  ASSERT_EQ(up.unet_models.size(), 2u);
  EXPECT_EQ(slurp(up_->unet_models[0].dir / "model.ckpt"), slurp(up.unet_models[0].dir / "model.ckpt"));
  EXPECT_EQ(slurp(up_->unetpp_model->dir / "model.ckpt"), slurp(up.unetpp_model->dir / "model.ckpt"));
  fs::remove_all(other);
}

}  // namespace
