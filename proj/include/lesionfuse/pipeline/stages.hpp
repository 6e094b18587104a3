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

// File-backed pipeline stages. Each stage owns a directory
// <work>/<stage>/<hash>/ where the hash covers the stage's own settings and
// the hashes of its inputs; a directory with a completed stage.json is
// reused as is.

#pragma once

#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lesionfuse/core/nifti.hpp"
#include "lesionfuse/eval/report.hpp"
#include "lesionfuse/models/builders.hpp"
#include "lesionfuse/models/predict.hpp"
#include "lesionfuse/nn/checkpoint.hpp"
#include "lesionfuse/pipeline/config.hpp"
#include "lesionfuse/training/folds.hpp"

namespace lf::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";

// Seed streams; each stage draws from its own.
enum SeedStream : std::uint64_t {
  kSynthStream = 1,
  kFoldStream = 2,
  kUNetInit = 100,
  kUNetTrain = 200,
  kUNetPPInit = 300,
  kUNetPPTrain = 301,
  kDenseInit = 400,
  kDenseTrain = 401,
  kSliceSplit = 402,
  kGbtStream = 500,
};

enum class Arch { kUNet, kUNetPP };

inline std::string arch_name(Arch a) { return a == Arch::kUNet ? "unet" : "unetpp"; }

struct StageRef {
  std::string name;
  std::string hash;
  fs::path dir;
};

struct Logger {
  bool quiet = false;
  std::mutex* mu = nullptr;

  void operator()(const std::string& msg) const {
    if (quiet) return;
    if (mu) {
      std::lock_guard<std::mutex> lock(*mu);
      std::cerr << "[lf] " << msg << std::endl;
    } else {
      std::cerr << "[lf] " << msg << std::endl;
    }
  }
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads; the first exception
// (lowest index) is rethrown after all workers finish.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::mutex mu;
  int next = 0;
  auto worker = [&] {
    for (;;) {
      int i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(jobs, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) raise<IoError>("cannot write ", path.string());
  out << j.dump(1) << "\n";
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) raise<IoError>("cannot read ", path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    raise<FormatError>(path.string(), ": ", e.what());
  }
}

struct CaseData {
  std::string id;
  Volume image;
  Mask mask;
};

struct PreparedCase {
  std::string id;
  preprocess::PreprocessedCase pre;
  Mask original_mask;
  Geometry original_geometry;
};

class Workspace {
 public:
  explicit Workspace(PipelineConfig cfg, Logger log = {})
      : cfg_(std::move(cfg)), root_(cfg_.work_dir), log_(log) {
    cfg_.validate();
    log_.mu = &log_mu_;
  }

  // Restricts which stages may be produced; any other stage must already be
  // complete. Empty means unrestricted.
  void set_runnable(std::set<std::string> names) { runnable_ = std::move(names); }

  const PipelineConfig& config() const { return cfg_; }
  const fs::path& root() const { return root_; }
  const Logger& log() const { return log_; }

  // Runs `produce` into a fresh directory unless a completed one exists.
  StageRef stage(const std::string& name, const json& key, const std::function<void(const fs::path&)>& produce) {
    const std::string hash = content_hash(key);
    const fs::path dir = root_ / name / hash;
    StageRef ref{name, hash, dir};
    if (complete(dir)) {
      log_(name + " " + hash + ": up to date");
      return ref;
    }
    if (!runnable_.empty() && !runnable_.count(name)) {
      raise<StageError>("missing upstream artifact: stage '", name, "' (", dir.string(),
                        ") has not completed; run it first");
    }
    fs::remove_all(dir);
    fs::create_directories(dir);
    log_(name + " " + hash + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    produce(dir);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(dir / "stage.json", {{"stage", name}, {"hash", hash}, {"key", key}, {"seconds", secs},
                                    {"version", kVersion}, {"complete", true}});
    log_(name + " " + hash + ": done in " + std::to_string(secs) + " s");
    return ref;
  }

  static bool complete(const fs::path& dir) {
    const fs::path f = dir / "stage.json";
    if (!fs::exists(f)) return false;
    try {
      return read_json(f).value("complete", false);
    } catch (const Error&) {
      return false;
    }
  }

  // Fails with a StageError naming the stage whose output is missing.
  static void require(const StageRef& ref) {
    if (!complete(ref.dir)) {
      raise<StageError>("missing upstream artifact: stage '", ref.name, "' (", ref.dir.string(),
                        ") has not completed");
    }
  }

 private:
  PipelineConfig cfg_;
  fs::path root_;
  Logger log_;
  std::mutex log_mu_;
  std::set<std::string> runnable_;
};

// --- data -----------------------------------------------------------------

inline json synth_key(const PipelineConfig& c) {
  json d = to_json(c).at("data");
  return {{"data", d}, {"seed", c.seed}};
}

// Synthetic train/test cohorts as NIfTI files plus manifests, or the user's
// manifests when configured.
inline StageRef data_stage(Workspace& ws) {
  const auto& c = ws.config();
  if (!c.data.train_manifest.empty() || !c.data.test_manifest.empty()) {
    if (c.data.train_manifest.empty() || c.data.test_manifest.empty()) {
      raise<ArgumentError>("both train_manifest and test_manifest must be given");
    }
    json key{{"train", fs::absolute(c.data.train_manifest).string()},
             {"test", fs::absolute(c.data.test_manifest).string()},
             {"train_content", read_json(c.data.train_manifest)},
             {"test_content", read_json(c.data.test_manifest)}};
    return ws.stage("data", key, [&](const fs::path& dir) {
      // Rewritten with absolute paths so the copies stay valid.
      for (const char* split : {"train", "test"}) {
        const auto entries = eval::read_manifest(split == std::string("train") ? c.data.train_manifest
                                                                               : c.data.test_manifest);
        eval::write_manifest((dir / (std::string(split) + "_manifest.json")).string(), [&] {
          std::vector<eval::ManifestEntry> abs;
          for (auto e : entries) {
            e.image = fs::absolute(e.image).string();
            if (!e.mask.empty()) e.mask = fs::absolute(e.mask).string();
            abs.push_back(e);
          }
          return abs;
        }());
      }
    });
  }
  return ws.stage("data", synth_key(c), [&](const fs::path& dir) {
    const std::uint64_t base = derive_seed(c.seed, kSynthStream);
    auto emit = [&](const std::string& split, int n, double no_lesion, std::uint64_t seed) {
      const auto cohort = synth::generate_cohort(n, c.data.phantom, no_lesion, seed);
      std::vector<eval::ManifestEntry> entries;
      fs::create_directories(dir / split);
      for (const auto& cc : cohort) {
        const std::string id = split + "_" + cc.id;
        const std::string img = split + "/" + id + "_image.nii";
        const std::string msk = split + "/" + id + "_mask.nii";
        nifti::write(cc.image, dir / img);
        nifti::write_mask(cc.mask, dir / msk);
        entries.push_back({id, img, msk, count_nonzero(cc.mask) > 0});
      }
      eval::write_manifest((dir / (split + "_manifest.json")).string(), entries);
    };
    emit("train", c.data.train_cases, c.data.train_no_lesion_fraction, derive_seed(base, 1));
    emit("test", c.data.test_cases,
         static_cast<double>(c.data.test_no_lesion) / static_cast<double>(c.data.test_cases),
         derive_seed(base, 2));
  });
}

inline std::vector<eval::ManifestEntry> manifest(const StageRef& data, const std::string& split) {
  Workspace::require(data);
  return eval::read_manifest((data.dir / (split + "_manifest.json")).string());
}

// --- preprocessing ----------------------------------------------------------

// The original geometry is read back from the source image.
inline json geometry_json(const preprocess::CaseGeometry& g) {
  return {{"original_dims", g.original_dims},
          {"crop_lower", g.crop_box.lower},
          {"crop_upper", g.crop_box.upper},
          {"cropped_dims", g.cropped_dims}};
}

inline preprocess::CaseGeometry geometry_from_json(const json& j) {
  preprocess::CaseGeometry g;
  g.original_dims = j.at("original_dims").get<Index3>();
  g.crop_box.lower = j.at("crop_lower").get<Index3>();
  g.crop_box.upper = j.at("crop_upper").get<Index3>();
  g.cropped_dims = j.at("cropped_dims").get<Index3>();
  return g;
}

inline StageRef preprocess_stage(Workspace& ws, const StageRef& data) {
  Workspace::require(data);
  const json key{{"data", data.hash}, {"preprocess", to_json(ws.config()).at("preprocess")}};
  return ws.stage("preprocess", key, [&](const fs::path& dir) {
    for (const char* split : {"train", "test"}) {
      fs::create_directories(dir / split);
      for (const auto& e : manifest(data, split)) {
        const Volume img = nifti::read(e.image);
        std::optional<Mask> m;
        if (!e.mask.empty()) m = nifti::read_mask(e.mask);
        const auto pre = preprocess::preprocess_case(img, m ? &*m : nullptr, ws.config().preprocess);
        nifti::write(pre.image, dir / split / (e.id + "_image.nii"));
        if (pre.mask) nifti::write_mask(*pre.mask, dir / split / (e.id + "_mask.nii"));
        write_json(dir / split / (e.id + "_geometry.json"), geometry_json(pre.geometry));
      }
    }
  });
}

inline PreparedCase load_prepared(const StageRef& data, const StageRef& pre, const std::string& split,
                                  const eval::ManifestEntry& e) {
  Workspace::require(pre);
  PreparedCase pc;
  pc.id = e.id;
  const fs::path base = pre.dir / split;
  pc.pre.image = nifti::read(base / (e.id + "_image.nii"));
  if (fs::exists(base / (e.id + "_mask.nii"))) pc.pre.mask = nifti::read_mask(base / (e.id + "_mask.nii"));
  pc.pre.geometry = geometry_from_json(read_json(base / (e.id + "_geometry.json")));
  (void)data;
  pc.original_geometry = nifti::read(e.image).geometry();
  pc.pre.geometry.original_geometry = pc.original_geometry;
  if (!e.mask.empty()) {
    pc.original_mask = nifti::read_mask(e.mask);
  } else {
    pc.original_mask = Mask(pc.pre.geometry.original_dims, pc.original_geometry, 0);
  }
  return pc;
}

inline std::vector<PreparedCase> load_split(const StageRef& data, const StageRef& pre, const std::string& split) {
  std::vector<PreparedCase> out;
  for (const auto& e : manifest(data, split)) out.push_back(load_prepared(data, pre, split, e));
  return out;
}

// The normalized image placed back on the original grid; voxels outside the
// crop take the image minimum. Classifiers and radiomics read this view.
inline Volume original_space_image(const PreparedCase& c) {
  Volume v = preprocess::restore_probability(c.pre.image, c.pre.geometry);
  float lo = c.pre.image[0];
  for (float x : c.pre.image.data()) lo = std::min(lo, x);
  const BoundingBox& box = c.pre.geometry.crop_box;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!box.contains(v.coords(i))) v[i] = lo;
  }
  v.geometry() = c.original_geometry;
  return v;
}

// --- segmentation models ------------------------------------------------------

inline training::FoldAssignment fold_assignment(const PipelineConfig& c, const std::vector<PreparedCase>& train) {
  std::vector<std::string> ids;
  for (const auto& t : train) ids.push_back(t.id);
  return training::make_folds(ids, c.folds, derive_seed(c.seed, kFoldStream));
}

inline nn::Graph build_network(const PipelineConfig& c, Arch a, int fold) {
  if (a == Arch::kUNet) {
    models::UNetSpec s = c.unet;
    s.seed = derive_seed(c.seed, kUNetInit + static_cast<std::uint64_t>(fold + 1));
    return models::build_unet3d(s);
  }
  models::UNetPPSpec s = c.unetpp;
  s.seed = derive_seed(c.seed, kUNetPPInit);
  return models::build_unetpp3d(s);
}

// fold < 0: all training cases (the single U-Net++ model). With one fold
// the fold model also sees every case.
inline std::vector<std::string> training_ids(const PipelineConfig& c, const training::FoldAssignment& fa,
                                             int fold) {
  if (fold < 0 || c.folds == 1) {
    std::vector<std::string> all;
    for (const auto& [id, f] : fa.fold_of) all.push_back(id);
    return all;
  }
  return fa.complement(fold);
}

inline json seg_key(const PipelineConfig& c, const StageRef& pre, Arch a, int fold) {
  const json cj = to_json(c);
  return {{"preprocess", pre.hash},
          {"arch", arch_name(a)},
          {"spec", a == Arch::kUNet ? cj.at("unet") : cj.at("unetpp")},
          {"fold", fold},
          {"folds", c.folds},
          {"train", cj.at("train")},
          {"augment", cj.at("augment")},
          {"seed", c.seed}};
}

inline StageRef train_seg_stage(Workspace& ws, const StageRef& data, const StageRef& pre, Arch a, int fold) {
  const auto& c = ws.config();
  return ws.stage("train-seg", seg_key(c, pre, a, fold), [&](const fs::path& dir) {
    const auto train = load_split(data, pre, "train");
    const auto fa = fold_assignment(c, train);
    const auto ids = training_ids(c, fa, fold);
    std::vector<training::TrainingCase> cohort;
    for (const auto& t : train) {
      if (std::find(ids.begin(), ids.end(), t.id) == ids.end()) continue;
      if (!t.pre.mask) raise<DatasetError>("training case ", t.id, " has no mask");
      cohort.push_back({t.id, t.pre.image, *t.pre.mask});
    }
    nn::Graph g = build_network(c, a, fold);
    training::TrainConfig tc = c.train;
    tc.seed = derive_seed(c.seed, (a == Arch::kUNet ? kUNetTrain : kUNetPPTrain) +
                                      static_cast<std::uint64_t>(fold + 1));
    const std::string tag = arch_name(a) + (fold >= 0 ? " fold " + std::to_string(fold) : "");
    const auto result = training::train_segmentation(g, cohort, tc, c.augment, [&](const training::EpochLog& e) {
      if (e.epoch % 5 == 4 || e.epoch + 1 == tc.epochs) {
        ws.log()(tag + " epoch " + std::to_string(e.epoch + 1) + " loss " + std::to_string(e.loss));
      }
    });
    nn::save_checkpoint(g.params(), (dir / "model.ckpt").string());
    training::write_loss_csv(result.trace, (dir / "loss.csv").string());
    write_json(dir / "info.json", {{"arch", arch_name(a)}, {"fold", fold}, {"cases", ids}});
  });
}

inline nn::Graph load_network(const PipelineConfig& c, const StageRef& seg, Arch a, int fold) {
  Workspace::require(seg);
  nn::Graph g = build_network(c, a, fold);
  nn::load_checkpoint(g.params(), (seg.dir / "model.ckpt").string());
  return g;
}

// Probability maps on the original grid for the test split, or for the
// held-out training cases of `fold` (split "oof").
inline StageRef predict_stage(Workspace& ws, const StageRef& data, const StageRef& pre, const StageRef& seg,
                              Arch a, int fold, const std::string& split) {
  Workspace::require(seg);
  const auto& c = ws.config();
  const json key{{"model", seg.hash}, {"split", split}, {"patch", c.train.patch}};
  return ws.stage("predict", key, [&](const fs::path& dir) {
    nn::Graph g = load_network(c, seg, a, fold);
    std::vector<PreparedCase> cases;
    if (split == "test") {
      cases = load_split(data, pre, "test");
    } else {
      auto train = load_split(data, pre, "train");
      const auto fa = fold_assignment(c, train);
      const auto ids = c.folds == 1 ? training_ids(c, fa, fold) : fa.members(fold);
      for (auto& t : train) {
        if (std::find(ids.begin(), ids.end(), t.id) != ids.end()) cases.push_back(std::move(t));
      }
    }
    json listing = json::array();
    for (const auto& pc : cases) {
      Volume p = models::predict_probability(g, pc.pre.image, c.train.patch);
      Volume orig = preprocess::restore_probability(p, pc.pre.geometry);
      orig.geometry() = pc.original_geometry;
      nifti::write(orig, dir / (pc.id + "_prob.nii"));
      listing.push_back(pc.id);
    }
    write_json(dir / "cases.json", listing);
  });
}

inline Volume read_probability(const StageRef& pred, const std::string& id) {
  Workspace::require(pred);
  return nifti::read(pred.dir / (id + "_prob.nii"));
}

// --- slice classifier -------------------------------------------------------------

inline nn::Graph build_classifier(const PipelineConfig& c) {
  models::DenseNetSpec s = c.densenet;
  s.seed = derive_seed(c.seed, kDenseInit);
  return models::build_densenet2d(s);
}

inline StageRef slice_classifier_stage(Workspace& ws, const StageRef& data, const StageRef& pre) {
  const auto& c = ws.config();
  const json cj = to_json(c);
  const json key{{"preprocess", pre.hash}, {"densenet", cj.at("densenet")},
                 {"classifier", cj.at("slice_classifier")}, {"seed", c.seed}};
  return ws.stage("train-clf", key, [&](const fs::path& dir) {
    auto train = load_split(data, pre, "train");
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(c.seed, kSliceSplit));
    rng.shuffle(std::span<std::size_t>(order));
    const auto n_val = static_cast<std::size_t>(std::lround(c.slice_validation_fraction * train.size()));
    std::vector<training::TrainingCase> fit, val;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto& t = train[order[k]];
      training::TrainingCase tc{t.id, original_space_image(t), t.original_mask};
      (k < n_val ? val : fit).push_back(std::move(tc));
    }
    nn::Graph g = build_classifier(c);
    training::SliceClassifierConfig sc = c.slice_classifier;
    sc.seed = derive_seed(c.seed, kDenseTrain);
    const auto result = training::train_slice_classifier(g, fit, sc);
    nn::save_checkpoint(g.params(), (dir / "model.ckpt").string());
    training::write_loss_csv(result.trace, (dir / "loss.csv").string());
    json info{{"train_cases", fit.size()}, {"validation_cases", val.size()}};
    info["train_accuracy"] = training::slice_accuracy(
        g, training::build_slice_dataset(fit, sc.slice_size, sc.neck_exclude));
    if (!val.empty()) {
      try {
        info["validation_accuracy"] = training::slice_accuracy(
            g, training::build_slice_dataset(val, sc.slice_size, sc.neck_exclude));
      } catch (const DatasetError& e) {
        info["validation_accuracy"] = nullptr;
        info["validation_note"] = e.what();
      }
    }
    ws.log()("slice classifier: " + info.dump());
    write_json(dir / "info.json", info);
  });
}

inline nn::Graph load_classifier(const PipelineConfig& c, const StageRef& clf) {
  Workspace::require(clf);
  nn::Graph g = build_classifier(c);
  nn::load_checkpoint(g.params(), (clf.dir / "model.ckpt").string());
  return g;
}

// --- radiomics false-positive classifier ----------------------------------------

// Voxel rows of every component below the gate in the binarized prediction;
// label 1 (true positive) iff the voxel lies inside the ground truth.
inline void harvest_voxels(const Mask& pred, const Volume& view, const Mask& gt, const PipelineConfig& c,
                           radiomics::FeatureMatrix& x, std::vector<int>& y) {
  for (const auto& comp : postprocess::connected_components(pred, c.postprocess.connectivity)) {
    if (comp.voxel_count() >= static_cast<std::size_t>(c.postprocess.voxel_gate)) continue;
    auto rows = radiomics::component_voxel_features(view, comp, c.radiomics.features);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      x.rows.push_back(std::move(rows[k]));
      y.push_back(gt[comp.voxels[k]] ? 1 : 0);
    }
  }
}

// Degenerate harvests (no rows or a single class) yield a constant model:
// zero trees and a saturated prior, recorded in info.json.
inline radiomics::GbtModel constant_model(const std::vector<std::string>& names, bool true_positive) {
  radiomics::GbtModel m;
  m.schema_id = radiomics::kSchemaId;
  m.names = names;
  m.base_score = true_positive ? 20.0 : -20.0;
  m.importance.assign(names.size(), 0.0);
  return m;
}

inline StageRef fp_classifier_stage(Workspace& ws, const StageRef& data, const StageRef& pre,
                                    const std::vector<StageRef>& oof_predictions) {
  const auto& c = ws.config();
  const json cj = to_json(c);
  json oof = json::array();
  for (const auto& r : oof_predictions) {
    Workspace::require(r);
    oof.push_back(r.hash);
  }
  const json key{{"preprocess", pre.hash}, {"oof", oof}, {"radiomics", cj.at("radiomics")},
                 {"postprocess", cj.at("postprocess")}, {"seed", c.seed}};
  return ws.stage("train-fpclf", key, [&](const fs::path& dir) {
    const auto train = load_split(data, pre, "train");
    radiomics::FeatureMatrix x;
    x.schema_id = radiomics::kSchemaId;
    x.names = radiomics::voxel_schema();
    std::vector<int> y;
    for (const auto& ref : oof_predictions) {
      for (const auto& id : read_json(ref.dir / "cases.json")) {
        const auto it = std::find_if(train.begin(), train.end(), [&](const PreparedCase& t) { return t.id == id; });
        if (it == train.end()) raise<StageError>("oof prediction for unknown case ", id.get<std::string>());
        const Mask pred = postprocess::binarize(read_probability(ref, id.get<std::string>()), c.postprocess.threshold);
        harvest_voxels(pred, original_space_image(*it), it->original_mask, c, x, y);
      }
    }
    radiomics::write_feature_csv((dir / "features.csv").string(), x, &y);
    const auto positives = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    json info{{"rows", y.size()}, {"true_positive_rows", positives}};
    radiomics::GbtModel model;
    if (positives == 0 || positives == y.size()) {
      model = constant_model(x.names, positives > 0 || y.empty());
      info["degenerate"] = true;
      info["note"] = y.empty() ? "no small components in out-of-fold predictions; keep-all model"
                               : "single-class harvest; constant model";
    } else {
      radiomics::GbtParams gp = c.radiomics.gbt;
      gp.seed = derive_seed(c.seed, kGbtStream);
      const auto full = radiomics::train_gbt(x, y, gp);
      const int k = std::min<int>(c.radiomics.top_k, static_cast<int>(x.names.size()));
      const auto top = radiomics::select_top_k(full, k);
      model = radiomics::train_gbt(radiomics::project(x, top), y, gp);
      const auto p = radiomics::predict_gbt(model, radiomics::project(x, top));
      std::size_t ok = 0;
      for (std::size_t i = 0; i < y.size(); ++i) ok += (p[i] > 0.5) == (y[i] == 1);
      info["degenerate"] = false;
      info["selected_features"] = top;
      info["train_accuracy"] = static_cast<double>(ok) / static_cast<double>(y.size());
      radiomics::save_gbt(full, (dir / "model_full.json").string());
    }
    radiomics::save_gbt(model, (dir / "model.json").string());
    ws.log()("fp classifier: " + info.dump());
    write_json(dir / "info.json", info);
  });
}

// --- settings ---------------------------------------------------------------

inline bool uses_unet(int s) { return s == 1 || s == 3 || s == 5 || s == 7; }
inline bool uses_unetpp(int s) { return s == 2 || s == 4 || s == 6 || s == 7; }
inline bool uses_slice_filter(int s) { return s >= 3 && s <= 6; }
inline bool uses_radiomics_filter(int s) { return s == 5 || s == 6; }

// Every stage output a setting depends on.
struct Upstream {
  StageRef data, pre;
  std::vector<StageRef> unet_models, unet_test, unet_oof;
  std::optional<StageRef> unetpp_model, unetpp_test;
  std::optional<StageRef> slice_clf, fp_clf;
};

// Stages `target` depends on; an empty target stands for every stage.
inline bool wanted(const std::string& target, const std::string& stage) {
  static const std::map<std::string, std::set<std::string>> deps{
      {"data", {}},
      {"preprocess", {"data"}},
      {"train-seg", {"data", "preprocess"}},
      {"predict", {"data", "preprocess", "train-seg"}},
      {"train-fpclf", {"data", "preprocess", "train-seg", "predict"}},
      {"train-clf", {"data", "preprocess"}},
  };
  if (target.empty() || target == stage) return true;
  const auto it = deps.find(target);
  return it == deps.end() || it->second.count(stage) > 0;
}

// Builds (or reuses) everything `settings` needs, stopping after `target`.
// Independent models train concurrently up to cfg.jobs.
inline Upstream prepare_upstream(Workspace& ws, const std::vector<int>& settings, const std::string& target = "") {
  const auto& c = ws.config();
  bool need_unet = false, need_unetpp = false, need_slice = false, need_fp = false;
  for (int s : settings) {
    need_unet |= uses_unet(s) || uses_radiomics_filter(s);
    need_unetpp |= uses_unetpp(s);
    need_slice |= uses_slice_filter(s);
    need_fp |= uses_radiomics_filter(s);
  }
  need_slice &= wanted(target, "train-clf");
  need_fp &= wanted(target, "train-fpclf") || target == "predict";
  const bool seg = wanted(target, "train-seg");
  const bool predict = wanted(target, "predict");
  Upstream up;
  up.data = data_stage(ws);
  if (!wanted(target, "preprocess")) return up;
  up.pre = preprocess_stage(ws, up.data);
  if (!seg) {
    need_unet = need_unetpp = false;
  }

  struct Job {
    Arch arch;
    int fold;
  };
  std::vector<Job> jobs;
  if (need_unet) {
    for (int f = 0; f < c.folds; ++f) jobs.push_back({Arch::kUNet, f});
  }
  if (need_unetpp) jobs.push_back({Arch::kUNetPP, -1});
  const int n_models = static_cast<int>(jobs.size());
  if (need_slice) jobs.push_back({Arch::kUNet, -2});  // placeholder for the slice classifier
  std::vector<StageRef> models(jobs.size()), tests(jobs.size()), oofs(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), c.jobs, [&](int i) {
    const Job& j = jobs[static_cast<std::size_t>(i)];
    if (i >= n_models) {
      models[static_cast<std::size_t>(i)] = slice_classifier_stage(ws, up.data, up.pre);
      return;
    }
    auto& m = models[static_cast<std::size_t>(i)];
    m = train_seg_stage(ws, up.data, up.pre, j.arch, j.fold);
    if (!predict) return;
    tests[static_cast<std::size_t>(i)] = predict_stage(ws, up.data, up.pre, m, j.arch, j.fold, "test");
    if (j.arch == Arch::kUNet && need_fp) {
      oofs[static_cast<std::size_t>(i)] = predict_stage(ws, up.data, up.pre, m, j.arch, j.fold, "oof");
    }
  });
  for (int i = 0; i < n_models; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (jobs[k].arch == Arch::kUNet) {
      up.unet_models.push_back(models[k]);
      if (predict) up.unet_test.push_back(tests[k]);
      if (predict && need_fp) up.unet_oof.push_back(oofs[k]);
    } else {
      up.unetpp_model = models[k];
      if (predict) up.unetpp_test = tests[k];
    }
  }
  if (need_slice) up.slice_clf = models.back();
  if (need_fp && wanted(target, "train-fpclf") && target != "predict") up.fp_clf = fp_classifier_stage(ws, up.data, up.pre, up.unet_oof);
  return up;
}

inline json to_json(const eval::Summary& s) { return {{"n", s.n}, {"mean", s.mean}, {"sd", s.sd}}; }

inline json to_json(const eval::ChallengeMetrics& m) {
  return {{"accuracy", m.accuracy},
          {"dsc_lesion", m.dsc_lesion ? to_json(*m.dsc_lesion) : json(nullptr)},
          {"dsc_no_lesion", m.dsc_no_lesion ? to_json(*m.dsc_no_lesion) : json(nullptr)},
          {"overall", to_json(m.overall)},
          {"n", m.n}};
}

struct SettingResult {
  int setting = 1;
  StageRef stage;
  eval::ChallengeMetrics metrics;
  std::vector<eval::CaseResult> cases;
};

inline std::vector<eval::CaseResult> read_case_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) raise<IoError>("cannot read ", path.string());
  std::vector<eval::CaseResult> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f[6];
    for (auto& x : f) std::getline(ss, x, ',');
    eval::CaseResult r;
    r.id = f[0];
    r.dice = std::stod(f[1]);
    r.gt_has_lesion = f[2] == "1";
    r.predicted_has_lesion = f[3] == "1";
    r.gt_volume_mm3 = std::stod(f[4]);
    r.predicted_volume_mm3 = std::stod(f[5]);
    out.push_back(r);
  }
  return out;
}

// Test-set probability map of the setting's base model (before filters).
inline Volume setting_probability(const PipelineConfig& c, const Upstream& up, int setting, const std::string& id) {
  std::vector<Volume> folds;
  if (uses_unet(setting)) {
    for (const auto& r : up.unet_test) folds.push_back(read_probability(r, id));
  }
  if (setting == 7) {
    return postprocess::fuse_unet_unetpp(folds, read_probability(*up.unetpp_test, id), c.postprocess.ensemble);
  }
  if (uses_unetpp(setting)) return read_probability(*up.unetpp_test, id);
  return postprocess::ensemble_average(folds);
}

inline SettingResult run_setting(Workspace& ws, const Upstream& up, int setting) {
  const auto& c = ws.config();
  if (setting < 1 || setting > 7) raise<ArgumentError>("setting must lie in 1..7, got ", setting);
  json inputs = json::object();
  inputs["data"] = up.data.hash;
  inputs["preprocess"] = up.pre.hash;
  auto need = [&](const std::optional<StageRef>& r, const char* what) -> const StageRef& {
    if (!r) raise<StageError>("missing upstream artifact: stage '", what, "' was not run");
    Workspace::require(*r);
    return *r;
  };
  if (uses_unet(setting)) {
    if (up.unet_test.empty()) raise<StageError>("missing upstream artifact: stage 'predict' (unet) was not run");
    json h = json::array();
    for (const auto& r : up.unet_test) {
      Workspace::require(r);
      h.push_back(r.hash);
    }
    inputs["unet"] = h;
  }
  if (uses_unetpp(setting)) inputs["unetpp"] = need(up.unetpp_test, "predict").hash;
  if (uses_slice_filter(setting)) inputs["slice"] = need(up.slice_clf, "train-clf").hash;
  if (uses_radiomics_filter(setting)) inputs["fp"] = need(up.fp_clf, "train-fpclf").hash;
  const json cj = to_json(c);
  const json key{{"setting", setting}, {"inputs", inputs}, {"postprocess", cj.at("postprocess")},
                 {"radiomics", cj.at("radiomics")}, {"eval", cj.at("eval")}};

  const StageRef ref = ws.stage("setting" + std::to_string(setting), key, [&](const fs::path& dir) {
    const auto test = load_split(up.data, up.pre, "test");
    std::optional<nn::Graph> clf_net;
    postprocess::SliceClassifier slice_clf;
    if (uses_slice_filter(setting)) {
      clf_net.emplace(load_classifier(c, *up.slice_clf));
      slice_clf = postprocess::densenet_slice_classifier(*clf_net, c.slice_classifier.slice_size);
    }
    postprocess::VoxelClassifier voxel_clf;
    if (uses_radiomics_filter(setting)) {
      voxel_clf = postprocess::gbt_voxel_classifier(radiomics::load_gbt((up.fp_clf->dir / "model.json").string()));
    }
    fs::create_directories(dir / "masks");
    json reports = json::array();
    std::vector<eval::CaseResult> results;
    for (const auto& tc : test) {
      const Volume prob = setting_probability(c, up, setting, tc.id);
      Mask m = postprocess::binarize(prob, c.postprocess.threshold);
      if (uses_slice_filter(setting) || uses_radiomics_filter(setting)) {
        const Volume view = original_space_image(tc);
        if (uses_slice_filter(setting)) {
          auto [out, r] = postprocess::slice_filter(
              m, slice_clf, view, {c.postprocess.volume_gate_mm3, c.postprocess.slice_fraction});
          r.case_id = tc.id;
          reports.push_back(postprocess::to_json(r));
          m = std::move(out);
        }
        if (uses_radiomics_filter(setting)) {
          postprocess::RadiomicsFilterOptions ro;
          ro.voxel_gate = static_cast<std::size_t>(c.postprocess.voxel_gate);
          ro.connectivity = c.postprocess.connectivity;
          ro.features = c.radiomics.features;
          auto [out, r] = postprocess::radiomics_filter(m, view, voxel_clf, ro);
          r.case_id = tc.id;
          reports.push_back(postprocess::to_json(r));
          m = std::move(out);
        }
      }
      m.geometry() = tc.original_geometry;
      nifti::write_mask(m, dir / "masks" / (tc.id + "_mask.nii"));
      results.push_back(eval::evaluate_case(tc.id, m, tc.original_mask, c.eval.min_volume_mm3));
    }
    const auto metrics = eval::stratified_dsc(results);
    write_json(dir / "filters.json", reports);
    eval::write_case_results((dir / "cases.csv").string(), results);
    write_json(dir / "metrics.json", to_json(metrics));
    write_json(dir / "provenance.json", {{"version", kVersion}, {"setting", setting}, {"seed", c.seed},
                                         {"config", cj}, {"inputs", inputs}});
  });
  SettingResult out;
  out.setting = setting;
  out.stage = ref;
  out.cases = eval::canonical_order(read_case_results(ref.dir / "cases.csv"));
  out.metrics = eval::stratified_dsc(out.cases);
  return out;
}

// Results table, lesion-size scatter with Pearson r, FP/FN heatmaps and
// paired t-tests on per-case Dice between every pair of settings.
inline StageRef report_stage(Workspace& ws, const Upstream& up, const std::vector<SettingResult>& results) {
  const auto& c = ws.config();
  json key{{"settings", json::array()}, {"eval", to_json(c).at("eval")}};
  for (const auto& r : results) key["settings"].push_back({r.setting, r.stage.hash});
  return ws.stage("report", key, [&](const fs::path& dir) {
    std::vector<eval::TableRow> rows;
    json summary{{"pearson_log_size", json::object()}, {"ttests", json::array()}};
    const auto test = load_split(up.data, up.pre, "test");
    for (const auto& r : results) {
      const std::string name = "setting" + std::to_string(r.setting);
      rows.push_back({std::to_string(r.setting), r.metrics});
      eval::write_size_scatter((dir / (name + "_scatter.csv")).string(), r.cases);
      std::vector<double> vols, dices;
      for (const auto& cr : r.cases) {
        if (!cr.gt_has_lesion) continue;
        vols.push_back(cr.gt_volume_mm3);
        dices.push_back(cr.dice);
      }
      try {
        summary["pearson_log_size"][name] = eval::pearson_log_size(vols, dices);
      } catch (const Error& e) {
        summary["pearson_log_size"][name] = nullptr;
      }
      std::vector<Mask> preds;
      std::vector<Volume> images;
      for (const auto& tc : test) {
        preds.push_back(nifti::read_mask(r.stage.dir / "masks" / (tc.id + "_mask.nii")));
        images.push_back(original_space_image(tc));
      }
      std::vector<eval::HeatmapCase> hc;
      for (std::size_t i = 0; i < test.size(); ++i) hc.push_back({&preds[i], &test[i].original_mask, &images[i]});
      const auto h = eval::error_heatmap(hc, c.eval.heatmap_grid);
      nifti::write(h.false_positive, dir / (name + "_heatmap_fp.nii"));
      nifti::write(h.false_negative, dir / (name + "_heatmap_fn.nii"));
      eval::write_heatmap_csv((dir / (name + "_heatmap.csv")).string(), h);
    }
    eval::write_results_table((dir / "results.csv").string(), rows);
    for (std::size_t a = 0; a < results.size(); ++a) {
      for (std::size_t b = a + 1; b < results.size(); ++b) {
        std::vector<double> da, db;
        for (const auto& x : results[a].cases) da.push_back(x.dice);
        for (const auto& x : results[b].cases) db.push_back(x.dice);
        json t{{"a", results[a].setting}, {"b", results[b].setting}};
        try {
          const auto tt = eval::paired_ttest(da, db);
          t["t"] = tt.t;
          t["p"] = tt.p;
          t["df"] = tt.df;
        } catch (const Error& e) {
          t["t"] = nullptr;
          t["p"] = nullptr;
          t["note"] = e.what();
        }
        summary["ttests"].push_back(t);
      }
    }
    write_json(dir / "summary.json", summary);
  });
}

}  // namespace lf::pipeline
