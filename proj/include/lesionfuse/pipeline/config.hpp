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

// Pipeline configuration: every knob of every stage, the desk and paper
// profiles, JSON round-tripping and stable content hashes.

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>

#include <json.hpp>

#include "lesionfuse/models/builders.hpp"
#include "lesionfuse/postprocess/filters.hpp"
#include "lesionfuse/preprocess.hpp"
#include "lesionfuse/radiomics/gbt.hpp"
#include "lesionfuse/synthgen.hpp"
#include "lesionfuse/training/augment.hpp"
#include "lesionfuse/training/slices.hpp"
#include "lesionfuse/training/trainer.hpp"

namespace lf::pipeline {

using json = nlohmann::json;

struct DataConfig {
  // Empty manifests mean "generate a synthetic cohort".
  std::string train_manifest;
  std::string test_manifest;
  int train_cases = 20;
  int test_cases = 5;
  int test_no_lesion = 1;
  double train_no_lesion_fraction = 0.0;
  synth::PhantomConfig phantom{};
};

struct RadiomicsConfig {
  radiomics::NeighbourhoodOptions features{};
  int top_k = 25;
  radiomics::GbtParams gbt{};
};

struct PostprocessConfig {
  double threshold = 0.5;
  int connectivity = 26;
  double volume_gate_mm3 = 2000.0;
  double slice_fraction = 0.5;
  int voxel_gate = 1000;
  postprocess::EnsembleMode ensemble = postprocess::EnsembleMode::kPerArchitecture;
};

struct EvalConfig {
  double min_volume_mm3 = 0.0;
  Index3 heatmap_grid{64, 64, 64};
};

struct PipelineConfig {
  int setting = 1;
  std::uint64_t seed = 1;
  std::string profile = "desk";
  std::string work_dir = "lf_work";
  int jobs = 1;
  DataConfig data{};
  preprocess::PreprocessOptions preprocess{};
  int folds = 2;
  models::UNetSpec unet{};
  models::UNetPPSpec unetpp{};
  training::TrainConfig train{};
  training::AugmentConfig augment{};
  models::DenseNetSpec densenet{};
  training::SliceClassifierConfig slice_classifier{};
  double slice_validation_fraction = 0.2;
  RadiomicsConfig radiomics{};
  PostprocessConfig postprocess{};
  EvalConfig eval{};

  void validate() const {
    if (setting < 1 || setting > 7) raise<ArgumentError>("setting must lie in 1..7, got ", setting);
    if (folds < 1) raise<ArgumentError>("folds must be >= 1");
    if (jobs < 1) raise<ArgumentError>("jobs must be >= 1");
    if (profile != "desk" && profile != "paper") raise<ArgumentError>("unknown profile '", profile, "'");
    if (data.train_cases < 2 || data.test_cases < 1) raise<ArgumentError>("need >= 2 training and >= 1 test case");
    if (data.test_no_lesion < 0 || data.test_no_lesion > data.test_cases) {
      raise<ArgumentError>("test_no_lesion must lie in [0, test_cases]");
    }
    if (postprocess.volume_gate_mm3 < 0 || postprocess.voxel_gate < 0 || postprocess.slice_fraction < 0 ||
        postprocess.slice_fraction > 1) {
      raise<ArgumentError>("postprocess gates must be >= 0 and the slice fraction in [0, 1]");
    }
    if (!(slice_validation_fraction >= 0.0 && slice_validation_fraction < 1.0)) {
      raise<ArgumentError>("slice_validation_fraction must lie in [0, 1)");
    }
    unet.validate();
    unetpp.validate();
    densenet.validate();
    train.validate();
    augment.validate();
    slice_classifier.validate();
    radiomics.gbt.validate();
    data.phantom.validate();
    for (int p : train.patch) {
      if (p % unet.divisor() != 0 || p % unetpp.divisor() != 0) {
        raise<ArgumentError>("patch size must be divisible by 2^depth of both networks");
      }
    }
  }
};

inline PipelineConfig desk_profile() { return PipelineConfig{}; }

// Training-scale values: 5 folds, 1000 epochs of 250 iterations, patch
// 128x160x112, full-size volumes. No runtime promise.
inline PipelineConfig paper_profile() {
  PipelineConfig c;
  c.profile = "paper";
  c.folds = 5;
  c.data.train_cases = 528;
  c.data.test_cases = 24;
  c.data.test_no_lesion = 5;
  c.data.phantom.shape = {182, 218, 182};
  c.data.phantom.lesion_radius_range = {3.0, 15.0};
  c.unet.base_width = 32;
  c.unet.depth = 4;
  c.unetpp = c.unet;
  c.train.epochs = 1000;
  c.train.iterations_per_epoch = 250;
  c.train.patch = {128, 160, 112};
  c.slice_classifier.slice_size = {192, 224};
  c.slice_classifier.epochs = 100;
  c.slice_classifier.iterations_per_epoch = 250;
  c.densenet.blocks = 4;
  c.densenet.layers_per_block = 6;
  c.densenet.growth_rate = 12;
  c.densenet.stem_width = 24;
  return c;
}

inline PipelineConfig profile_defaults(const std::string& name) {
  if (name == "desk") return desk_profile();
  if (name == "paper") return paper_profile();
  raise<ArgumentError>("unknown profile '", name, "' (expected desk or paper)");
}

inline std::string ensemble_mode_name(postprocess::EnsembleMode m) {
  return m == postprocess::EnsembleMode::kUniform ? "uniform" : "per_architecture";
}

inline postprocess::EnsembleMode parse_ensemble_mode(const std::string& s) {
  if (s == "uniform") return postprocess::EnsembleMode::kUniform;
  if (s == "per_architecture") return postprocess::EnsembleMode::kPerArchitecture;
  raise<ArgumentError>("unknown ensemble mode '", s, "'");
}

inline json to_json(const PipelineConfig& c) {
  const auto& ph = c.data.phantom;
  const auto& t = c.train;
  const auto& a = c.augment;
  const auto& sc = c.slice_classifier;
  const auto& g = c.radiomics.gbt;
  json target = nullptr;
  if (c.preprocess.target_spacing) target = *c.preprocess.target_spacing;
  return {
      {"setting", c.setting},
      {"seed", c.seed},
      {"profile", c.profile},
      {"work_dir", c.work_dir},
      {"jobs", c.jobs},
      {"data",
       {{"train_manifest", c.data.train_manifest},
        {"test_manifest", c.data.test_manifest},
        {"train_cases", c.data.train_cases},
        {"test_cases", c.data.test_cases},
        {"test_no_lesion", c.data.test_no_lesion},
        {"train_no_lesion_fraction", c.data.train_no_lesion_fraction},
        {"phantom",
         {{"shape", ph.shape},
          {"spacing", ph.spacing},
          {"lesion_count_range", {ph.lesion_count_range.first, ph.lesion_count_range.second}},
          {"lesion_radius_range", {ph.lesion_radius_range.first, ph.lesion_radius_range.second}},
          {"tissue_mean", ph.tissue_mean},
          {"tissue_std", ph.tissue_std},
          {"lesion_intensity_delta", ph.lesion_intensity_delta},
          {"bias_amplitude", ph.bias_amplitude},
          {"noise_sigma", ph.noise_sigma}}}}},
      {"preprocess",
       {{"bias_correction", c.preprocess.bias_correction},
        {"bias_order", c.preprocess.bias_order},
        {"target_spacing", target}}},
      {"folds", c.folds},
      {"unet", {{"base_width", c.unet.base_width}, {"depth", c.unet.depth}}},
      {"unetpp", {{"base_width", c.unetpp.base_width}, {"depth", c.unetpp.depth}}},
      {"train",
       {{"epochs", t.epochs},
        {"iterations_per_epoch", t.iterations_per_epoch},
        {"batch_size", t.batch_size},
        {"initial_lr", t.initial_lr},
        {"patch", t.patch},
        {"fg_probability", t.fg_probability},
        {"dice_weight", t.dice_weight},
        {"ce_weight", t.ce_weight},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"grad_clip", t.grad_clip}}},
      {"augment",
       {{"flip_axes", a.flip_axes},
        {"gamma_range", {a.gamma_range.first, a.gamma_range.second}},
        {"rotation_range_deg", {a.rotation_range_deg.first, a.rotation_range_deg.second}},
        {"flip_probability", a.flip_probability},
        {"gamma_probability", a.gamma_probability},
        {"rotation_probability", a.rotation_probability}}},
      {"densenet",
       {{"growth_rate", c.densenet.growth_rate},
        {"layers_per_block", c.densenet.layers_per_block},
        {"blocks", c.densenet.blocks},
        {"stem_width", c.densenet.stem_width},
        {"compression", c.densenet.compression}}},
      {"slice_classifier",
       {{"epochs", sc.epochs},
        {"iterations_per_epoch", sc.iterations_per_epoch},
        {"batch_size", sc.batch_size},
        {"initial_lr", sc.initial_lr},
        {"momentum", sc.momentum},
        {"weight_decay", sc.weight_decay},
        {"slice_size", sc.slice_size},
        {"neck_exclude", sc.neck_exclude},
        {"validation_fraction", c.slice_validation_fraction}}},
      {"radiomics",
       {{"radius", c.radiomics.features.radius},
        {"levels", c.radiomics.features.levels},
        {"top_k", c.radiomics.top_k},
        {"gbt",
         {{"trees", g.trees},
          {"max_depth", g.max_depth},
          {"learning_rate", g.learning_rate},
          {"lambda", g.lambda},
          {"min_child_weight", g.min_child_weight},
          {"subsample", g.subsample}}}}},
      {"postprocess",
       {{"threshold", c.postprocess.threshold},
        {"connectivity", c.postprocess.connectivity},
        {"volume_gate_mm3", c.postprocess.volume_gate_mm3},
        {"slice_fraction", c.postprocess.slice_fraction},
        {"voxel_gate", c.postprocess.voxel_gate},
        {"ensemble", ensemble_mode_name(c.postprocess.ensemble)}}},
      {"eval", {{"min_volume_mm3", c.eval.min_volume_mm3}, {"heatmap_grid", c.eval.heatmap_grid}}},
  };
}

namespace detail {

template <typename T>
std::pair<T, T> get_pair(const json& j) {
  return {j.at(0).get<T>(), j.at(1).get<T>()};
}

// Every key of `patch` must exist in `base`, recursively, so typos in a
// config file are reported rather than silently ignored.
inline void check_known_keys(const json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) return;
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (!base.contains(it.key())) raise<ArgumentError>("unknown config key '", where, it.key(), "'");
    if (base.at(it.key()).is_object()) check_known_keys(base.at(it.key()), it.value(), where + it.key() + ".");
  }
}

}  // namespace detail

inline PipelineConfig from_json_full(const json& j) {
  try {
    PipelineConfig c;
    c.setting = j.at("setting").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.profile = j.at("profile").get<std::string>();
    c.work_dir = j.at("work_dir").get<std::string>();
    c.jobs = j.at("jobs").get<int>();
    const json& d = j.at("data");
    c.data.train_manifest = d.at("train_manifest").get<std::string>();
    c.data.test_manifest = d.at("test_manifest").get<std::string>();
    c.data.train_cases = d.at("train_cases").get<int>();
    c.data.test_cases = d.at("test_cases").get<int>();
    c.data.test_no_lesion = d.at("test_no_lesion").get<int>();
    c.data.train_no_lesion_fraction = d.at("train_no_lesion_fraction").get<double>();
    const json& ph = d.at("phantom");
    auto& p = c.data.phantom;
    p.shape = ph.at("shape").get<Index3>();
    p.spacing = ph.at("spacing").get<Vec3>();
    p.lesion_count_range = detail::get_pair<int>(ph.at("lesion_count_range"));
    p.lesion_radius_range = detail::get_pair<double>(ph.at("lesion_radius_range"));
    p.tissue_mean = ph.at("tissue_mean").get<double>();
    p.tissue_std = ph.at("tissue_std").get<double>();
    p.lesion_intensity_delta = ph.at("lesion_intensity_delta").get<double>();
    p.bias_amplitude = ph.at("bias_amplitude").get<double>();
    p.noise_sigma = ph.at("noise_sigma").get<double>();
    const json& pp = j.at("preprocess");
    c.preprocess.bias_correction = pp.at("bias_correction").get<bool>();
    c.preprocess.bias_order = pp.at("bias_order").get<int>();
    if (!pp.at("target_spacing").is_null()) c.preprocess.target_spacing = pp.at("target_spacing").get<Vec3>();
    c.folds = j.at("folds").get<int>();
    c.unet.base_width = j.at("unet").at("base_width").get<int>();
    c.unet.depth = j.at("unet").at("depth").get<int>();
    c.unetpp.base_width = j.at("unetpp").at("base_width").get<int>();
    c.unetpp.depth = j.at("unetpp").at("depth").get<int>();
    const json& t = j.at("train");
    c.train.epochs = t.at("epochs").get<int>();
    c.train.iterations_per_epoch = t.at("iterations_per_epoch").get<int>();
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.initial_lr = t.at("initial_lr").get<double>();
    c.train.patch = t.at("patch").get<Index3>();
    c.train.fg_probability = t.at("fg_probability").get<double>();
    c.train.dice_weight = t.at("dice_weight").get<double>();
    c.train.ce_weight = t.at("ce_weight").get<double>();
    c.train.momentum = t.at("momentum").get<double>();
    c.train.weight_decay = t.at("weight_decay").get<double>();
    c.train.grad_clip = t.at("grad_clip").get<double>();
    const json& a = j.at("augment");
    c.augment.flip_axes = a.at("flip_axes").get<std::array<bool, 3>>();
    c.augment.gamma_range = detail::get_pair<double>(a.at("gamma_range"));
    c.augment.rotation_range_deg = detail::get_pair<double>(a.at("rotation_range_deg"));
    c.augment.flip_probability = a.at("flip_probability").get<double>();
    c.augment.gamma_probability = a.at("gamma_probability").get<double>();
    c.augment.rotation_probability = a.at("rotation_probability").get<double>();
    const json& dn = j.at("densenet");
    c.densenet.growth_rate = dn.at("growth_rate").get<int>();
    c.densenet.layers_per_block = dn.at("layers_per_block").get<int>();
    c.densenet.blocks = dn.at("blocks").get<int>();
    c.densenet.stem_width = dn.at("stem_width").get<int>();
    c.densenet.compression = dn.at("compression").get<double>();
    const json& sc = j.at("slice_classifier");
    c.slice_classifier.epochs = sc.at("epochs").get<int>();
    c.slice_classifier.iterations_per_epoch = sc.at("iterations_per_epoch").get<int>();
    c.slice_classifier.batch_size = sc.at("batch_size").get<int>();
    c.slice_classifier.initial_lr = sc.at("initial_lr").get<double>();
    c.slice_classifier.momentum = sc.at("momentum").get<double>();
    c.slice_classifier.weight_decay = sc.at("weight_decay").get<double>();
    c.slice_classifier.slice_size = sc.at("slice_size").get<std::array<int, 2>>();
    c.slice_classifier.neck_exclude = sc.at("neck_exclude").get<int>();
    c.slice_validation_fraction = sc.at("validation_fraction").get<double>();
    const json& r = j.at("radiomics");
    c.radiomics.features.radius = r.at("radius").get<int>();
    c.radiomics.features.levels = r.at("levels").get<int>();
    c.radiomics.top_k = r.at("top_k").get<int>();
    const json& g = r.at("gbt");
    c.radiomics.gbt.trees = g.at("trees").get<int>();
    c.radiomics.gbt.max_depth = g.at("max_depth").get<int>();
    c.radiomics.gbt.learning_rate = g.at("learning_rate").get<double>();
    c.radiomics.gbt.lambda = g.at("lambda").get<double>();
    c.radiomics.gbt.min_child_weight = g.at("min_child_weight").get<double>();
    c.radiomics.gbt.subsample = g.at("subsample").get<double>();
    const json& po = j.at("postprocess");
    c.postprocess.threshold = po.at("threshold").get<double>();
    c.postprocess.connectivity = po.at("connectivity").get<int>();
    c.postprocess.volume_gate_mm3 = po.at("volume_gate_mm3").get<double>();
    c.postprocess.slice_fraction = po.at("slice_fraction").get<double>();
    c.postprocess.voxel_gate = po.at("voxel_gate").get<int>();
    c.postprocess.ensemble = parse_ensemble_mode(po.at("ensemble").get<std::string>());
    c.eval.min_volume_mm3 = j.at("eval").at("min_volume_mm3").get<double>();
    c.eval.heatmap_grid = j.at("eval").at("heatmap_grid").get<Index3>();
    return c;
  } catch (const json::exception& e) {
    raise<ArgumentError>("invalid config: ", e.what());
  }
}

// Profile defaults overlaid with a (possibly partial) user document.
inline PipelineConfig config_from_json(const json& user) {
  const std::string profile = user.value("profile", std::string("desk"));
  json base = to_json(profile_defaults(profile));
  detail::check_known_keys(base, user, "");
  base.merge_patch(user);
  return from_json_full(base);
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise<IoError>("cannot read config ", path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise<FormatError>(path, ": ", e.what());
  }
  return config_from_json(j);
}

// FNV-1a over the canonical (sorted-key) JSON text, 16 hex digits.
inline std::string content_hash(const json& j) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lf::pipeline
