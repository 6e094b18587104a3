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

// Probability-map fusion and the two false-positive filters: the
// all-or-nothing slice-classifier filter and the voxel-level radiomics
// filter on small components.

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/postprocess/components.hpp"
#include "lesionfuse/radiomics/features.hpp"
#include "lesionfuse/radiomics/gbt.hpp"
#include "lesionfuse/training/slices.hpp"

namespace lf::postprocess {

inline Volume ensemble_average(const std::vector<const Volume*>& maps,
                               const std::vector<double>& weights = {}) {
  if (maps.empty()) raise<ArgumentError>("ensemble_average: no maps");
  if (!weights.empty() && weights.size() != maps.size()) {
    raise<ArgumentError>("ensemble_average: ", weights.size(), " weights for ", maps.size(), " maps");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) raise<ArgumentError>("ensemble_average: negative weight");
    total += w;
  }
  if (!weights.empty() && !(total > 0.0)) raise<ArgumentError>("ensemble_average: weights sum to 0");
  const Volume& first = *maps.front();
  for (const Volume* m : maps) {
    require_same_shape(first, *m, "ensemble_average");
    if (!first.geometry().same_spacing(m->geometry())) {
      raise<ShapeError>("ensemble_average: spacing mismatch");
    }
  }
  Volume out(first.dims(), first.geometry());
  const std::size_t k = maps.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    if (weights.empty()) {
      for (const Volume* m : maps) s += (*m)[i];
      s /= static_cast<double>(k);
    } else {
      for (std::size_t j = 0; j < k; ++j) s += weights[j] * (*maps[j])[i];
      s /= total;
    }
    out[i] = static_cast<float>(s);
  }
  return out;
}

inline Volume ensemble_average(const std::vector<Volume>& maps, const std::vector<double>& weights = {}) {
  std::vector<const Volume*> ptrs;
  for (const Volume& m : maps) ptrs.push_back(&m);
  return ensemble_average(ptrs, weights);
}

enum class EnsembleMode {
  kPerArchitecture,  // fold mean first, then 50/50 with U-Net++
  kUniform,          // plain mean over every map
};

inline Volume fuse_unet_unetpp(const std::vector<Volume>& unet_folds, const Volume& unetpp,
                               EnsembleMode mode = EnsembleMode::kPerArchitecture) {
  if (unet_folds.empty()) raise<ArgumentError>("fuse: no U-Net fold maps");
  if (mode == EnsembleMode::kUniform) {
    std::vector<const Volume*> all;
    for (const Volume& m : unet_folds) all.push_back(&m);
    all.push_back(&unetpp);
    return ensemble_average(all);
  }
  const Volume fold_mean = ensemble_average(unet_folds);
  return ensemble_average(std::vector<const Volume*>{&fold_mean, &unetpp});
}

struct FilterReport {
  std::string case_id;
  std::string filter;
  bool applied = false;
  std::string reason;
  double predicted_volume_mm3 = 0.0;
  int slices_segmented = 0;
  int slices_no_lesion = 0;
  double fraction = 0.0;
  int components_examined = 0;
  int components_removed = 0;
  std::size_t voxels_in = 0;
  std::size_t voxels_out = 0;
  std::size_t voxels_removed = 0;
};

inline nlohmann::json to_json(const FilterReport& r) {
  return {{"case_id", r.case_id},
          {"filter", r.filter},
          {"applied", r.applied},
          {"reason", r.reason},
          {"predicted_volume_mm3", r.predicted_volume_mm3},
          {"slices_segmented", r.slices_segmented},
          {"slices_no_lesion", r.slices_no_lesion},
          {"fraction", r.fraction},
          {"components_examined", r.components_examined},
          {"components_removed", r.components_removed},
          {"voxels_in", r.voxels_in},
          {"voxels_out", r.voxels_out},
          {"voxels_removed", r.voxels_removed}};
}

// Lesion presence per requested axial slice.
using SliceClassifier = std::function<std::vector<bool>(const Volume&, const std::vector<int>&)>;

inline SliceClassifier densenet_slice_classifier(nn::Graph& g, std::array<int, 2> size,
                                                 double threshold = 0.5) {
  return [&g, size, threshold](const Volume& v, const std::vector<int>& zs) {
    std::vector<nn::Tensor> slices;
    for (int z : zs) slices.push_back(training::extract_slice(v, z, size));
    std::vector<bool> out;
    for (double p : training::slice_probabilities(g, slices)) out.push_back(p > threshold);
    return out;
  };
}

struct SliceFilterOptions {
  double volume_gate_mm3 = 2000.0;
  double fraction = 0.5;
};

inline std::pair<Mask, FilterReport> slice_filter(const Mask& m, const SliceClassifier& clf,
                                                  const Volume& v,
                                                  const SliceFilterOptions& opt = {}) {
  require_same_shape(m, v, "slice_filter");
  FilterReport r;
  r.filter = "slice";
  r.voxels_in = count_nonzero(m);
  r.predicted_volume_mm3 = mask_volume_mm3(m);
  auto finish = [&](Mask out) {
    r.voxels_out = count_nonzero(out);
    r.voxels_removed = r.voxels_in - r.voxels_out;
    return std::pair<Mask, FilterReport>{std::move(out), r};
  };
  if (r.voxels_in == 0) {
    r.reason = "not applied (no segmentation)";
    return finish(m);
  }
  if (r.predicted_volume_mm3 >= opt.volume_gate_mm3) {
    r.reason = "not applied (predicted volume above gate)";
    return finish(m);
  }
  std::vector<int> zs;
  for (int z = 0; z < m.nz(); ++z) {
    if (training::slice_has_lesion(m, z)) zs.push_back(z);
  }
  const std::vector<bool> has_lesion = clf(v, zs);
  if (has_lesion.size() != zs.size()) raise<ShapeError>("slice classifier returned wrong count");
  r.applied = true;
  r.slices_segmented = static_cast<int>(zs.size());
  for (bool b : has_lesion) r.slices_no_lesion += b ? 0 : 1;
  r.fraction = static_cast<double>(r.slices_no_lesion) / r.slices_segmented;
  if (r.fraction > opt.fraction) {
    r.reason = "removed (no-lesion slice fraction above threshold)";
    return finish(empty_mask_like(m));
  }
  r.reason = "kept";
  return finish(m);
}

// True-positive verdict per feature row.
using VoxelClassifier = std::function<std::vector<bool>(const radiomics::FeatureMatrix&)>;

// The model may have been trained on a projected subset of the voxel schema.
inline VoxelClassifier gbt_voxel_classifier(radiomics::GbtModel model, double threshold = 0.5) {
  return [model = std::move(model), threshold](const radiomics::FeatureMatrix& x) {
    const radiomics::FeatureMatrix sub =
        x.names == model.names ? x : radiomics::project(x, model.names);
    std::vector<bool> out;
    for (double p : radiomics::predict_gbt(model, sub)) out.push_back(p > threshold);
    return out;
  };
}

struct RadiomicsFilterOptions {
  std::size_t voxel_gate = 1000;
  int connectivity = 26;
  radiomics::NeighbourhoodOptions features{};
};

inline std::pair<Mask, FilterReport> radiomics_filter(const Mask& m, const Volume& v,
                                                      const VoxelClassifier& clf,
                                                      const RadiomicsFilterOptions& opt = {}) {
  require_same_shape(m, v, "radiomics_filter");
  FilterReport r;
  r.filter = "radiomics";
  r.voxels_in = count_nonzero(m);
  r.predicted_volume_mm3 = mask_volume_mm3(m);
  Mask out = m;
  for (const LesionComponent& c : connected_components(m, opt.connectivity)) {
    if (c.voxel_count() >= opt.voxel_gate) continue;
    ++r.components_examined;
    radiomics::FeatureMatrix x;
    x.schema_id = radiomics::kSchemaId;
    x.names = radiomics::voxel_schema();
    x.rows = radiomics::component_voxel_features(v, c, opt.features);
    const std::vector<bool> tp = clf(x);
    if (tp.size() != c.voxels.size()) raise<ShapeError>("voxel classifier returned wrong count");
    std::size_t kept = 0;
    for (std::size_t k = 0; k < tp.size(); ++k) {
      if (tp[k]) {
        ++kept;
      } else {
        out[c.voxels[k]] = 0;
      }
    }
    if (kept == 0) ++r.components_removed;
  }
  r.applied = r.components_examined > 0;
  r.reason = r.applied ? "applied" : (r.voxels_in == 0 ? "not applied (no segmentation)"
                                                       : "not applied (all components above gate)");
  r.voxels_out = count_nonzero(out);
  r.voxels_removed = r.voxels_in - r.voxels_out;
  return {std::move(out), r};
}

}  // namespace lf::postprocess
