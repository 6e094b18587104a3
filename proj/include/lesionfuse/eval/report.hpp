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

// Error heatmaps, result tables and the case manifest.

#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/core/spatial.hpp"
#include "lesionfuse/eval/metrics.hpp"

namespace lf::eval {

struct HeatmapCase {
  const Mask* pred = nullptr;
  const Mask* gt = nullptr;
  const Volume* image = nullptr;  // its nonzero bounding box is the reference frame
};

struct Heatmaps {
  Volume false_positive;
  Volume false_negative;
};

// Each case's FP (pred and not gt) and FN (gt and not pred) voxels are mapped
// into a common grid spanning the case's brain bounding box (nearest cell);
// a cell counts a case at most once, so values are case counts.
inline Heatmaps error_heatmap(const std::vector<HeatmapCase>& cases, const Index3& grid = {64, 64, 64}) {
  if (cases.empty()) raise<ArgumentError>("error_heatmap: no cases");
  Heatmaps h{Volume(grid, {}, 0.0f), Volume(grid, {}, 0.0f)};
  for (const auto& c : cases) {
    require_same_shape(*c.pred, *c.gt, "error_heatmap");
    BoundingBox box = BoundingBox::full(c.gt->dims());
    if (c.image) {
      require_same_shape(*c.pred, *c.image, "error_heatmap");
      box = foreground_box(*c.image, 0.0);
    }
    const Index3 ext = box.extent();
    std::set<std::size_t> fp_cells, fn_cells;
    for (std::size_t i = 0; i < c.pred->size(); ++i) {
      const bool p = (*c.pred)[i] != 0, g = (*c.gt)[i] != 0;
      if (p == g) continue;
      const Index3 q = c.pred->coords(i);
      Index3 cell{};
      for (int a = 0; a < 3; ++a) {
        const double t = (q[a] - box.lower[a] + 0.5) / ext[a];
        cell[a] = std::clamp(static_cast<int>(std::floor(t * grid[a])), 0, grid[a] - 1);
      }
      (p ? fp_cells : fn_cells).insert(h.false_positive.index(cell));
    }
    for (std::size_t k : fp_cells) h.false_positive[k] += 1.0f;
    for (std::size_t k : fn_cells) h.false_negative[k] += 1.0f;
  }
  return h;
}

namespace detail {

inline std::ofstream open_out(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  if (!out) raise<IoError>("cannot write ", path);
  out << std::setprecision(10);
  return out;
}

inline void put_summary(std::ostream& out, const std::optional<Summary>& s) {
  if (s) {
    out << "," << s->mean << "," << s->sd;
  } else {
    out << ",,";
  }
}

}  // namespace detail

struct TableRow {
  std::string setting;
  ChallengeMetrics metrics;
};

// Columns of the challenge results table; absent strata leave empty cells.
inline void write_results_table(const std::string& path, const std::vector<TableRow>& rows) {
  auto out = detail::open_out(path);
  out << "setting,accuracy,dsc_lesion_mean,dsc_lesion_sd,dsc_no_lesion_mean,dsc_no_lesion_sd,"
         "overall_mean,overall_sd,n_lesion,n_no_lesion\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    out << r.setting << "," << m.accuracy;
    detail::put_summary(out, m.dsc_lesion);
    detail::put_summary(out, m.dsc_no_lesion);
    out << "," << m.overall.mean << "," << m.overall.sd << ","
        << (m.dsc_lesion ? m.dsc_lesion->n : 0) << "," << (m.dsc_no_lesion ? m.dsc_no_lesion->n : 0)
        << "\n";
  }
}

inline void write_case_results(const std::string& path, const std::vector<CaseResult>& rs) {
  auto out = detail::open_out(path);
  out << "case_id,dice,gt_has_lesion,predicted_has_lesion,gt_volume_mm3,predicted_volume_mm3\n";
  for (const auto& r : canonical_order(rs)) {
    out << r.id << "," << r.dice << "," << r.gt_has_lesion << "," << r.predicted_has_lesion << ","
        << r.gt_volume_mm3 << "," << r.predicted_volume_mm3 << "\n";
  }
}

// Lesion-size scatter: only cases with a ground-truth lesion.
inline void write_size_scatter(const std::string& path, const std::vector<CaseResult>& rs) {
  auto out = detail::open_out(path);
  out << "case_id,gt_volume_mm3,log10_volume,dice\n";
  for (const auto& r : canonical_order(rs)) {
    if (!r.gt_has_lesion) continue;
    out << r.id << "," << r.gt_volume_mm3 << "," << std::log10(r.gt_volume_mm3) << "," << r.dice << "\n";
  }
}

inline void write_heatmap_csv(const std::string& path, const Heatmaps& h) {
  auto out = detail::open_out(path);
  out << "x,y,z,false_positive,false_negative\n";
  const Volume& fp = h.false_positive;
  for (std::size_t i = 0; i < fp.size(); ++i) {
    if (fp[i] == 0.0f && h.false_negative[i] == 0.0f) continue;
    const Index3 p = fp.coords(i);
    out << p[0] << "," << p[1] << "," << p[2] << "," << fp[i] << "," << h.false_negative[i] << "\n";
  }
}

struct ManifestEntry {
  std::string id;
  std::string image;
  std::string mask;
  bool has_lesion = false;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& e : entries) {
    cases.push_back({{"id", e.id}, {"image", e.image}, {"mask", e.mask}, {"has_lesion", e.has_lesion}});
  }
  auto out = detail::open_out(path);
  out << nlohmann::json{{"cases", cases}}.dump(1) << "\n";
}

// Relative paths resolve against the manifest's directory.
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise<IoError>("cannot read manifest ", path);
  const auto base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path q(p);
    return (q.is_absolute() || p.empty() ? q : base / q).string();
  };
  try {
    nlohmann::json j;
    in >> j;
    std::vector<ManifestEntry> out;
    std::set<std::string> seen;
    for (const auto& c : j.at("cases")) {
      ManifestEntry e{c.at("id").get<std::string>(), resolve(c.at("image").get<std::string>()),
                      resolve(c.value("mask", std::string{})), c.value("has_lesion", false)};
      if (!seen.insert(e.id).second) raise<FormatError>(path, ": duplicate case id ", e.id);
      out.push_back(std::move(e));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    raise<FormatError>(path, ": ", e.what());
  }
}

}  // namespace lf::eval
