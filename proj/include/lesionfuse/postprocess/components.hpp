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

// Binarization and connected-component labelling.

#pragma once

#include <algorithm>
#include <array>
#include <cstdlib>
#include <cstdint>
#include <deque>
#include <vector>

#include "lesionfuse/core/grid.hpp"

namespace lf::postprocess {

inline Mask binarize(const Volume& p, double threshold = 0.5) {
  Mask m(p.dims(), p.geometry(), 0);
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = p[i] > threshold ? 1 : 0;
  return m;
}

struct LesionComponent {
  int label = 0;                    // 1-based, raster order of first voxel
  std::vector<std::size_t> voxels;  // ascending linear indices
  double volume_mm3 = 0.0;
  BoundingBox bbox{};
  double mean_intensity = 0.0;  // 0 unless an intensity volume was supplied

  std::size_t voxel_count() const { return voxels.size(); }
};

// Neighbour offsets: the 6 face neighbours, or all 26 for connectivity 26.
inline std::vector<Index3> neighbour_offsets(int connectivity) {
  if (connectivity != 6 && connectivity != 26) {
    raise<ArgumentError>("connectivity must be 6 or 26, got ", connectivity);
  }
  std::vector<Index3> out;
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (connectivity == 6 && manhattan != 1) continue;
        out.push_back({dx, dy, dz});
      }
    }
  }
  return out;
}

// Breadth-first flood fill started from each unlabelled voxel in raster
// order; labels therefore follow the raster order of each component's first
// voxel.
inline std::vector<LesionComponent> connected_components(const Mask& m, int connectivity = 26,
                                                         const Volume* intensity = nullptr) {
  if (intensity) require_same_shape(m, *intensity, "connected_components");
  const auto offsets = neighbour_offsets(connectivity);
  const double voxel_mm3 = voxel_volume_mm3(m.spacing());
  std::vector<std::int32_t> label(m.size(), 0);
  std::vector<LesionComponent> out;
  std::deque<std::size_t> queue;
  for (std::size_t seed = 0; seed < m.size(); ++seed) {
    if (!m[seed] || label[seed]) continue;
    LesionComponent c;
    c.label = static_cast<int>(out.size()) + 1;
    label[seed] = c.label;
    queue.push_back(seed);
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      c.voxels.push_back(i);
      const Index3 p = m.coords(i);
      for (const Index3& o : offsets) {
        const int x = p[0] + o[0], y = p[1] + o[1], z = p[2] + o[2];
        if (!m.contains(x, y, z)) continue;
        const std::size_t j = m.index(x, y, z);
        if (m[j] && !label[j]) {
          label[j] = c.label;
          queue.push_back(j);
        }
      }
    }
    std::sort(c.voxels.begin(), c.voxels.end());
    c.volume_mm3 = static_cast<double>(c.voxels.size()) * voxel_mm3;
    c.bbox = {m.coords(c.voxels.front()), m.coords(c.voxels.front())};
    double sum = 0.0;
    for (std::size_t i : c.voxels) {
      const Index3 p = m.coords(i);
      for (int a = 0; a < 3; ++a) {
        c.bbox.lower[a] = std::min(c.bbox.lower[a], p[a]);
        c.bbox.upper[a] = std::max(c.bbox.upper[a], p[a]);
      }
      if (intensity) sum += (*intensity)[i];
    }
    for (int a = 0; a < 3; ++a) c.bbox.upper[a] += 1;
    if (intensity) c.mean_intensity = sum / static_cast<double>(c.voxels.size());
    out.push_back(std::move(c));
  }
  return out;
}

// Mask with exactly the listed components set.
inline Mask components_to_mask(const std::vector<LesionComponent>& cs, const Mask& like) {
  Mask out = empty_mask_like(like);
  for (const auto& c : cs) {
    for (std::size_t i : c.voxels) out[i] = 1;
  }
  return out;
}

}  // namespace lf::postprocess
