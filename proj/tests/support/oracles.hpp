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

// Independent reference implementations shared by the unit tests and the
// acceptance runner. They deliberately use different algorithms from the
// library code they check.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/core/rng.hpp"
#include "lesionfuse/postprocess/filters.hpp"

namespace lf::oracle {

inline Mask random_mask(const Index3& dims, double density, std::uint64_t seed) {
  Rng rng(seed);
  Mask m(dims, {}, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.bernoulli(density) ? 1 : 0;
  return m;
}

// Union-find over every adjacent foreground pair; components sorted by
// their smallest linear index, voxels ascending.
inline std::vector<std::vector<std::size_t>> components(const Mask& m, int connectivity) {
  std::vector<std::size_t> parent(m.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (int z = 0; z < m.nz(); ++z) {
    for (int y = 0; y < m.ny(); ++y) {
      for (int x = 0; x < m.nx(); ++x) {
        if (!m(x, y, z)) continue;
        for (int dz = -1; dz <= 1; ++dz) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int d = std::abs(dx) + std::abs(dy) + std::abs(dz);
              if (d == 0 || (connectivity == 6 && d > 1)) continue;
              if (!m.contains(x + dx, y + dy, z + dz) || !m(x + dx, y + dy, z + dz)) continue;
              const std::size_t a = find(m.index(x, y, z));
              const std::size_t b = find(m.index(x + dx, y + dy, z + dz));
              parent[std::max(a, b)] = std::min(a, b);
            }
          }
        }
      }
    }
  }
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i]) groups[find(i)].push_back(i);
  }
  std::vector<std::vector<std::size_t>> out;
  for (auto& [root, vox] : groups) out.push_back(std::move(vox));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return out;
}

// Co-occurrence by enumerating every ordered voxel pair whose displacement
// is one of the offsets or its negation.
inline std::vector<double> glcm_counts(const std::vector<double>& patch, const Index3& dims,
                                       int levels, const std::vector<Index3>& offsets) {
  const double lo = *std::min_element(patch.begin(), patch.end());
  const double hi = *std::max_element(patch.begin(), patch.end());
  auto level = [&](double v) {
    if (hi == lo) return 0;
    int q = static_cast<int>(std::floor((v - lo) * levels / (hi - lo)));
    return q >= levels ? levels - 1 : q;
  };
  std::vector<double> c(static_cast<std::size_t>(levels * levels), 0.0);
  const std::size_t n = patch.size();
  auto coords = [&](std::size_t i) {
    return Index3{static_cast<int>(i % dims[0]), static_cast<int>((i / dims[0]) % dims[1]),
                  static_cast<int>(i / (static_cast<std::size_t>(dims[0]) * dims[1]))};
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const Index3 a = coords(i), b = coords(j);
      const Index3 d{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
      for (const Index3& o : offsets) {
        const Index3 neg{-o[0], -o[1], -o[2]};
        if (d == o || d == neg) c[static_cast<std::size_t>(level(patch[i]) * levels + level(patch[j]))] += 1.0;
      }
    }
  }
  return c;
}

// Haralick features with separate row/column marginals.
inline std::vector<double> haralick(const std::vector<double>& counts, int levels) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> px(levels, 0.0), py(levels, 0.0);
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      px[i] += counts[i * levels + j] / total;
      py[j] += counts[i * levels + j] / total;
    }
  }
  double mx = 0, my = 0, vx = 0, vy = 0;
  for (int i = 0; i < levels; ++i) {
    mx += i * px[i];
    my += i * py[i];
  }
  for (int i = 0; i < levels; ++i) {
    vx += (i - mx) * (i - mx) * px[i];
    vy += (i - my) * (i - my) * py[i];
  }
  double contrast = 0, cov = 0, energy = 0, homog = 0, entropy = 0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      const double p = counts[i * levels + j] / total;
      contrast += (i - j) * (i - j) * p;
      cov += (i - mx) * (j - my) * p;
      energy += p * p;
      homog += p / (1.0 + (i - j) * (i - j));
      if (p > 0) entropy -= p * std::log(p) / std::log(2.0);
    }
  }
  const double corr = (vx > 0 && vy > 0) ? cov / std::sqrt(vx * vy) : 0.0;
  return {contrast, corr, energy, homog, entropy};
}

struct Scenario {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Filled axial square block of the given size at the grid centre.
inline Mask block_mask(const Index3& dims, const Index3& size) {
  Mask m(dims, {}, 0);
  for (int z = 0; z < size[2]; ++z) {
    for (int y = 0; y < size[1]; ++y) {
      for (int x = 0; x < size[0]; ++x) m(x + (dims[0] - size[0]) / 2, y + (dims[1] - size[1]) / 2, z + 2) = 1;
    }
  }
  return m;
}

// Classifier that answers "no lesion" on the first `negatives` requested
// slices and records what it was asked.
inline postprocess::SliceClassifier scripted_slices(int negatives, std::vector<int>* asked) {
  return [negatives, asked](const Volume&, const std::vector<int>& zs) {
    if (asked) *asked = zs;
    std::vector<bool> out;
    for (std::size_t i = 0; i < zs.size(); ++i) out.push_back(static_cast<int>(i) >= negatives);
    return out;
  };
}

inline postprocess::VoxelClassifier constant_voxels(bool true_positive) {
  return [true_positive](const radiomics::FeatureMatrix& x) {
    return std::vector<bool>(x.rows.size(), true_positive);
  };
}

// The six filter scenarios: both volume/voxel gates, the strict > 50% rule on
// either side, empty input, and the forced radiomics outcomes.
inline std::vector<Scenario> filter_scenarios() {
  std::vector<Scenario> out;
  const Index3 dims{24, 24, 16};
  Volume v(dims, {}, 1.0f);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i % 7);
  using postprocess::radiomics_filter;
  using postprocess::slice_filter;

  {
    // 10x10x25 would not fit; 20x20x7 = 2800 mm3 over 7 slices.
    const Mask m = block_mask(dims, {20, 20, 7});
    auto [res, rep] = slice_filter(m, scripted_slices(100, nullptr), v);
    out.push_back({"slice gate: 2800 mm3 >= 2000 keeps mask", res == m && !rep.applied,
                   rep.reason});
  }
  {
    const Mask m = block_mask(dims, {10, 10, 5});  // 500 mm3, 5 slices
    std::vector<int> asked;
    auto [res, rep] = slice_filter(m, scripted_slices(3, &asked), v);
    const bool ok = count_nonzero(res) == 0 && rep.applied && rep.slices_segmented == 5 &&
                    rep.slices_no_lesion == 3 && asked == std::vector<int>{2, 3, 4, 5, 6} &&
                    rep.voxels_removed == 500;
    out.push_back({"slice: 3/5 no-lesion (0.6 > 0.5) empties mask", ok, rep.reason});
  }
  {
    const Mask m = block_mask(dims, {10, 10, 4});  // 4 slices, 2 negative: exactly 0.5
    auto [res, rep] = slice_filter(m, scripted_slices(2, nullptr), v);
    const Mask m5 = block_mask(dims, {10, 10, 5});
    auto [res5, rep5] = slice_filter(m5, scripted_slices(2, nullptr), v);
    out.push_back({"slice: fraction 0.5 and 0.4 keep mask (strict >)",
                   res == m && rep.fraction == 0.5 && res5 == m5, rep.reason});
  }
  {
    const Mask m(dims, {}, 0);
    auto [res, rep] = slice_filter(m, scripted_slices(100, nullptr), v);
    out.push_back({"slice: empty input not applied", count_nonzero(res) == 0 && !rep.applied &&
                                                         rep.reason == "not applied (no segmentation)",
                   rep.reason});
  }
  {
    const Mask m = block_mask(dims, {20, 10, 5});  // 1000 voxels: at the gate, untouched
    auto [res, rep] = radiomics_filter(m, v, constant_voxels(false));
    out.push_back({"radiomics gate: 1000-voxel component untouched", res == m && !rep.applied,
                   rep.reason});
  }
  {
    Mask m(dims, {}, 0);
    for (int x = 0; x < 10; ++x) m(x + 5, 8, 8) = 1;  // one 10-voxel component
    auto [kept, rep_keep] = radiomics_filter(m, v, constant_voxels(true));
    auto [gone, rep_gone] = radiomics_filter(m, v, constant_voxels(false));
    const bool ok = kept == m && rep_keep.voxels_removed == 0 && count_nonzero(gone) == 0 &&
                    rep_gone.components_removed == 1 && rep_gone.voxels_removed == 10;
    out.push_back({"radiomics: identity keeps, all-FP empties 10-voxel component", ok,
                   rep_gone.reason});
  }
  return out;
}

}  // namespace lf::oracle
