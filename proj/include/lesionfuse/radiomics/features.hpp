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

// Voxel-level radiomics: first-order statistics, component shape, GLCM
// texture over a cubic neighbourhood.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/postprocess/components.hpp"

namespace lf::radiomics {

inline constexpr const char* kSchemaId = "lf-voxel-radiomics-v1";

struct FeatureVector {
  std::vector<std::string> names;
  std::vector<double> values;
};

inline const std::vector<std::string>& first_order_names() {
  static const std::vector<std::string> n{"fo_mean",    "fo_variance", "fo_skewness", "fo_kurtosis",
                                          "fo_energy",  "fo_entropy",  "fo_min",      "fo_max",
                                          "fo_p10",     "fo_p90"};
  return n;
}
inline const std::vector<std::string>& glcm_names() {
  static const std::vector<std::string> n{"glcm_contrast", "glcm_correlation", "glcm_energy",
                                          "glcm_homogeneity", "glcm_entropy"};
  return n;
}
inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> n{"shape_volume_mm3", "shape_surface_mm2",
                                          "shape_sphericity", "shape_max_diameter_mm"};
  return n;
}

inline const std::vector<std::string>& voxel_schema() {
  static const std::vector<std::string> n = [] {
    std::vector<std::string> out = first_order_names();
    out.insert(out.end(), glcm_names().begin(), glcm_names().end());
    out.insert(out.end(), shape_names().begin(), shape_names().end());
    out.push_back("intensity_local_z");
    return out;
  }();
  return n;
}

// numpy-style linear interpolation between closest ranks.
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline std::vector<double> first_order(const std::vector<double>& values) {
  if (values.empty()) raise<ArgumentError>("first_order: empty value list");
  const auto n = static_cast<double>(values.size());
  double sum = 0.0, energy = 0.0;
  for (double v : values) {
    sum += v;
    energy += v * v;
  }
  const double mean = sum / n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : values) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  const double skew = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  const double kurt = m2 > 0.0 ? m4 / (m2 * m2) : 0.0;

  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const double lo = sorted.front(), hi = sorted.back();
  double entropy = 0.0;
  if (hi > lo) {
    constexpr int kBins = 32;
    std::array<int, kBins> hist{};
    for (double v : values) {
      const int b = std::min(kBins - 1, static_cast<int>((v - lo) / (hi - lo) * kBins));
      ++hist[static_cast<std::size_t>(b)];
    }
    for (int c : hist) {
      if (c == 0) continue;
      const double p = c / n;
      entropy -= p * std::log2(p);
    }
  }
  return {mean, m2,  skew, kurt, energy, entropy,
          lo,   hi,  percentile_sorted(sorted, 0.10), percentile_sorted(sorted, 0.90)};
}

// Surface area counts voxel faces not shared with another component voxel.
// The maximum diameter is attained between boundary voxels, so only those
// enter the pairwise search.
inline std::vector<double> shape_features(const postprocess::LesionComponent& c, const Index3& dims,
                                          const Vec3& spacing) {
  if (c.voxels.empty()) raise<ArgumentError>("shape_features: empty component");
  const double volume = static_cast<double>(c.voxels.size()) * voxel_volume_mm3(spacing);
  const std::array<double, 3> face{spacing[1] * spacing[2], spacing[0] * spacing[2],
                                   spacing[0] * spacing[1]};
  const BoundingBox& b = c.bbox;
  const Index3 ext = b.extent();
  // Local occupancy with a one-voxel margin so neighbour lookups never
  // leave the buffer.
  const Index3 pad{ext[0] + 2, ext[1] + 2, ext[2] + 2};
  std::vector<std::uint8_t> occ(static_cast<std::size_t>(pad[0]) * pad[1] * pad[2], 0);
  auto local = [&](int x, int y, int z) {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(pad[0]) * (static_cast<std::size_t>(y) +
                                               static_cast<std::size_t>(pad[1]) * z);
  };
  const auto nx = static_cast<std::size_t>(dims[0]), ny = static_cast<std::size_t>(dims[1]);
  auto to_local = [&](std::size_t i) {
    return Index3{static_cast<int>(i % nx) - b.lower[0] + 1,
                  static_cast<int>((i / nx) % ny) - b.lower[1] + 1,
                  static_cast<int>(i / (nx * ny)) - b.lower[2] + 1};
  };
  for (std::size_t i : c.voxels) {
    const Index3 p = to_local(i);
    occ[local(p[0], p[1], p[2])] = 1;
  }
  double area = 0.0;
  std::vector<Vec3> boundary;
  for (std::size_t i : c.voxels) {
    const Index3 p = to_local(i);
    int exposed = 0;
    for (int a = 0; a < 3; ++a) {
      for (int s : {-1, 1}) {
        Index3 q = p;
        q[a] += s;
        if (!occ[local(q[0], q[1], q[2])]) {
          area += face[static_cast<std::size_t>(a)];
          ++exposed;
        }
      }
    }
    if (exposed) {
      boundary.push_back({p[0] * spacing[0], p[1] * spacing[1], p[2] * spacing[2]});
    }
  }
  double diam2 = 0.0;
  for (std::size_t i = 0; i < boundary.size(); ++i) {
    for (std::size_t j = i + 1; j < boundary.size(); ++j) {
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double d = boundary[i][a] - boundary[j][a];
        d2 += d * d;
      }
      diam2 = std::max(diam2, d2);
    }
  }
  const double sphericity =
      std::cbrt(std::numbers::pi) * std::pow(6.0 * volume, 2.0 / 3.0) / area;
  return {volume, area, sphericity, std::sqrt(diam2)};
}

// The 13 direction vectors with one representative per +/- pair.
inline std::vector<Index3> glcm_offsets_3d() {
  std::vector<Index3> out;
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const Index3 o{dx, dy, dz};
        if (o == Index3{0, 0, 0}) continue;
        // Keep the lexicographically positive member of each pair.
        if (dz > 0 || (dz == 0 && (dy > 0 || (dy == 0 && dx > 0)))) out.push_back(o);
      }
    }
  }
  return out;
}

// Equal-width quantization over [min, max] of the patch; a constant patch
// maps to level 0.
inline std::vector<int> quantize(const std::vector<double>& values, int levels) {
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<int> q(values.size(), 0);
  if (hi > lo) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      q[i] = std::min(levels - 1, static_cast<int>((values[i] - lo) / (hi - lo) * levels));
    }
  }
  return q;
}

// Symmetric co-occurrence counts, row-major levels x levels. `patch` holds
// values of a box of `dims`, x fastest.
inline std::vector<double> glcm_counts(const std::vector<double>& patch, const Index3& dims,
                                       int levels, const std::vector<Index3>& offsets) {
  if (levels < 2) raise<ArgumentError>("glcm: levels must be >= 2");
  if (patch.size() != voxel_count(dims)) raise<ShapeError>("glcm: patch/dims mismatch");
  const std::vector<int> q = quantize(patch, levels);
  std::vector<double> counts(static_cast<std::size_t>(levels) * levels, 0.0);
  auto at = [&](int x, int y, int z) {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) +
                                                static_cast<std::size_t>(dims[1]) * z);
  };
  for (const Index3& o : offsets) {
    for (int z = std::max(0, -o[2]); z < std::min(dims[2], dims[2] - o[2]); ++z) {
      for (int y = std::max(0, -o[1]); y < std::min(dims[1], dims[1] - o[1]); ++y) {
        for (int x = std::max(0, -o[0]); x < std::min(dims[0], dims[0] - o[0]); ++x) {
          const int a = q[at(x, y, z)];
          const int b = q[at(x + o[0], y + o[1], z + o[2])];
          counts[static_cast<std::size_t>(a * levels + b)] += 1.0;
          counts[static_cast<std::size_t>(b * levels + a)] += 1.0;
        }
      }
    }
  }
  return counts;
}

// Haralick contrast, correlation, energy, homogeneity, entropy (log2). With
// no co-occurring pairs the patch is treated as constant.
inline std::vector<double> glcm_from_counts(const std::vector<double>& counts, int levels) {
  double total = 0.0;
  for (double c : counts) total += c;
  if (total == 0.0) return {0.0, 0.0, 1.0, 1.0, 0.0};
  double mu = 0.0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) mu += i * counts[static_cast<std::size_t>(i * levels + j)];
  }
  mu /= total;  // symmetric matrix: row and column means coincide
  double var = 0.0, contrast = 0.0, cov = 0.0, energy = 0.0, homog = 0.0, entropy = 0.0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      const double p = counts[static_cast<std::size_t>(i * levels + j)] / total;
      if (p == 0.0) continue;
      const double d = i - j;
      var += (i - mu) * (i - mu) * p;
      cov += (i - mu) * (j - mu) * p;
      contrast += d * d * p;
      energy += p * p;
      homog += p / (1.0 + d * d);
      entropy -= p * std::log2(p);
    }
  }
  const double corr = var > 0.0 ? cov / var : 0.0;
  return {contrast, corr, energy, homog, entropy};
}

inline std::vector<double> glcm_features(const std::vector<double>& patch, const Index3& dims,
                                         int levels = 8,
                                         const std::vector<Index3>& offsets = glcm_offsets_3d()) {
  if (patch.size() < 2) raise<ArgumentError>("glcm: patch needs >= 2 voxels");
  return glcm_from_counts(glcm_counts(patch, dims, levels, offsets), levels);
}

struct NeighbourhoodOptions {
  int radius = 2;
  int levels = 8;
};

// Neighbourhood box around p, clipped to the grid.
inline BoundingBox neighbourhood(const Index3& p, const Index3& dims, int radius) {
  BoundingBox b;
  for (int a = 0; a < 3; ++a) {
    b.lower[a] = std::max(0, p[a] - radius);
    b.upper[a] = std::min(dims[a], p[a] + radius + 1);
  }
  return b;
}

namespace detail {

inline std::vector<double> voxel_row(const Volume& v, std::size_t i,
                                     const std::vector<double>& shape,
                                     const NeighbourhoodOptions& opt,
                                     const std::vector<Index3>& offsets,
                                     std::vector<double>& patch) {
  const BoundingBox b = neighbourhood(v.coords(i), v.dims(), opt.radius);
  patch.clear();
  for (int z = b.lower[2]; z < b.upper[2]; ++z) {
    for (int y = b.lower[1]; y < b.upper[1]; ++y) {
      for (int x = b.lower[0]; x < b.upper[0]; ++x) patch.push_back(v(x, y, z));
    }
  }
  std::vector<double> row = first_order(patch);
  const std::vector<double> tex = patch.size() >= 2
                                      ? glcm_features(patch, b.extent(), opt.levels, offsets)
                                      : std::vector<double>{0.0, 0.0, 1.0, 1.0, 0.0};
  row.insert(row.end(), tex.begin(), tex.end());
  row.insert(row.end(), shape.begin(), shape.end());
  const double sd = std::sqrt(row[1]);
  row.push_back(sd > 0.0 ? (v[i] - row[0]) / sd : 0.0);
  return row;
}

}  // namespace detail

// Feature rows for every voxel of one component, in the component's voxel
// order. The shape block is computed once and shared.
inline std::vector<std::vector<double>> component_voxel_features(
    const Volume& v, const postprocess::LesionComponent& c, const NeighbourhoodOptions& opt = {}) {
  const std::vector<double> shape = shape_features(c, v.dims(), v.spacing());
  const auto offsets = glcm_offsets_3d();
  std::vector<std::vector<double>> rows;
  rows.reserve(c.voxels.size());
  std::vector<double> patch;
  for (std::size_t i : c.voxels) rows.push_back(detail::voxel_row(v, i, shape, opt, offsets, patch));
  return rows;
}

inline FeatureVector voxel_features(const Volume& v, const Mask& m, const Index3& p,
                                    const NeighbourhoodOptions& opt = {}, int connectivity = 26) {
  require_same_shape(v, m, "voxel_features");
  if (!m.contains(p[0], p[1], p[2]) || !m(p[0], p[1], p[2])) {
    raise<ArgumentError>("voxel_features: voxel (", p[0], ",", p[1], ",", p[2],
                         ") is not inside the mask");
  }
  const std::size_t target = m.index(p);
  for (const auto& c : postprocess::connected_components(m, connectivity)) {
    auto it = std::lower_bound(c.voxels.begin(), c.voxels.end(), target);
    if (it == c.voxels.end() || *it != target) continue;
    const std::vector<double> shape = shape_features(c, v.dims(), v.spacing());
    std::vector<double> patch;
    return {voxel_schema(),
            detail::voxel_row(v, target, shape, opt, glcm_offsets_3d(), patch)};
  }
  raise<ArgumentError>("voxel_features: component lookup failed");
}

}  // namespace lf::radiomics
