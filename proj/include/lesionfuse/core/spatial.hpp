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

// Cropping, pasting, padding and resampling on voxel grids.

#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include "lesionfuse/core/grid.hpp"

namespace lf {

enum class Interpolation { kTrilinear, kNearest };

// Copies `box` out of `g`. The origin moves with the box.
template <typename T>
Grid<T> crop(const Grid<T>& g, const BoundingBox& box) {
  if (!box.valid_for(g.dims())) raise<ArgumentError>("crop box outside grid");
  Geometry geom = g.geometry();
  for (int i = 0; i < 3; ++i) geom.origin[i] += box.lower[i] * geom.spacing[i];
  Grid<T> out(box.extent(), geom);
  const Index3 e = box.extent();
  for (int z = 0; z < e[2]; ++z) {
    for (int y = 0; y < e[1]; ++y) {
      const T* src = &g(box.lower[0], box.lower[1] + y, box.lower[2] + z);
      std::copy(src, src + e[0], &out(0, y, z));
    }
  }
  return out;
}

// Inverse of crop: places `sub` at `box` inside a grid of `full` dims filled
// with `fill`. `geometry` is the geometry of the full grid.
template <typename T>
Grid<T> paste(const Grid<T>& sub, const BoundingBox& box, const Index3& full,
              const Geometry& geometry, T fill = T{}) {
  if (!box.valid_for(full) || box.extent() != sub.dims()) {
    raise<ShapeError>("paste: box does not match sub-grid");
  }
  Grid<T> out(full, geometry, fill);
  const Index3 e = box.extent();
  for (int z = 0; z < e[2]; ++z) {
    for (int y = 0; y < e[1]; ++y) {
      const T* src = &sub(0, y, z);
      std::copy(src, src + e[0], &out(box.lower[0], box.lower[1] + y, box.lower[2] + z));
    }
  }
  return out;
}

// Tightest box around voxels with value > threshold; the full grid if there
// are none.
template <typename T>
BoundingBox foreground_box(const Grid<T>& g, double threshold) {
  Index3 lo{g.nx(), g.ny(), g.nz()};
  Index3 hi{-1, -1, -1};
  for (int z = 0; z < g.nz(); ++z) {
    for (int y = 0; y < g.ny(); ++y) {
      for (int x = 0; x < g.nx(); ++x) {
        if (static_cast<double>(g(x, y, z)) > threshold) {
          lo = {std::min(lo[0], x), std::min(lo[1], y), std::min(lo[2], z)};
          hi = {std::max(hi[0], x), std::max(hi[1], y), std::max(hi[2], z)};
        }
      }
    }
  }
  if (hi[0] < 0) return BoundingBox::full(g.dims());
  return {lo, {hi[0] + 1, hi[1] + 1, hi[2] + 1}};
}

inline std::pair<Volume, BoundingBox> crop_to_foreground(const Volume& v,
                                                         double threshold) {
  if (v.empty()) raise<ArgumentError>("crop_to_foreground: empty volume");
  const BoundingBox box = foreground_box(v, threshold);
  return {crop(v, box), box};
}

// Mirror index into [0, n) without repeating the edge sample
// (..., 2, 1, 0, 1, 2, ...); periodic for offsets beyond one reflection.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

// Grows `g` to at least `min_dims` by reflection, keeping the original data
// at offset `lower` (returned) so the pad is split evenly on both sides.
template <typename T>
std::pair<Grid<T>, Index3> pad_reflect_to(const Grid<T>& g, const Index3& min_dims) {
  Index3 dims = g.dims();
  Index3 lower{0, 0, 0};
  bool needed = false;
  for (int i = 0; i < 3; ++i) {
    if (dims[i] < min_dims[i]) {
      lower[i] = (min_dims[i] - dims[i]) / 2;
      dims[i] = min_dims[i];
      needed = true;
    }
  }
  if (!needed) return {g, lower};
  Grid<T> out(dims, g.geometry());
  for (int z = 0; z < dims[2]; ++z) {
    const int sz = reflect_index(z - lower[2], g.nz());
    for (int y = 0; y < dims[1]; ++y) {
      const int sy = reflect_index(y - lower[1], g.ny());
      for (int x = 0; x < dims[0]; ++x) {
        out(x, y, z) = g(reflect_index(x - lower[0], g.nx()), sy, sz);
      }
    }
  }
  return {std::move(out), lower};
}

inline Index3 resampled_dims(const Index3& dims, const Vec3& spacing,
                             const Vec3& target) {
  Index3 out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = std::max(1, static_cast<int>(std::lround(dims[i] * spacing[i] / target[i])));
  }
  return out;
}

namespace detail {

// Trilinear sample at continuous voxel coordinate, clamp-to-edge.
template <typename T>
double sample_trilinear(const Grid<T>& g, double x, double y, double z) {
  auto split = [](double c, int n, int& i0, int& i1, double& f) {
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<int>(std::floor(c));
    i1 = std::min(i0 + 1, n - 1);
    f = c - i0;
  };
  int x0, x1, y0, y1, z0, z1;
  double fx, fy, fz;
  split(x, g.nx(), x0, x1, fx);
  split(y, g.ny(), y0, y1, fy);
  split(z, g.nz(), z0, z1, fz);
  auto at = [&](int a, int b, int c) { return static_cast<double>(g(a, b, c)); };
  const double c00 = at(x0, y0, z0) * (1 - fx) + at(x1, y0, z0) * fx;
  const double c10 = at(x0, y1, z0) * (1 - fx) + at(x1, y1, z0) * fx;
  const double c01 = at(x0, y0, z1) * (1 - fx) + at(x1, y0, z1) * fx;
  const double c11 = at(x0, y1, z1) * (1 - fx) + at(x1, y1, z1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

template <typename T>
T sample_nearest(const Grid<T>& g, double x, double y, double z) {
  auto near = [](double c, int n) {
    return std::clamp(static_cast<int>(std::floor(c + 0.5)), 0, n - 1);
  };
  return g(near(x, g.nx()), near(y, g.ny()), near(z, g.nz()));
}

}  // namespace detail

// Output voxel j sits at input coordinate j * target / spacing, so voxel 0
// stays put and grid points that coincide keep their values.
template <typename T>
Grid<T> resample(const Grid<T>& g, const Vec3& target, Interpolation mode) {
  validate_spacing(target);
  if (g.geometry().same_spacing(Geometry{target}, 0.0)) return g;
  const Index3 out_dims = resampled_dims(g.dims(), g.spacing(), target);
  Geometry geom = g.geometry();
  geom.spacing = target;
  Grid<T> out(out_dims, geom);
  Vec3 ratio{};
  for (int i = 0; i < 3; ++i) ratio[i] = target[i] / g.spacing()[i];
  for (int z = 0; z < out_dims[2]; ++z) {
    for (int y = 0; y < out_dims[1]; ++y) {
      for (int x = 0; x < out_dims[0]; ++x) {
        const double sx = x * ratio[0];
        const double sy = y * ratio[1];
        const double sz = z * ratio[2];
        if (mode == Interpolation::kNearest) {
          out(x, y, z) = detail::sample_nearest(g, sx, sy, sz);
        } else {
          out(x, y, z) = static_cast<T>(detail::sample_trilinear(g, sx, sy, sz));
        }
      }
    }
  }
  return out;
}

}  // namespace lf
