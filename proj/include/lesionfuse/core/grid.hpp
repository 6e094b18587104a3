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

// Volume and mask containers shared by every stage of the pipeline.
//
// Storage is x-fastest (index = x + nx * (y + ny * z)), the same order as the
// NIfTI payload, so an axial slice (fixed z) is one contiguous run.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <type_traits>
#include <vector>

#include "lesionfuse/core/errors.hpp"

namespace lf {

using Index3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

inline std::size_t voxel_count(const Index3& dims) {
  return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
         static_cast<std::size_t>(dims[2]);
}

// Physical metadata. The orientation fields are carried through I/O untouched;
// nothing in the pipeline reorients data.
struct Geometry {
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 3> quatern{0.0f, 0.0f, 0.0f};
  std::array<std::array<float, 4>, 3> srow{};

  bool same_spacing(const Geometry& other, double tol = 1e-6) const {
    for (int i = 0; i < 3; ++i) {
      if (std::abs(spacing[i] - other.spacing[i]) > tol) return false;
    }
    return true;
  }
};

inline void validate_spacing(const Vec3& spacing) {
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      raise<ArgumentError>("spacing components must be positive, got ", s);
    }
  }
}

// Product of the spacing components, i.e. the volume of one voxel in mm^3.
inline double voxel_volume_mm3(const Vec3& spacing) {
  validate_spacing(spacing);
  return spacing[0] * spacing[1] * spacing[2];
}

template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;

  explicit Grid(const Index3& dims, const Geometry& geometry = {}, T fill = T{})
      : dims_(dims), geometry_(geometry) {
    check_dims(dims);
    validate_spacing(geometry.spacing);
    data_.assign(voxel_count(dims), fill);
  }

  Grid(const Index3& dims, std::vector<T> data, const Geometry& geometry = {})
      : dims_(dims), geometry_(geometry), data_(std::move(data)) {
    check_dims(dims);
    validate_spacing(geometry.spacing);
    if (data_.size() != voxel_count(dims)) {
      raise<ShapeError>("grid payload has ", data_.size(), " values, dims need ",
                        voxel_count(dims));
    }
  }

  const Index3& dims() const noexcept { return dims_; }
  int nx() const noexcept { return dims_[0]; }
  int ny() const noexcept { return dims_[1]; }
  int nz() const noexcept { return dims_[2]; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  const Geometry& geometry() const noexcept { return geometry_; }
  Geometry& geometry() noexcept { return geometry_; }
  const Vec3& spacing() const noexcept { return geometry_.spacing; }

  std::size_t index(int x, int y, int z) const noexcept {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(z));
  }
  std::size_t index(const Index3& p) const noexcept {
    return index(p[0], p[1], p[2]);
  }
  Index3 coords(std::size_t i) const noexcept {
    const auto nx = static_cast<std::size_t>(dims_[0]);
    const auto ny = static_cast<std::size_t>(dims_[1]);
    return {static_cast<int>(i % nx), static_cast<int>((i / nx) % ny),
            static_cast<int>(i / (nx * ny))};
  }
  bool contains(int x, int y, int z) const noexcept {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_[0] && y < dims_[1] &&
           z < dims_[2];
  }

  T& operator()(int x, int y, int z) noexcept { return data_[index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const noexcept {
    return data_[index(x, y, z)];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  // Axial slice z as a contiguous view of nx*ny values.
  std::span<const T> slice(int z) const noexcept {
    const std::size_t n = static_cast<std::size_t>(dims_[0]) * dims_[1];
    return std::span<const T>(data_).subspan(n * static_cast<std::size_t>(z), n);
  }

  template <typename U>
  bool same_shape(const Grid<U>& other) const noexcept {
    return dims_ == other.dims();
  }

  bool operator==(const Grid& other) const {
    return dims_ == other.dims_ && data_ == other.data_;
  }

 private:
  static void check_dims(const Index3& dims) {
    for (int d : dims) {
      if (d < 1) raise<ShapeError>("grid dimensions must be >= 1, got ", d);
    }
  }

  Index3 dims_{0, 0, 0};
  Geometry geometry_{};
  std::vector<T> data_;
};

using Volume = Grid<float>;
using Mask = Grid<std::uint8_t>;

template <typename T, typename U>
void require_same_shape(const Grid<T>& a, const Grid<U>& b, const char* what) {
  if (!a.same_shape(b)) {
    raise<ShapeError>(what, ": shape mismatch (", a.nx(), "x", a.ny(), "x",
                      a.nz(), " vs ", b.nx(), "x", b.ny(), "x", b.nz(), ")");
  }
}

inline std::size_t count_nonzero(const Mask& m) {
  return static_cast<std::size_t>(
      std::count_if(m.data().begin(), m.data().end(),
                    [](std::uint8_t v) { return v != 0; }));
}

inline double mask_volume_mm3(const Mask& m) {
  return static_cast<double>(count_nonzero(m)) * voxel_volume_mm3(m.spacing());
}

// Mask with the same grid as `like`, all zeros.
template <typename T>
Mask empty_mask_like(const Grid<T>& like) {
  return Mask(like.dims(), like.geometry(), 0);
}

// Axis-aligned box, lower inclusive and upper exclusive.
struct BoundingBox {
  Index3 lower{0, 0, 0};
  Index3 upper{0, 0, 0};

  Index3 extent() const {
    return {upper[0] - lower[0], upper[1] - lower[1], upper[2] - lower[2]};
  }
  bool contains(const Index3& p) const {
    for (int i = 0; i < 3; ++i) {
      if (p[i] < lower[i] || p[i] >= upper[i]) return false;
    }
    return true;
  }
  bool valid_for(const Index3& dims) const {
    for (int i = 0; i < 3; ++i) {
      if (lower[i] < 0 || lower[i] >= upper[i] || upper[i] > dims[i]) return false;
    }
    return true;
  }
  bool operator==(const BoundingBox&) const = default;

  static BoundingBox full(const Index3& dims) { return {{0, 0, 0}, dims}; }
};

}  // namespace lf
