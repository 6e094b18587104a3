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

// Patch sampling and spatial / intensity augmentation.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/core/rng.hpp"
#include "lesionfuse/core/spatial.hpp"

namespace lf::training {

struct AugmentConfig {
  std::array<bool, 3> flip_axes{true, true, true};
  std::pair<double, double> gamma_range{0.7, 1.5};
  std::pair<double, double> rotation_range_deg{-180.0, 180.0};  // about the z axis
  double flip_probability = 0.5;   // per enabled axis
  double gamma_probability = 0.3;
  double rotation_probability = 0.2;

  void validate() const {
    if (!(gamma_range.first > 0.0) || gamma_range.first > gamma_range.second) {
      raise<ArgumentError>("gamma range must be positive and ordered");
    }
    if (rotation_range_deg.first > rotation_range_deg.second) {
      raise<ArgumentError>("rotation range must be ordered");
    }
    for (double p : {flip_probability, gamma_probability, rotation_probability}) {
      if (!(p >= 0.0 && p <= 1.0)) raise<ArgumentError>("augmentation probabilities must lie in [0, 1]");
    }
  }

  static AugmentConfig none() {
    AugmentConfig c;
    c.flip_axes = {false, false, false};
    c.gamma_probability = 0.0;
    c.rotation_probability = 0.0;
    return c;
  }
};

struct Sample {
  Volume image;
  Mask mask;
};

// Rotation of every axial slice by `degrees` about the slice center. Image
// values are interpolated bilinearly, mask values by nearest neighbour;
// samples falling outside the slice take `fill` (image) or 0 (mask).
inline Sample rotate_z(const Sample& in, double degrees, float fill) {
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = 0.5 * (in.image.nx() - 1), cy = 0.5 * (in.image.ny() - 1);
  Sample out{Volume(in.image.dims(), in.image.geometry(), fill), Mask(in.mask.dims(), in.mask.geometry(), 0)};
  const int nx = in.image.nx(), ny = in.image.ny();
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      // Inverse map: source = R(-theta) (p - c) + c.
      const double dx = x - cx, dy = y - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const int nxi = static_cast<int>(std::floor(sx + 0.5));
      const int nyi = static_cast<int>(std::floor(sy + 0.5));
      const bool inside_nearest = nxi >= 0 && nxi < nx && nyi >= 0 && nyi < ny;
      const bool inside_linear = sx >= -0.5 && sx <= nx - 0.5 && sy >= -0.5 && sy <= ny - 0.5;
      for (int z = 0; z < in.image.nz(); ++z) {
        if (inside_linear) {
          out.image(x, y, z) = static_cast<float>(detail::sample_trilinear(in.image, sx, sy, z));
        }
        if (inside_nearest) out.mask(x, y, z) = in.mask(nxi, nyi, z);
      }
    }
  }
  return out;
}

template <typename T>
void flip_axis(Grid<T>& g, int axis) {
  const Index3 d = g.dims();
  for (int z = 0; z < d[2]; ++z) {
    for (int y = 0; y < d[1]; ++y) {
      for (int x = 0; x < d[0]; ++x) {
        Index3 p{x, y, z};
        Index3 q = p;
        q[axis] = d[axis] - 1 - p[axis];
        if (g.index(q) > g.index(p)) std::swap(g(p[0], p[1], p[2]), g(q[0], q[1], q[2]));
      }
    }
  }
}

// Min-max to [0, 1], power gamma, map back to the original range.
inline void apply_gamma(Volume& v, double gamma) {
  const auto [lo_it, hi_it] = std::minmax_element(v.data().begin(), v.data().end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t = (v[i] - lo) / (hi - lo);
    v[i] = static_cast<float>(lo + std::pow(t, gamma) * (hi - lo));
  }
}

// Rotation about z, then independent flips per enabled axis, then gamma.
// The same geometric transform is applied to image and mask.
inline Sample augment(Sample in, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  require_same_shape(in.image, in.mask, "augment");
  if (rng.bernoulli(cfg.rotation_probability)) {
    const double deg = rng.uniform(cfg.rotation_range_deg.first, cfg.rotation_range_deg.second);
    const float fill = *std::min_element(in.image.data().begin(), in.image.data().end());
    in = rotate_z(in, deg, fill);
  }
  for (int axis = 0; axis < 3; ++axis) {
    if (cfg.flip_axes[static_cast<std::size_t>(axis)] && rng.bernoulli(cfg.flip_probability)) {
      flip_axis(in.image, axis);
      flip_axis(in.mask, axis);
    }
  }
  if (rng.bernoulli(cfg.gamma_probability)) {
    apply_gamma(in.image, rng.uniform(cfg.gamma_range.first, cfg.gamma_range.second));
  }
  return in;
}

inline Sample augment(Sample in, const AugmentConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return augment(std::move(in), cfg, rng);
}

// With probability fg_prob the patch is centred on a uniformly chosen lesion
// voxel (when there is one), otherwise on a uniform voxel. Axes shorter than
// the patch are reflect-padded first.
inline Sample sample_patch(const Volume& v, const Mask& m, const Index3& patch, double fg_prob,
                           Rng& rng) {
  require_same_shape(v, m, "sample_patch");
  for (int p : patch) {
    if (p < 1) raise<ArgumentError>("patch size must be positive");
  }
  auto [image, lower] = pad_reflect_to(v, patch);
  Mask mask = pad_reflect_to(m, patch).first;
  const bool want_fg = rng.bernoulli(fg_prob);
  Index3 center{};
  std::vector<std::size_t> lesion;
  if (want_fg) {
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) lesion.push_back(i);
    }
  }
  if (!lesion.empty()) {
    center = mask.coords(lesion[rng.below(lesion.size())]);
  } else {
    for (int i = 0; i < 3; ++i) center[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(image.dims()[i])));
  }
  BoundingBox box;
  for (int i = 0; i < 3; ++i) {
    box.lower[i] = std::clamp(center[i] - patch[i] / 2, 0, image.dims()[i] - patch[i]);
    box.upper[i] = box.lower[i] + patch[i];
  }
  return {crop(image, box), crop(mask, box)};
}

inline Sample sample_patch(const Volume& v, const Mask& m, const Index3& patch, double fg_prob,
                           std::uint64_t seed) {
  Rng rng(seed);
  return sample_patch(v, m, patch, fg_prob, rng);
}

}  // namespace lf::training
