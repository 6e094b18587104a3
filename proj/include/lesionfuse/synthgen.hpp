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

// Deterministic T1-like phantoms: an ellipsoidal "brain" on a zero
// background, ellipsoidal lesions with shifted intensity, a smooth
// multiplicative bias field and additive Gaussian noise.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/core/rng.hpp"

namespace lf::synth {

struct PhantomConfig {
  Index3 shape{48, 48, 48};
  Vec3 spacing{1.0, 1.0, 1.0};
  std::pair<int, int> lesion_count_range{1, 3};
  std::pair<double, double> lesion_radius_range{3.0, 6.0};  // mm
  double tissue_mean = 100.0;
  double tissue_std = 10.0;  // case-to-case spread of the tissue level
  double lesion_intensity_delta = -40.0;
  double bias_amplitude = 0.2;
  double noise_sigma = 4.0;
  std::uint64_t seed = 1;

  void validate() const {
    for (int d : shape) {
      if (d < 8) raise<ArgumentError>("phantom shape components must be >= 8");
    }
    validate_spacing(spacing);
    if (lesion_count_range.first < 0 || lesion_count_range.first > lesion_count_range.second) {
      raise<ArgumentError>("invalid lesion_count_range");
    }
    if (!(lesion_radius_range.first > 0.0) ||
        lesion_radius_range.first > lesion_radius_range.second) {
      raise<ArgumentError>("invalid lesion_radius_range");
    }
    if (!(bias_amplitude >= 0.0 && bias_amplitude < 1.0)) {
      raise<ArgumentError>("bias_amplitude must lie in [0, 1)");
    }
    if (!(noise_sigma >= 0.0) || !(tissue_std >= 0.0)) {
      raise<ArgumentError>("noise_sigma and tissue_std must be >= 0");
    }
    if (!(tissue_mean > 0.0)) raise<ArgumentError>("tissue_mean must be > 0");
  }
};

struct Ellipsoid {
  Vec3 center{};  // mm, relative to voxel (0,0,0)
  Vec3 radii{};   // mm

  bool contains(const Vec3& p) const {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double d = (p[i] - center[i]) / radii[i];
      s += d * d;
    }
    return s <= 1.0;
  }
};

namespace detail {

inline Vec3 voxel_position(int x, int y, int z, const Vec3& spacing) {
  return {x * spacing[0], y * spacing[1], z * spacing[2]};
}

// Brain occupies 80% of the field of view along each axis.
inline Ellipsoid brain_ellipsoid(const PhantomConfig& cfg) {
  Ellipsoid e;
  for (int i = 0; i < 3; ++i) {
    e.center[i] = 0.5 * (cfg.shape[i] - 1) * cfg.spacing[i];
    e.radii[i] = 0.4 * cfg.shape[i] * cfg.spacing[i];
  }
  return e;
}

// Lesion voxels, or empty if any voxel would leave the brain.
inline std::vector<std::size_t> rasterize_inside(const Ellipsoid& lesion,
                                                 const Ellipsoid& brain,
                                                 const Mask& grid) {
  std::vector<std::size_t> voxels;
  const Vec3& sp = grid.spacing();
  Index3 lo{}, hi{};
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::max(0, static_cast<int>(std::floor((lesion.center[i] - lesion.radii[i]) / sp[i])));
    hi[i] = std::min(grid.dims()[i] - 1,
                     static_cast<int>(std::ceil((lesion.center[i] + lesion.radii[i]) / sp[i])));
  }
  for (int z = lo[2]; z <= hi[2]; ++z) {
    for (int y = lo[1]; y <= hi[1]; ++y) {
      for (int x = lo[0]; x <= hi[0]; ++x) {
        const Vec3 p = voxel_position(x, y, z, sp);
        if (!lesion.contains(p)) continue;
        if (!brain.contains(p)) return {};
        voxels.push_back(grid.index(x, y, z));
      }
    }
  }
  return voxels;
}

// log of a separable order-2 field: sum over i,j,k <= 2 of c_ijk u^i v^j w^k
// in coordinates normalized to [-1, 1] over the grid.
inline std::vector<double> random_log_field(const Index3& shape, Rng& rng) {
  std::array<double, 27> coef{};
  for (std::size_t t = 1; t < coef.size(); ++t) coef[t] = rng.normal();
  std::vector<double> field(voxel_count(shape));
  auto norm = [](int i, int n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; };
  std::size_t idx = 0;
  for (int z = 0; z < shape[2]; ++z) {
    const double w = norm(z, shape[2]);
    for (int y = 0; y < shape[1]; ++y) {
      const double v = norm(y, shape[1]);
      for (int x = 0; x < shape[0]; ++x, ++idx) {
        const double u = norm(x, shape[0]);
        const double pu[3] = {1.0, u, u * u};
        const double pv[3] = {1.0, v, v * v};
        const double pw[3] = {1.0, w, w * w};
        double s = 0.0;
        for (int k = 0; k < 3; ++k) {
          for (int j = 0; j < 3; ++j) {
            for (int i = 0; i < 3; ++i) s += coef[i + 3 * (j + 3 * k)] * pu[i] * pv[j] * pw[k];
          }
        }
        field[idx] = s;
      }
    }
  }
  return field;
}

// Scale s such that max |exp(s * L) - 1| over the grid equals `amplitude`.
inline double fit_field_scale(const std::vector<double>& log_field, double amplitude) {
  if (amplitude <= 0.0) return 0.0;
  auto deviation = [&](double s) {
    double m = 0.0;
    for (double l : log_field) m = std::max(m, std::abs(std::exp(s * l) - 1.0));
    return m;
  };
  double lo = 0.0;
  double hi = 1.0;
  while (deviation(hi) < amplitude) hi *= 2.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (deviation(mid) < amplitude ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

struct Phantom {
  Volume image;
  Mask mask;
};

inline Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Geometry geom;
  geom.spacing = cfg.spacing;
  Volume image(cfg.shape, geom, 0.0f);
  Mask mask(cfg.shape, geom, 0);
  Mask brain(cfg.shape, geom, 0);

  const Ellipsoid brain_shape = detail::brain_ellipsoid(cfg);
  for (int z = 0; z < cfg.shape[2]; ++z) {
    for (int y = 0; y < cfg.shape[1]; ++y) {
      for (int x = 0; x < cfg.shape[0]; ++x) {
        if (brain_shape.contains(detail::voxel_position(x, y, z, cfg.spacing))) {
          brain(x, y, z) = 1;
        }
      }
    }
  }

  // Quantized to 1/256 so tissue and lesion levels differ by exactly the
  // configured delta in float arithmetic.
  double tissue = std::max(0.1 * cfg.tissue_mean, rng.normal(cfg.tissue_mean, cfg.tissue_std));
  tissue = std::round(tissue * 256.0) / 256.0;
  const int lesions = static_cast<int>(
      rng.range(cfg.lesion_count_range.first, cfg.lesion_count_range.second));
  for (int l = 0; l < lesions; ++l) {
    std::vector<std::size_t> voxels;
    for (int attempt = 0; attempt < 100 && voxels.empty(); ++attempt) {
      Ellipsoid e;
      for (int i = 0; i < 3; ++i) {
        e.radii[i] = rng.uniform(cfg.lesion_radius_range.first, cfg.lesion_radius_range.second);
      }
      if (cfg.lesion_radius_range.first == cfg.lesion_radius_range.second) {
        e.radii = {cfg.lesion_radius_range.first, cfg.lesion_radius_range.first,
                   cfg.lesion_radius_range.first};
      }
      for (int i = 0; i < 3; ++i) {
        const double lo = brain_shape.center[i] - brain_shape.radii[i] + e.radii[i];
        const double hi = brain_shape.center[i] + brain_shape.radii[i] - e.radii[i];
        e.center[i] = lo < hi ? rng.uniform(lo, hi) : brain_shape.center[i];
      }
      voxels = detail::rasterize_inside(e, brain_shape, mask);
    }
    if (voxels.empty()) {
      raise<PlacementError>("could not place lesion ", l, " inside the brain after 100 attempts");
    }
    for (std::size_t i : voxels) mask[i] = 1;
  }

  std::vector<double> bias(image.size(), 1.0);
  if (cfg.bias_amplitude > 0.0) {
    const std::vector<double> log_field = detail::random_log_field(cfg.shape, rng);
    const double s = detail::fit_field_scale(log_field, cfg.bias_amplitude);
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = std::exp(s * log_field[i]);
  }

  for (std::size_t i = 0; i < image.size(); ++i) {
    if (!brain[i]) continue;
    double value = tissue + (mask[i] ? cfg.lesion_intensity_delta : 0.0);
    value *= bias[i];
    if (cfg.noise_sigma > 0.0) value += rng.normal(0.0, cfg.noise_sigma);
    image[i] = static_cast<float>(std::max(value, 1e-3));
  }
  return {std::move(image), std::move(mask)};
}

struct CohortCase {
  std::string id;
  Volume image;
  Mask mask;
};

inline std::string case_id(int i) {
  std::ostringstream oss;
  oss << "case_" << std::setw(3) << std::setfill('0') << i;
  return oss.str();
}

// round(n * no_lesion_fraction) cases are forced lesion-free; which ones is a
// seeded choice. Each case gets its own seed derived from the master seed.
inline std::vector<CohortCase> generate_cohort(int n, const PhantomConfig& base,
                                               double no_lesion_fraction,
                                               std::uint64_t seed) {
  if (!(no_lesion_fraction >= 0.0 && no_lesion_fraction <= 1.0)) {
    raise<ArgumentError>("no_lesion_fraction must lie in [0, 1]");
  }
  if (n < 0) raise<ArgumentError>("cohort size must be >= 0");
  const int empty = static_cast<int>(std::lround(n * no_lesion_fraction));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0xC0407ULL));
  rng.shuffle(std::span<int>(order));
  std::vector<bool> lesion_free(static_cast<std::size_t>(n), false);
  for (int i = 0; i < empty; ++i) lesion_free[static_cast<std::size_t>(order[i])] = true;

  std::vector<CohortCase> cohort;
  cohort.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    PhantomConfig cfg = base;
    cfg.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    if (lesion_free[static_cast<std::size_t>(i)]) {
      cfg.lesion_count_range = {0, 0};
    }
    Phantom p = generate_phantom(cfg);
    cohort.push_back({case_id(i), std::move(p.image), std::move(p.mask)});
  }
  return cohort;
}

}  // namespace lf::synth
