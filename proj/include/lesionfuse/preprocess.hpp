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

// Intensity preprocessing: polynomial bias-field removal, z-score
// normalization, and the crop / resample / normalize chain applied to every
// case before training and inference.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/core/spatial.hpp"

namespace lf::preprocess {

// Smooth multiplicative field, exp(sum_{i,j,k<=order} c_ijk u^i v^j w^k), with
// (u, v, w) the voxel coordinates mapped to [-1, 1] over `dims`.
struct BiasModel {
  int order = 0;
  Index3 dims{1, 1, 1};
  std::vector<double> coefficients;  // (order+1)^3, i fastest
  double offset = 0.0;                // subtracted from the log field

  std::size_t basis_size() const {
    const auto n = static_cast<std::size_t>(order + 1);
    return n * n * n;
  }

  double log_field(int x, int y, int z) const {
    const int n = order + 1;
    std::vector<double> pu(n), pv(n), pw(n);
    powers(normalized(x, dims[0]), pu);
    powers(normalized(y, dims[1]), pv);
    powers(normalized(z, dims[2]), pw);
    double s = 0.0;
    for (int k = 0; k < n; ++k) {
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
          s += coefficients[static_cast<std::size_t>(i + n * (j + n * k))] * pu[i] * pv[j] * pw[k];
        }
      }
    }
    return s - offset;
  }

  double field(int x, int y, int z) const { return std::exp(log_field(x, y, z)); }

  static double normalized(int i, int n) {
    return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0;
  }
  static void powers(double t, std::vector<double>& out) {
    double p = 1.0;
    for (double& o : out) {
      o = p;
      p *= t;
    }
  }
};

struct BiasCorrection {
  Volume corrected;
  BiasModel model;
};

// Least-squares fit of log intensities over `fg`. The corrected volume is
// v / field, rescaled so the foreground mean is unchanged.
inline BiasCorrection bias_correct(const Volume& v, const Mask& fg, int order = 2) {
  require_same_shape(v, fg, "bias_correct");
  if (order < 0) raise<ArgumentError>("bias_correct: order must be >= 0");
  const std::size_t fg_count = count_nonzero(fg);
  if (fg_count == 0) raise<ArgumentError>("bias_correct: empty foreground mask");

  double fg_min = std::numeric_limits<double>::infinity();
  double fg_sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!fg[i]) continue;
    fg_min = std::min(fg_min, static_cast<double>(v[i]));
    fg_sum += v[i];
  }
  const double shift = fg_min > 0.0 ? 0.0 : 1.0 - fg_min;
  const double fg_mean = fg_sum / static_cast<double>(fg_count);

  BiasModel model;
  model.order = order;
  model.dims = v.dims();
  const int n = order + 1;
  const auto m = static_cast<Eigen::Index>(model.basis_size());

  Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd atb = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd row(m);
  std::vector<double> pu(n), pv(n), pw(n);
  for (int z = 0; z < v.nz(); ++z) {
    BiasModel::powers(BiasModel::normalized(z, v.nz()), pw);
    for (int y = 0; y < v.ny(); ++y) {
      BiasModel::powers(BiasModel::normalized(y, v.ny()), pv);
      for (int x = 0; x < v.nx(); ++x) {
        if (!fg(x, y, z)) continue;
        BiasModel::powers(BiasModel::normalized(x, v.nx()), pu);
        for (int k = 0, t = 0; k < n; ++k) {
          for (int j = 0; j < n; ++j) {
            for (int i = 0; i < n; ++i, ++t) row[t] = pu[i] * pv[j] * pw[k];
          }
        }
        const double target = std::log(static_cast<double>(v(x, y, z)) + shift);
        ata.selfadjointView<Eigen::Lower>().rankUpdate(row);
        atb += target * row;
      }
    }
  }
  ata = ata.selfadjointView<Eigen::Lower>();

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ata, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(m - 1);
  if (!(smax > 0.0) || smin <= smax * 1e-12) {
    raise<FittingError>("bias_correct: singular normal equations (condition estimate ",
                        smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity(),
                        ")");
  }
  const Eigen::VectorXd coef = svd.solve(atb);
  model.coefficients.assign(coef.data(), coef.data() + m);

  double fitted_sum = 0.0;
  std::vector<double> log_field(v.size());
  for (int z = 0; z < v.nz(); ++z) {
    for (int y = 0; y < v.ny(); ++y) {
      for (int x = 0; x < v.nx(); ++x) {
        const std::size_t i = v.index(x, y, z);
        log_field[i] = model.log_field(x, y, z);
        if (fg[i]) fitted_sum += log_field[i];
      }
    }
  }
  model.offset = fitted_sum / static_cast<double>(fg_count);

  std::vector<double> corrected(v.size());
  double corrected_fg_sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    corrected[i] = (v[i] + shift) / std::exp(log_field[i] - model.offset) - shift;
    if (fg[i]) corrected_fg_sum += corrected[i];
  }
  const double corrected_mean = corrected_fg_sum / static_cast<double>(fg_count);
  const double scale = corrected_mean != 0.0 ? fg_mean / corrected_mean : 1.0;

  Volume out(v.dims(), v.geometry());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<float>(corrected[i] * scale);
  }
  return {std::move(out), std::move(model)};
}

struct Moments {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

inline Moments foreground_moments(const Volume& v, const Mask& fg) {
  require_same_shape(v, fg, "foreground_moments");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (fg[i]) {
      sum += v[i];
      ++n;
    }
  }
  if (n == 0) return {};
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (fg[i]) ss += (v[i] - mean) * (v[i] - mean);
  }
  return {mean, std::sqrt(ss / static_cast<double>(n))};
}

inline Volume zscore_normalize(const Volume& v, const Mask& fg) {
  require_same_shape(v, fg, "zscore_normalize");
  if (count_nonzero(fg) < 2) {
    raise<DegenerateError>("zscore_normalize: foreground needs at least 2 voxels");
  }
  const Moments m = foreground_moments(v, fg);
  if (!(m.stddev > 0.0)) raise<DegenerateError>("zscore_normalize: zero foreground variance");
  Volume out(v.dims(), v.geometry());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<float>((v[i] - m.mean) / m.stddev);
  }
  return out;
}

template <typename T>
Mask threshold_mask(const Grid<T>& g, double threshold) {
  Mask m(g.dims(), g.geometry(), 0);
  for (std::size_t i = 0; i < g.size(); ++i) m[i] = g[i] > threshold ? 1 : 0;
  return m;
}

struct PreprocessOptions {
  bool bias_correction = true;
  int bias_order = 2;
  std::optional<Vec3> target_spacing;  // none: keep native spacing
};

// Where a preprocessed case came from, enough to map predictions back.
struct CaseGeometry {
  Index3 original_dims{1, 1, 1};
  Geometry original_geometry{};
  BoundingBox crop_box{};
  Index3 cropped_dims{1, 1, 1};
};

struct PreprocessedCase {
  Volume image;
  std::optional<Mask> mask;
  CaseGeometry geometry;
};

// bias correction (full field of view) -> crop to the nonzero region ->
// resample -> z-score over voxels that were > 0 after cropping.
inline PreprocessedCase preprocess_case(const Volume& image, const Mask* mask,
                                        const PreprocessOptions& opts) {
  Volume work = image;
  const Mask head = threshold_mask(image, 0.0);
  if (opts.bias_correction && count_nonzero(head) > 0) {
    work = bias_correct(image, head, opts.bias_order).corrected;
  }
  auto [cropped, box] = crop_to_foreground(image, 0.0);
  cropped = crop(work, box);
  Mask fg = threshold_mask(crop(image, box), 0.0);
  std::optional<Mask> cropped_mask;
  if (mask) {
    require_same_shape(image, *mask, "preprocess_case");
    cropped_mask = crop(*mask, box);
  }
  CaseGeometry info{image.dims(), image.geometry(), box, box.extent()};
  if (opts.target_spacing) {
    cropped = resample(cropped, *opts.target_spacing, Interpolation::kTrilinear);
    fg = resample(fg, *opts.target_spacing, Interpolation::kNearest);
    if (cropped_mask) {
      cropped_mask = resample(*cropped_mask, *opts.target_spacing, Interpolation::kNearest);
    }
  }
  Volume normalized = zscore_normalize(cropped, fg);
  return {std::move(normalized), std::move(cropped_mask), info};
}

// Maps a probability map from preprocessed space back onto the original
// grid; voxels outside the crop get probability 0.
inline Volume restore_probability(const Volume& prob, const CaseGeometry& info) {
  Volume cropped = prob;
  if (prob.dims() != info.cropped_dims) {
    // Resample back by grid ratio rather than spacing so dims match exactly.
    Volume out(info.cropped_dims, info.original_geometry);
    for (int z = 0; z < out.nz(); ++z) {
      for (int y = 0; y < out.ny(); ++y) {
        for (int x = 0; x < out.nx(); ++x) {
          const double sx = static_cast<double>(x) * prob.nx() / info.cropped_dims[0];
          const double sy = static_cast<double>(y) * prob.ny() / info.cropped_dims[1];
          const double sz = static_cast<double>(z) * prob.nz() / info.cropped_dims[2];
          out(x, y, z) = static_cast<float>(detail::sample_trilinear(prob, sx, sy, sz));
        }
      }
    }
    cropped = std::move(out);
  }
  return paste(cropped, info.crop_box, info.original_dims, info.original_geometry, 0.0f);
}

}  // namespace lf::preprocess
