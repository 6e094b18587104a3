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

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/core/spatial.hpp"
#include "lesionfuse/nn/graph.hpp"

namespace lf::models {

// Window origins along one axis: evenly spaced from 0 to n - p with spacing
// at most p * (1 - overlap). The second half mirrors the first, so the set is
// symmetric under a flip of the axis.
inline std::vector<int> window_starts(int n, int p, double overlap) {
  if (p > n) raise<ArgumentError>("window larger than axis");
  if (n == p) return {0};
  const int step = std::max(1, static_cast<int>(std::floor(p * (1.0 - overlap))));
  const int span = n - p;
  int m = (span + step - 1) / step;  // number of gaps
  // A middle window would sit at span / 2; use one more gap when that is
  // not an integer.
  if (m % 2 == 0 && span % 2 == 1) ++m;
  std::vector<int> starts(static_cast<std::size_t>(m + 1));
  for (int i = 0; 2 * i <= m; ++i) {
    const auto rounded = (2LL * i * span + m) / (2LL * m);
    starts[static_cast<std::size_t>(i)] = static_cast<int>(rounded);
    starts[static_cast<std::size_t>(m - i)] = span - static_cast<int>(rounded);
  }
  return starts;
}

inline nn::Tensor volume_patch(const Volume& v, const Index3& lo, const Index3& size) {
  nn::Tensor t(nn::Shape::make3d(1, 1, size[0], size[1], size[2]));
  std::size_t k = 0;
  for (int z = 0; z < size[2]; ++z) {
    for (int y = 0; y < size[1]; ++y) {
      const float* row = &v(lo[0], lo[1] + y, lo[2] + z);
      std::copy(row, row + size[0], t.data.begin() + static_cast<std::ptrdiff_t>(k));
      k += static_cast<std::size_t>(size[0]);
    }
  }
  return t;
}

// Sliding-window lesion probability (channel 1). Overlapping windows are
// averaged with uniform weights; volumes smaller than the patch are padded by
// reflection and the result cropped back.
inline Volume predict_probability(nn::Graph& g, const Volume& v, const Index3& patch,
                                  double overlap = 0.5) {
  if (!(overlap >= 0.0 && overlap < 1.0)) raise<ArgumentError>("overlap must lie in [0, 1)");
  for (int p : patch) {
    if (p < 1) raise<ArgumentError>("patch size must be positive");
  }
  const bool was_training = g.training();
  g.set_training(false);
  auto [padded, lower] = pad_reflect_to(v, patch);
  Volume sum(padded.dims(), padded.geometry(), 0.0f);
  Grid<std::uint16_t> count(padded.dims(), padded.geometry(), 0);
  const auto xs = window_starts(padded.nx(), patch[0], overlap);
  const auto ys = window_starts(padded.ny(), patch[1], overlap);
  const auto zs = window_starts(padded.nz(), patch[2], overlap);
  for (int z0 : zs) {
    for (int y0 : ys) {
      for (int x0 : xs) {
        g.feed("image", volume_patch(padded, {x0, y0, z0}, patch));
        const nn::Tensor& out = g.forward();
        if (out.shape.c < 2 || out.shape.sp != patch) {
          raise<ShapeError>("network output ", out.shape.str(), " does not match the patch");
        }
        const float* lesion = out.channel(0, 1);
        std::size_t k = 0;
        for (int z = 0; z < patch[2]; ++z) {
          for (int y = 0; y < patch[1]; ++y) {
            for (int x = 0; x < patch[0]; ++x, ++k) {
              sum(x0 + x, y0 + y, z0 + z) += lesion[k];
              count(x0 + x, y0 + y, z0 + z) += 1;
            }
          }
        }
      }
    }
  }
  g.set_training(was_training);
  for (std::size_t i = 0; i < sum.size(); ++i) {
    sum[i] = std::clamp(sum[i] / static_cast<float>(count[i]), 0.0f, 1.0f);
  }
  if (padded.dims() == v.dims()) return sum;
  const BoundingBox box{lower, {lower[0] + v.nx(), lower[1] + v.ny(), lower[2] + v.nz()}};
  Volume out = crop(sum, box);
  out.geometry() = v.geometry();
  return out;
}

}  // namespace lf::models
