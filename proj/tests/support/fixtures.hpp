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

// Fixed data sets shared by the unit tests and the acceptance runner.

#pragma once

#include <string>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/core/rng.hpp"
#include "lesionfuse/eval/metrics.hpp"
#include "lesionfuse/radiomics/gbt.hpp"
#include "lesionfuse/training/trainer.hpp"

namespace lf::fixture {

using eval::CaseResult;
using radiomics::FeatureMatrix;
using training::TrainingCase;

struct TCase {
  std::vector<double> a, b;
  double t, p;
};

// Paired samples with (t, two-tailed p) computed beforehand by an
// independent statistics package.
inline std::vector<TCase> ttest_reference_cases() {
  return {
      {{0.9, 1.0, 1.1, 1.0}, {0, 0, 0, 0}, 24.49489742783176, 0.00014915720128493647},
      {{0.71, 0.65, 0.80, 0.55, 0.62, 0.77, 0.69, 0.58},
       {0.68, 0.66, 0.74, 0.50, 0.63, 0.70, 0.64, 0.57},
       2.8178198829808037,
       0.025854033918168737},
      {{0.12, 0.45, 0.33, 0.91, 0.27, 0.50, 0.66, 0.38, 0.72, 0.49, 0.81, 0.05},
       {0.20, 0.41, 0.35, 0.85, 0.30, 0.58, 0.61, 0.47, 0.70, 0.52, 0.77, 0.11},
       -0.9387788014128742,
       0.3680007821522323},
      {{3.2, 4.1, 2.8, 5.0, 3.9}, {1.1, 4.5, 2.2, 6.3, 0.4}, 1.0455225530359842, 0.35479901423944155},
  };
}

// 19 lesion cases and 5 lesion-free ones, two of which carry a false positive.
inline std::vector<CaseResult> local_split() {
  std::vector<CaseResult> rs;
  for (int i = 0; i < 19; ++i) {
    rs.push_back({"les" + std::to_string(i), 0.5 + 0.02 * i, true, true, 100.0 + i, 90.0});
  }
  for (int i = 0; i < 5; ++i) {
    const bool fp = i >= 3;
    rs.push_back({"none" + std::to_string(i), fp ? 0.0 : 1.0, false, fp, 0.0, fp ? 12.0 : 0.0});
  }
  return rs;
}

// Noise slices; lesions are bright squares spanning a few slices.
inline std::vector<TrainingCase> square_cohort(int n, std::uint64_t seed) {
  std::vector<TrainingCase> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    TrainingCase c{"s" + std::to_string(i), Volume({24, 24, 24}), Mask({24, 24, 24})};
    for (std::size_t j = 0; j < c.image.size(); ++j) c.image[j] = static_cast<float>(rng.normal(0.0, 0.5));
    const int x0 = static_cast<int>(rng.range(2, 15)), y0 = static_cast<int>(rng.range(2, 15));
    const int z0 = static_cast<int>(rng.range(8, 17));
    for (int z = z0; z < z0 + 4; ++z) {
      for (int y = y0; y < y0 + 6; ++y) {
        for (int x = x0; x < x0 + 6; ++x) {
          c.mask(x, y, z) = 1;
          c.image(x, y, z) += 3.0f;
        }
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

// Label = sign of the first column; the rest is noise.
inline FeatureMatrix toy_matrix(int rows, int noise_cols, std::uint64_t seed, std::vector<int>& y) {
  Rng rng(seed);
  FeatureMatrix x;
  x.schema_id = "toy";
  x.names.push_back("signal");
  for (int c = 0; c < noise_cols; ++c) x.names.push_back("noise" + std::to_string(c));
  y.clear();
  for (int r = 0; r < rows; ++r) {
    std::vector<double> row{rng.uniform(-1.0, 1.0)};
    for (int c = 0; c < noise_cols; ++c) row.push_back(rng.uniform(-1.0, 1.0));
    y.push_back(row[0] > 0.0 ? 1 : 0);
    x.rows.push_back(std::move(row));
  }
  return x;
}

}  // namespace lf::fixture
