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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "lesionfuse/radiomics/features.hpp"
#include "lesionfuse/radiomics/gbt.hpp"
#include "support/oracles.hpp"
#include "support/fixtures.hpp"

namespace lf::radiomics {
namespace {

using fixture::toy_matrix;

using postprocess::connected_components;

TEST(FirstOrder, HandComputed) {
  const auto f = first_order({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(f[0], 2.5);
  EXPECT_DOUBLE_EQ(f[1], 1.25);
  EXPECT_NEAR(f[2], 0.0, 1e-12);
  EXPECT_NEAR(f[3], 2.5625 / 1.5625, 1e-12);
  EXPECT_DOUBLE_EQ(f[4], 30.0);
  EXPECT_DOUBLE_EQ(f[5], 2.0);  // four occupied bins of 32
  EXPECT_DOUBLE_EQ(f[6], 1.0);
  EXPECT_DOUBLE_EQ(f[7], 4.0);
  EXPECT_NEAR(f[8], 1.3, 1e-12);
  EXPECT_NEAR(f[9], 3.7, 1e-12);
}

TEST(FirstOrder, ConstantAndSymmetric) {
  const auto c = first_order({2.5, 2.5, 2.5});
  EXPECT_EQ(c, (std::vector<double>{2.5, 0, 0, 0, 18.75, 0, 2.5, 2.5, 2.5, 2.5}));
  EXPECT_NEAR(first_order({-3, -1, 0, 0.5, 1, 3, -0.5})[2], 0.0, 1e-12);
  EXPECT_THROW(first_order({}), ArgumentError);
}

postprocess::LesionComponent single_component(const Mask& m) {
  auto cs = connected_components(m, 26);
  EXPECT_EQ(cs.size(), 1u);
  return cs.front();
}

TEST(Shape, SingleVoxelAndCube) {
  Mask m({4, 4, 4}, {}, 0);
  m(1, 1, 1) = 1;
  auto s = shape_features(single_component(m), m.dims(), m.spacing());
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_DOUBLE_EQ(s[1], 6.0);
  EXPECT_NEAR(s[2], 0.8059959770082347, 1e-12);
  EXPECT_DOUBLE_EQ(s[3], 0.0);

  Mask cube({4, 4, 4}, {}, 0);
  for (int z = 1; z < 3; ++z)
    for (int y = 1; y < 3; ++y)
      for (int x = 1; x < 3; ++x) cube(x, y, z) = 1;
  s = shape_features(single_component(cube), cube.dims(), cube.spacing());
  EXPECT_DOUBLE_EQ(s[0], 8.0);
  EXPECT_DOUBLE_EQ(s[1], 24.0);
  EXPECT_NEAR(s[3], std::sqrt(3.0), 1e-12);
}

TEST(Shape, AnisotropicFaces) {
  Geometry g;
  g.spacing = {1.0, 2.0, 3.0};
  Mask m({4, 4, 4}, g, 0);
  m(1, 1, 1) = 1;
  const auto s = shape_features(single_component(m), m.dims(), m.spacing());
  EXPECT_DOUBLE_EQ(s[0], 6.0);
  EXPECT_DOUBLE_EQ(s[1], 2 * (6.0 + 3.0 + 2.0));
}

// Exposed faces counted as 0/1 transitions along each axis line.
double transition_area(const Mask& m) {
  double area = 0.0;
  const Vec3& sp = m.spacing();
  const double face[3] = {sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]};
  auto at = [&](int x, int y, int z) { return m.contains(x, y, z) ? m(x, y, z) : 0; };
  for (int z = -1; z <= m.nz(); ++z)
    for (int y = -1; y <= m.ny(); ++y)
      for (int x = -1; x <= m.nx(); ++x) {
        if (at(x, y, z) != at(x + 1, y, z)) area += face[0];
        if (at(x, y, z) != at(x, y + 1, z)) area += face[1];
        if (at(x, y, z) != at(x, y, z + 1)) area += face[2];
      }
  return area;
}

TEST(Shape, VoxelSphereMatchesTransitionOracle) {
  Mask m({25, 25, 25}, {}, 0);
  for (int z = 0; z < 25; ++z)
    for (int y = 0; y < 25; ++y)
      for (int x = 0; x < 25; ++x) {
        const double d2 = (x - 12.0) * (x - 12.0) + (y - 12.0) * (y - 12.0) + (z - 12.0) * (z - 12.0);
        m(x, y, z) = d2 <= 100.0 ? 1 : 0;
      }
  const auto s = shape_features(single_component(m), m.dims(), m.spacing());
  const double v = static_cast<double>(count_nonzero(m));
  const double a = transition_area(m);
  EXPECT_DOUBLE_EQ(s[1], a);
  EXPECT_NEAR(s[2], std::cbrt(std::numbers::pi) * std::pow(6.0 * v, 2.0 / 3.0) / a, 1e-12);
  EXPECT_DOUBLE_EQ(s[3], 20.0);
  // Face counting overestimates the area of a smooth surface by about 3/2.
  EXPECT_GT(s[2], 0.6);
  EXPECT_LT(s[2], 0.72);
}

TEST(Shape, DiameterBruteForceAndTranslation) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Mask m = oracle::random_mask({8, 8, 8}, 0.5, 50 + seed);
    for (const auto& c : connected_components(m, 26)) {
      double best = 0.0;
      for (std::size_t i : c.voxels)
        for (std::size_t j : c.voxels) {
          const Index3 a = m.coords(i), b = m.coords(j);
          best = std::max(best, std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]));
        }
      const auto s = shape_features(c, m.dims(), m.spacing());
      ASSERT_NEAR(s[3], best, 1e-12);
      ASSERT_DOUBLE_EQ(s[1], transition_area(postprocess::components_to_mask({c}, m)));
    }
  }
  Mask a({10, 10, 10}, {}, 0), b({10, 10, 10}, {}, 0);
  const Index3 pts[] = {{1, 1, 1}, {2, 1, 1}, {2, 2, 1}, {2, 2, 2}};
  for (auto p : pts) {
    a(p[0], p[1], p[2]) = 1;
    b(p[0] + 5, p[1] + 3, p[2] + 6) = 1;
  }
  EXPECT_EQ(shape_features(single_component(a), a.dims(), a.spacing()),
            shape_features(single_component(b), b.dims(), b.spacing()));
}

TEST(Glcm, ClosedForms) {
  const auto c = glcm_features(std::vector<double>(27, 4.0), {3, 3, 3});
  EXPECT_EQ(c[0], 0.0);
  EXPECT_EQ(c[2], 1.0);
  EXPECT_EQ(c[3], 1.0);
  EXPECT_EQ(c[1], 0.0);
  const auto two = glcm_features({0.0, 9.0}, {2, 1, 1}, 2, {{1, 0, 0}});
  EXPECT_DOUBLE_EQ(two[0], 1.0);
  EXPECT_DOUBLE_EQ(two[2], 0.5);
}

TEST(Glcm, CheckerboardContrastExceedsConstant) {
  std::vector<double> board(64);
  for (int i = 0; i < 64; ++i) board[i] = ((i % 4) + (i / 4 % 4) + (i / 16)) % 2;
  EXPECT_GT(glcm_features(board, {4, 4, 4})[0], glcm_features(std::vector<double>(64, 1.0), {4, 4, 4})[0]);
}

TEST(Glcm, MatchesPairEnumerationOracle) {
  const auto offsets = glcm_offsets_3d();
  ASSERT_EQ(offsets.size(), 13u);
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const Index3 dims{static_cast<int>(rng.range(1, 4)), static_cast<int>(rng.range(1, 4)),
                      static_cast<int>(rng.range(2, 4))};
    std::vector<double> patch(voxel_count(dims));
    for (double& v : patch) v = std::floor(rng.uniform(0.0, 5.0));
    const int levels = static_cast<int>(rng.range(2, 8));
    const auto got = glcm_counts(patch, dims, levels, offsets);
    ASSERT_EQ(got, oracle::glcm_counts(patch, dims, levels, offsets)) << "trial " << trial;
    const auto f = glcm_from_counts(got, levels);
    const auto want = oracle::haralick(got, levels);
    for (int k = 0; k < 5; ++k) ASSERT_NEAR(f[k], want[k], 1e-12) << "trial " << trial << " feature " << k;
  }
}

TEST(VoxelFeatures, SchemaAndSharing) {
  Volume v({12, 12, 12}, {}, 5.0f);
  Mask m({12, 12, 12}, {}, 0);
  for (int x = 4; x < 8; ++x) m(x, 6, 6) = 1;
  const auto a = voxel_features(v, m, {4, 6, 6});
  const auto b = voxel_features(v, m, {7, 6, 6});
  ASSERT_EQ(a.values.size(), voxel_schema().size());
  EXPECT_EQ(voxel_schema().size(), 20u);
  EXPECT_EQ(a.names, b.names);
  EXPECT_EQ(std::vector<double>(a.values.begin() + 15, a.values.begin() + 19),
            std::vector<double>(b.values.begin() + 15, b.values.begin() + 19));
  // Uniform volume: first-order block equals the constant-list values.
  const auto fo = first_order(std::vector<double>(125, 5.0));
  EXPECT_EQ(std::vector<double>(a.values.begin(), a.values.begin() + 10), fo);
  EXPECT_THROW(voxel_features(v, m, {0, 0, 0}), ArgumentError);
}

TEST(VoxelFeatures, ComponentRowsMatchSingleVoxel) {
  Volume v({10, 10, 10}, {}, 0.0f);
  Rng rng(4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.normal());
  Mask m({10, 10, 10}, {}, 0);
  for (int x = 2; x < 6; ++x)
    for (int y = 3; y < 5; ++y) m(x, y, 4) = 1;
  const auto c = connected_components(m).front();
  const auto rows = component_voxel_features(v, c);
  for (std::size_t k = 0; k < c.voxels.size(); ++k) {
    EXPECT_EQ(rows[k], voxel_features(v, m, m.coords(c.voxels[k])).values);
    for (double x : rows[k]) EXPECT_TRUE(std::isfinite(x));
  }
}


double accuracy(const GbtModel& m, const FeatureMatrix& x, const std::vector<int>& y) {
  const auto p = predict_gbt(m, x);
  int ok = 0;
  for (std::size_t i = 0; i < y.size(); ++i) ok += (p[i] > 0.5) == (y[i] == 1);
  return static_cast<double>(ok) / static_cast<double>(y.size());
}

TEST(Gbt, SeparableOneSplit) {
  FeatureMatrix x;
  x.schema_id = "1d";
  x.names = {"x"};
  std::vector<int> y;
  for (int i = -10; i <= 10; ++i) {
    if (i == 0) continue;
    x.rows.push_back({static_cast<double>(i)});
    y.push_back(i > 0);
  }
  GbtParams p;
  p.trees = 1;
  p.max_depth = 1;
  const GbtModel m = train_gbt(x, y, p);
  EXPECT_EQ(accuracy(m, x, y), 1.0);
  ASSERT_EQ(m.trees.size(), 1u);
  EXPECT_DOUBLE_EQ(m.trees[0].nodes[0].threshold, 0.0);
}

TEST(Gbt, LossNonIncreasingAndDepthBound) {
  std::vector<int> y;
  FeatureMatrix x = toy_matrix(300, 5, 9, y);
  for (auto& r : x.rows) r[0] += 0.3 * r[1];  // blur the boundary
  GbtParams p;
  p.trees = 60;
  p.learning_rate = 1.0;
  p.lambda = 0.0;
  const GbtModel m = train_gbt(x, y, p);
  for (std::size_t i = 1; i < m.train_loss.size(); ++i) EXPECT_LE(m.train_loss[i], m.train_loss[i - 1]);
  for (const auto& t : m.trees) EXPECT_LE(t.depth(), p.max_depth);
}

TEST(Gbt, InformativeFeatureRanksFirst) {
  std::vector<int> y;
  const FeatureMatrix x = toy_matrix(200, 9, 21, y);
  const GbtModel m = train_gbt(x, y, {});
  EXPECT_EQ(select_top_k(m, 1), std::vector<std::string>{"signal"});
  EXPECT_EQ(select_top_k(m, 10).size(), 10u);
  EXPECT_THROW(select_top_k(m, 11), ArgumentError);
}

TEST(Gbt, NoiseLabelsNearMajority) {
  double mean_gap = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<int> y, yt;
    FeatureMatrix x = toy_matrix(300, 4, 100 + seed, y);
    FeatureMatrix xt = toy_matrix(1000, 4, 200 + seed, yt);
    Rng rng(300 + seed);
    for (int& v : y) v = rng.bernoulli(0.5);
    for (int& v : yt) v = rng.bernoulli(0.5);
    GbtParams p;
    p.trees = 30;
    const GbtModel m = train_gbt(x, y, p);
    const double majority = std::max(std::count(yt.begin(), yt.end(), 1),
                                     std::count(yt.begin(), yt.end(), 0)) / 1000.0;
    mean_gap += std::abs(accuracy(m, xt, yt) - majority) / 5.0;
  }
  EXPECT_LT(mean_gap, 0.1);
}

TEST(Gbt, ZeroTreesGivePrior) {
  std::vector<int> y;
  const FeatureMatrix x = toy_matrix(40, 1, 3, y);
  GbtParams p;
  p.trees = 0;
  const GbtModel m = train_gbt(x, y, p);
  const double pos = std::count(y.begin(), y.end(), 1) / 40.0;
  for (const auto& r : x.rows) EXPECT_NEAR(predict_gbt(m, x.names, r), pos, 1e-12);
}

TEST(Gbt, Errors) {
  std::vector<int> y;
  FeatureMatrix x = toy_matrix(20, 2, 5, y);
  EXPECT_THROW(train_gbt(x, std::vector<int>(20, 1), {}), TrainingError);
  const GbtModel m = train_gbt(x, y, {});
  std::vector<std::string> wrong = x.names;
  std::swap(wrong[0], wrong[1]);
  EXPECT_THROW(predict_gbt(m, wrong, x.rows[0]), SchemaError);
  EXPECT_THROW(project(x, {"missing"}), SchemaError);
}

TEST(Gbt, SubsetRetrainIgnoresDroppedColumns) {
  std::vector<int> y;
  const FeatureMatrix x = toy_matrix(150, 6, 8, y);
  const GbtModel full = train_gbt(x, y, {});
  const auto keep = select_top_k(full, 3);
  const GbtModel sub = train_gbt(project(x, keep), y, {});
  FeatureMatrix scrambled = x;
  Rng rng(1);
  for (auto& r : scrambled.rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (std::find(keep.begin(), keep.end(), x.names[c]) == keep.end()) r[c] = rng.normal();
    }
  }
  EXPECT_EQ(predict_gbt(sub, project(x, keep)), predict_gbt(sub, project(scrambled, keep)));
  EXPECT_THROW(predict_gbt(sub, x), SchemaError);
}

TEST(Gbt, JsonAndCsvRoundTrip) {
  std::vector<int> y;
  const FeatureMatrix x = toy_matrix(80, 3, 12, y);
  const GbtModel m = train_gbt(x, y, {});
  const auto dir = std::filesystem::temp_directory_path() / "lf_gbt_test";
  std::filesystem::create_directories(dir);
  save_gbt(m, (dir / "m.json").string());
  const GbtModel back = load_gbt((dir / "m.json").string());
  EXPECT_EQ(predict_gbt(m, x), predict_gbt(back, x));
  EXPECT_EQ(back.importance, m.importance);

  write_feature_csv((dir / "x.csv").string(), x, &y);
  std::vector<int> y2;
  const FeatureMatrix x2 = read_feature_csv((dir / "x.csv").string(), &y2);
  EXPECT_EQ(x2.names, x.names);
  EXPECT_EQ(x2.rows, x.rows);
  EXPECT_EQ(y2, y);
  std::filesystem::remove_all(dir);
}

TEST(Gbt, Deterministic) {
  std::vector<int> y;
  const FeatureMatrix x = toy_matrix(100, 4, 2, y);
  GbtParams p;
  p.subsample = 0.7;
  EXPECT_EQ(to_json(train_gbt(x, y, p)).dump(), to_json(train_gbt(x, y, p)).dump());
}

}  // namespace
}  // namespace lf::radiomics
