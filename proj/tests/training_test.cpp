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
#include <numeric>
#include <set>

#include "lesionfuse/training/folds.hpp"
#include "lesionfuse/training/slices.hpp"
#include "lesionfuse/training/trainer.hpp"
#include "support/fixtures.hpp"

namespace lf::training {
namespace {

using fixture::square_cohort;

nn::Tensor two_class_probs(const std::vector<float>& lesion_prob) {
  const int n = static_cast<int>(lesion_prob.size());
  nn::Tensor p(nn::Shape::make3d(1, 2, n, 1, 1));
  for (int i = 0; i < n; ++i) {
    p.channel(0, 1)[i] = lesion_prob[static_cast<std::size_t>(i)];
    p.channel(0, 0)[i] = 1.0f - lesion_prob[static_cast<std::size_t>(i)];
  }
  return p;
}

nn::Tensor labels(const std::vector<float>& v) {
  return nn::Tensor(nn::Shape::make3d(1, 1, static_cast<int>(v.size()), 1, 1), v);
}

TEST(DiceCeLoss, PerfectPredictionIsNearZero) {
  const std::vector<float> t{0, 1, 1, 0, 1, 0};
  EXPECT_LE(dice_ce_loss(two_class_probs(t), labels(t), 1.0, 1.0), 1e-4);
}

TEST(DiceCeLoss, UniformProbabilitiesGiveLn2CrossEntropy) {
  const auto p = two_class_probs(std::vector<float>(8, 0.5f));
  const auto t = labels({1, 1, 1, 1, 0, 0, 0, 0});
  EXPECT_NEAR(dice_ce_loss(p, t, 0.0, 1.0), std::log(2.0), 1e-6);
}

TEST(DiceCeLoss, EmptyTargetAndEmptyPredictionHaveZeroDiceTerm) {
  const auto z = std::vector<float>(5, 0.0f);
  EXPECT_NEAR(dice_ce_loss(two_class_probs(z), labels(z), 1.0, 0.0), 0.0, 1e-12);
}

TEST(DiceCeLoss, ShapeMismatchIsShapeError) {
  EXPECT_THROW(dice_ce_loss(two_class_probs({0.5f, 0.5f}), labels({1, 0, 1}), 1, 1), ShapeError);
}

TEST(DiceCeLoss, PermutationInvariantOverVoxels) {
  Rng rng(3);
  std::vector<float> p(20), t(20);
  for (int i = 0; i < 20; ++i) {
    p[static_cast<std::size_t>(i)] = static_cast<float>(rng.uniform(0.01, 0.99));
    t[static_cast<std::size_t>(i)] = rng.bernoulli(0.4) ? 1.0f : 0.0f;
  }
  const double a = dice_ce_loss(two_class_probs(p), labels(t), 1, 1);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<float> pp(20), tp(20);
  for (std::size_t i = 0; i < 20; ++i) {
    pp[i] = p[perm[i]];
    tp[i] = t[perm[i]];
  }
  EXPECT_NEAR(dice_ce_loss(two_class_probs(pp), labels(tp), 1, 1), a, 1e-12);
}

TEST(LrSchedule, LinearDecay) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 1000, 1e-2), 1e-2);
  EXPECT_NEAR(lr_schedule(999, 1000, 1e-2), 1e-5, 1e-15);
  EXPECT_DOUBLE_EQ(lr_schedule(500, 1000, 1e-2), 5e-3);
  EXPECT_THROW(lr_schedule(1000, 1000, 1e-2), ArgumentError);
  EXPECT_THROW(lr_schedule(-1, 1000, 1e-2), ArgumentError);
}

Sample random_sample(const Index3& d, std::uint64_t seed, double lesion_p = 0.2) {
  Rng rng(seed);
  Sample s{Volume(d), Mask(d)};
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    s.image[i] = static_cast<float>(rng.normal());
    s.mask[i] = rng.bernoulli(lesion_p) ? 1 : 0;
  }
  return s;
}

TEST(Augment, IdentityConfiguration) {
  const Sample in = random_sample({6, 5, 4}, 1);
  AugmentConfig cfg = AugmentConfig::none();
  cfg.gamma_range = {1.0, 1.0};
  cfg.gamma_probability = 1.0;
  cfg.rotation_range_deg = {0.0, 0.0};
  cfg.rotation_probability = 1.0;
  const Sample out = augment(in, cfg, 9);
  for (std::size_t i = 0; i < in.image.size(); ++i) EXPECT_NEAR(out.image[i], in.image[i], 1e-6);
  EXPECT_EQ(out.mask, in.mask);
}

TEST(Augment, DoubleFlipIsIdentity) {
  const Sample in = random_sample({6, 5, 4}, 2);
  for (int axis = 0; axis < 3; ++axis) {
    Volume v = in.image;
    flip_axis(v, axis);
    EXPECT_FALSE(v == in.image);
    flip_axis(v, axis);
    EXPECT_TRUE(v == in.image);
  }
}

TEST(Augment, QuarterTurnMatchesIndexPermutation) {
  const int n = 7;
  const Sample in = random_sample({n, n, 3}, 3);
  AugmentConfig cfg = AugmentConfig::none();
  cfg.rotation_range_deg = {90.0, 90.0};
  cfg.rotation_probability = 1.0;
  const Sample out = augment(in, cfg, 4);
  // Counter-clockwise by 90 degrees: out(x, y) = in(y, n-1-x).
  for (int z = 0; z < 3; ++z) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        EXPECT_EQ(out.mask(x, y, z), in.mask(y, n - 1 - x, z));
        EXPECT_NEAR(out.image(x, y, z), in.image(y, n - 1 - x, z), 1e-5);
      }
    }
  }
}

TEST(Augment, PreservesBinarityAndAlignment) {
  AugmentConfig cfg;
  cfg.gamma_probability = 0.0;
  cfg.rotation_probability = 1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Sample in = random_sample({9, 8, 5}, seed, 0.3);
    for (std::size_t i = 0; i < in.image.size(); ++i) in.image[i] = in.mask[i];
    const Sample out = augment(in, cfg, seed);
    for (std::size_t i = 0; i < out.mask.size(); ++i) {
      ASSERT_LE(out.mask[i], 1);
      // The nearest source voxel carries bilinear weight >= 1/4.
      if (out.mask[i]) EXPECT_GT(out.image[i], 0.2f);
    }
  }
}

TEST(Augment, DeterministicPerSeed) {
  const Sample in = random_sample({8, 8, 4}, 5);
  const AugmentConfig cfg;
  EXPECT_TRUE(augment(in, cfg, 11).image == augment(in, cfg, 11).image);
}

TEST(SamplePatch, ForegroundCenteringHitsLesion) {
  Volume v({20, 20, 20});
  Mask m({20, 20, 20});
  m(17, 3, 11) = 1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Sample s = sample_patch(v, m, {8, 8, 8}, 1.0, seed);
    EXPECT_EQ(s.image.dims(), (Index3{8, 8, 8}));
    EXPECT_EQ(count_nonzero(s.mask), 1u);
  }
}

TEST(SamplePatch, EmptyMaskFallsBackToUniform) {
  const Sample src = random_sample({12, 12, 12}, 6, 0.0);
  const Sample s = sample_patch(src.image, src.mask, {4, 4, 4}, 1.0, 3);
  EXPECT_EQ(s.mask.dims(), (Index3{4, 4, 4}));
}

TEST(SamplePatch, SameSeedSamePatchAndSmallVolumesPad) {
  const Sample src = random_sample({12, 10, 6}, 7);
  const Sample a = sample_patch(src.image, src.mask, {8, 8, 8}, 0.5, 42);
  const Sample b = sample_patch(src.image, src.mask, {8, 8, 8}, 0.5, 42);
  EXPECT_TRUE(a.image == b.image);
  EXPECT_TRUE(a.mask == b.mask);
  EXPECT_EQ(a.image.dims(), (Index3{8, 8, 8}));
}

std::vector<std::string> ids(int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back("c" + std::to_string(i));
  return out;
}

TEST(Folds, PaperCohortSizes) {
  const FoldAssignment fa = make_folds(ids(528), 5, 1);
  std::multiset<std::size_t> sizes;
  for (int f = 0; f < 5; ++f) sizes.insert(fa.members(f).size());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{105, 105, 106, 106, 106}));
}

TEST(Folds, SingleFoldAndPartition) {
  const FoldAssignment one = make_folds(ids(7), 1, 3);
  EXPECT_EQ(one.members(0).size(), 7u);
  const FoldAssignment fa = make_folds(ids(23), 4, 3);
  std::set<std::string> seen;
  for (int f = 0; f < 4; ++f) {
    for (const auto& id : fa.members(f)) EXPECT_TRUE(seen.insert(id).second);
  }
  EXPECT_EQ(seen.size(), 23u);
  EXPECT_EQ(make_folds(ids(23), 4, 3).fold_of, fa.fold_of);
  EXPECT_NE(make_folds(ids(23), 4, 4).fold_of, fa.fold_of);
  EXPECT_THROW(make_folds(ids(3), 4, 1), ArgumentError);
}

// 16^3 phantom with a dark cube lesion on a bright noisy block.
TrainingCase micro_case(std::uint64_t seed) {
  Rng rng(seed);
  TrainingCase c{"micro", Volume({16, 16, 16}), Mask({16, 16, 16})};
  for (int z = 0; z < 16; ++z) {
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        const bool lesion = x >= 5 && x < 10 && y >= 6 && y < 11 && z >= 4 && z < 9;
        c.mask(x, y, z) = lesion ? 1 : 0;
        c.image(x, y, z) = static_cast<float>((lesion ? -1.5 : 0.5) + 0.2 * rng.normal());
      }
    }
  }
  return c;
}

TrainConfig micro_config() {
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.iterations_per_epoch = 2;
  cfg.batch_size = 1;
  cfg.patch = {16, 16, 16};
  cfg.seed = 5;
  return cfg;
}

TEST(TrainSegmentation, OverfitsSingleCase) {
  nn::Graph g = models::build_unet3d({1, 4, 2, 2, 1});
  const auto res = train_segmentation(g, {micro_case(1)}, micro_config(), AugmentConfig::none());
  ASSERT_EQ(res.trace.size(), 20u);
  EXPECT_LT(res.trace.back().loss, res.trace.front().loss);
}

TEST(TrainSegmentation, ZeroLearningRateLeavesParametersUnchanged) {
  nn::Graph g = models::build_unet3d({1, 4, 2, 2, 1});
  std::vector<std::vector<float>> before;
  for (const auto& p : g.params()) {
    if (p.trainable) before.push_back(p.value);
  }
  TrainConfig cfg = micro_config();
  cfg.epochs = 2;
  cfg.initial_lr = 0.0;
  train_segmentation(g, {micro_case(1)}, cfg, AugmentConfig{});
  std::size_t i = 0;
  for (const auto& p : g.params()) {
    if (p.trainable) EXPECT_EQ(p.value, before[i++]) << p.name;
  }
}

TEST(TrainSegmentation, SameSeedSameTrace) {
  TrainConfig cfg = micro_config();
  cfg.epochs = 3;
  std::vector<double> traces[2];
  for (auto& t : traces) {
    nn::Graph g = models::build_unet3d({1, 4, 2, 2, 1});
    for (const auto& e : train_segmentation(g, {micro_case(1), micro_case(2)}, cfg, AugmentConfig{}).trace) {
      t.push_back(e.loss);
    }
  }
  EXPECT_EQ(traces[0], traces[1]);
}

TEST(SliceClassifier, NeckExclusionScales) {
  EXPECT_EQ(neck_exclusion(182), 45);
  EXPECT_EQ(neck_exclusion(200), 45);
  EXPECT_EQ(neck_exclusion(48), 12);
  EXPECT_EQ(neck_exclusion(48, 3), 3);
}

TEST(SliceClassifier, LesionsOnlyInExcludedSlicesIsDatasetError) {
  TrainingCase c{"a", Volume({16, 16, 48}), Mask({16, 16, 48})};
  c.mask(8, 8, 5) = 1;  // below the 12 excluded slices
  EXPECT_THROW(build_slice_dataset({c}, {16, 16}), DatasetError);
}

TEST(SliceClassifier, BatchesAreHalfPositive) {
  TrainingCase c{"a", Volume({16, 16, 48}), Mask({16, 16, 48})};
  c.mask(8, 8, 30) = 1;
  const SliceDataset ds = build_slice_dataset({c}, {16, 16});
  EXPECT_EQ(ds.positives.size(), 1u);
  EXPECT_EQ(ds.negatives.size(), 35u);
  Rng rng(1);
  for (int k = 0; k < 10; ++k) {
    const SliceBatch b = balanced_batch(ds, 8, rng);
    EXPECT_EQ(std::accumulate(b.labels.data.begin(), b.labels.data.end(), 0.0f), 4.0f);
  }
}


TEST(SliceClassifier, SeparableToyTaskReachesNinetyPercent) {
  models::DenseNetSpec spec;
  spec.growth_rate = 4;
  spec.layers_per_block = 2;
  spec.blocks = 2;
  spec.stem_width = 8;
  nn::Graph g = models::build_densenet2d(spec);
  SliceClassifierConfig cfg;
  cfg.epochs = 8;
  cfg.iterations_per_epoch = 8;
  cfg.batch_size = 16;
  cfg.slice_size = {24, 24};
  train_slice_classifier(g, square_cohort(6, 1), cfg);
  const SliceDataset val = build_slice_dataset(square_cohort(4, 2), cfg.slice_size);
  EXPECT_GE(slice_accuracy(g, val), 0.9);
}

}  // namespace
}  // namespace lf::training
