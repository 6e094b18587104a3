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

// Axial-slice lesion classifier: dataset construction with neck exclusion,
// class-balanced batches and training of a 2D network.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/models/builders.hpp"
#include "lesionfuse/training/trainer.hpp"

namespace lf::training {

struct SliceClassifierConfig {
  int epochs = 20;
  int iterations_per_epoch = 16;
  int batch_size = 16;  // even: half positive, half negative
  double initial_lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::array<int, 2> slice_size{48, 48};
  int neck_exclude = -1;  // < 0: scaled from 45 slices of a 182-slice volume
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1 || iterations_per_epoch < 1) raise<ArgumentError>("epochs and iterations must be >= 1");
    if (batch_size < 2 || batch_size % 2 != 0) raise<ArgumentError>("batch_size must be even and >= 2");
    if (!(initial_lr >= 0.0)) raise<ArgumentError>("learning rate must be >= 0");
    if (slice_size[0] < 4 || slice_size[1] < 4) raise<ArgumentError>("slice size must be >= 4");
  }
};

// 45 of 182 axial slices at the reference resolution, scaled for shorter
// volumes.
inline int neck_exclusion(int nz, int configured = -1) {
  if (configured >= 0) return std::min(configured, nz);
  if (nz >= 182) return 45;
  return static_cast<int>(std::lround(45.0 * nz / 182.0));
}

// Axial slice z, centre-cropped or padded (with the slice minimum) to `size`,
// as a (1, 1, sx, sy) rank-2 tensor.
inline nn::Tensor extract_slice(const Volume& v, int z, const std::array<int, 2>& size) {
  const auto s = v.slice(z);
  const float fill = *std::min_element(s.begin(), s.end());
  nn::Tensor t(nn::Shape::make2d(1, 1, size[0], size[1]), fill);
  const int ox = (v.nx() - size[0]) / 2;
  const int oy = (v.ny() - size[1]) / 2;
  for (int y = 0; y < size[1]; ++y) {
    const int sy = y + oy;
    if (sy < 0 || sy >= v.ny()) continue;
    for (int x = 0; x < size[0]; ++x) {
      const int sx = x + ox;
      if (sx < 0 || sx >= v.nx()) continue;
      t.data[static_cast<std::size_t>(x + size[0] * y)] = v(sx, sy, z);
    }
  }
  return t;
}

inline bool slice_has_lesion(const Mask& m, int z) {
  const auto s = m.slice(z);
  return std::any_of(s.begin(), s.end(), [](std::uint8_t v) { return v != 0; });
}

struct SliceDataset {
  std::vector<nn::Tensor> positives;
  std::vector<nn::Tensor> negatives;
};

inline SliceDataset build_slice_dataset(const std::vector<TrainingCase>& cohort,
                                        const std::array<int, 2>& size, int neck_exclude = -1) {
  SliceDataset ds;
  for (const auto& c : cohort) {
    require_same_shape(c.image, c.mask, "build_slice_dataset");
    for (int z = neck_exclusion(c.image.nz(), neck_exclude); z < c.image.nz(); ++z) {
      (slice_has_lesion(c.mask, z) ? ds.positives : ds.negatives).push_back(extract_slice(c.image, z, size));
    }
  }
  if (ds.positives.empty()) {
    raise<DatasetError>("slice dataset has no positive slices after excluding the neck region");
  }
  if (ds.negatives.empty()) raise<DatasetError>("slice dataset has no negative slices");
  return ds;
}

struct SliceBatch {
  nn::Tensor images;
  nn::Tensor labels;  // (N, 1, 1, 1) class indices
};

// Half the batch drawn (with replacement) from the positives, half from the
// negatives, so the minority class is resampled.
inline SliceBatch balanced_batch(const SliceDataset& ds, int batch_size, Rng& rng) {
  const nn::Shape one = ds.positives.front().shape;
  SliceBatch b{nn::Tensor(nn::Shape::make2d(batch_size, 1, one.sp[0], one.sp[1])),
               nn::Tensor(nn::Shape::make2d(batch_size, 1, 1, 1))};
  for (int i = 0; i < batch_size; ++i) {
    const bool positive = i < batch_size / 2;
    const auto& pool = positive ? ds.positives : ds.negatives;
    const nn::Tensor& src = pool[rng.below(pool.size())];
    std::copy(src.data.begin(), src.data.end(), b.images.sample(i));
    b.labels.data[static_cast<std::size_t>(i)] = positive ? 1.0f : 0.0f;
  }
  return b;
}

inline TrainResult train_slice_classifier(nn::Graph& g, const std::vector<TrainingCase>& cohort,
                                          const SliceClassifierConfig& cfg,
                                          const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const SliceDataset ds = build_slice_dataset(cohort, cfg.slice_size, cfg.neck_exclude);
  const int loss = models::attach_classification_loss(g);
  g.set_training(true);
  Sgd opt(cfg.momentum, cfg.weight_decay);
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.epochs, cfg.initial_lr);
    double total = 0.0;
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch) * cfg.iterations_per_epoch + it));
      SliceBatch b = balanced_batch(ds, cfg.batch_size, rng);
      g.feed("image", std::move(b.images));
      g.feed("target", std::move(b.labels));
      const double value = g.forward(loss).item();
      if (!std::isfinite(value)) {
        throw DivergenceError(epoch, lf::detail::concat("classifier loss became non-finite at epoch ", epoch));
      }
      total += value;
      g.params().zero_grad();
      g.backward(loss);
      opt.step(g.params(), lr);
    }
    result.trace.push_back({epoch, lr, total / cfg.iterations_per_epoch});
    if (on_epoch) on_epoch(result.trace.back());
  }
  g.set_training(false);
  return result;
}

// Lesion probability for each slice tensor (inference statistics).
inline std::vector<double> slice_probabilities(nn::Graph& g, const std::vector<nn::Tensor>& slices,
                                               int batch = 32) {
  std::vector<double> out;
  if (slices.empty()) return out;
  const bool was_training = g.training();
  g.set_training(false);
  const nn::Shape one = slices.front().shape;
  for (std::size_t start = 0; start < slices.size(); start += static_cast<std::size_t>(batch)) {
    const int n = static_cast<int>(std::min(slices.size() - start, static_cast<std::size_t>(batch)));
    nn::Tensor x(nn::Shape::make2d(n, 1, one.sp[0], one.sp[1]));
    for (int i = 0; i < n; ++i) {
      const auto& s = slices[start + static_cast<std::size_t>(i)];
      std::copy(s.data.begin(), s.data.end(), x.sample(i));
    }
    g.feed("image", std::move(x));
    const nn::Tensor& p = g.forward(g.output());
    for (int i = 0; i < n; ++i) out.push_back(p.data[static_cast<std::size_t>(2 * i + 1)]);
  }
  g.set_training(was_training);
  return out;
}

inline double slice_accuracy(nn::Graph& g, const SliceDataset& ds) {
  const auto pos = slice_probabilities(g, ds.positives);
  const auto neg = slice_probabilities(g, ds.negatives);
  std::size_t correct = 0;
  for (double p : pos) correct += p > 0.5 ? 1 : 0;
  for (double p : neg) correct += p > 0.5 ? 0 : 1;
  return static_cast<double>(correct) / static_cast<double>(pos.size() + neg.size());
}

}  // namespace lf::training
