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

// Segmentation training: Dice + CE loss, SGD with Nesterov momentum and a
// linearly decaying learning rate, fed by randomly sampled augmented patches.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <string>
#include <vector>

#include "lesionfuse/core/grid.hpp"
#include "lesionfuse/models/builders.hpp"
#include "lesionfuse/nn/graph.hpp"
#include "lesionfuse/training/augment.hpp"

namespace lf::training {

struct TrainConfig {
  int epochs = 30;
  int iterations_per_epoch = 8;
  int batch_size = 2;
  double initial_lr = 1e-2;
  Index3 patch{32, 32, 32};
  double fg_probability = 0.33;
  std::uint64_t seed = 1;
  double dice_weight = 1.0;
  double ce_weight = 1.0;
  double momentum = 0.99;
  double weight_decay = 3e-5;
  double grad_clip = 12.0;  // global L2 norm; <= 0 disables

  void validate() const {
    if (epochs < 1) raise<ArgumentError>("epochs must be >= 1");
    if (iterations_per_epoch < 1 || batch_size < 1) {
      raise<ArgumentError>("iterations_per_epoch and batch_size must be >= 1");
    }
    if (!(initial_lr >= 0.0)) raise<ArgumentError>("learning rate must be >= 0");
    if (dice_weight < 0.0 || ce_weight < 0.0 || (dice_weight == 0.0 && ce_weight == 0.0)) {
      raise<ArgumentError>("loss weights must be >= 0 and not both 0");
    }
    if (!(fg_probability >= 0.0 && fg_probability <= 1.0)) {
      raise<ArgumentError>("fg_probability must lie in [0, 1]");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) raise<ArgumentError>("momentum must lie in [0, 1)");
    for (int p : patch) {
      if (p < 1) raise<ArgumentError>("patch size must be positive");
    }
  }
};

// w_dice * (1 - soft Dice on the lesion channel) + w_ce * mean cross-entropy.
// `target` holds class indices with shape (N, 1, spatial).
inline double dice_ce_loss(const nn::Tensor& probs, const nn::Tensor& target, double w_dice,
                           double w_ce) {
  if (target.shape.n != probs.shape.n || target.shape.c != 1 || target.shape.sp != probs.shape.sp) {
    raise<ShapeError>("dice_ce_loss: target ", target.shape.str(), " does not match ", probs.shape.str());
  }
  return nn::kernels::dice_ce_forward(probs, target, w_dice, w_ce, 1e-5).loss;
}

inline double lr_schedule(int epoch, int total_epochs, double initial) {
  if (total_epochs < 1 || epoch < 0 || epoch >= total_epochs) {
    raise<ArgumentError>("lr_schedule: epoch ", epoch, " outside [0, ", total_epochs, ")");
  }
  return initial * (1.0 - static_cast<double>(epoch) / total_epochs);
}

// SGD with Nesterov momentum in the common formulation
//   b <- mu b + g,  p <- p - lr (g + mu b)
// where g includes L2 weight decay.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  template <typename T>
  void step(nn::ParamStore<T>& store, double lr) {
    if (buffers_.size() != store.size()) {
      buffers_.assign(store.size(), {});
      for (std::size_t i = 0; i < store.size(); ++i) buffers_[i].assign(store[static_cast<int>(i)].size(), 0.0);
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[static_cast<int>(i)];
      if (!p.trainable) continue;
      auto& buf = buffers_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]) + weight_decay_ * p.value[j];
        buf[j] = momentum_ * buf[j] + g;
        p.value[j] = static_cast<T>(p.value[j] - lr * (g + momentum_ * buf[j]));
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> buffers_;
};

// Scales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
template <typename T>
double clip_grad_norm(nn::ParamStore<T>& store, double max_norm) {
  double ss = 0.0;
  for (const auto& p : store) {
    if (!p.trainable) continue;
    for (T g : p.grad) ss += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (auto& p : store) {
      if (!p.trainable) continue;
      for (T& g : p.grad) g = static_cast<T>(g * scale);
    }
  }
  return norm;
}

struct TrainingCase {
  std::string id;
  Volume image;
  Mask mask;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> trace;
};

inline void write_loss_csv(const std::vector<EpochLog>& trace, const std::string& path) {
  std::ofstream os(path);
  if (!os) raise<IoError>("cannot write ", path);
  os << "epoch,lr,loss\n" << std::setprecision(9);
  for (const auto& e : trace) os << e.epoch << ',' << e.lr << ',' << e.loss << '\n';
}

// Stacks samples into (N, 1, patch) image and target tensors.
inline std::pair<nn::Tensor, nn::Tensor> to_batch(const std::vector<Sample>& samples) {
  const Index3 d = samples.front().image.dims();
  const int n = static_cast<int>(samples.size());
  nn::Tensor x(nn::Shape::make3d(n, 1, d[0], d[1], d[2]));
  nn::Tensor t(x.shape);
  for (int b = 0; b < n; ++b) {
    const Sample& s = samples[static_cast<std::size_t>(b)];
    std::copy(s.image.data().begin(), s.image.data().end(), x.sample(b));
    std::transform(s.mask.data().begin(), s.mask.data().end(), t.sample(b),
                   [](std::uint8_t v) { return v ? 1.0f : 0.0f; });
  }
  return {std::move(x), std::move(t)};
}

using EpochCallback = std::function<void(const EpochLog&)>;

// Trains `g` in place. Every random draw derives from cfg.seed, so the loss
// trace and final parameters are reproducible.
inline TrainResult train_segmentation(nn::Graph& g, const std::vector<TrainingCase>& cohort,
                                      const TrainConfig& cfg, const AugmentConfig& aug,
                                      const EpochCallback& on_epoch = {}) {
  cfg.validate();
  aug.validate();
  if (cohort.empty()) raise<DatasetError>("train_segmentation: empty cohort");
  for (const auto& c : cohort) require_same_shape(c.image, c.mask, "train_segmentation");
  const int loss = models::attach_segmentation_loss(g, cfg.dice_weight, cfg.ce_weight);
  g.set_training(true);
  Sgd opt(cfg.momentum, cfg.weight_decay);
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.epochs, cfg.initial_lr);
    double total = 0.0;
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch) * cfg.iterations_per_epoch + it));
      std::vector<Sample> batch;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const TrainingCase& c = cohort[rng.below(cohort.size())];
        batch.push_back(augment(sample_patch(c.image, c.mask, cfg.patch, cfg.fg_probability, rng), aug, rng));
      }
      auto [x, t] = to_batch(batch);
      g.feed("image", std::move(x));
      g.feed("target", std::move(t));
      const double value = g.forward(loss).item();
      if (!std::isfinite(value)) {
        throw DivergenceError(epoch, lf::detail::concat("loss became non-finite at epoch ", epoch,
                                                         " iteration ", it));
      }
      total += value;
      g.params().zero_grad();
      g.backward(loss);
      clip_grad_norm(g.params(), cfg.grad_clip);
      opt.step(g.params(), lr);
    }
    result.trace.push_back({epoch, lr, total / cfg.iterations_per_epoch});
    if (on_epoch) on_epoch(result.trace.back());
  }
  g.set_training(false);
  return result;
}

}  // namespace lf::training
