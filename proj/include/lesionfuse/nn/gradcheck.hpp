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
#include <cstdint>
#include <utility>
#include <vector>

#include "lesionfuse/core/rng.hpp"
#include "lesionfuse/nn/graph.hpp"

namespace lf::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Central finite differences over a random subsample of trainable parameter
// entries. Inputs must already be fed. The relative error of one entry is
// |analytic - numeric| / max(1e-6, |numeric|).
template <typename T>
GradCheckResult gradient_check(BasicGraph<T>& g, int loss_node, double eps = 1e-3,
                               std::size_t samples = 32, std::uint64_t seed = 7) {
  if (!(eps > 0.0)) raise<ArgumentError>("gradient_check: eps must be > 0");
  auto& store = g.params();
  std::vector<std::vector<T>> saved;
  saved.reserve(store.size());
  for (const auto& p : store) saved.push_back(p.value);

  store.zero_grad();
  g.forward(loss_node);
  g.backward(loss_node);

  std::vector<std::pair<int, std::size_t>> entries;
  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    const auto& p = store[static_cast<int>(pi)];
    if (!p.trainable) continue;
    for (std::size_t j = 0; j < p.size(); ++j) entries.emplace_back(static_cast<int>(pi), j);
  }
  Rng rng(seed);
  rng.shuffle(std::span<std::pair<int, std::size_t>>(entries));
  if (entries.size() > samples) entries.resize(samples);

  auto restore = [&] {
    std::size_t i = 0;
    for (auto& p : store) p.value = saved[i++];
  };

  GradCheckResult result;
  for (const auto& [pi, j] : entries) {
    auto& p = store[pi];
    const double analytic = p.grad[j];
    const T base = saved[static_cast<std::size_t>(pi)][j];
    restore();
    p.value[j] = static_cast<T>(base + eps);
    const double plus = g.forward(loss_node).item();
    restore();
    p.value[j] = static_cast<T>(base - eps);
    const double minus = g.forward(loss_node).item();
    const double numeric = (plus - minus) / (2.0 * eps);
    const double err = std::abs(analytic - numeric) / std::max(1e-6, std::abs(numeric));
    result.max_rel_error = std::max(result.max_rel_error, err);
    ++result.checked;
  }
  restore();
  return result;
}

}  // namespace lf::nn
