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

#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "lesionfuse/core/errors.hpp"
#include "lesionfuse/core/rng.hpp"

namespace lf::training {

struct FoldAssignment {
  int k = 1;
  std::map<std::string, int> fold_of;

  std::vector<std::string> members(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : fold_of) {
      if (f == fold) out.push_back(id);
    }
    return out;
  }
  std::vector<std::string> complement(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : fold_of) {
      if (f != fold) out.push_back(id);
    }
    return out;
  }
};

// Seeded shuffle followed by round-robin assignment.
inline FoldAssignment make_folds(const std::vector<std::string>& ids, int k, std::uint64_t seed) {
  if (k < 1) raise<ArgumentError>("make_folds: k must be >= 1");
  if (static_cast<std::size_t>(k) > ids.size()) {
    raise<ArgumentError>("make_folds: k = ", k, " exceeds the case count ", ids.size());
  }
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  FoldAssignment fa;
  fa.k = k;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::string& id = ids[order[i]];
    if (fa.fold_of.count(id)) raise<ArgumentError>("make_folds: duplicate case id '", id, "'");
    fa.fold_of[id] = static_cast<int>(i % static_cast<std::size_t>(k));
  }
  return fa;
}

}  // namespace lf::training
