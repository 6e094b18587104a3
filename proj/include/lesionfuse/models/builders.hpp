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

// Network builders. Every builder returns a graph with one input named
// "image" and its output set to a two-class channel softmax.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "lesionfuse/core/rng.hpp"
#include "lesionfuse/nn/graph.hpp"

namespace lf::models {

using nn::Graph;

inline constexpr double kLeakySlope = 0.01;

struct UNetSpec {
  int in_channels = 1;
  int base_width = 8;
  int depth = 3;
  int classes = 2;
  std::uint64_t seed = 1;

  void validate() const {
    if (in_channels < 1 || base_width < 1 || classes < 2) {
      raise<ArgumentError>("UNetSpec: in_channels, base_width >= 1 and classes >= 2 required");
    }
    if (depth < 1) raise<ArgumentError>("UNetSpec: depth must be >= 1");
  }
  int width(int level) const { return base_width << level; }
  // Spatial sizes must be divisible by this.
  int divisor() const { return 1 << depth; }
};

using UNetPPSpec = UNetSpec;

struct DenseNetSpec {
  int in_channels = 1;
  int growth_rate = 4;
  int layers_per_block = 2;
  int blocks = 2;
  int stem_width = 8;
  double compression = 0.5;  // transition output channels = floor(c * compression)
  int classes = 2;
  std::uint64_t seed = 1;

  void validate() const {
    if (growth_rate < 1) raise<ArgumentError>("DenseNetSpec: growth rate must be >= 1");
    if (blocks < 1) raise<ArgumentError>("DenseNetSpec: blocks must be >= 1");
    if (layers_per_block < 1 || stem_width < 1 || in_channels < 1 || classes < 2) {
      raise<ArgumentError>("DenseNetSpec: invalid layer counts");
    }
    if (!(compression > 0.0 && compression <= 1.0)) {
      raise<ArgumentError>("DenseNetSpec: compression must lie in (0, 1]");
    }
  }
  int block_output(int c) const { return c + layers_per_block * growth_rate; }
  int transition_output(int c) const { return std::max(1, static_cast<int>(c * compression)); }
};

namespace detail {

// conv3 -> instance norm -> leaky relu, twice.
inline int double_conv(Graph& g, int x, const std::string& name, int cin, int cout, Rng& rng) {
  int h = g.conv(x, name + ".conv1", cin, cout, 3, 3, rng);
  h = g.leaky_relu(g.instance_norm(h, name + ".norm1", cout), kLeakySlope);
  h = g.conv(h, name + ".conv2", cout, cout, 3, 3, rng);
  return g.leaky_relu(g.instance_norm(h, name + ".norm2", cout), kLeakySlope);
}

inline int segmentation_head(Graph& g, int x, int cin, int classes, Rng& rng) {
  const int logits = g.conv(x, "head", cin, classes, 1, 3, rng);
  const int probs = g.softmax(logits);
  g.set_output(probs);
  return probs;
}

}  // namespace detail

inline Graph build_unet3d(const UNetSpec& s) {
  s.validate();
  Rng rng(s.seed);
  Graph g;
  const int image = g.input("image");
  std::vector<int> skips;
  int h = detail::double_conv(g, image, "enc0", s.in_channels, s.width(0), rng);
  skips.push_back(h);
  for (int i = 1; i <= s.depth; ++i) {
    h = g.max_pool(h, 2, 3, true);
    h = detail::double_conv(g, h, "enc" + std::to_string(i), s.width(i - 1), s.width(i), rng);
    skips.push_back(h);
  }
  for (int i = s.depth - 1; i >= 0; --i) {
    const std::string tag = std::to_string(i);
    const int up = g.conv_transpose(h, "up" + tag, s.width(i + 1), s.width(i), 2, 3, rng);
    const int cat = g.concat({skips[static_cast<std::size_t>(i)], up});
    h = detail::double_conv(g, cat, "dec" + tag, 2 * s.width(i), s.width(i), rng);
  }
  detail::segmentation_head(g, h, s.width(0), s.classes, rng);
  return g;
}

// Nodes X(i, j), i + j <= depth. X(i, 0) is the encoder; X(i, j) for j > 0
// convolves concat(X(i, 0..j-1), up(X(i+1, j-1))). Built column by column,
// so depth 1 yields exactly the depth-1 U-Net node sequence.
inline Graph build_unetpp3d(const UNetPPSpec& s) {
  s.validate();
  Rng rng(s.seed);
  Graph g;
  const int image = g.input("image");
  const auto d = static_cast<std::size_t>(s.depth);
  std::vector<std::vector<int>> X(d + 1);
  auto name = [](int i, int j) { return "x" + std::to_string(i) + "_" + std::to_string(j); };

  X[0].push_back(detail::double_conv(g, image, name(0, 0), s.in_channels, s.width(0), rng));
  for (int i = 1; i <= s.depth; ++i) {
    const int pooled = g.max_pool(X[static_cast<std::size_t>(i - 1)][0], 2, 3, true);
    X[static_cast<std::size_t>(i)].push_back(
        detail::double_conv(g, pooled, name(i, 0), s.width(i - 1), s.width(i), rng));
  }
  for (int j = 1; j <= s.depth; ++j) {
    for (int i = s.depth - j; i >= 0; --i) {
      const auto iu = static_cast<std::size_t>(i);
      const int up = g.conv_transpose(X[iu + 1][static_cast<std::size_t>(j - 1)],
                                      "up" + name(i, j).substr(1), s.width(i + 1), s.width(i), 2,
                                      3, rng);
      std::vector<int> parts(X[iu].begin(), X[iu].end());
      parts.push_back(up);
      const int cat = g.concat(parts);
      X[iu].push_back(detail::double_conv(g, cat, name(i, j), (j + 1) * s.width(i), s.width(i), rng));
    }
  }
  detail::segmentation_head(g, X[0][d], s.width(0), s.classes, rng);
  return g;
}

// stem conv -> (dense block -> transition)^blocks -> global average pool ->
// linear -> softmax. Dense layers are BN -> ReLU -> 3x3 conv producing
// `growth_rate` channels; transitions are BN -> ReLU -> 1x1 conv -> 2x2
// average pool.
inline Graph build_densenet2d(const DenseNetSpec& s) {
  s.validate();
  Rng rng(s.seed);
  Graph g;
  const int image = g.input("image");
  int h = g.conv(image, "stem", s.in_channels, s.stem_width, 3, 2, rng);
  int channels = s.stem_width;
  for (int b = 0; b < s.blocks; ++b) {
    const std::string block = "block" + std::to_string(b);
    std::vector<int> features{h};
    for (int l = 0; l < s.layers_per_block; ++l) {
      const std::string layer = block + ".layer" + std::to_string(l);
      const int in = features.size() == 1 ? features[0] : g.concat(features);
      int y = g.relu(g.batch_norm(in, layer + ".bn", channels + l * s.growth_rate));
      y = g.conv(y, layer + ".conv", channels + l * s.growth_rate, s.growth_rate, 3, 2, rng);
      features.push_back(y);
    }
    h = g.concat(features);
    channels = s.block_output(channels);
    const std::string tr = "transition" + std::to_string(b);
    const int out = s.transition_output(channels);
    h = g.relu(g.batch_norm(h, tr + ".bn", channels));
    h = g.conv(h, tr + ".conv", channels, out, 1, 2, rng);
    h = g.avg_pool(h, 2, 2);
    channels = out;
  }
  h = g.global_avg_pool(h);
  h = g.dense(h, "fc", channels, s.classes, rng);
  g.set_output(g.softmax(h));
  return g;
}

// Appends a "target" input and the Dice + CE loss on the output; reuses an
// existing loss if one was already attached.
template <typename T>
int attach_segmentation_loss(nn::BasicGraph<T>& g, double w_dice, double w_ce) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.nodes()[i].kind == nn::OpKind::kDiceCe) return static_cast<int>(i);
  }
  const int target = g.input("target");
  return g.dice_ce(g.output(), target, w_dice, w_ce);
}

template <typename T>
int attach_classification_loss(nn::BasicGraph<T>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.nodes()[i].kind == nn::OpKind::kCrossEntropy) return static_cast<int>(i);
  }
  const int target = g.input("target");
  return g.cross_entropy(g.output(), target);
}

}  // namespace lf::models
