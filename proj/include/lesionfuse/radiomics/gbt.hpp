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

// Gradient-boosted regression trees on the logistic loss, second-order
// (Newton) leaf values and exact greedy split search.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionfuse/core/errors.hpp"
#include "lesionfuse/core/rng.hpp"

namespace lf::radiomics {

struct FeatureMatrix {
  std::string schema_id;
  std::vector<std::string> names;
  std::vector<std::vector<double>> rows;

  std::size_t cols() const { return names.size(); }

  void validate() const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      for (std::size_t j = i + 1; j < names.size(); ++j) {
        if (names[i] == names[j]) raise<SchemaError>("duplicate feature name '", names[i], "'");
      }
    }
    for (const auto& r : rows) {
      if (r.size() != names.size()) {
        raise<SchemaError>("row has ", r.size(), " values, schema has ", names.size());
      }
      for (double v : r) {
        if (!std::isfinite(v)) raise<SchemaError>("non-finite feature value");
      }
    }
  }
};

// Column projection onto `keep`, in the order given.
inline FeatureMatrix project(const FeatureMatrix& x, const std::vector<std::string>& keep) {
  std::vector<std::size_t> cols;
  for (const auto& k : keep) {
    auto it = std::find(x.names.begin(), x.names.end(), k);
    if (it == x.names.end()) raise<SchemaError>("feature '", k, "' not in schema");
    cols.push_back(static_cast<std::size_t>(it - x.names.begin()));
  }
  FeatureMatrix out;
  out.schema_id = x.schema_id + "/subset";
  out.names = keep;
  out.rows.reserve(x.rows.size());
  for (const auto& r : x.rows) {
    std::vector<double> row;
    row.reserve(cols.size());
    for (std::size_t c : cols) row.push_back(r[c]);
    out.rows.push_back(std::move(row));
  }
  return out;
}

struct GbtParams {
  int trees = 100;
  int max_depth = 3;
  double learning_rate = 0.3;
  double lambda = 1.0;            // L2 on leaf values
  double min_child_weight = 1e-3;  // minimum hessian mass per child
  double subsample = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (trees < 0) raise<ArgumentError>("gbt: trees must be >= 0");
    if (max_depth < 1) raise<ArgumentError>("gbt: max_depth must be >= 1");
    if (!(learning_rate > 0.0)) raise<ArgumentError>("gbt: learning_rate must be > 0");
    if (!(lambda >= 0.0) || !(min_child_weight >= 0.0)) raise<ArgumentError>("gbt: negative regularizer");
    if (!(subsample > 0.0 && subsample <= 1.0)) raise<ArgumentError>("gbt: subsample must lie in (0, 1]");
  }
};

// Flat tree; x[feature] < threshold goes left. Leaves have feature == -1.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
  double gain = 0.0;
};

struct Tree {
  std::vector<TreeNode> nodes;
  double scale = 1.0;  // effective shrinkage after the loss guard

  double eval(const std::vector<double>& x) const {
    int n = 0;
    while (nodes[static_cast<std::size_t>(n)].feature >= 0) {
      const TreeNode& t = nodes[static_cast<std::size_t>(n)];
      n = x[static_cast<std::size_t>(t.feature)] < t.threshold ? t.left : t.right;
    }
    return scale * nodes[static_cast<std::size_t>(n)].value;
  }
  int depth(int n = 0) const {
    const TreeNode& t = nodes[static_cast<std::size_t>(n)];
    return t.feature < 0 ? 0 : 1 + std::max(depth(t.left), depth(t.right));
  }
};

struct GbtModel {
  std::string schema_id;
  std::vector<std::string> names;
  double base_score = 0.0;  // prior log-odds
  double learning_rate = 0.3;
  std::vector<Tree> trees;
  std::vector<double> importance;  // total split gain per feature
  std::vector<double> train_loss;  // mean log loss after each round, prior first
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double log_loss(const std::vector<double>& margin, const std::vector<int>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    // log(1 + exp(-z)) for y=1, log(1 + exp(z)) for y=0, stably.
    const double z = y[i] ? -margin[i] : margin[i];
    s += z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  }
  return s / static_cast<double>(y.size());
}

namespace detail {

struct SplitCandidate {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const FeatureMatrix& x, const std::vector<std::vector<std::uint32_t>>& order,
              const std::vector<double>& g, const std::vector<double>& h, const GbtParams& p)
      : x_(x), order_(order), g_(g), h_(h), p_(p), node_of_(x.rows.size(), -1) {}

  Tree build(const std::vector<std::uint32_t>& rows, std::vector<double>& importance) {
    Tree t;
    t.nodes.push_back({});
    for (std::uint32_t r : rows) node_of_[r] = 0;
    grow(t, 0, rows, 0, importance);
    for (std::uint32_t r : rows) node_of_[r] = -1;
    return t;
  }

 private:
  double score(double gs, double hs) const { return gs * gs / (hs + p_.lambda); }

  void grow(Tree& t, int node, const std::vector<std::uint32_t>& rows, int depth,
            std::vector<double>& importance) {
    double gs = 0.0, hs = 0.0;
    for (std::uint32_t r : rows) {
      gs += g_[r];
      hs += h_[r];
    }
    t.nodes[static_cast<std::size_t>(node)].value = -gs / (hs + p_.lambda);
    if (depth >= p_.max_depth || rows.size() < 2) return;

    const SplitCandidate best = find_split(node, gs, hs, rows.size());
    if (best.feature < 0) return;

    std::vector<std::uint32_t> left, right;
    for (std::uint32_t r : rows) {
      (x_.rows[r][static_cast<std::size_t>(best.feature)] < best.threshold ? left : right).push_back(r);
    }
    const int l = static_cast<int>(t.nodes.size());
    t.nodes.push_back({});
    t.nodes.push_back({});
    TreeNode& n = t.nodes[static_cast<std::size_t>(node)];
    n.feature = best.feature;
    n.threshold = best.threshold;
    n.left = l;
    n.right = l + 1;
    n.gain = best.gain;
    importance[static_cast<std::size_t>(best.feature)] += best.gain;
    for (std::uint32_t r : left) node_of_[r] = l;
    for (std::uint32_t r : right) node_of_[r] = l + 1;
    grow(t, l, left, depth + 1, importance);
    grow(t, l + 1, right, depth + 1, importance);
  }

  // Scans each feature's presorted order restricted to this node; splits sit
  // midway between consecutive distinct values. Strictly larger gain wins,
  // so earlier features and lower thresholds take ties.
  SplitCandidate find_split(int node, double gs, double hs, std::size_t n) const {
    SplitCandidate best;
    const double parent = score(gs, hs);
    for (std::size_t f = 0; f < x_.cols(); ++f) {
      double gl = 0.0, hl = 0.0;
      std::size_t seen = 0;
      double prev = 0.0;
      for (std::uint32_t r : order_[f]) {
        if (node_of_[r] != node) continue;
        const double v = x_.rows[r][f];
        if (seen > 0 && v > prev && hl >= p_.min_child_weight &&
            hs - hl >= p_.min_child_weight) {
          const double gain = 0.5 * (score(gl, hl) + score(gs - gl, hs - hl) - parent);
          if (gain > best.gain + 1e-12) {
            best = {gain, static_cast<int>(f), prev + 0.5 * (v - prev)};
          }
        }
        gl += g_[r];
        hl += h_[r];
        prev = v;
        if (++seen == n) break;
      }
    }
    return best;
  }

  const FeatureMatrix& x_;
  const std::vector<std::vector<std::uint32_t>>& order_;
  const std::vector<double>& g_;
  const std::vector<double>& h_;
  const GbtParams& p_;
  std::vector<int> node_of_;
};

}  // namespace detail

inline double predict_margin(const GbtModel& m, const std::vector<double>& x) {
  double z = m.base_score;
  for (const Tree& t : m.trees) z += t.eval(x);
  return z;
}

// Rounds whose tree would raise the training loss are shrunk by halving
// until the loss does not increase; a tree that never qualifies is dropped.
inline GbtModel train_gbt(const FeatureMatrix& x, const std::vector<int>& y, const GbtParams& p) {
  p.validate();
  x.validate();
  if (x.rows.size() != y.size()) raise<ShapeError>("gbt: ", x.rows.size(), " rows but ", y.size(), " labels");
  if (x.rows.size() < 2) raise<TrainingError>("gbt: need at least 2 rows");
  std::size_t pos = 0;
  for (int v : y) {
    if (v != 0 && v != 1) raise<ArgumentError>("gbt: labels must be 0 or 1");
    pos += static_cast<std::size_t>(v);
  }
  if (pos == 0 || pos == y.size()) raise<TrainingError>("gbt: training labels contain a single class");

  const std::size_t n = y.size();
  GbtModel m;
  m.schema_id = x.schema_id;
  m.names = x.names;
  m.learning_rate = p.learning_rate;
  m.importance.assign(x.cols(), 0.0);
  const double prior = static_cast<double>(pos) / static_cast<double>(n);
  m.base_score = std::log(prior / (1.0 - prior));

  std::vector<std::vector<std::uint32_t>> order(x.cols());
  for (std::size_t f = 0; f < x.cols(); ++f) {
    order[f].resize(n);
    std::iota(order[f].begin(), order[f].end(), 0u);
    std::stable_sort(order[f].begin(), order[f].end(),
                     [&](std::uint32_t a, std::uint32_t b) { return x.rows[a][f] < x.rows[b][f]; });
  }

  std::vector<double> margin(n, m.base_score), g(n), h(n), trial(n), contrib(n);
  double loss = log_loss(margin, y);
  m.train_loss.push_back(loss);
  Rng rng(p.seed);
  std::vector<std::uint32_t> all(n);
  std::iota(all.begin(), all.end(), 0u);

  for (int round = 0; round < p.trees; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      const double q = sigmoid(margin[i]);
      g[i] = q - y[i];
      h[i] = std::max(q * (1.0 - q), 1e-16);
    }
    std::vector<std::uint32_t> rows;
    if (p.subsample < 1.0) {
      for (std::uint32_t r : all) {
        if (rng.uniform() < p.subsample) rows.push_back(r);
      }
      if (rows.empty()) rows.push_back(all[rng.below(n)]);
    } else {
      rows = all;
    }
    std::vector<double> gains(x.cols(), 0.0);
    detail::TreeBuilder builder(x, order, g, h, p);
    Tree t = builder.build(rows, gains);
    t.scale = 1.0;
    for (std::size_t i = 0; i < n; ++i) contrib[i] = t.eval(x.rows[i]);

    double scale = p.learning_rate;
    double new_loss = loss;
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving, scale *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) trial[i] = margin[i] + scale * contrib[i];
      new_loss = log_loss(trial, y);
      if (new_loss <= loss) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      m.train_loss.push_back(loss);
      continue;
    }
    t.scale = scale;
    margin.swap(trial);
    loss = new_loss;
    m.train_loss.push_back(loss);
    for (std::size_t f = 0; f < gains.size(); ++f) m.importance[f] += gains[f];
    m.trees.push_back(std::move(t));
  }
  return m;
}

inline void check_schema(const GbtModel& m, const std::vector<std::string>& names) {
  if (names != m.names) {
    raise<SchemaError>("feature schema mismatch: model expects ", m.names.size(),
                       " features of schema '", m.schema_id, "'");
  }
}

inline double predict_gbt(const GbtModel& m, const std::vector<std::string>& names,
                          const std::vector<double>& x) {
  check_schema(m, names);
  if (x.size() != names.size()) raise<SchemaError>("feature row length mismatch");
  return sigmoid(predict_margin(m, x));
}

inline std::vector<double> predict_gbt(const GbtModel& m, const FeatureMatrix& x) {
  check_schema(m, x.names);
  std::vector<double> out;
  out.reserve(x.rows.size());
  for (const auto& r : x.rows) out.push_back(predict_gbt(m, x.names, r));
  return out;
}

inline std::vector<std::string> select_top_k(const GbtModel& m, int k) {
  if (k < 0 || static_cast<std::size_t>(k) > m.names.size()) {
    raise<ArgumentError>("select_top_k: k=", k, " outside [0, ", m.names.size(), "]");
  }
  std::vector<std::size_t> idx(m.names.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return m.importance[a] > m.importance[b]; });
  std::vector<std::string> out;
  for (int i = 0; i < k; ++i) out.push_back(m.names[idx[static_cast<std::size_t>(i)]]);
  return out;
}

namespace detail {

inline nlohmann::json node_to_json(const Tree& t, int n) {
  const TreeNode& node = t.nodes[static_cast<std::size_t>(n)];
  if (node.feature < 0) return {{"leaf", node.value}};
  return {{"feature", node.feature},   {"threshold", node.threshold},
          {"gain", node.gain},         {"left", node_to_json(t, node.left)},
          {"right", node_to_json(t, node.right)}};
}

inline int node_from_json(const nlohmann::json& j, Tree& t) {
  const int id = static_cast<int>(t.nodes.size());
  t.nodes.push_back({});
  if (j.contains("leaf")) {
    t.nodes[static_cast<std::size_t>(id)].value = j.at("leaf").get<double>();
    return id;
  }
  TreeNode n;
  n.feature = j.at("feature").get<int>();
  n.threshold = j.at("threshold").get<double>();
  n.gain = j.value("gain", 0.0);
  n.left = node_from_json(j.at("left"), t);
  n.right = node_from_json(j.at("right"), t);
  t.nodes[static_cast<std::size_t>(id)] = n;
  return id;
}

}  // namespace detail

inline nlohmann::json to_json(const GbtModel& m) {
  nlohmann::json trees = nlohmann::json::array();
  for (const Tree& t : m.trees) trees.push_back({{"scale", t.scale}, {"root", detail::node_to_json(t, 0)}});
  return {{"schema_id", m.schema_id}, {"features", m.names},       {"base_score", m.base_score},
          {"learning_rate", m.learning_rate}, {"importance", m.importance},
          {"train_loss", m.train_loss},        {"trees", trees}};
}

inline GbtModel gbt_from_json(const nlohmann::json& j) {
  try {
    GbtModel m;
    m.schema_id = j.at("schema_id").get<std::string>();
    m.names = j.at("features").get<std::vector<std::string>>();
    m.base_score = j.at("base_score").get<double>();
    m.learning_rate = j.at("learning_rate").get<double>();
    m.importance = j.at("importance").get<std::vector<double>>();
    m.train_loss = j.value("train_loss", std::vector<double>{});
    for (const auto& tj : j.at("trees")) {
      Tree t;
      t.scale = tj.at("scale").get<double>();
      detail::node_from_json(tj.at("root"), t);
      for (const TreeNode& n : t.nodes) {
        if (n.feature >= static_cast<int>(m.names.size())) raise<FormatError>("tree feature index out of range");
      }
      m.trees.push_back(std::move(t));
    }
    if (m.importance.size() != m.names.size()) raise<FormatError>("importance length mismatch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    raise<FormatError>("malformed GBT model: ", e.what());
  }
}

inline void save_gbt(const GbtModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) raise<IoError>("cannot write ", path);
  out << to_json(m).dump(1) << "\n";
}

inline GbtModel load_gbt(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise<IoError>("cannot read ", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    raise<FormatError>(path, ": ", e.what());
  }
  return gbt_from_json(j);
}

// Header row holds the feature names; an optional trailing "label" column.
inline void write_feature_csv(const std::string& path, const FeatureMatrix& x,
                              const std::vector<int>* labels = nullptr) {
  std::ofstream out(path);
  if (!out) raise<IoError>("cannot write ", path);
  out.precision(17);
  for (std::size_t c = 0; c < x.names.size(); ++c) out << (c ? "," : "") << x.names[c];
  if (labels) out << ",label";
  out << "\n";
  for (std::size_t r = 0; r < x.rows.size(); ++r) {
    for (std::size_t c = 0; c < x.rows[r].size(); ++c) out << (c ? "," : "") << x.rows[r][c];
    if (labels) out << "," << (*labels)[r];
    out << "\n";
  }
}

inline FeatureMatrix read_feature_csv(const std::string& path, std::vector<int>* labels = nullptr) {
  std::ifstream in(path);
  if (!in) raise<IoError>("cannot read ", path);
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  std::string line;
  if (!std::getline(in, line)) raise<FormatError>(path, ": empty feature CSV");
  FeatureMatrix x;
  x.names = split(line);
  const bool has_label = !x.names.empty() && x.names.back() == "label";
  if (has_label) x.names.pop_back();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != x.names.size() + (has_label ? 1 : 0)) raise<FormatError>(path, ": ragged row");
    std::vector<double> row;
    try {
      for (std::size_t c = 0; c < x.names.size(); ++c) row.push_back(std::stod(cells[c]));
      if (has_label && labels) labels->push_back(std::stoi(cells.back()));
    } catch (const std::exception&) {
      raise<FormatError>(path, ": non-numeric cell");
    }
    x.rows.push_back(std::move(row));
  }
  return x;
}

}  // namespace lf::radiomics
