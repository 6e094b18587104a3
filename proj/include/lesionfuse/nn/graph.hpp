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

// Static computation graph with reverse-mode differentiation.
//
// Nodes are appended in topological order (every input id is smaller than
// its consumer), so forward evaluation is a single sweep and backward is the
// reverse sweep. Parameters live in a named store shared by all nodes.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "lesionfuse/core/rng.hpp"
#include "lesionfuse/nn/kernels.hpp"
#include "lesionfuse/nn/tensor.hpp"

namespace lf::nn {

enum class OpKind {
  kInput,
  kConv,
  kConvTranspose,
  kMaxPool,
  kAvgPool,
  kInstanceNorm,
  kBatchNorm,
  kLeakyRelu,
  kSoftmax,
  kConcat,
  kGlobalAvgPool,
  kDense,
  kSum,
  kHalfSumSquares,
  kDiceCe,
  kCrossEntropy,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConv: return "conv";
    case OpKind::kConvTranspose: return "conv_transpose";
    case OpKind::kMaxPool: return "maxpool";
    case OpKind::kAvgPool: return "avgpool";
    case OpKind::kInstanceNorm: return "instance_norm";
    case OpKind::kBatchNorm: return "batch_norm";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kConcat: return "concat";
    case OpKind::kGlobalAvgPool: return "global_avgpool";
    case OpKind::kDense: return "dense";
    case OpKind::kSum: return "sum";
    case OpKind::kHalfSumSquares: return "half_sum_squares";
    case OpKind::kDiceCe: return "dice_ce";
    case OpKind::kCrossEntropy: return "cross_entropy";
  }
  return "?";
}

struct NodeAttr {
  Dims3 k{1, 1, 1};
  Dims3 s{1, 1, 1};
  Dims3 p{0, 0, 0};
  int rank = 3;
  int out_channels = 0;
  double slope = 0.0;
  double eps = 1e-5;
  double momentum = 0.1;
  double w_dice = 1.0;
  double w_ce = 1.0;
  double smooth = 1e-5;
  bool exact = false;  // pooling: reject sizes not divisible by the window

  bool operator==(const NodeAttr&) const = default;
};

struct Node {
  OpKind kind = OpKind::kInput;
  std::string name;
  std::vector<int> inputs;
  std::vector<int> params;
  NodeAttr attr;
};

template <typename T>
class BasicGraph {
 public:
  using TensorT = BasicTensor<T>;

  // ---- construction --------------------------------------------------------

  int input(const std::string& name, bool requires_grad = false) {
    if (inputs_.count(name)) raise<ArgumentError>("duplicate graph input '", name, "'");
    const int id = add_node({OpKind::kInput, name, {}, {}, {}});
    inputs_[name] = id;
    input_requires_grad_[id] = requires_grad;
    return id;
  }

  // He-normal initialized convolution with odd kernel and "same" padding
  // unless `pad` is given.
  int conv(int x, const std::string& name, int cin, int cout, int k, int rank, Rng& rng,
           int stride = 1, std::optional<int> pad = std::nullopt, bool bias = true) {
    if (k % 2 == 0) raise<ArgumentError>("conv '", name, "': kernel size must be odd");
    const int p = pad.value_or(k / 2);
    NodeAttr a = spatial_attr(rank, k, stride, p);
    a.out_channels = cout;
    const int kvol = static_cast<int>(a.k[0] * a.k[1] * a.k[2]);
    std::vector<int> dims = rank == 3 ? std::vector<int>{cout, cin, k, k, k}
                                      : std::vector<int>{cout, cin, k, k};
    std::vector<int> params{
        add_param(name + ".weight", dims, he_normal(static_cast<std::size_t>(cout) * cin * kvol,
                                                    cin * kvol, rng))};
    if (bias) params.push_back(add_param(name + ".bias", {cout}, std::vector<T>(static_cast<std::size_t>(cout))));
    return add_node({OpKind::kConv, name, {x}, params, a});
  }

  // Upsampling by `stride` with kernel == stride, no padding.
  int conv_transpose(int x, const std::string& name, int cin, int cout, int stride, int rank,
                     Rng& rng) {
    NodeAttr a = spatial_attr(rank, stride, stride, 0);
    a.out_channels = cout;
    const int kvol = static_cast<int>(a.k[0] * a.k[1] * a.k[2]);
    std::vector<int> dims = rank == 3 ? std::vector<int>{cin, cout, stride, stride, stride}
                                      : std::vector<int>{cin, cout, stride, stride};
    std::vector<int> params{
        add_param(name + ".weight", dims, he_normal(static_cast<std::size_t>(cin) * cout * kvol,
                                                    cin, rng)),
        add_param(name + ".bias", {cout}, std::vector<T>(static_cast<std::size_t>(cout)))};
    return add_node({OpKind::kConvTranspose, name, {x}, params, a});
  }

  // Transposed convolution with an explicit kernel/stride/padding and an
  // existing weight (used for adjointness checks). No bias.
  int conv_transpose_shared(int x, const std::string& name, int weight_param, int cout, int k,
                            int stride, int pad, int rank) {
    NodeAttr a = spatial_attr(rank, k, stride, pad);
    a.out_channels = cout;
    return add_node({OpKind::kConvTranspose, name, {x}, {weight_param}, a});
  }

  int max_pool(int x, int k, int rank, bool exact = false) {
    NodeAttr a = spatial_attr(rank, k, k, 0);
    a.exact = exact;
    return add_node({OpKind::kMaxPool, "maxpool", {x}, {}, a});
  }
  int avg_pool(int x, int k, int rank, bool exact = false) {
    NodeAttr a = spatial_attr(rank, k, k, 0);
    a.exact = exact;
    return add_node({OpKind::kAvgPool, "avgpool", {x}, {}, a});
  }

  int instance_norm(int x, const std::string& name, int channels, double eps = 1e-5) {
    NodeAttr a;
    a.eps = eps;
    std::vector<int> params{
        add_param(name + ".gamma", {channels}, std::vector<T>(static_cast<std::size_t>(channels), T{1})),
        add_param(name + ".beta", {channels}, std::vector<T>(static_cast<std::size_t>(channels)))};
    return add_node({OpKind::kInstanceNorm, name, {x}, params, a});
  }

  int batch_norm(int x, const std::string& name, int channels, double eps = 1e-5,
                 double momentum = 0.1) {
    NodeAttr a;
    a.eps = eps;
    a.momentum = momentum;
    const auto c = static_cast<std::size_t>(channels);
    std::vector<int> params{
        add_param(name + ".gamma", {channels}, std::vector<T>(c, T{1})),
        add_param(name + ".beta", {channels}, std::vector<T>(c)),
        add_param(name + ".running_mean", {channels}, std::vector<T>(c), false),
        add_param(name + ".running_var", {channels}, std::vector<T>(c, T{1}), false)};
    return add_node({OpKind::kBatchNorm, name, {x}, params, a});
  }

  int leaky_relu(int x, double slope = 0.01) {
    NodeAttr a;
    a.slope = slope;
    return add_node({OpKind::kLeakyRelu, "leaky_relu", {x}, {}, a});
  }
  int relu(int x) { return leaky_relu(x, 0.0); }

  int softmax(int x) { return add_node({OpKind::kSoftmax, "softmax", {x}, {}, {}}); }

  int concat(std::vector<int> xs) {
    if (xs.empty()) raise<ArgumentError>("concat of nothing");
    return add_node({OpKind::kConcat, "concat", std::move(xs), {}, {}});
  }

  int global_avg_pool(int x) {
    return add_node({OpKind::kGlobalAvgPool, "global_avgpool", {x}, {}, {}});
  }

  int dense(int x, const std::string& name, int in_features, int out_features, Rng& rng) {
    NodeAttr a;
    a.out_channels = out_features;
    std::vector<int> params{
        add_param(name + ".weight", {out_features, in_features},
                  he_normal(static_cast<std::size_t>(out_features) * in_features, in_features, rng, 1.0)),
        add_param(name + ".bias", {out_features}, std::vector<T>(static_cast<std::size_t>(out_features)))};
    return add_node({OpKind::kDense, name, {x}, params, a});
  }

  int sum(int x) { return add_node({OpKind::kSum, "sum", {x}, {}, {}}); }
  int half_sum_squares(int x) {
    return add_node({OpKind::kHalfSumSquares, "half_sum_squares", {x}, {}, {}});
  }

  int dice_ce(int probs, int target, double w_dice, double w_ce, double smooth = 1e-5) {
    NodeAttr a;
    a.w_dice = w_dice;
    a.w_ce = w_ce;
    a.smooth = smooth;
    return add_node({OpKind::kDiceCe, "dice_ce", {probs, target}, {}, a});
  }

  int cross_entropy(int probs, int target) {
    return add_node({OpKind::kCrossEntropy, "cross_entropy", {probs, target}, {}, {}});
  }

  void set_output(int node) { output_ = node; }
  int output() const { return output_; }

  // ---- execution -----------------------------------------------------------

  void feed(const std::string& name, TensorT value) {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) raise<ArgumentError>("no graph input named '", name, "'");
    feeds_[it->second] = std::move(value);
  }

  int input_id(const std::string& name) const {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) raise<ArgumentError>("no graph input named '", name, "'");
    return it->second;
  }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  // Evaluates nodes [0, upto]; upto < 0 means the designated output, or the
  // last node when no output is set.
  const TensorT& forward(int upto = -1) {
    if (upto < 0) upto = output_ >= 0 ? output_ : static_cast<int>(nodes_.size()) - 1;
    values_.resize(nodes_.size());
    states_.resize(nodes_.size());
    live_ = ancestors(upto);
    for (int i = 0; i <= upto; ++i) {
      if (live_[static_cast<std::size_t>(i)]) eval(i);
    }
    evaluated_ = upto;
    return values_[static_cast<std::size_t>(upto)];
  }

  const TensorT& value(int node) const {
    if (!is_live(node)) raise<UsageError>("node ", node, " has not been evaluated");
    return values_[static_cast<std::size_t>(node)];
  }

  // Reverse sweep from a scalar node; parameter gradients accumulate into the
  // store.
  void backward(int loss_node) {
    if (!is_live(loss_node)) raise<UsageError>("backward before forward");
    if (values_[static_cast<std::size_t>(loss_node)].size() != 1) {
      raise<UsageError>("backward requires a scalar loss node, got shape ",
                        values_[static_cast<std::size_t>(loss_node)].shape.str());
    }
    TensorT seed(values_[static_cast<std::size_t>(loss_node)].shape, T{1});
    backward_from(loss_node, seed);
  }

  void backward_from(int node, const TensorT& seed) {
    if (!is_live(node)) raise<UsageError>("backward before forward");
    if (seed.shape != values_[static_cast<std::size_t>(node)].shape) {
      raise<ShapeError>("backward seed shape ", seed.shape.str(), " does not match node ",
                        values_[static_cast<std::size_t>(node)].shape.str());
    }
    const std::vector<bool> reach = ancestors(node);
    grads_.assign(static_cast<std::size_t>(node) + 1, TensorT{});
    for (int i = 0; i <= node; ++i) {
      if (reach[static_cast<std::size_t>(i)] && needs_grad(i)) grads_[static_cast<std::size_t>(i)] = TensorT(values_[static_cast<std::size_t>(i)].shape);
    }
    grads_[static_cast<std::size_t>(node)] = seed;
    for (int i = node; i >= 0; --i) {
      if (nodes_[static_cast<std::size_t>(i)].kind == OpKind::kInput) continue;
      if (!reach[static_cast<std::size_t>(i)] || !needs_grad(i)) continue;
      backprop(i);
    }
  }

  // Gradient with respect to a node's value from the last backward call.
  const TensorT& grad(int node) const {
    if (static_cast<std::size_t>(node) >= grads_.size() ||
        grads_[static_cast<std::size_t>(node)].size() == 0) {
      raise<UsageError>("no gradient recorded for node ", node);
    }
    return grads_[static_cast<std::size_t>(node)];
  }

  // ---- introspection -------------------------------------------------------

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  // Structural fingerprint: op kinds, wiring, attributes and parameter dims.
  // Two graphs with equal signatures compute the same function family.
  std::vector<std::tuple<OpKind, std::vector<int>, NodeAttr, std::vector<std::vector<int>>>>
  signature() const {
    std::vector<std::tuple<OpKind, std::vector<int>, NodeAttr, std::vector<std::vector<int>>>> sig;
    for (const Node& n : nodes_) {
      std::vector<std::vector<int>> pd;
      for (int p : n.params) pd.push_back(params_[p].dims);
      sig.emplace_back(n.kind, n.inputs, n.attr, std::move(pd));
    }
    return sig;
  }

  // Same structure and parameter values in another scalar type.
  template <typename U>
  BasicGraph<U> cast() const {
    BasicGraph<U> g;
    g.nodes_ = nodes_;
    g.inputs_ = inputs_;
    g.input_requires_grad_ = input_requires_grad_;
    g.output_ = output_;
    g.training_ = training_;
    for (const auto& p : params_) {
      g.params_.add(p.name, p.dims, std::vector<U>(p.value.begin(), p.value.end()), p.trainable);
    }
    return g;
  }

 private:
  template <typename U>
  friend class BasicGraph;

  struct NodeState {
    std::vector<std::int32_t> argmax;
    std::vector<double> stats;
    double aux = 0.0;
  };

  static NodeAttr spatial_attr(int rank, int k, int s, int p) {
    if (rank != 2 && rank != 3) raise<ArgumentError>("rank must be 2 or 3");
    NodeAttr a;
    a.rank = rank;
    a.k = {k, k, rank == 3 ? k : 1};
    a.s = {s, s, rank == 3 ? s : 1};
    a.p = {p, p, rank == 3 ? p : 0};
    return a;
  }

  static std::vector<T> he_normal(std::size_t n, int fan_in, Rng& rng, double gain2 = 2.0) {
    std::vector<T> w(n);
    const double sd = std::sqrt(gain2 / std::max(1, fan_in));
    for (auto& v : w) v = static_cast<T>(rng.normal(0.0, sd));
    return w;
  }

  int add_param(const std::string& name, std::vector<int> dims, std::vector<T> value,
                bool trainable = true) {
    return params_.add(name, std::move(dims), std::move(value), trainable);
  }

  int add_node(Node n) {
    const int id = static_cast<int>(nodes_.size());
    for (int in : n.inputs) {
      if (in < 0 || in >= id) raise<ArgumentError>("node input ", in, " does not precede node ", id);
    }
    nodes_.push_back(std::move(n));
    return id;
  }

  std::vector<bool> ancestors(int node) const {
    std::vector<bool> mark(nodes_.size(), false);
    mark[static_cast<std::size_t>(node)] = true;
    for (int i = node; i >= 0; --i) {
      if (!mark[static_cast<std::size_t>(i)]) continue;
      for (int in : nodes_[static_cast<std::size_t>(i)].inputs) mark[static_cast<std::size_t>(in)] = true;
    }
    return mark;
  }

  bool is_live(int node) const {
    return node >= 0 && node <= evaluated_ && live_[static_cast<std::size_t>(node)];
  }

  bool needs_grad(int i) const {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.kind == OpKind::kInput) {
      auto it = input_requires_grad_.find(i);
      return it != input_requires_grad_.end() && it->second;
    }
    return true;
  }

  std::span<const T> pv(const Node& n, std::size_t k) const {
    return params_[n.params[k]].value;
  }
  std::span<T> pg(const Node& n, std::size_t k) { return params_[n.params[k]].grad; }
  std::span<T> pvm(const Node& n, std::size_t k) { return params_[n.params[k]].value; }

  const TensorT& in(const Node& n, std::size_t k) const {
    return values_[static_cast<std::size_t>(n.inputs[k])];
  }
  TensorT* gin(const Node& n, std::size_t k) {
    const int id = n.inputs[k];
    if (!needs_grad(id)) return nullptr;
    return &grads_[static_cast<std::size_t>(id)];
  }

  kernels::ConvGeom conv_geom(const Node& n, const Shape& x) const {
    int cin = x.c;
    if (params_[n.params[0]].dims[1] != cin) {
      raise<ShapeError>(op_name(n.kind), " '", n.name, "': expected ", params_[n.params[0]].dims[1],
                        " input channels, got ", cin);
    }
    return kernels::ConvGeom::make(cin, x.sp, n.attr.k, n.attr.s, n.attr.p);
  }

  kernels::ConvGeom tconv_geom(const Node& n, const Shape& x) const {
    const auto& dims = params_[n.params[0]].dims;
    if (dims[0] != x.c) {
      raise<ShapeError>("conv_transpose '", n.name, "': expected ", dims[0], " input channels, got ", x.c);
    }
    Dims3 big{};
    for (int i = 0; i < 3; ++i) {
      big[i] = (x.sp[i] - 1) * n.attr.s[i] + n.attr.k[i] - 2 * n.attr.p[i];
      if (big[i] < 1) raise<ShapeError>("conv_transpose output would be empty");
    }
    auto g = kernels::ConvGeom::make(dims[1], big, n.attr.k, n.attr.s, n.attr.p);
    if (g.out != x.sp) raise<ShapeError>("conv_transpose geometry is not invertible");
    return g;
  }

  void eval(int i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    TensorT& y = values_[static_cast<std::size_t>(i)];
    NodeState& st = states_[static_cast<std::size_t>(i)];
    switch (n.kind) {
      case OpKind::kInput: {
        auto it = feeds_.find(i);
        if (it == feeds_.end()) raise<UsageError>("graph input '", n.name, "' was not fed");
        y = it->second;
        break;
      }
      case OpKind::kConv: {
        const TensorT& x = in(n, 0);
        if (x.shape.rank != n.attr.rank) raise<ShapeError>("conv '", n.name, "': rank mismatch");
        const auto g = conv_geom(n, x.shape);
        kernels::conv_forward<T>(x, pv(n, 0), n.params.size() > 1 ? pv(n, 1) : std::span<const T>{},
                                 n.attr.out_channels, g, y);
        break;
      }
      case OpKind::kConvTranspose: {
        const TensorT& x = in(n, 0);
        const auto g = tconv_geom(n, x.shape);
        kernels::tconv_forward<T>(x, pv(n, 0), n.params.size() > 1 ? pv(n, 1) : std::span<const T>{},
                                  n.attr.out_channels, g, y);
        break;
      }
      case OpKind::kMaxPool:
        check_pool(n, in(n, 0));
        kernels::maxpool_forward(in(n, 0), n.attr.k, n.attr.s, y, st.argmax);
        break;
      case OpKind::kAvgPool:
        check_pool(n, in(n, 0));
        kernels::avgpool_forward(in(n, 0), n.attr.k, n.attr.s, y);
        break;
      case OpKind::kInstanceNorm:
        check_channels(n, in(n, 0));
        kernels::instance_norm_forward<T>(in(n, 0), pv(n, 0), pv(n, 1), n.attr.eps, y, st.stats);
        break;
      case OpKind::kBatchNorm:
        check_channels(n, in(n, 0));
        kernels::batch_norm_forward<T>(in(n, 0), pv(n, 0), pv(n, 1), pvm(n, 2), pvm(n, 3), n.attr.eps,
                                       n.attr.momentum, training_, y, st.stats);
        break;
      case OpKind::kLeakyRelu:
        kernels::leaky_relu_forward(in(n, 0), n.attr.slope, y);
        break;
      case OpKind::kSoftmax:
        kernels::softmax_channels_forward(in(n, 0), y);
        break;
      case OpKind::kConcat: {
        Shape s = in(n, 0).shape;
        int channels = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Shape& sk = in(n, k).shape;
          if (sk.n != s.n || sk.sp != s.sp) {
            raise<ShapeError>("concat: incompatible shapes ", s.str(), " and ", sk.str());
          }
          channels += sk.c;
        }
        s.c = channels;
        y = TensorT(s);
        const std::size_t sp = s.spatial();
        for (int b = 0; b < s.n; ++b) {
          T* dst = y.sample(b);
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const TensorT& xk = in(n, k);
            const T* src = xk.sample(b);
            dst = std::copy(src, src + xk.shape.c * sp, dst);
          }
        }
        break;
      }
      case OpKind::kGlobalAvgPool:
        kernels::global_avgpool_forward(in(n, 0), y);
        break;
      case OpKind::kDense: {
        const TensorT& x = in(n, 0);
        const auto in_features = static_cast<std::size_t>(x.shape.c) * x.shape.spatial();
        if (static_cast<std::size_t>(params_[n.params[0]].dims[1]) != in_features) {
          raise<ShapeError>("dense '", n.name, "': expected ", params_[n.params[0]].dims[1],
                            " features, got ", in_features);
        }
        kernels::dense_forward<T>(x, pv(n, 0), pv(n, 1), n.attr.out_channels, y);
        break;
      }
      case OpKind::kSum: {
        double s = 0.0;
        for (T v : in(n, 0).data) s += v;
        y = TensorT(Shape::scalar(), static_cast<T>(s));
        break;
      }
      case OpKind::kHalfSumSquares: {
        double s = 0.0;
        for (T v : in(n, 0).data) s += static_cast<double>(v) * v;
        y = TensorT(Shape::scalar(), static_cast<T>(0.5 * s));
        break;
      }
      case OpKind::kDiceCe: {
        check_target(n);
        const auto terms = kernels::dice_ce_forward(in(n, 0), in(n, 1), n.attr.w_dice, n.attr.w_ce,
                                                    n.attr.smooth);
        y = TensorT(Shape::scalar(), static_cast<T>(terms.loss));
        break;
      }
      case OpKind::kCrossEntropy: {
        check_target(n);
        y = TensorT(Shape::scalar(), static_cast<T>(kernels::cross_entropy_forward(in(n, 0), in(n, 1))));
        break;
      }
    }
  }

  void check_pool(const Node& n, const TensorT& x) const {
    for (int i = 0; i < 3; ++i) {
      if (x.shape.sp[i] < n.attr.k[i]) raise<ShapeError>("pooling window larger than input ", x.shape.str());
      if (n.attr.exact && x.shape.sp[i] % n.attr.k[i] != 0) {
        raise<ShapeError>("input ", x.shape.str(), " is not divisible by the pooling window ",
                          n.attr.k[i]);
      }
    }
  }

  void check_channels(const Node& n, const TensorT& x) const {
    if (static_cast<int>(params_[n.params[0]].dims[0]) != x.shape.c) {
      raise<ShapeError>(op_name(n.kind), " '", n.name, "': channel mismatch");
    }
  }

  void check_target(const Node& n) const {
    const Shape& p = in(n, 0).shape;
    const Shape& t = in(n, 1).shape;
    if (t.n != p.n || t.c != 1 || t.sp != p.sp) {
      raise<ShapeError>(op_name(n.kind), ": target shape ", t.str(), " does not match ", p.str());
    }
    for (T v : in(n, 1).data) {
      if (v < 0 || static_cast<int>(v) >= p.c) raise<ShapeError>("target class out of range");
    }
  }

  void backprop(int i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    const TensorT& gy = grads_[static_cast<std::size_t>(i)];
    NodeState& st = states_[static_cast<std::size_t>(i)];
    switch (n.kind) {
      case OpKind::kInput:
        break;
      case OpKind::kConv: {
        const TensorT& x = in(n, 0);
        const auto g = conv_geom(n, x.shape);
        kernels::conv_backward<T>(x, pv(n, 0), n.attr.out_channels, g, gy, gin(n, 0), pg(n, 0),
                                  n.params.size() > 1 ? pg(n, 1) : std::span<T>{});
        break;
      }
      case OpKind::kConvTranspose: {
        const TensorT& x = in(n, 0);
        const auto g = tconv_geom(n, x.shape);
        kernels::tconv_backward<T>(x, pv(n, 0), n.attr.out_channels, g, gy, gin(n, 0), pg(n, 0),
                                   n.params.size() > 1 ? pg(n, 1) : std::span<T>{});
        break;
      }
      case OpKind::kMaxPool:
        if (auto* gx = gin(n, 0)) kernels::maxpool_backward(gy, st.argmax, *gx);
        break;
      case OpKind::kAvgPool:
        if (auto* gx = gin(n, 0)) kernels::avgpool_backward(gy, n.attr.k, n.attr.s, *gx);
        break;
      case OpKind::kInstanceNorm:
        kernels::instance_norm_backward<T>(in(n, 0), pv(n, 0), st.stats, gy, gin(n, 0), pg(n, 0), pg(n, 1));
        break;
      case OpKind::kBatchNorm:
        kernels::batch_norm_backward<T>(in(n, 0), pv(n, 0), st.stats, training_, gy, gin(n, 0),
                                        pg(n, 0), pg(n, 1));
        break;
      case OpKind::kLeakyRelu:
        if (auto* gx = gin(n, 0)) kernels::leaky_relu_backward(in(n, 0), n.attr.slope, gy, *gx);
        break;
      case OpKind::kSoftmax:
        if (auto* gx = gin(n, 0)) {
          kernels::softmax_channels_backward(values_[static_cast<std::size_t>(i)], gy, *gx);
        }
        break;
      case OpKind::kConcat: {
        const std::size_t sp = gy.shape.spatial();
        for (int b = 0; b < gy.shape.n; ++b) {
          const T* src = gy.sample(b);
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const int channels = in(n, k).shape.c;
            if (auto* gx = gin(n, k)) {
              T* dst = gx->sample(b);
              for (std::size_t j = 0; j < channels * sp; ++j) dst[j] += src[j];
            }
            src += channels * sp;
          }
        }
        break;
      }
      case OpKind::kGlobalAvgPool:
        if (auto* gx = gin(n, 0)) kernels::global_avgpool_backward(gy, *gx);
        break;
      case OpKind::kDense:
        kernels::dense_backward<T>(in(n, 0), pv(n, 0), n.attr.out_channels, gy, gin(n, 0), pg(n, 0),
                                   pg(n, 1));
        break;
      case OpKind::kSum:
        if (auto* gx = gin(n, 0)) {
          for (auto& v : gx->data) v += gy.data[0];
        }
        break;
      case OpKind::kHalfSumSquares:
        if (auto* gx = gin(n, 0)) {
          const TensorT& x = in(n, 0);
          for (std::size_t j = 0; j < x.size(); ++j) gx->data[j] += gy.data[0] * x.data[j];
        }
        break;
      case OpKind::kDiceCe:
        if (auto* gx = gin(n, 0)) {
          kernels::dice_ce_backward(in(n, 0), in(n, 1), n.attr.w_dice, n.attr.w_ce, n.attr.smooth,
                                    static_cast<double>(gy.data[0]), *gx);
        }
        break;
      case OpKind::kCrossEntropy:
        if (auto* gx = gin(n, 0)) {
          kernels::cross_entropy_backward(in(n, 0), in(n, 1), static_cast<double>(gy.data[0]), *gx);
        }
        break;
    }
  }

  std::vector<Node> nodes_;
  ParamStore<T> params_;
  std::map<std::string, int> inputs_;
  std::map<int, bool> input_requires_grad_;
  std::map<int, TensorT> feeds_;
  std::vector<TensorT> values_;
  std::vector<TensorT> grads_;
  std::vector<NodeState> states_;
  std::vector<bool> live_;
  int output_ = -1;
  int evaluated_ = -1;
  bool training_ = true;
};

using Graph = BasicGraph<float>;

}  // namespace lf::nn
