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
#include <array>
#include <cstddef>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lesionfuse/core/errors.hpp"

namespace lf::nn {

using Dims3 = std::array<int, 3>;

// Activation layout (batch, channels, x, y, z), x fastest. Two-dimensional
// tensors keep z == 1 and report rank 2.
struct Shape {
  int n = 1;
  int c = 1;
  Dims3 sp{1, 1, 1};
  int rank = 3;

  std::size_t spatial() const {
    return static_cast<std::size_t>(sp[0]) * sp[1] * sp[2];
  }
  std::size_t size() const { return static_cast<std::size_t>(n) * c * spatial(); }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream oss;
    oss << n << "x" << c << "x(" << sp[0] << "," << sp[1];
    if (rank == 3) oss << "," << sp[2];
    oss << ")";
    return oss.str();
  }

  static Shape scalar() { return {1, 1, {1, 1, 1}, 3}; }
  static Shape make3d(int n, int c, int x, int y, int z) { return {n, c, {x, y, z}, 3}; }
  static Shape make2d(int n, int c, int x, int y) { return {n, c, {x, y, 1}, 2}; }
};

template <typename T>
struct BasicTensor {
  Shape shape{};
  std::vector<T> data;

  BasicTensor() = default;
  explicit BasicTensor(const Shape& s, T fill = T{}) : shape(s), data(s.size(), fill) {}
  BasicTensor(const Shape& s, std::vector<T> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) {
      raise<ShapeError>("tensor payload ", data.size(), " does not match shape ", shape.str());
    }
  }

  std::size_t size() const { return data.size(); }
  T* channel(int n, int c) { return data.data() + (static_cast<std::size_t>(n) * shape.c + c) * shape.spatial(); }
  const T* channel(int n, int c) const {
    return data.data() + (static_cast<std::size_t>(n) * shape.c + c) * shape.spatial();
  }
  T* sample(int n) { return data.data() + static_cast<std::size_t>(n) * shape.c * shape.spatial(); }
  const T* sample(int n) const {
    return data.data() + static_cast<std::size_t>(n) * shape.c * shape.spatial();
  }
  T item() const {
    if (data.size() != 1) raise<ShapeError>("item() on non-scalar tensor ", shape.str());
    return data[0];
  }

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

using Tensor = BasicTensor<float>;

// Learnable (or buffered, e.g. running statistics) array with its logical
// dims; kernels interpret the flat payload.
template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> dims;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  std::size_t size() const { return value.size(); }
};

template <typename T>
class ParamStore {
 public:
  int add(const std::string& name, std::vector<int> dims, std::vector<T> value,
          bool trainable = true) {
    if (index_.count(name)) raise<ArgumentError>("duplicate parameter name '", name, "'");
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    if (n != value.size()) raise<ShapeError>("parameter '", name, "' payload/dims mismatch");
    const int id = static_cast<int>(params_.size());
    Parameter<T> p{name, std::move(dims), std::move(value), {}, trainable};
    p.grad.assign(p.value.size(), T{});
    params_.push_back(std::move(p));
    index_[name] = id;
    return id;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Parameter<T>& operator[](int id) { return params_[static_cast<std::size_t>(id)]; }
  const Parameter<T>& operator[](int id) const { return params_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T{});
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (p.trainable) n += p.size();
    }
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, int> index_;
};

}  // namespace lf::nn
