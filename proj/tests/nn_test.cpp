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

#include "lesionfuse/nn/checkpoint.hpp"
#include "lesionfuse/nn/gradcheck.hpp"
#include "lesionfuse/nn/graph.hpp"

namespace lf::nn {
namespace {

template <typename T>
BasicTensor<T> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Direct nested-loop cross-correlation, used as the reference for the
// im2col path.
double naive_conv_at(const Tensor& x, const std::vector<float>& w, int cin, int k, int p, int s,
                     int co, int ox, int oy, int oz) {
  double acc = 0.0;
  for (int ci = 0; ci < cin; ++ci) {
    for (int kz = 0; kz < k; ++kz) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s + kx - p, iy = oy * s + ky - p, iz = oz * s + kz - p;
          if (ix < 0 || iy < 0 || iz < 0 || ix >= x.shape.sp[0] || iy >= x.shape.sp[1] ||
              iz >= x.shape.sp[2]) {
            continue;
          }
          const double xv = x.channel(0, ci)[ix + x.shape.sp[0] * (iy + x.shape.sp[1] * iz)];
          const double wv = w[static_cast<std::size_t>((((co * cin + ci) * k + kz) * k + ky) * k + kx)];
          acc += xv * wv;
        }
      }
    }
  }
  return acc;
}

TEST(Conv, OutputSizeFormula) {
  EXPECT_EQ(kernels::pooled_size(5, 3, 1, 0), 3);
  EXPECT_EQ(kernels::pooled_size(5, 3, 2, 1), 3);
  Rng rng(1);
  Graph g;
  const int x = g.input("x");
  const int y = g.conv(x, "c", 1, 1, 3, 3, rng, 2, 1);
  g.feed("x", Tensor(Shape::make3d(1, 1, 5, 5, 5), 1.0f));
  EXPECT_EQ(g.forward(y).shape, Shape::make3d(1, 1, 3, 3, 3));
}

TEST(Conv, IdentityKernelReproducesInput) {
  Rng rng(2);
  Graph g;
  const int x = g.input("x");
  const int y = g.conv(x, "c", 1, 1, 3, 3, rng);
  auto& w = g.params()[g.params().find("c.weight")].value;
  std::fill(w.begin(), w.end(), 0.0f);
  w[13] = 1.0f;
  const Tensor in = random_tensor<float>(Shape::make3d(1, 1, 3, 3, 3), rng);
  g.feed("x", in);
  EXPECT_EQ(g.forward(y).data, in.data);
}

TEST(Conv, MatchesNaiveCorrelation) {
  Rng rng(3);
  for (int stride : {1, 2}) {
    Graph g;
    const int x = g.input("x");
    const int y = g.conv(x, "c", 2, 3, 3, 3, rng, stride, 1);
    const Tensor in = random_tensor<float>(Shape::make3d(1, 2, 6, 5, 4), rng);
    g.feed("x", in);
    const Tensor& out = g.forward(y);
    const auto& w = g.params()[g.params().find("c.weight")].value;
    for (int co = 0; co < 3; ++co) {
      for (int oz = 0; oz < out.shape.sp[2]; ++oz) {
        for (int oy = 0; oy < out.shape.sp[1]; ++oy) {
          for (int ox = 0; ox < out.shape.sp[0]; ++ox) {
            const double ref = naive_conv_at(in, w, 2, 3, 1, stride, co, ox, oy, oz);
            const float got =
                out.channel(0, co)[ox + out.shape.sp[0] * (oy + out.shape.sp[1] * oz)];
            EXPECT_NEAR(got, ref, 1e-5);
          }
        }
      }
    }
  }
}

TEST(Conv, ChannelMismatchIsShapeError) {
  Rng rng(4);
  Graph g;
  const int x = g.input("x");
  const int y = g.conv(x, "c", 2, 1, 3, 3, rng);
  g.feed("x", Tensor(Shape::make3d(1, 3, 4, 4, 4)));
  EXPECT_THROW(g.forward(y), ShapeError);
}

TEST(ConvTranspose, OutputSize) {
  Rng rng(5);
  Graph g;
  const int x = g.input("x");
  const int y = g.conv_transpose(x, "up", 1, 1, 2, 3, rng);
  g.feed("x", Tensor(Shape::make3d(1, 1, 3, 3, 3), 1.0f));
  EXPECT_EQ(g.forward(y).shape, Shape::make3d(1, 1, 6, 6, 6));
}

TEST(ConvTranspose, IsAdjointOfConv) {
  Rng rng(6);
  for (int stride : {1, 2}) {
    Graph g;
    const int x = g.input("x");
    const int y = g.input("y");
    const int c = g.conv(x, "c", 1, 1, 3, 3, rng, stride, 1, false);
    const int t = g.conv_transpose_shared(y, "ct", g.params().find("c.weight"), 1, 3, stride, 1, 3);
    // With stride 2 an odd size keeps the transposed output size unambiguous.
    const int n = stride == 1 ? 4 : 5;
    const Tensor xv = random_tensor<float>(Shape::make3d(1, 1, n, n, n), rng);
    g.feed("x", xv);
    const Tensor cx = g.forward(c);
    const Tensor yv = random_tensor<float>(cx.shape, rng);
    g.feed("y", yv);
    const Tensor ty = g.forward(t);
    ASSERT_EQ(ty.shape, xv.shape);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += static_cast<double>(cx.data[i]) * yv.data[i];
    for (std::size_t i = 0; i < xv.size(); ++i) rhs += static_cast<double>(xv.data[i]) * ty.data[i];
    EXPECT_NEAR(lhs, rhs, 1e-4);
  }
}

TEST(ConvTranspose, UnitKernelIsIdentity) {
  Rng rng(7);
  Graph g;
  const int x = g.input("x");
  const int y = g.conv_transpose(x, "up", 1, 1, 1, 3, rng);
  g.params()[g.params().find("up.weight")].value[0] = 1.0f;
  const Tensor in = random_tensor<float>(Shape::make3d(1, 1, 3, 2, 2), rng);
  g.feed("x", in);
  EXPECT_EQ(g.forward(y).data, in.data);
}

TEST(Pooling, MaxOfTwoByTwo) {
  Graph g;
  const int x = g.input("x");
  const int y = g.max_pool(x, 2, 2);
  g.feed("x", Tensor(Shape::make2d(1, 1, 2, 2), std::vector<float>{1, 2, 3, 4}));
  const Tensor& out = g.forward(y);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.data[0], 4.0f);
}

TEST(Pointwise, SoftmaxSumsToOneAndReluIsComplementary) {
  Rng rng(8);
  Graph g;
  const int x = g.input("x");
  const int s = g.softmax(x);
  const int r = g.relu(x);
  const Tensor in = random_tensor<float>(Shape::make3d(2, 3, 4, 3, 2), rng, -5, 5);
  g.feed("x", in);
  const Tensor sm = g.forward(s);
  const std::size_t sp = sm.shape.spatial();
  for (int n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < sp; ++i) {
      double sum = 0.0;
      for (int c = 0; c < 3; ++c) sum += sm.channel(n, c)[i];
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
  const Tensor pos = g.forward(r);
  Tensor neg_in = in;
  for (auto& v : neg_in.data) v = -v;
  g.feed("x", neg_in);
  const Tensor neg = g.forward(r);
  for (std::size_t i = 0; i < pos.size(); ++i) EXPECT_EQ(pos.data[i] * neg.data[i], 0.0f);
}

TEST(Pointwise, InstanceNormStandardizesChannels) {
  Rng rng(9);
  Graph g;
  const int x = g.input("x");
  const int y = g.instance_norm(x, "in", 2);
  g.feed("x", random_tensor<float>(Shape::make3d(2, 2, 4, 4, 4), rng, 0, 10));
  const Tensor out = g.forward(y);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 2; ++c) {
      double s = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < 64; ++i) s += out.channel(n, c)[i];
      for (std::size_t i = 0; i < 64; ++i) ss += std::pow(out.channel(n, c)[i] - s / 64, 2);
      EXPECT_NEAR(s / 64, 0.0, 1e-5);
      EXPECT_NEAR(ss / 64, 1.0, 1e-3);
    }
  }
}

TEST(Concat, StacksChannels) {
  Graph g;
  const int a = g.input("a");
  const int b = g.input("b");
  const int c = g.concat({a, b});
  g.feed("a", Tensor(Shape::make2d(1, 1, 2, 1), std::vector<float>{1, 2}));
  g.feed("b", Tensor(Shape::make2d(1, 2, 2, 1), std::vector<float>{3, 4, 5, 6}));
  EXPECT_EQ(g.forward(c).data, (std::vector<float>{1, 2, 3, 4, 5, 6}));
}

TEST(Backward, SumAndHalfSquares) {
  Rng rng(10);
  Graph g;
  const int x = g.input("x", true);
  const int s = g.sum(x);
  const int h = g.half_sum_squares(x);
  const Tensor in = random_tensor<float>(Shape::make3d(1, 2, 3, 3, 3), rng);
  g.feed("x", in);
  g.forward(s);
  g.backward(s);
  for (float v : g.grad(x).data) EXPECT_EQ(v, 1.0f);
  g.forward(h);
  g.backward(h);
  EXPECT_EQ(g.grad(x).data, in.data);
}

TEST(Backward, NonScalarLossIsUsageError) {
  Graph g;
  const int x = g.input("x");
  const int r = g.relu(x);
  g.feed("x", Tensor(Shape::make3d(1, 1, 2, 2, 2)));
  g.forward(r);
  EXPECT_THROW(g.backward(r), UsageError);
}

TEST(GradCheck, LinearGraphIsExact) {
  Rng rng(11);
  BasicGraph<double> g;
  const int x = g.input("x");
  const int c = g.conv(x, "c", 1, 2, 3, 3, rng);
  const int l = g.sum(c);
  g.feed("x", random_tensor<double>(Shape::make3d(1, 1, 4, 4, 4), rng));
  EXPECT_LE(gradient_check(g, l, 1e-3).max_rel_error, 1e-5);
}

// Inputs with |v| < 0.05 are pushed away from 0 so finite differences do
// not straddle the relu kink at the first layer.
template <typename T>
BasicTensor<T> nudged(BasicTensor<T> t) {
  for (auto& v : t.data) {
    if (std::abs(v) < 0.05) v = v < 0 ? T(-0.05) : T(0.05);
  }
  return t;
}

TEST(GradCheck, TwoLayerConvRelu) {
  Rng rng(12);
  BasicGraph<double> g;
  const int x = g.input("x");
  const int c1 = g.conv(x, "c1", 2, 3, 3, 3, rng);
  const int r = g.relu(c1);
  const int c2 = g.conv(r, "c2", 3, 2, 3, 3, rng);
  const int l = g.half_sum_squares(c2);
  g.feed("x", nudged(random_tensor<double>(Shape::make3d(1, 2, 8, 8, 8), rng)));
  const auto res = gradient_check(g, l, 1e-5, 64);
  EXPECT_GE(res.checked, 32u);
  EXPECT_LE(res.max_rel_error, 1e-2);
}

TEST(GradCheck, ConvInstanceNormSoftmaxCrossEntropy) {
  Rng rng(13);
  BasicGraph<double> g;
  const int x = g.input("x");
  const int t = g.input("t");
  const int c = g.conv(x, "c", 1, 2, 3, 3, rng);
  const int n = g.instance_norm(c, "in", 2);
  const int s = g.softmax(n);
  const int l = g.cross_entropy(s, t);
  g.feed("x", random_tensor<double>(Shape::make3d(2, 1, 4, 4, 4), rng));
  BasicTensor<double> tgt(Shape::make3d(2, 1, 4, 4, 4));
  for (auto& v : tgt.data) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
  g.feed("t", tgt);
  EXPECT_LE(gradient_check(g, l, 1e-5, 64).max_rel_error, 1e-2);
}

TEST(GradCheck, DenseBatchNormPoolingDiceCe) {
  Rng rng(14);
  BasicGraph<double> g;
  const int x = g.input("x");
  const int t = g.input("t");
  const int c = g.conv(x, "c", 1, 3, 3, 2, rng);
  const int b = g.batch_norm(c, "bn", 3);
  const int a = g.leaky_relu(b, 0.01);
  const int p = g.avg_pool(a, 2, 2);
  const int q = g.global_avg_pool(p);
  const int d = g.dense(q, "fc", 3, 2, rng);
  const int s = g.softmax(d);
  const int l = g.dice_ce(s, t, 1.0, 1.0);
  g.feed("x", random_tensor<double>(Shape::make2d(3, 1, 6, 6), rng));
  g.feed("t", BasicTensor<double>(Shape::make2d(3, 1, 1, 1), std::vector<double>{1, 0, 1}));
  EXPECT_LE(gradient_check(g, l, 1e-5, 64).max_rel_error, 1e-2);
}

TEST(GradCheck, MaxPoolAndTransposedConv) {
  Rng rng(15);
  BasicGraph<double> g;
  const int x = g.input("x");
  const int c = g.conv(x, "c", 1, 2, 3, 3, rng);
  const int m = g.max_pool(c, 2, 3);
  const int u = g.conv_transpose(m, "up", 2, 2, 2, 3, rng);
  const int cat = g.concat({u, c});
  const int l = g.half_sum_squares(cat);
  g.feed("x", random_tensor<double>(Shape::make3d(1, 1, 4, 4, 4), rng));
  EXPECT_LE(gradient_check(g, l, 1e-5, 64).max_rel_error, 1e-2);
}

TEST(Checkpoint, RoundTripsParameters) {
  Rng rng(16);
  Graph a;
  const int x = a.input("x");
  a.batch_norm(a.conv(x, "c", 2, 3, 3, 3, rng), "bn", 3);
  const auto path = std::filesystem::temp_directory_path() / "lf_nn_checkpoint.bin";
  save_checkpoint(a.params(), path.string());
  // count + per parameter (len, name, rank, dims, payload)
  const std::size_t expected = 4 + (4 + 8 + 4 + 5 * 4 + 162 * 4) + (4 + 6 + 4 + 4 + 12) +
                               (4 + 8 + 4 + 4 + 12) + (4 + 7 + 4 + 4 + 12) +
                               (4 + 15 + 4 + 4 + 12) + (4 + 14 + 4 + 4 + 12);
  EXPECT_EQ(std::filesystem::file_size(path), expected);
  Rng other(99);
  Graph b;
  const int xb = b.input("x");
  b.batch_norm(b.conv(xb, "c", 2, 3, 3, 3, other), "bn", 3);
  load_checkpoint(b.params(), path.string());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(a.params()[static_cast<int>(i)].value, b.params()[static_cast<int>(i)].value);
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace lf::nn
