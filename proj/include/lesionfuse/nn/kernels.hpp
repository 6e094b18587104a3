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

// Forward and backward kernels for the graph primitives. Backward kernels
// accumulate (+=) into gradient buffers; callers zero them.
//
// Convolutions are lowered to im2col + GEMM. All reductions accumulate in
// double regardless of the tensor scalar type.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "lesionfuse/nn/tensor.hpp"

namespace lf::nn::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline int pooled_size(int n, int k, int s, int p) {
  const int num = n + 2 * p - k;
  if (num < 0) return 0;
  return num / s + 1;
}

// Cross-correlation geometry for one sample.
struct ConvGeom {
  int cin = 1;
  Dims3 in{1, 1, 1};
  Dims3 k{1, 1, 1};
  Dims3 s{1, 1, 1};
  Dims3 p{0, 0, 0};
  Dims3 out{1, 1, 1};

  std::size_t kvol() const { return static_cast<std::size_t>(k[0]) * k[1] * k[2]; }
  std::size_t rows() const { return static_cast<std::size_t>(cin) * kvol(); }
  std::size_t in_sp() const { return static_cast<std::size_t>(in[0]) * in[1] * in[2]; }
  std::size_t out_sp() const { return static_cast<std::size_t>(out[0]) * out[1] * out[2]; }

  static ConvGeom make(int cin, const Dims3& in, const Dims3& k, const Dims3& s, const Dims3& p) {
    ConvGeom g{cin, in, k, s, p, {}};
    for (int i = 0; i < 3; ++i) {
      if (s[i] < 1) raise<ShapeError>("conv stride must be >= 1");
      g.out[i] = pooled_size(in[i], k[i], s[i], p[i]);
      if (g.out[i] < 1) {
        raise<ShapeError>("conv output would be empty (n=", in[i], ", k=", k[i], ", p=", p[i], ")");
      }
    }
    return g;
  }
};

// Columns for output planes [oz0, oz1); `col` is rows x ((oz1-oz0)*oy*ox).
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col, int oz0, int oz1) {
  const std::size_t in_sp = g.in_sp();
  const int ox_n = g.out[0], oy_n = g.out[1];
  const std::size_t out_sp = static_cast<std::size_t>(oz1 - oz0) * oy_n * ox_n;
  std::size_t row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + ci * in_sp;
    for (int kz = 0; kz < g.k[2]; ++kz) {
      for (int ky = 0; ky < g.k[1]; ++ky) {
        for (int kx = 0; kx < g.k[0]; ++kx, ++row) {
          T* dst = col + row * out_sp;
          for (int oz = oz0; oz < oz1; ++oz) {
            const int iz = oz * g.s[2] + kz - g.p[2];
            for (int oy = 0; oy < oy_n; ++oy) {
              T* drow = dst + (static_cast<std::size_t>(oz - oz0) * oy_n + oy) * ox_n;
              const int iy = oy * g.s[1] + ky - g.p[1];
              if (iz < 0 || iz >= g.in[2] || iy < 0 || iy >= g.in[1]) {
                std::fill(drow, drow + ox_n, T{});
                continue;
              }
              const T* srow = xc + (static_cast<std::size_t>(iz) * g.in[1] + iy) * g.in[0];
              if (g.s[0] == 1) {
                const int lo = std::clamp(g.p[0] - kx, 0, ox_n);
                const int hi = std::clamp(g.in[0] + g.p[0] - kx, lo, ox_n);
                std::fill(drow, drow + lo, T{});
                std::copy(srow + lo + kx - g.p[0], srow + hi + kx - g.p[0], drow + lo);
                std::fill(drow + hi, drow + ox_n, T{});
              } else {
                for (int ox = 0; ox < ox_n; ++ox) {
                  const int ix = ox * g.s[0] + kx - g.p[0];
                  drow[ox] = (ix >= 0 && ix < g.in[0]) ? srow[ix] : T{};
                }
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters (adds) columns back into x.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x, int oz0, int oz1) {
  const std::size_t in_sp = g.in_sp();
  const int ox_n = g.out[0], oy_n = g.out[1];
  const std::size_t out_sp = static_cast<std::size_t>(oz1 - oz0) * oy_n * ox_n;
  std::size_t row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* xc = x + ci * in_sp;
    for (int kz = 0; kz < g.k[2]; ++kz) {
      for (int ky = 0; ky < g.k[1]; ++ky) {
        for (int kx = 0; kx < g.k[0]; ++kx, ++row) {
          const T* src = col + row * out_sp;
          for (int oz = oz0; oz < oz1; ++oz) {
            const int iz = oz * g.s[2] + kz - g.p[2];
            if (iz < 0 || iz >= g.in[2]) continue;
            for (int oy = 0; oy < oy_n; ++oy) {
              const int iy = oy * g.s[1] + ky - g.p[1];
              if (iy < 0 || iy >= g.in[1]) continue;
              const T* srow = src + (static_cast<std::size_t>(oz - oz0) * oy_n + oy) * ox_n;
              T* drow = xc + (static_cast<std::size_t>(iz) * g.in[1] + iy) * g.in[0];
              if (g.s[0] == 1) {
                const int lo = std::clamp(g.p[0] - kx, 0, ox_n);
                const int hi = std::clamp(g.in[0] + g.p[0] - kx, lo, ox_n);
                for (int ox = lo; ox < hi; ++ox) drow[ox + kx - g.p[0]] += srow[ox];
              } else {
                for (int ox = 0; ox < ox_n; ++ox) {
                  const int ix = ox * g.s[0] + kx - g.p[0];
                  if (ix >= 0 && ix < g.in[0]) drow[ix] += srow[ox];
                }
              }
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Convolution. Weight layout (cout, cin, kx, ky, kz) flattened with the kernel
// offset x-fastest, i.e. a row-major (cout x cin*kvol) matrix.

// Output planes per im2col chunk: the column buffer stays around 1 MiB so
// it is consumed from cache by the following GEMM.
inline int chunk_planes(const ConvGeom& g, std::size_t elem) {
  const std::size_t plane = static_cast<std::size_t>(g.out[0]) * g.out[1] * g.rows() * elem;
  return static_cast<int>(std::clamp<std::size_t>((std::size_t{1} << 20) / std::max<std::size_t>(plane, 1), 1,
                                                  static_cast<std::size_t>(g.out[2])));
}

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
void conv_forward(const BasicTensor<T>& x, std::span<const T> w, std::span<const T> b,
                  int cout, const ConvGeom& g, BasicTensor<T>& y) {
  y = BasicTensor<T>(Shape{x.shape.n, cout, g.out, x.shape.rank});
  const int planes = chunk_planes(g, sizeof(T));
  const auto plane_sp = static_cast<Eigen::Index>(g.out[0]) * g.out[1];
  const auto out_sp = static_cast<Eigen::Index>(g.out_sp());
  const auto rows = static_cast<Eigen::Index>(g.rows());
  std::vector<T> col(static_cast<std::size_t>(rows * plane_sp * planes));
  ConstMatMap<T> wm(w.data(), cout, rows);
  for (int n = 0; n < x.shape.n; ++n) {
    for (int z0 = 0; z0 < g.out[2]; z0 += planes) {
      const int z1 = std::min(g.out[2], z0 + planes);
      const Eigen::Index cols = plane_sp * (z1 - z0);
      im2col(x.sample(n), g, col.data(), z0, z1);
      ConstMatMap<T> cm(col.data(), rows, cols);
      StridedMap<T> ym(y.sample(n) + plane_sp * z0, cout, cols, Eigen::OuterStride<>(out_sp));
      ym.noalias() = wm * cm;
    }
    if (!b.empty()) {
      for (int co = 0; co < cout; ++co) {
        T* r = y.channel(n, co);
        const T bv = b[static_cast<std::size_t>(co)];
        for (Eigen::Index i = 0; i < out_sp; ++i) r[i] += bv;
      }
    }
  }
}

template <typename T>
void conv_backward(const BasicTensor<T>& x, std::span<const T> w, int cout, const ConvGeom& g,
                   const BasicTensor<T>& gy, BasicTensor<T>* gx, std::span<T> gw,
                   std::span<T> gb) {
  const int planes = chunk_planes(g, sizeof(T));
  const auto plane_sp = static_cast<Eigen::Index>(g.out[0]) * g.out[1];
  const auto out_sp = static_cast<Eigen::Index>(g.out_sp());
  const auto rows = static_cast<Eigen::Index>(g.rows());
  std::vector<T> col(static_cast<std::size_t>(rows * plane_sp * planes));
  ConstMatMap<T> wm(w.data(), cout, rows);
  RowMat<T> gw_acc = RowMat<T>::Zero(gw.empty() ? 0 : cout, gw.empty() ? 0 : rows);
  for (int n = 0; n < x.shape.n; ++n) {
    for (int z0 = 0; z0 < g.out[2]; z0 += planes) {
      const int z1 = std::min(g.out[2], z0 + planes);
      const Eigen::Index cols = plane_sp * (z1 - z0);
      ConstStridedMap<T> gym(gy.sample(n) + plane_sp * z0, cout, cols, Eigen::OuterStride<>(out_sp));
      if (!gw.empty()) {
        im2col(x.sample(n), g, col.data(), z0, z1);
        ConstMatMap<T> cm(col.data(), rows, cols);
        gw_acc.noalias() += gym * cm.transpose();
      }
      if (gx) {
        MatMap<T> gcm(col.data(), rows, cols);
        gcm.noalias() = wm.transpose() * gym;
        col2im(col.data(), g, gx->sample(n), z0, z1);
      }
    }
    if (!gb.empty()) {
      for (int co = 0; co < cout; ++co) {
        const T* r = gy.channel(n, co);
        double s = 0.0;
        for (Eigen::Index i = 0; i < out_sp; ++i) s += r[i];
        gb[static_cast<std::size_t>(co)] += static_cast<T>(s);
      }
    }
  }
  if (!gw.empty()) MatMap<T>(gw.data(), cout, rows) += gw_acc;
}

// Transposed convolution: the adjoint of conv_forward (without bias) for the
// same weight. Weight layout (cin_t, cout_t, kx, ky, kz); `g` describes the
// forward conv that maps the transposed output back onto its input.
template <typename T>
void tconv_forward(const BasicTensor<T>& x, std::span<const T> w, std::span<const T> b,
                   int cout, const ConvGeom& g, BasicTensor<T>& y) {
  y = BasicTensor<T>(Shape{x.shape.n, cout, g.in, x.shape.rank});
  const int cin = x.shape.c;
  const int planes = chunk_planes(g, sizeof(T));
  const auto plane_sp = static_cast<Eigen::Index>(g.out[0]) * g.out[1];
  const auto in_sp = static_cast<Eigen::Index>(g.out_sp());
  const auto rows = static_cast<Eigen::Index>(g.rows());
  std::vector<T> col(static_cast<std::size_t>(rows * plane_sp * planes));
  ConstMatMap<T> wm(w.data(), cin, rows);
  for (int n = 0; n < x.shape.n; ++n) {
    for (int z0 = 0; z0 < g.out[2]; z0 += planes) {
      const int z1 = std::min(g.out[2], z0 + planes);
      const Eigen::Index cols = plane_sp * (z1 - z0);
      ConstStridedMap<T> xm(x.sample(n) + plane_sp * z0, cin, cols, Eigen::OuterStride<>(in_sp));
      MatMap<T> cm(col.data(), rows, cols);
      cm.noalias() = wm.transpose() * xm;
      col2im(col.data(), g, y.sample(n), z0, z1);
    }
    if (!b.empty()) {
      for (int co = 0; co < cout; ++co) {
        T* r = y.channel(n, co);
        const T bv = b[static_cast<std::size_t>(co)];
        for (std::size_t i = 0; i < g.in_sp(); ++i) r[i] += bv;
      }
    }
  }
}

template <typename T>
void tconv_backward(const BasicTensor<T>& x, std::span<const T> w, int cout, const ConvGeom& g,
                    const BasicTensor<T>& gy, BasicTensor<T>* gx, std::span<T> gw,
                    std::span<T> gb) {
  const int cin = x.shape.c;
  const int planes = chunk_planes(g, sizeof(T));
  const auto plane_sp = static_cast<Eigen::Index>(g.out[0]) * g.out[1];
  const auto in_sp = static_cast<Eigen::Index>(g.out_sp());
  const auto rows = static_cast<Eigen::Index>(g.rows());
  std::vector<T> col(static_cast<std::size_t>(rows * plane_sp * planes));
  ConstMatMap<T> wm(w.data(), cin, rows);
  RowMat<T> gw_acc = RowMat<T>::Zero(gw.empty() ? 0 : cin, gw.empty() ? 0 : rows);
  for (int n = 0; n < x.shape.n; ++n) {
    for (int z0 = 0; z0 < g.out[2]; z0 += planes) {
      const int z1 = std::min(g.out[2], z0 + planes);
      const Eigen::Index cols = plane_sp * (z1 - z0);
      im2col(gy.sample(n), g, col.data(), z0, z1);
      ConstMatMap<T> cm(col.data(), rows, cols);
      if (!gw.empty()) {
        ConstStridedMap<T> xm(x.sample(n) + plane_sp * z0, cin, cols, Eigen::OuterStride<>(in_sp));
        gw_acc.noalias() += xm * cm.transpose();
      }
      if (gx) {
        StridedMap<T> gxm(gx->sample(n) + plane_sp * z0, cin, cols, Eigen::OuterStride<>(in_sp));
        gxm.noalias() += wm * cm;
      }
    }
    if (!gb.empty()) {
      for (int co = 0; co < cout; ++co) {
        const T* r = gy.channel(n, co);
        double s = 0.0;
        for (std::size_t i = 0; i < g.in_sp(); ++i) s += r[i];
        gb[static_cast<std::size_t>(co)] += static_cast<T>(s);
      }
    }
  }
  if (!gw.empty()) MatMap<T>(gw.data(), cin, rows) += gw_acc;
}

// ---------------------------------------------------------------------------
// Pooling (no padding).

template <typename T>
void maxpool_forward(const BasicTensor<T>& x, const Dims3& k, const Dims3& s, BasicTensor<T>& y,
                     std::vector<std::int32_t>& argmax) {
  Dims3 out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = pooled_size(x.shape.sp[i], k[i], s[i], 0);
    if (out[i] < 1) raise<ShapeError>("maxpool: window larger than input");
  }
  y = BasicTensor<T>(Shape{x.shape.n, x.shape.c, out, x.shape.rank});
  argmax.assign(y.size(), 0);
  const Dims3& in = x.shape.sp;
  std::size_t o = 0;
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const T* xc = x.channel(n, c);
      for (int oz = 0; oz < out[2]; ++oz) {
        for (int oy = 0; oy < out[1]; ++oy) {
          for (int ox = 0; ox < out[0]; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::int32_t best_i = 0;
            for (int kz = 0; kz < k[2]; ++kz) {
              for (int ky = 0; ky < k[1]; ++ky) {
                for (int kx = 0; kx < k[0]; ++kx) {
                  const int ix = ox * s[0] + kx, iy = oy * s[1] + ky, iz = oz * s[2] + kz;
                  const auto idx = static_cast<std::int32_t>(ix + in[0] * (iy + in[1] * iz));
                  if (xc[idx] > best) {
                    best = xc[idx];
                    best_i = idx;
                  }
                }
              }
            }
            y.data[o] = best;
            argmax[o] = best_i;
          }
        }
      }
    }
  }
}

template <typename T>
void maxpool_backward(const BasicTensor<T>& gy, const std::vector<std::int32_t>& argmax,
                      BasicTensor<T>& gx) {
  const std::size_t out_sp = gy.shape.spatial();
  for (int n = 0; n < gy.shape.n; ++n) {
    for (int c = 0; c < gy.shape.c; ++c) {
      const T* g = gy.channel(n, c);
      T* dst = gx.channel(n, c);
      const std::size_t base = (static_cast<std::size_t>(n) * gy.shape.c + c) * out_sp;
      for (std::size_t i = 0; i < out_sp; ++i) dst[argmax[base + i]] += g[i];
    }
  }
}

template <typename T>
void avgpool_forward(const BasicTensor<T>& x, const Dims3& k, const Dims3& s, BasicTensor<T>& y) {
  Dims3 out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = pooled_size(x.shape.sp[i], k[i], s[i], 0);
    if (out[i] < 1) raise<ShapeError>("avgpool: window larger than input");
  }
  y = BasicTensor<T>(Shape{x.shape.n, x.shape.c, out, x.shape.rank});
  const Dims3& in = x.shape.sp;
  const double inv = 1.0 / (static_cast<double>(k[0]) * k[1] * k[2]);
  std::size_t o = 0;
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const T* xc = x.channel(n, c);
      for (int oz = 0; oz < out[2]; ++oz) {
        for (int oy = 0; oy < out[1]; ++oy) {
          for (int ox = 0; ox < out[0]; ++ox, ++o) {
            double acc = 0.0;
            for (int kz = 0; kz < k[2]; ++kz) {
              for (int ky = 0; ky < k[1]; ++ky) {
                for (int kx = 0; kx < k[0]; ++kx) {
                  acc += xc[(ox * s[0] + kx) + in[0] * ((oy * s[1] + ky) + in[1] * (oz * s[2] + kz))];
                }
              }
            }
            y.data[o] = static_cast<T>(acc * inv);
          }
        }
      }
    }
  }
}

template <typename T>
void avgpool_backward(const BasicTensor<T>& gy, const Dims3& k, const Dims3& s, BasicTensor<T>& gx) {
  const Dims3& in = gx.shape.sp;
  const Dims3& out = gy.shape.sp;
  const T inv = static_cast<T>(1.0 / (static_cast<double>(k[0]) * k[1] * k[2]));
  std::size_t o = 0;
  for (int n = 0; n < gy.shape.n; ++n) {
    for (int c = 0; c < gy.shape.c; ++c) {
      T* dst = gx.channel(n, c);
      for (int oz = 0; oz < out[2]; ++oz) {
        for (int oy = 0; oy < out[1]; ++oy) {
          for (int ox = 0; ox < out[0]; ++ox, ++o) {
            const T g = gy.data[o] * inv;
            for (int kz = 0; kz < k[2]; ++kz) {
              for (int ky = 0; ky < k[1]; ++ky) {
                for (int kx = 0; kx < k[0]; ++kx) {
                  dst[(ox * s[0] + kx) + in[0] * ((oy * s[1] + ky) + in[1] * (oz * s[2] + kz))] += g;
                }
              }
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Normalization. `groups` of values share statistics; instance norm groups by
// (n, c), batch norm by c. stats holds (mean, inv_std) pairs per group.

template <typename T>
void instance_norm_forward(const BasicTensor<T>& x, std::span<const T> gamma,
                           std::span<const T> beta, double eps, BasicTensor<T>& y,
                           std::vector<double>& stats) {
  y = BasicTensor<T>(x.shape);
  const std::size_t sp = x.shape.spatial();
  stats.assign(2 * static_cast<std::size_t>(x.shape.n) * x.shape.c, 0.0);
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const T* xc = x.channel(n, c);
      double sum = 0.0;
      for (std::size_t i = 0; i < sp; ++i) sum += xc[i];
      const double mean = sum / static_cast<double>(sp);
      double ss = 0.0;
      for (std::size_t i = 0; i < sp; ++i) ss += (xc[i] - mean) * (xc[i] - mean);
      const double inv_std = 1.0 / std::sqrt(ss / static_cast<double>(sp) + eps);
      const std::size_t gidx = static_cast<std::size_t>(n) * x.shape.c + c;
      stats[2 * gidx] = mean;
      stats[2 * gidx + 1] = inv_std;
      const double ga = gamma.empty() ? 1.0 : gamma[static_cast<std::size_t>(c)];
      const double be = beta.empty() ? 0.0 : beta[static_cast<std::size_t>(c)];
      T* yc = y.channel(n, c);
      for (std::size_t i = 0; i < sp; ++i) {
        yc[i] = static_cast<T>(ga * (xc[i] - mean) * inv_std + be);
      }
    }
  }
}

template <typename T>
void instance_norm_backward(const BasicTensor<T>& x, std::span<const T> gamma,
                            const std::vector<double>& stats, const BasicTensor<T>& gy,
                            BasicTensor<T>* gx, std::span<T> ggamma, std::span<T> gbeta) {
  const std::size_t sp = x.shape.spatial();
  const double inv_n = 1.0 / static_cast<double>(sp);
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const std::size_t gidx = static_cast<std::size_t>(n) * x.shape.c + c;
      const double mean = stats[2 * gidx];
      const double inv_std = stats[2 * gidx + 1];
      const double ga = gamma.empty() ? 1.0 : gamma[static_cast<std::size_t>(c)];
      const T* xc = x.channel(n, c);
      const T* gc = gy.channel(n, c);
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t i = 0; i < sp; ++i) {
        const double xhat = (xc[i] - mean) * inv_std;
        sum_g += gc[i];
        sum_gx += gc[i] * xhat;
      }
      if (!ggamma.empty()) ggamma[static_cast<std::size_t>(c)] += static_cast<T>(sum_gx);
      if (!gbeta.empty()) gbeta[static_cast<std::size_t>(c)] += static_cast<T>(sum_g);
      if (gx) {
        T* dst = gx->channel(n, c);
        const double mg = sum_g * inv_n;
        const double mgx = sum_gx * inv_n;
        for (std::size_t i = 0; i < sp; ++i) {
          const double xhat = (xc[i] - mean) * inv_std;
          dst[i] += static_cast<T>(ga * inv_std * (gc[i] - mg - xhat * mgx));
        }
      }
    }
  }
}

template <typename T>
void batch_norm_forward(const BasicTensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                        std::span<T> running_mean, std::span<T> running_var, double eps,
                        double momentum, bool training, BasicTensor<T>& y,
                        std::vector<double>& stats) {
  y = BasicTensor<T>(x.shape);
  const std::size_t sp = x.shape.spatial();
  const double count = static_cast<double>(sp) * x.shape.n;
  stats.assign(2 * static_cast<std::size_t>(x.shape.c), 0.0);
  for (int c = 0; c < x.shape.c; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    double mean, var;
    if (training) {
      double sum = 0.0;
      for (int n = 0; n < x.shape.n; ++n) {
        const T* xc = x.channel(n, c);
        for (std::size_t i = 0; i < sp; ++i) sum += xc[i];
      }
      mean = sum / count;
      double ss = 0.0;
      for (int n = 0; n < x.shape.n; ++n) {
        const T* xc = x.channel(n, c);
        for (std::size_t i = 0; i < sp; ++i) ss += (xc[i] - mean) * (xc[i] - mean);
      }
      var = ss / count;
      const double unbiased = count > 1 ? ss / (count - 1) : var;
      running_mean[ci] = static_cast<T>((1 - momentum) * running_mean[ci] + momentum * mean);
      running_var[ci] = static_cast<T>((1 - momentum) * running_var[ci] + momentum * unbiased);
    } else {
      mean = running_mean[ci];
      var = running_var[ci];
    }
    const double inv_std = 1.0 / std::sqrt(var + eps);
    stats[2 * ci] = mean;
    stats[2 * ci + 1] = inv_std;
    for (int n = 0; n < x.shape.n; ++n) {
      const T* xc = x.channel(n, c);
      T* yc = y.channel(n, c);
      for (std::size_t i = 0; i < sp; ++i) {
        yc[i] = static_cast<T>(gamma[ci] * (xc[i] - mean) * inv_std + beta[ci]);
      }
    }
  }
}

template <typename T>
void batch_norm_backward(const BasicTensor<T>& x, std::span<const T> gamma,
                         const std::vector<double>& stats, bool training,
                         const BasicTensor<T>& gy, BasicTensor<T>* gx, std::span<T> ggamma,
                         std::span<T> gbeta) {
  const std::size_t sp = x.shape.spatial();
  const double inv_count = 1.0 / (static_cast<double>(sp) * x.shape.n);
  for (int c = 0; c < x.shape.c; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const double mean = stats[2 * ci];
    const double inv_std = stats[2 * ci + 1];
    double sum_g = 0.0, sum_gx = 0.0;
    for (int n = 0; n < x.shape.n; ++n) {
      const T* xc = x.channel(n, c);
      const T* gc = gy.channel(n, c);
      for (std::size_t i = 0; i < sp; ++i) {
        sum_g += gc[i];
        sum_gx += gc[i] * (xc[i] - mean) * inv_std;
      }
    }
    ggamma[ci] += static_cast<T>(sum_gx);
    gbeta[ci] += static_cast<T>(sum_g);
    if (!gx) continue;
    const double mg = training ? sum_g * inv_count : 0.0;
    const double mgx = training ? sum_gx * inv_count : 0.0;
    for (int n = 0; n < x.shape.n; ++n) {
      const T* xc = x.channel(n, c);
      const T* gc = gy.channel(n, c);
      T* dst = gx->channel(n, c);
      for (std::size_t i = 0; i < sp; ++i) {
        const double xhat = (xc[i] - mean) * inv_std;
        dst[i] += static_cast<T>(gamma[ci] * inv_std * (gc[i] - mg - xhat * mgx));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Pointwise and channel ops.

template <typename T>
void leaky_relu_forward(const BasicTensor<T>& x, double slope, BasicTensor<T>& y) {
  y = BasicTensor<T>(x.shape);
  const T a = static_cast<T>(slope);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > T{} ? x.data[i] : a * x.data[i];
}

template <typename T>
void leaky_relu_backward(const BasicTensor<T>& x, double slope, const BasicTensor<T>& gy,
                         BasicTensor<T>& gx) {
  const T a = static_cast<T>(slope);
  for (std::size_t i = 0; i < x.size(); ++i) {
    gx.data[i] += x.data[i] > T{} ? gy.data[i] : a * gy.data[i];
  }
}

template <typename T>
void softmax_channels_forward(const BasicTensor<T>& x, BasicTensor<T>& y) {
  y = BasicTensor<T>(x.shape);
  const std::size_t sp = x.shape.spatial();
  const int C = x.shape.c;
  std::vector<double> e(static_cast<std::size_t>(C));
  for (int n = 0; n < x.shape.n; ++n) {
    const T* xs = x.sample(n);
    T* ys = y.sample(n);
    for (std::size_t i = 0; i < sp; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < C; ++c) m = std::max(m, static_cast<double>(xs[c * sp + i]));
      double z = 0.0;
      for (int c = 0; c < C; ++c) {
        e[static_cast<std::size_t>(c)] = std::exp(xs[c * sp + i] - m);
        z += e[static_cast<std::size_t>(c)];
      }
      for (int c = 0; c < C; ++c) ys[c * sp + i] = static_cast<T>(e[static_cast<std::size_t>(c)] / z);
    }
  }
}

template <typename T>
void softmax_channels_backward(const BasicTensor<T>& y, const BasicTensor<T>& gy,
                               BasicTensor<T>& gx) {
  const std::size_t sp = y.shape.spatial();
  const int C = y.shape.c;
  for (int n = 0; n < y.shape.n; ++n) {
    const T* ys = y.sample(n);
    const T* gs = gy.sample(n);
    T* dst = gx.sample(n);
    for (std::size_t i = 0; i < sp; ++i) {
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += static_cast<double>(ys[c * sp + i]) * gs[c * sp + i];
      for (int c = 0; c < C; ++c) {
        dst[c * sp + i] += static_cast<T>(ys[c * sp + i] * (gs[c * sp + i] - dot));
      }
    }
  }
}

template <typename T>
void global_avgpool_forward(const BasicTensor<T>& x, BasicTensor<T>& y) {
  y = BasicTensor<T>(Shape{x.shape.n, x.shape.c, {1, 1, 1}, x.shape.rank});
  const std::size_t sp = x.shape.spatial();
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const T* xc = x.channel(n, c);
      double s = 0.0;
      for (std::size_t i = 0; i < sp; ++i) s += xc[i];
      y.data[static_cast<std::size_t>(n) * x.shape.c + c] = static_cast<T>(s / static_cast<double>(sp));
    }
  }
}

template <typename T>
void global_avgpool_backward(const BasicTensor<T>& gy, BasicTensor<T>& gx) {
  const std::size_t sp = gx.shape.spatial();
  const double inv = 1.0 / static_cast<double>(sp);
  for (int n = 0; n < gx.shape.n; ++n) {
    for (int c = 0; c < gx.shape.c; ++c) {
      const T g = static_cast<T>(gy.data[static_cast<std::size_t>(n) * gx.shape.c + c] * inv);
      T* dst = gx.channel(n, c);
      for (std::size_t i = 0; i < sp; ++i) dst[i] += g;
    }
  }
}

// Fully connected over the flattened (c, spatial) features of each sample.
template <typename T>
void dense_forward(const BasicTensor<T>& x, std::span<const T> w, std::span<const T> b, int cout,
                   BasicTensor<T>& y) {
  const auto in = static_cast<Eigen::Index>(x.shape.c * x.shape.spatial());
  y = BasicTensor<T>(Shape{x.shape.n, cout, {1, 1, 1}, x.shape.rank});
  ConstMatMap<T> xm(x.data.data(), x.shape.n, in);
  ConstMatMap<T> wm(w.data(), cout, in);
  MatMap<T> ym(y.data.data(), x.shape.n, cout);
  ym.noalias() = xm * wm.transpose();
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < cout; ++c) ym(n, c) += b[static_cast<std::size_t>(c)];
  }
}

template <typename T>
void dense_backward(const BasicTensor<T>& x, std::span<const T> w, int cout,
                    const BasicTensor<T>& gy, BasicTensor<T>* gx, std::span<T> gw,
                    std::span<T> gb) {
  const auto in = static_cast<Eigen::Index>(x.shape.c * x.shape.spatial());
  ConstMatMap<T> xm(x.data.data(), x.shape.n, in);
  ConstMatMap<T> wm(w.data(), cout, in);
  ConstMatMap<T> gym(gy.data.data(), x.shape.n, cout);
  MatMap<T> gwm(gw.data(), cout, in);
  gwm.noalias() += gym.transpose() * xm;
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < cout; ++c) gb[static_cast<std::size_t>(c)] += gym(n, c);
  }
  if (gx) {
    MatMap<T> gxm(gx->data.data(), x.shape.n, in);
    gxm.noalias() += gym * wm;
  }
}

// ---------------------------------------------------------------------------
// Losses. Targets are (N, 1, spatial) tensors holding class indices.

inline constexpr double kProbFloor = 1e-12;

struct DiceCeTerms {
  double dice = 0.0;      // soft Dice on the lesion channel
  double ce = 0.0;        // mean cross-entropy
  double loss = 0.0;
};

template <typename T>
DiceCeTerms dice_ce_forward(const BasicTensor<T>& probs, const BasicTensor<T>& target,
                            double w_dice, double w_ce, double smooth) {
  const std::size_t sp = probs.shape.spatial();
  const int C = probs.shape.c;
  double inter = 0.0, psum = 0.0, gsum = 0.0, ce = 0.0;
  for (int n = 0; n < probs.shape.n; ++n) {
    const T* ps = probs.sample(n);
    const T* ts = target.sample(n);
    for (std::size_t i = 0; i < sp; ++i) {
      const int cls = static_cast<int>(ts[i]);
      const double p1 = C > 1 ? ps[sp + i] : ps[i];
      const double t1 = cls == 1 ? 1.0 : 0.0;
      inter += p1 * t1;
      psum += p1;
      gsum += t1;
      ce -= std::log(std::max(static_cast<double>(ps[static_cast<std::size_t>(cls) * sp + i]), kProbFloor));
    }
  }
  DiceCeTerms out;
  out.dice = (2.0 * inter + smooth) / (psum + gsum + smooth);
  out.ce = ce / (static_cast<double>(probs.shape.n) * sp);
  out.loss = w_dice * (1.0 - out.dice) + w_ce * out.ce;
  return out;
}

template <typename T>
void dice_ce_backward(const BasicTensor<T>& probs, const BasicTensor<T>& target, double w_dice,
                      double w_ce, double smooth, double upstream, BasicTensor<T>& gprobs) {
  const std::size_t sp = probs.shape.spatial();
  const int C = probs.shape.c;
  double inter = 0.0, psum = 0.0, gsum = 0.0;
  for (int n = 0; n < probs.shape.n; ++n) {
    const T* ps = probs.sample(n);
    const T* ts = target.sample(n);
    for (std::size_t i = 0; i < sp; ++i) {
      const double p1 = C > 1 ? ps[sp + i] : ps[i];
      const double t1 = static_cast<int>(ts[i]) == 1 ? 1.0 : 0.0;
      inter += p1 * t1;
      psum += p1;
      gsum += t1;
    }
  }
  const double num = 2.0 * inter + smooth;
  const double den = psum + gsum + smooth;
  const double m = static_cast<double>(probs.shape.n) * sp;
  const std::size_t lesion_c = C > 1 ? 1 : 0;
  for (int n = 0; n < probs.shape.n; ++n) {
    const T* ps = probs.sample(n);
    const T* ts = target.sample(n);
    T* gs = gprobs.sample(n);
    for (std::size_t i = 0; i < sp; ++i) {
      const int cls = static_cast<int>(ts[i]);
      const double t1 = cls == 1 ? 1.0 : 0.0;
      const double ddice = (2.0 * t1 * den - num) / (den * den);
      gs[lesion_c * sp + i] += static_cast<T>(-upstream * w_dice * ddice);
      const double p = ps[static_cast<std::size_t>(cls) * sp + i];
      if (p > kProbFloor) {
        gs[static_cast<std::size_t>(cls) * sp + i] += static_cast<T>(-upstream * w_ce / (m * p));
      }
    }
  }
}

template <typename T>
double cross_entropy_forward(const BasicTensor<T>& probs, const BasicTensor<T>& target) {
  const std::size_t sp = probs.shape.spatial();
  double ce = 0.0;
  for (int n = 0; n < probs.shape.n; ++n) {
    const T* ps = probs.sample(n);
    const T* ts = target.sample(n);
    for (std::size_t i = 0; i < sp; ++i) {
      const auto cls = static_cast<std::size_t>(ts[i]);
      ce -= std::log(std::max(static_cast<double>(ps[cls * sp + i]), kProbFloor));
    }
  }
  return ce / (static_cast<double>(probs.shape.n) * sp);
}

template <typename T>
void cross_entropy_backward(const BasicTensor<T>& probs, const BasicTensor<T>& target,
                            double upstream, BasicTensor<T>& gprobs) {
  const std::size_t sp = probs.shape.spatial();
  const double m = static_cast<double>(probs.shape.n) * sp;
  for (int n = 0; n < probs.shape.n; ++n) {
    const T* ps = probs.sample(n);
    const T* ts = target.sample(n);
    T* gs = gprobs.sample(n);
    for (std::size_t i = 0; i < sp; ++i) {
      const auto cls = static_cast<std::size_t>(ts[i]);
      const double p = ps[cls * sp + i];
      if (p > kProbFloor) gs[cls * sp + i] += static_cast<T>(-upstream / (m * p));
    }
  }
}

}  // namespace lf::nn::kernels
