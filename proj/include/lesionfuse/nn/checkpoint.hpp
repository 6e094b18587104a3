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

// Flat little-endian parameter checkpoints:
//   u32 count, then per parameter: u32 name length, name bytes, u32 rank,
//   rank x u32 dims, float32 payload.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lesionfuse/nn/tensor.hpp"

namespace lf::nn {

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) raise<FormatError>("truncated checkpoint ", path);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) raise<IoError>("cannot open ", path, " for writing");
  detail::put_u32(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.dims.size()));
    for (int d : p.dims) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (T v : p.value) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(os, bits);
    }
  }
  if (!os) raise<IoError>("failed writing ", path);
}

// Loads values into an existing store; every stored parameter must exist with
// identical dims and every store parameter must be present.
template <typename T>
void load_checkpoint(ParamStore<T>& store, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise<IoError>("cannot open ", path);
  const std::uint32_t count = detail::get_u32(is, path);
  if (count != store.size()) {
    raise<FormatError>("checkpoint ", path, " holds ", count, " parameters, model has ", store.size());
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::get_u32(is, path);
    if (len > 4096) raise<FormatError>("implausible parameter name length in ", path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) raise<FormatError>("truncated checkpoint ", path);
    const int id = store.find(name);
    if (id < 0) raise<FormatError>("checkpoint parameter '", name, "' not in model");
    auto& p = store[id];
    const std::uint32_t rank = detail::get_u32(is, path);
    if (rank != p.dims.size()) raise<FormatError>("rank mismatch for '", name, "'");
    for (std::uint32_t r = 0; r < rank; ++r) {
      if (detail::get_u32(is, path) != static_cast<std::uint32_t>(p.dims[r])) {
        raise<FormatError>("dims mismatch for '", name, "'");
      }
    }
    for (auto& v : p.value) {
      const std::uint32_t bits = detail::get_u32(is, path);
      float f;
      std::memcpy(&f, &bits, 4);
      v = static_cast<T>(f);
    }
  }
}

}  // namespace lf::nn
