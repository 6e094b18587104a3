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

// Minimal NIfTI-1 support: uncompressed single-file (.nii, magic "n+1"),
// three spatial dimensions, uint8 / int16 / float32 payloads. Files are
// always written as little-endian float32 at vox_offset 352.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lesionfuse/core/grid.hpp"

namespace lf::nifti {

inline constexpr int kHeaderSize = 348;
inline constexpr int kVoxOffset = 352;

enum DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kFloat32 = 16,
};

namespace detail {

// Header field offsets.
enum : int {
  kOffSizeofHdr = 0,
  kOffDim = 40,
  kOffDatatype = 70,
  kOffBitpix = 72,
  kOffPixdim = 76,
  kOffVoxOffset = 108,
  kOffSclSlope = 112,
  kOffSclInter = 116,
  kOffXyztUnits = 123,
  kOffQformCode = 252,
  kOffSformCode = 254,
  kOffQuatern = 256,
  kOffQoffset = 268,
  kOffSrow = 280,
  kOffMagic = 344,
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T get(int offset) const {
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_ + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
  }

 private:
  const std::uint8_t* bytes_;
  bool swap_;
};

template <typename T>
void put_le(std::vector<std::uint8_t>& buf, int offset, T value) {
  auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(raw.begin(), raw.end());
  }
  std::memcpy(buf.data() + offset, raw.data(), sizeof(T));
}

}  // namespace detail

inline Volume read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise<IoError>("cannot open ", path.string());
  std::vector<std::uint8_t> header(kHeaderSize);
  if (!in.read(reinterpret_cast<char*>(header.data()), kHeaderSize)) {
    raise<FormatError>(path.string(), ": truncated NIfTI header");
  }
  if (std::memcmp(header.data() + detail::kOffMagic, "n+1\0", 4) != 0) {
    raise<FormatError>(path.string(), ": bad magic (expected single-file n+1)");
  }
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, header.data(), 4);
  bool swap = false;
  if (sizeof_hdr != kHeaderSize) {
    if (__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)) != kHeaderSize) {
      raise<FormatError>(path.string(), ": sizeof_hdr is ", sizeof_hdr);
    }
    swap = true;
  }
  const detail::ByteReader hdr(header.data(), swap);

  const auto ndim = hdr.get<std::int16_t>(detail::kOffDim);
  if (ndim != 3) {
    raise<UnsupportedError>(path.string(), ": only 3D images are supported, dim[0]=",
                            ndim);
  }
  Index3 dims{};
  for (int i = 0; i < 3; ++i) {
    dims[i] = hdr.get<std::int16_t>(detail::kOffDim + 2 * (i + 1));
    if (dims[i] < 1) raise<FormatError>(path.string(), ": non-positive dim");
  }
  const auto datatype = hdr.get<std::int16_t>(detail::kOffDatatype);
  int bytes_per_voxel = 0;
  switch (datatype) {
    case kUInt8: bytes_per_voxel = 1; break;
    case kInt16: bytes_per_voxel = 2; break;
    case kFloat32: bytes_per_voxel = 4; break;
    default:
      raise<UnsupportedError>(path.string(), ": unsupported datatype ", datatype);
  }

  Geometry geom;
  for (int i = 0; i < 3; ++i) {
    geom.spacing[i] = std::abs(hdr.get<float>(detail::kOffPixdim + 4 * (i + 1)));
    geom.origin[i] = hdr.get<float>(detail::kOffQoffset + 4 * i);
    geom.quatern[i] = hdr.get<float>(detail::kOffQuatern + 4 * i);
    for (int j = 0; j < 4; ++j) {
      geom.srow[i][j] = hdr.get<float>(detail::kOffSrow + 16 * i + 4 * j);
    }
  }
  geom.qform_code = hdr.get<std::int16_t>(detail::kOffQformCode);
  geom.sform_code = hdr.get<std::int16_t>(detail::kOffSformCode);
  for (double s : geom.spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      raise<FormatError>(path.string(), ": pixdim must be positive");
    }
  }

  const float vox_offset = hdr.get<float>(detail::kOffVoxOffset);
  if (!(vox_offset >= kHeaderSize)) raise<FormatError>(path.string(), ": bad vox_offset");
  float slope = hdr.get<float>(detail::kOffSclSlope);
  float inter = hdr.get<float>(detail::kOffSclInter);
  if (slope == 0.0f || !std::isfinite(slope)) {
    slope = 1.0f;
    inter = 0.0f;
  }

  const std::size_t n = voxel_count(dims);
  std::vector<std::uint8_t> raw(n * bytes_per_voxel);
  in.seekg(static_cast<std::streamoff>(vox_offset));
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    raise<FormatError>(path.string(), ": truncated payload");
  }
  const detail::ByteReader payload(raw.data(), swap);
  std::vector<float> data(n);
  const bool scaled = slope != 1.0f || inter != 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    float v = 0.0f;
    switch (datatype) {
      case kUInt8: v = raw[i]; break;
      case kInt16: v = payload.get<std::int16_t>(static_cast<int>(2 * i)); break;
      case kFloat32: v = payload.get<float>(static_cast<int>(4 * i)); break;
    }
    if (scaled) v = v * slope + inter;
    if (!std::isfinite(v)) raise<FormatError>(path.string(), ": non-finite voxel value");
    data[i] = v;
  }
  return Volume(dims, std::move(data), geom);
}

inline void write(const Volume& v, const std::filesystem::path& path) {
  std::vector<std::uint8_t> buf(kVoxOffset + v.size() * 4, 0);
  using detail::put_le;
  put_le<std::int32_t>(buf, detail::kOffSizeofHdr, kHeaderSize);
  put_le<std::int16_t>(buf, detail::kOffDim, 3);
  for (int i = 0; i < 3; ++i) {
    put_le<std::int16_t>(buf, detail::kOffDim + 2 * (i + 1),
                         static_cast<std::int16_t>(v.dims()[i]));
  }
  for (int i = 4; i < 8; ++i) put_le<std::int16_t>(buf, detail::kOffDim + 2 * i, 1);
  put_le<std::int16_t>(buf, detail::kOffDatatype, kFloat32);
  put_le<std::int16_t>(buf, detail::kOffBitpix, 32);
  const Geometry& g = v.geometry();
  put_le<float>(buf, detail::kOffPixdim, 1.0f);  // qfac
  for (int i = 0; i < 3; ++i) {
    put_le<float>(buf, detail::kOffPixdim + 4 * (i + 1), static_cast<float>(g.spacing[i]));
    put_le<float>(buf, detail::kOffQoffset + 4 * i, static_cast<float>(g.origin[i]));
    put_le<float>(buf, detail::kOffQuatern + 4 * i, g.quatern[i]);
    for (int j = 0; j < 4; ++j) {
      put_le<float>(buf, detail::kOffSrow + 16 * i + 4 * j, g.srow[i][j]);
    }
  }
  put_le<float>(buf, detail::kOffVoxOffset, static_cast<float>(kVoxOffset));
  put_le<float>(buf, detail::kOffSclSlope, 1.0f);
  put_le<float>(buf, detail::kOffSclInter, 0.0f);
  buf[detail::kOffXyztUnits] = 2;  // mm
  put_le<std::int16_t>(buf, detail::kOffQformCode, g.qform_code);
  put_le<std::int16_t>(buf, detail::kOffSformCode, g.sform_code);
  std::memcpy(buf.data() + detail::kOffMagic, "n+1\0", 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    put_le<float>(buf, static_cast<int>(kVoxOffset + 4 * i), v[i]);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise<IoError>("cannot open ", path.string(), " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) raise<IoError>("write failed for ", path.string());
}

// Masks travel as float32 volumes holding 0/1.
inline void write_mask(const Mask& m, const std::filesystem::path& path) {
  Volume v(m.dims(), m.geometry(), 0.0f);
  for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] ? 1.0f : 0.0f;
  write(v, path);
}

inline Mask read_mask(const std::filesystem::path& path) {
  const Volume v = read(path);
  Mask m(v.dims(), v.geometry(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] > 0.5f ? 1 : 0;
  return m;
}

}  // namespace lf::nifti
