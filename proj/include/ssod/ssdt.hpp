/*
 * Copyright 2026 The SSOD Authors.
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

// SSDT binary tensor records.
//
//   bytes 0-3   "SSDT"
//   byte  4     version (0x01)
//   byte  5     dtype (0x00 = f32)
//   byte  6     rank
//   then        rank x little-endian u32 extents
//   then        row-major little-endian f32 payload

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "ssod/error.hpp"
#include "ssod/tensor.hpp"

namespace ssod::ssdt {

inline constexpr std::array<char, 4> kMagic{'S', 'S', 'D', 'T'};
inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::uint8_t kDtypeF32 = 0x00;

struct Record {
  Shape shape;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

/// Bytes occupied by a record of this shape.
inline std::uint64_t record_size(const Shape& shape) {
  return 7 + 4 * shape.size() + 4 * numel(shape);
}

inline void write(std::ostream& os, const Shape& shape, std::span<const float> data) {
  if (shape.size() > 255) throw ConfigError("ssdt: rank exceeds 255");
  if (numel(shape) != data.size()) throw ConfigError("ssdt: payload does not match shape " + shape_str(shape));
  os.write(kMagic.data(), 4);
  const char hdr[3] = {static_cast<char>(kVersion), static_cast<char>(kDtypeF32), static_cast<char>(shape.size())};
  os.write(hdr, 3);
  for (auto d : shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (float f : data) detail::put_u32(os, std::bit_cast<std::uint32_t>(f));
  if (!os) throw IoError("ssdt: write failed");
}

inline void write(std::ostream& os, const Tensor& t) { write(os, t.shape(), t.data()); }

/// Reads one record; `what` names the source in diagnostics.
inline Record read(std::istream& is, const std::string& what = "stream") {
  char magic[4];
  if (!is.read(magic, 4)) throw IoError(what + ": truncated SSDT header");
  if (std::memcmp(magic, kMagic.data(), 4) != 0) throw IoError(what + ": not an SSDT file");
  unsigned char hdr[3];
  if (!is.read(reinterpret_cast<char*>(hdr), 3)) throw IoError(what + ": truncated SSDT header");
  if (hdr[0] != kVersion) throw IoError(what + ": unsupported SSDT version " + std::to_string(hdr[0]));
  if (hdr[1] != kDtypeF32) throw IoError(what + ": unsupported SSDT dtype " + std::to_string(hdr[1]));
  Record rec;
  rec.shape.resize(hdr[2]);
  for (auto& d : rec.shape) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError(what + ": truncated SSDT extents");
    d = detail::get_u32(b);
    if (d == 0) throw IoError(what + ": zero extent in SSDT header");
  }
  const std::size_t n = numel(rec.shape);
  std::vector<unsigned char> raw(n * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw IoError(what + ": truncated SSDT payload (expected " + std::to_string(n) + " values)");
  }
  rec.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) rec.data[i] = std::bit_cast<float>(detail::get_u32(&raw[i * 4]));
  return rec;
}

inline void save(const std::filesystem::path& path, const Shape& shape, std::span<const float> data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write(os, shape, data);
}

inline Record load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing file: " + path.string());
  return read(is, path.string());
}

}  // namespace ssod::ssdt
