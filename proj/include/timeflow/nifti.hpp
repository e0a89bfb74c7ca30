/*
 * TimeFlow longitudinal registration
 *
 * Copyright 2026 The TimeFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// NIfTI-1 / NIfTI-2 reading and writing for scalar volumes and vector fields.
// Both .nii and .nii.gz are handled through zlib's transparent gz streams.

#pragma once

#include <zlib.h>

#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include "timeflow/volume.hpp"
#include "timeflow/warpfield.hpp"

namespace timeflow::nifti {

enum DataType : int {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
};

constexpr int kIntentVector = 1007;

/// Header fields the library consumes, independent of the on-disk version.
struct Header {
  int version = 1;
  std::array<std::int64_t, 8> dim{};
  std::array<double, 8> pixdim{};
  int datatype = kFloat32;
  int bitpix = 32;
  std::int64_t vox_offset = 352;
  double scl_slope = 0.0;
  double scl_inter = 0.0;
  int intent_code = 0;
  int qform_code = 0;
  int sform_code = 0;
  Vec3 qoffset{0.0, 0.0, 0.0};
  std::array<double, 4> srow_x{}, srow_y{}, srow_z{};
};

namespace detail {

class GzFile {
 public:
  GzFile(const std::string& path, const char* mode) : f_(gzopen(path.c_str(), mode)), path_(path) {
    if (!f_) throw IoError("cannot open " + path);
  }
  ~GzFile() {
    if (f_) gzclose(f_);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  void read(void* dst, std::size_t n) {
    auto* p = static_cast<char*>(dst);
    while (n > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      const int got = gzread(f_, p, chunk);
      if (got <= 0) throw IoError("unexpected end of file in " + path_);
      p += got;
      n -= static_cast<std::size_t>(got);
    }
  }
  void write(const void* src, std::size_t n) {
    const auto* p = static_cast<const char*>(src);
    while (n > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      const int put = gzwrite(f_, p, chunk);
      if (put <= 0) throw IoError("write failed for " + path_);
      p += put;
      n -= static_cast<std::size_t>(put);
    }
  }
  void skip(std::size_t n) {
    std::vector<char> junk(n);
    if (n) read(junk.data(), n);
  }
  void close() {
    if (f_ && gzclose(f_) != Z_OK) {
      f_ = nullptr;
      throw IoError("close failed for " + path_);
    }
    f_ = nullptr;
  }

 private:
  gzFile f_;
  std::string path_;
};

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <class V>
V get(const unsigned char* buf, std::size_t off, bool swap) {
  V v;
  std::memcpy(&v, buf + off, sizeof(V));
  if (swap) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(V));
  }
  return v;
}

template <class V>
void put(unsigned char* buf, std::size_t off, V v) {
  std::memcpy(buf + off, &v, sizeof(V));
}

inline int bytes_per_voxel(int datatype) {
  switch (datatype) {
    case kUInt8: case kInt8: return 1;
    case kInt16: case kUInt16: return 2;
    case kInt32: case kUInt32: case kFloat32: return 4;
    case kFloat64: return 8;
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype));
  }
}

inline Header parse_header(GzFile& f, bool& swap) {
  unsigned char first[4];
  f.read(first, 4);
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, first, 4);
  swap = false;
  if (sizeof_hdr != 348 && sizeof_hdr != 540) {
    std::reverse(first, first + 4);
    std::memcpy(&sizeof_hdr, first, 4);
    swap = true;
  }
  Header h;
  if (sizeof_hdr == 348) {
    unsigned char buf[348];
    std::memcpy(buf, first, 4);
    f.read(buf + 4, 344);
    if (std::memcmp(buf + 344, "n+1", 3) != 0 && std::memcmp(buf + 344, "ni1", 3) != 0) {
      throw FormatError("missing NIfTI-1 magic");
    }
    h.version = 1;
    for (int i = 0; i < 8; ++i) h.dim[i] = get<std::int16_t>(buf, 40 + 2 * i, swap);
    h.intent_code = get<std::int16_t>(buf, 68, swap);
    h.datatype = get<std::int16_t>(buf, 70, swap);
    h.bitpix = get<std::int16_t>(buf, 72, swap);
    for (int i = 0; i < 8; ++i) h.pixdim[i] = get<float>(buf, 76 + 4 * i, swap);
    h.vox_offset = static_cast<std::int64_t>(get<float>(buf, 108, swap));
    h.scl_slope = get<float>(buf, 112, swap);
    h.scl_inter = get<float>(buf, 116, swap);
    h.qform_code = get<std::int16_t>(buf, 252, swap);
    h.sform_code = get<std::int16_t>(buf, 254, swap);
    for (int i = 0; i < 3; ++i) h.qoffset[i] = get<float>(buf, 268 + 4 * i, swap);
    for (int i = 0; i < 4; ++i) {
      h.srow_x[i] = get<float>(buf, 280 + 4 * i, swap);
      h.srow_y[i] = get<float>(buf, 296 + 4 * i, swap);
      h.srow_z[i] = get<float>(buf, 312 + 4 * i, swap);
    }
    f.skip(static_cast<std::size_t>(std::max<std::int64_t>(h.vox_offset, 348) - 348));
  } else if (sizeof_hdr == 540) {
    unsigned char buf[540];
    std::memcpy(buf, first, 4);
    f.read(buf + 4, 536);
    if (std::memcmp(buf + 4, "n+2", 3) != 0 && std::memcmp(buf + 4, "ni2", 3) != 0) {
      throw FormatError("missing NIfTI-2 magic");
    }
    h.version = 2;
    h.datatype = get<std::int16_t>(buf, 12, swap);
    h.bitpix = get<std::int16_t>(buf, 14, swap);
    for (int i = 0; i < 8; ++i) h.dim[i] = get<std::int64_t>(buf, 16 + 8 * i, swap);
    for (int i = 0; i < 8; ++i) h.pixdim[i] = get<double>(buf, 104 + 8 * i, swap);
    h.vox_offset = get<std::int64_t>(buf, 168, swap);
    h.scl_slope = get<double>(buf, 176, swap);
    h.scl_inter = get<double>(buf, 184, swap);
    h.qform_code = get<std::int32_t>(buf, 344, swap);
    h.sform_code = get<std::int32_t>(buf, 348, swap);
    for (int i = 0; i < 3; ++i) h.qoffset[i] = get<double>(buf, 376 + 8 * i, swap);
    for (int i = 0; i < 4; ++i) {
      h.srow_x[i] = get<double>(buf, 400 + 8 * i, swap);
      h.srow_y[i] = get<double>(buf, 432 + 8 * i, swap);
      h.srow_z[i] = get<double>(buf, 464 + 8 * i, swap);
    }
    h.intent_code = get<std::int32_t>(buf, 504, swap);
    f.skip(static_cast<std::size_t>(std::max<std::int64_t>(h.vox_offset, 540) - 540));
  } else {
    throw FormatError("not a NIfTI file (sizeof_hdr=" + std::to_string(sizeof_hdr) + ")");
  }
  if (h.dim[0] < 1 || h.dim[0] > 7) throw FormatError("invalid NIfTI dim[0]");
  return h;
}

inline std::vector<double> read_payload(GzFile& f, const Header& h, std::size_t count, bool swap) {
  const int bpv = bytes_per_voxel(h.datatype);
  std::vector<unsigned char> raw(count * static_cast<std::size_t>(bpv));
  f.read(raw.data(), raw.size());
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t off = i * static_cast<std::size_t>(bpv);
    double v = 0.0;
    switch (h.datatype) {
      case kUInt8: v = raw[off]; break;
      case kInt8: v = static_cast<std::int8_t>(raw[off]); break;
      case kInt16: v = get<std::int16_t>(raw.data(), off, swap); break;
      case kUInt16: v = get<std::uint16_t>(raw.data(), off, swap); break;
      case kInt32: v = get<std::int32_t>(raw.data(), off, swap); break;
      case kUInt32: v = get<std::uint32_t>(raw.data(), off, swap); break;
      case kFloat32: v = get<float>(raw.data(), off, swap); break;
      case kFloat64: v = get<double>(raw.data(), off, swap); break;
      default: break;
    }
    out[i] = v;
  }
  const bool scaled = h.scl_slope != 0.0 && !(h.scl_slope == 1.0 && h.scl_inter == 0.0);
  if (scaled) {
    for (auto& v : out) v = v * h.scl_slope + h.scl_inter;
  }
  return out;
}

inline void geometry_from_header(const Header& h, Vec3& spacing, Vec3& origin) {
  for (int i = 0; i < 3; ++i) spacing[i] = h.pixdim[i + 1] > 0.0 ? h.pixdim[i + 1] : 1.0;
  if (h.sform_code > 0) {
    origin = {h.srow_x[3], h.srow_y[3], h.srow_z[3]};
  } else if (h.qform_code > 0) {
    origin = h.qoffset;
  } else {
    origin = {0.0, 0.0, 0.0};
  }
}

// NIfTI-1 header with a diagonal sform/qform built from spacing and origin.
inline void write_file(const std::string& path, const std::array<std::int64_t, 8>& dim, const Vec3& spacing,
                       const Vec3& origin, int intent, const std::vector<float>& payload) {
  unsigned char buf[352] = {};
  put<std::int32_t>(buf, 0, 348);
  put<char>(buf, 38, 'r');
  for (int i = 0; i < 8; ++i) put<std::int16_t>(buf, 40 + 2 * i, static_cast<std::int16_t>(dim[i]));
  put<std::int16_t>(buf, 68, static_cast<std::int16_t>(intent));
  put<std::int16_t>(buf, 70, static_cast<std::int16_t>(kFloat32));
  put<std::int16_t>(buf, 72, 32);
  put<float>(buf, 76, 1.0f);
  for (int i = 0; i < 3; ++i) put<float>(buf, 80 + 4 * i, static_cast<float>(spacing[i]));
  for (int i = 4; i < 8; ++i) put<float>(buf, 76 + 4 * i, 1.0f);
  put<float>(buf, 108, 352.0f);
  put<float>(buf, 112, 1.0f);
  put<char>(buf, 123, 2);  // mm
  std::strncpy(reinterpret_cast<char*>(buf + 148), "timeflow", 80);
  put<std::int16_t>(buf, 252, 1);
  put<std::int16_t>(buf, 254, 1);
  for (int i = 0; i < 3; ++i) put<float>(buf, 268 + 4 * i, static_cast<float>(origin[i]));
  const float srow[3][4] = {{static_cast<float>(spacing[0]), 0, 0, static_cast<float>(origin[0])},
                            {0, static_cast<float>(spacing[1]), 0, static_cast<float>(origin[1])},
                            {0, 0, static_cast<float>(spacing[2]), static_cast<float>(origin[2])}};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) put<float>(buf, 280 + 16 * r + 4 * c, srow[r][c]);
  std::memcpy(buf + 344, "n+1\0", 4);
  GzFile f(path, ends_with(path, ".gz") ? "wb6" : "wbT");
  f.write(buf, sizeof(buf));
  f.write(payload.data(), payload.size() * sizeof(float));
  f.close();
}

}  // namespace detail

/// Reads a single-channel 3D image. Extra trailing dims are accepted only if they are 1.
inline Volume read_volume(const std::string& path) {
  detail::GzFile f(path, "rb");
  bool swap = false;
  const Header h = detail::parse_header(f, swap);
  for (int i = 4; i <= h.dim[0]; ++i) {
    if (h.dim[i] > 1) throw FormatError(path + ": expected a single-channel 3D image, dim[" + std::to_string(i) + "]=" + std::to_string(h.dim[i]));
  }
  Volume v(Dims3{h.dim[1], h.dim[0] >= 2 ? h.dim[2] : 1, h.dim[0] >= 3 ? h.dim[3] : 1});
  const auto values = detail::read_payload(f, h, static_cast<std::size_t>(v.dims.count()), swap);
  for (std::size_t i = 0; i < values.size(); ++i) v.data[i] = static_cast<float>(values[i]);
  detail::geometry_from_header(h, v.spacing, v.origin);
  v.validate();
  v.mask = foreground_mask(v);
  return v;
}

inline void write_volume(const std::string& path, const Volume& v) {
  detail::write_file(path, {3, v.dims.x, v.dims.y, v.dims.z, 1, 1, 1, 1}, v.spacing, v.origin, 0, v.data);
}

/// Reads a displacement field stored as a 5D vector image (x, y, z, 1, 3).
template <class Field = DisplacementField>
Field read_field(const std::string& path) {
  detail::GzFile f(path, "rb");
  bool swap = false;
  const Header h = detail::parse_header(f, swap);
  const bool five_d = h.dim[0] == 5 && h.dim[4] == 1 && h.dim[5] == 3;
  const bool four_d = h.dim[0] == 4 && h.dim[4] == 3;
  if (!five_d && !four_d) throw FormatError(path + ": expected a 3-component vector field");
  Field fld(Dims3{h.dim[1], h.dim[2], h.dim[3]});
  const auto values = detail::read_payload(f, h, fld.u.size(), swap);
  for (std::size_t i = 0; i < values.size(); ++i) fld.u[i] = static_cast<float>(values[i]);
  detail::geometry_from_header(h, fld.spacing, fld.origin);
  fld.validate();
  return fld;
}

template <class Tag>
void write_field(const std::string& path, const VectorField<Tag>& f) {
  detail::write_file(path, {5, f.dims.x, f.dims.y, f.dims.z, 1, 3, 1, 1}, f.spacing, f.origin, kIntentVector, f.u);
}

}  // namespace timeflow::nifti
