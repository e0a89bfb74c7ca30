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

// Scalar volumes, foreground masks, intensity normalization and
// longitudinal series.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "timeflow/errors.hpp"
#include "timeflow/tensor.hpp"

namespace timeflow {

using Vec3 = std::array<double, 3>;

/// 3D scalar grid with physical geometry and an optional foreground mask.
struct Volume {
  Dims3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};  // mm per voxel along x, y, z
  Vec3 origin{0.0, 0.0, 0.0};   // mm position of voxel (0,0,0)
  std::vector<float> data;
  std::vector<std::uint8_t> mask;  // empty when absent

  Volume() = default;
  explicit Volume(const Dims3& d, float fill = 0.0f) : dims(d), data(static_cast<std::size_t>(d.count()), fill) {}

  Index size() const { return dims.count(); }
  bool has_mask() const { return !mask.empty(); }
  float& at(Index i, Index j, Index k) { return data[static_cast<std::size_t>(dims.offset(i, j, k))]; }
  float at(Index i, Index j, Index k) const { return data[static_cast<std::size_t>(dims.offset(i, j, k))]; }
  double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

  void validate() const {
    if (!dims.positive()) throw DimensionError("volume dims must be positive, got " + to_string(dims));
    if (static_cast<Index>(data.size()) != dims.count()) throw DimensionError("volume data size mismatch");
    if (!mask.empty() && static_cast<Index>(mask.size()) != dims.count()) {
      throw DimensionError("mask dims differ from data dims");
    }
    for (float v : data) {
      if (!std::isfinite(v)) throw DomainError("volume contains non-finite intensity");
    }
  }
};

inline void require_same_dims(const Dims3& a, const Dims3& b, const char* op) {
  if (!(a == b)) throw DimensionError(std::string(op) + ": grid " + to_string(a) + " vs " + to_string(b));
}

/// Binary closing (dilate, then erode) with the 6-neighbourhood ball of radius 1.
/// The grid is treated as if padded with background, so closing never grows
/// the mask along the grid border.
inline std::vector<std::uint8_t> close_mask(const std::vector<std::uint8_t>& in, const Dims3& d) {
  const Index off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  auto morph = [&](const std::vector<std::uint8_t>& src, bool dilate) {
    std::vector<std::uint8_t> out(src.size());
    for (Index k = 0; k < d.z; ++k) {
      for (Index j = 0; j < d.y; ++j) {
        for (Index i = 0; i < d.x; ++i) {
          const Index p = d.offset(i, j, k);
          bool v = src[p] != 0;
          for (const auto& o : off) {
            const Index a = i + o[0], b = j + o[1], c = k + o[2];
            const bool inside = a >= 0 && a < d.x && b >= 0 && b < d.y && c >= 0 && c < d.z;
            // A padding voxel is foreground after dilation only through its single in-grid neighbour.
            const bool nb = inside ? src[d.offset(a, b, c)] != 0 : (!dilate && in[p] != 0);
            v = dilate ? (v || nb) : (v && nb);
          }
          out[p] = v ? 1 : 0;
        }
      }
    }
    return out;
  };
  return morph(morph(in, true), false);
}

/// Foreground = intensity > 0, closed with a radius-1 structuring element.
inline std::vector<std::uint8_t> foreground_mask(const Volume& v) {
  std::vector<std::uint8_t> m(v.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = v.data[i] > 0.0f ? 1 : 0;
  return close_mask(m, v.dims);
}

inline Index mask_count(const std::vector<std::uint8_t>& m) {
  return static_cast<Index>(std::count_if(m.begin(), m.end(), [](std::uint8_t x) { return x != 0; }));
}

/// Linear-interpolated percentile (q in [0, 100]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DegenerateError("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct IntensityRange {
  double low = 0.0;
  double high = 1.0;
};

/// 0th and 99.9th intensity percentiles over the foreground (the mask when present,
/// otherwise voxels with nonzero intensity).
inline IntensityRange foreground_percentiles(const Volume& v) {
  std::vector<double> fg;
  fg.reserve(v.data.size());
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    const bool in = v.has_mask() ? v.mask[i] != 0 : v.data[i] != 0.0f;
    if (in) fg.push_back(v.data[i]);
  }
  if (fg.empty()) throw DegenerateError("normalize_intensity: no foreground voxels");
  return {percentile(fg, 0.0), percentile(fg, 99.9)};
}

/// Rescales so the foreground 0th/99.9th percentiles map to 0/1. Values above 1 are kept.
inline Volume normalize_intensity(const Volume& v) {
  v.validate();
  const IntensityRange r = foreground_percentiles(v);
  if (!(r.high > r.low)) throw DegenerateError("normalize_intensity: constant foreground intensity");
  Volume out = v;
  const double inv = 1.0 / (r.high - r.low);
  for (auto& x : out.data) x = static_cast<float>((x - r.low) * inv);
  if (!out.has_mask()) {
    out.mask.resize(v.data.size());
    for (std::size_t i = 0; i < v.data.size(); ++i) out.mask[i] = v.data[i] != 0.0f ? 1 : 0;
    out.mask = close_mask(out.mask, v.dims);
  }
  return out;
}

enum class Diagnosis { CN, MCI, Dementia, Unknown };

inline std::string to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::CN: return "CN";
    case Diagnosis::MCI: return "MCI";
    case Diagnosis::Dementia: return "Dementia";
    default: return "unknown";
  }
}

inline Diagnosis parse_diagnosis(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "cn" || s == "control" || s == "normal") return Diagnosis::CN;
  if (s == "mci") return Diagnosis::MCI;
  if (s == "dementia" || s == "ad") return Diagnosis::Dementia;
  return Diagnosis::Unknown;
}

struct Visit {
  Volume volume;
  double age_years = 0.0;
  Diagnosis diagnosis = Diagnosis::Unknown;
};

/// Ordered visits of one subject.
struct LongitudinalSeries {
  std::string subject_id;
  std::vector<Visit> visits;

  void validate() const {
    if (visits.size() < 2) throw ConfigError("subject " + subject_id + ": at least two visits required");
    for (std::size_t i = 1; i < visits.size(); ++i) {
      if (!(visits[i].age_years > visits[i - 1].age_years)) {
        throw ConfigError("subject " + subject_id + ": visit ages must be strictly increasing");
      }
    }
  }

  /// Position of visit k on the normalized axis of the pair (a, b): 0 at a, 1 at b.
  double normalized_time(std::size_t k, std::size_t a, std::size_t b) const {
    return (visits[k].age_years - visits[a].age_years) / (visits[b].age_years - visits[a].age_years);
  }
};

template <class T>
Tensor<T> to_tensor(const Volume& v) {
  Tensor<T> t(spatial_shape(1, 1, v.dims));
  std::copy(v.data.begin(), v.data.end(), t.data.begin());
  return t;
}

/// Mask as a [1,1,Z,Y,X] tensor of 0/1; all ones when the volume has no mask.
template <class T>
Tensor<T> mask_tensor(const Volume& v) {
  Tensor<T> t(spatial_shape(1, 1, v.dims), T{1});
  if (v.has_mask()) {
    for (std::size_t i = 0; i < v.mask.size(); ++i) t.data[i] = v.mask[i] ? T{1} : T{0};
  }
  return t;
}

template <class T>
Volume volume_from_tensor(const Tensor<T>& t, const Volume& like) {
  Volume out;
  out.dims = t.spatial();
  out.spacing = like.spacing;
  out.origin = like.origin;
  out.data.assign(t.data.begin(), t.data.begin() + out.dims.count());
  out.mask = like.mask;
  return out;
}

}  // namespace timeflow
