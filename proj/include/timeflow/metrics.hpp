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

// Evaluation metrics. Every metric is restricted to a foreground mask; an
// empty mask vector means "all voxels".

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "timeflow/tempnet.hpp"
#include "timeflow/warpfield.hpp"

namespace timeflow {

namespace detail {

inline void check_mask(const std::vector<std::uint8_t>& mask, const Dims3& d, const char* op) {
  if (!mask.empty() && static_cast<Index>(mask.size()) != d.count()) {
    throw DimensionError(std::string(op) + ": mask size mismatch");
  }
}

inline bool in_mask(const std::vector<std::uint8_t>& mask, Index p) { return mask.empty() || mask[p] != 0; }

}  // namespace detail

/// Mean |a - b| over the mask.
inline double mae(const Volume& a, const Volume& b, const std::vector<std::uint8_t>& mask) {
  require_same_dims(a.dims, b.dims, "mae");
  detail::check_mask(mask, a.dims, "mae");
  double acc = 0.0;
  Index n = 0;
  for (Index p = 0; p < a.size(); ++p) {
    if (!detail::in_mask(mask, p)) continue;
    acc += std::abs(static_cast<double>(a.data[p]) - b.data[p]);
    ++n;
  }
  if (n == 0) throw DegenerateError("mae: empty mask");
  return acc / static_cast<double>(n);
}

inline double mae(const Volume& a, const Volume& b) { return mae(a, b, b.mask); }

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE) over the mask, capped at 100 dB.
inline double psnr(const Volume& a, const Volume& b, const std::vector<std::uint8_t>& mask, double peak = 1.0) {
  require_same_dims(a.dims, b.dims, "psnr");
  detail::check_mask(mask, a.dims, "psnr");
  double acc = 0.0;
  Index n = 0;
  for (Index p = 0; p < a.size(); ++p) {
    if (!detail::in_mask(mask, p)) continue;
    const double e = static_cast<double>(a.data[p]) - b.data[p];
    acc += e * e;
    ++n;
  }
  if (n == 0) throw DegenerateError("psnr: empty mask");
  const double mse = acc / static_cast<double>(n);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

inline double psnr(const Volume& a, const Volume& b) { return psnr(a, b, b.mask); }

inline constexpr double kJacobianFloor = 1e-6;

/// Standard deviation over the mask of log(max(det J, 1e-6)).
inline double sdlogj(const DisplacementField& phi, const std::vector<std::uint8_t>& mask) {
  detail::check_mask(mask, phi.dims, "sdlogj");
  const ScalarGrid det = jacobian_det(phi);
  double sum = 0.0, sum2 = 0.0;
  Index n = 0;
  for (Index p = 0; p < phi.voxels(); ++p) {
    if (!detail::in_mask(mask, p)) continue;
    const double l = std::log(std::max(det.values[p], kJacobianFloor));
    sum += l;
    sum2 += l * l;
    ++n;
  }
  if (n == 0) return 0.0;
  const double mean = sum / static_cast<double>(n);
  return std::sqrt(std::max(0.0, sum2 / static_cast<double>(n) - mean * mean));
}

/// Cube corner c = (cx, cy, cz) encoded as cx + 2 cy + 4 cz.
using Tetrahedron = std::array<int, 4>;

/// The two five-tetrahedron decompositions of the unit cell.
inline const std::array<Tetrahedron, 10>& cell_tetrahedra() {
  static const std::array<Tetrahedron, 10> tets = {{
      // central tetrahedron on corners 1, 2, 4, 7
      {1, 2, 4, 7},
      {0, 1, 2, 4},
      {3, 1, 2, 7},
      {5, 1, 4, 7},
      {6, 2, 4, 7},
      // central tetrahedron on corners 0, 3, 5, 6
      {0, 3, 5, 6},
      {1, 0, 3, 5},
      {2, 0, 3, 6},
      {4, 0, 5, 6},
      {7, 3, 5, 6},
  }};
  return tets;
}

/// Signed volume ratio of one deformed tetrahedron of cell (i, j, k): positive
/// when the deformed simplex keeps the orientation of the undeformed one.
inline double simplex_det(const DisplacementField& phi, Index i, Index j, Index k, const Tetrahedron& t) {
  std::array<Vec3, 4> x{};
  std::array<Vec3, 4> r{};
  for (int v = 0; v < 4; ++v) {
    const int c = t[v];
    const Index ci = c & 1, cj = (c >> 1) & 1, ck = (c >> 2) & 1;
    const Vec3 u = phi.at(phi.dims.offset(i + ci, j + cj, k + ck));
    r[v] = {static_cast<double>(ci), static_cast<double>(cj), static_cast<double>(ck)};
    x[v] = {r[v][0] + u[0], r[v][1] + u[1], r[v][2] + u[2]};
  }
  auto edge_det = [](const std::array<Vec3, 4>& p) {
    std::array<std::array<double, 3>, 3> m{};
    for (int e = 0; e < 3; ++e)
      for (int a = 0; a < 3; ++a) m[a][e] = p[e + 1][a] - p[0][a];
    return det3(m);
  };
  const double ref = edge_det(r);
  return edge_det(x) * (ref > 0.0 ? 1.0 : -1.0);
}

/// Fraction of the 10 simplices of cell (i, j, k) with non-positive determinant.
inline double nondiffeomorphic_fraction(const DisplacementField& phi, Index i, Index j, Index k) {
  int bad = 0;
  for (const auto& t : cell_tetrahedra()) bad += simplex_det(phi, i, j, k, t) <= 0.0 ? 1 : 0;
  return static_cast<double>(bad) / 10.0;
}

/// Non-diffeomorphic volume in mm^3: sum over masked voxels that own a full
/// cell (forward differences) of the folded simplex fraction times voxel volume.
inline double ndv(const DisplacementField& phi, const std::vector<std::uint8_t>& mask) {
  detail::check_mask(mask, phi.dims, "ndv");
  const Dims3& d = phi.dims;
  const double voxel = phi.spacing[0] * phi.spacing[1] * phi.spacing[2];
  double acc = 0.0;
  for (Index k = 0; k + 1 < d.z; ++k)
    for (Index j = 0; j + 1 < d.y; ++j)
      for (Index i = 0; i + 1 < d.x; ++i) {
        if (!detail::in_mask(mask, d.offset(i, j, k))) continue;
        acc += nondiffeomorphic_fraction(phi, i, j, k);
      }
  return acc * voxel;
}

/// Fraction of masked voxels with positive central-difference Jacobian determinant.
inline double positive_jacobian_fraction(const DisplacementField& phi, const std::vector<std::uint8_t>& mask) {
  detail::check_mask(mask, phi.dims, "positive_jacobian_fraction");
  const ScalarGrid det = jacobian_det(phi);
  Index pos = 0, n = 0;
  for (Index p = 0; p < phi.voxels(); ++p) {
    if (!detail::in_mask(mask, p)) continue;
    pos += det.values[p] > 0.0 ? 1 : 0;
    ++n;
  }
  if (n == 0) throw DegenerateError("positive_jacobian_fraction: empty mask");
  return static_cast<double>(pos) / static_cast<double>(n);
}

struct TimeRange {
  double lo = 0.0;
  double hi = 2.0;
};

/// Sample times lo, lo + dt, ... up to hi (inclusive within 1e-9).
inline std::vector<double> sample_times(const TimeRange& range, double dt) {
  if (!(dt > 0.0) || !std::isfinite(range.lo) || !std::isfinite(range.hi) || !(range.hi > range.lo)) {
    throw DegenerateError("temporal range must satisfy lo < hi with dt > 0");
  }
  std::vector<double> ts;
  for (Index s = 0;; ++s) {
    const double t = range.lo + static_cast<double>(s) * dt;
    if (t > range.hi + 1e-9) break;
    ts.push_back(t);
  }
  if (ts.size() < 2) throw DegenerateError("temporal range holds fewer than two samples");
  return ts;
}

/// Mean over masked voxels and sample intervals of |(phi_{t+dt} - phi_t) / dt|.
inline double temporal_smoothness(const std::vector<DisplacementField>& fields, double dt,
                                  const std::vector<std::uint8_t>& mask) {
  if (fields.size() < 2) throw DegenerateError("temporal_smoothness: need at least two samples");
  detail::check_mask(mask, fields.front().dims, "temporal_smoothness");
  double acc = 0.0;
  Index n = 0;
  for (std::size_t s = 0; s + 1 < fields.size(); ++s) {
    const auto& a = fields[s];
    const auto& b = fields[s + 1];
    require_same_dims(a.dims, b.dims, "temporal_smoothness");
    for (Index p = 0; p < a.voxels(); ++p) {
      if (!detail::in_mask(mask, p)) continue;
      const Vec3 x = a.at(p), y = b.at(p);
      const double dx = y[0] - x[0], dy = y[1] - x[1], dz = y[2] - x[2];
      acc += std::sqrt(dx * dx + dy * dy + dz * dz) / dt;
      ++n;
    }
  }
  if (n == 0) throw DegenerateError("temporal_smoothness: empty mask");
  return acc / static_cast<double>(n);
}

inline double temporal_smoothness(const std::function<DisplacementField(double)>& family,
                                  const std::vector<std::uint8_t>& mask, TimeRange range = {}, double dt = 0.25) {
  std::vector<DisplacementField> fields;
  for (double t : sample_times(range, dt)) fields.push_back(family(t));
  return temporal_smoothness(fields, dt, mask);
}

/// Network form; the mask defaults to the foreground of il.
template <class T>
double temporal_smoothness(const TimeConditionedRegNet<T>& net, const Volume& i0, const Volume& il,
                           TimeRange range = {}, double dt = 0.25) {
  const auto fields = net.predict_many(i0, il, sample_times(range, dt));
  return temporal_smoothness(fields, dt, il.mask);
}

}  // namespace timeflow
