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

// Independent oracles and fixtures shared by the unit tests and the
// acceptance binary.

#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "timeflow/losses.hpp"
#include "timeflow/metrics.hpp"
#include "timeflow/warpfield.hpp"

namespace timeflow::testing {

inline Volume smooth_image(const Dims3& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 2.0 * M_PI);
  const double a = u(rng), b = u(rng), c = u(rng);
  Volume v(d);
  for (Index k = 0; k < d.z; ++k)
    for (Index j = 0; j < d.y; ++j)
      for (Index i = 0; i < d.x; ++i)
        v.at(i, j, k) = static_cast<float>(1.0 + 0.4 * std::sin(0.45 * i + a) * std::cos(0.38 * j + b) +
                                           0.3 * std::sin(0.31 * k + c + 0.2 * i));
  return v;
}

/// Smooth random field: a few low-frequency sinusoids per component, peak ~amplitude.
template <class Field>
Field smooth_field(const Dims3& d, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ph(0.0, 2.0 * M_PI), fr(0.05, 0.2);
  Field f(d);
  for (int c = 0; c < 3; ++c) {
    const double p0 = ph(rng), p1 = ph(rng), f0 = fr(rng), f1 = fr(rng), f2 = fr(rng);
    float* u = f.component(c);
    for (Index k = 0; k < d.z; ++k)
      for (Index j = 0; j < d.y; ++j)
        for (Index i = 0; i < d.x; ++i)
          u[d.offset(i, j, k)] = static_cast<float>(amplitude * std::sin(f0 * i + f1 * j + p0) * std::cos(f2 * k + p1));
  }
  return f;
}

/// Field u(x) = A (x - c), exact for every difference scheme.
inline DisplacementField affine_field(const Dims3& d, const Eigen::Matrix3d& a) {
  DisplacementField f(d);
  const Eigen::Vector3d c(0.5 * (d.x - 1), 0.5 * (d.y - 1), 0.5 * (d.z - 1));
  for (Index k = 0; k < d.z; ++k)
    for (Index j = 0; j < d.y; ++j)
      for (Index i = 0; i < d.x; ++i) {
        const Eigen::Vector3d u = a * (Eigen::Vector3d(i, j, k) - c);
        f.set(d.offset(i, j, k), {u[0], u[1], u[2]});
      }
  return f;
}

// Independent simplex enumeration: each decomposition is a central tetrahedron
// on the corners of one parity plus the four corner tetrahedra formed by a
// corner of the other parity and its three edge neighbours. Signed volumes
// come from the 4x4 homogeneous determinant.
inline std::vector<std::array<int, 4>> oracle_tetrahedra() {
  std::vector<std::array<int, 4>> out;
  auto parity = [](int c) { return ((c & 1) + ((c >> 1) & 1) + ((c >> 2) & 1)) % 2; };
  for (int central = 0; central < 2; ++central) {
    std::array<int, 4> mid{};
    int n = 0;
    for (int c = 0; c < 8; ++c)
      if (parity(c) == 1 - central) mid[n++] = c;
    out.push_back(mid);
    for (int c = 0; c < 8; ++c) {
      if (parity(c) != central) continue;
      out.push_back({c, c ^ 1, c ^ 2, c ^ 4});
    }
  }
  return out;
}

inline double homogeneous_volume(const std::array<Eigen::Vector3d, 4>& p) {
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r) m.row(r) << p[r][0], p[r][1], p[r][2], 1.0;
  return m.determinant();
}

struct OracleNdv {
  double ndv = 0.0;
  double min_det = 1e300;
};

inline OracleNdv oracle_ndv(const DisplacementField& f, const std::vector<std::uint8_t>& mask) {
  const auto tets = oracle_tetrahedra();
  const Dims3& d = f.dims;
  OracleNdv r;
  for (Index k = 0; k + 1 < d.z; ++k)
    for (Index j = 0; j + 1 < d.y; ++j)
      for (Index i = 0; i + 1 < d.x; ++i) {
        if (!mask.empty() && !mask[d.offset(i, j, k)]) continue;
        int bad = 0;
        for (const auto& t : tets) {
          std::array<Eigen::Vector3d, 4> ref, def;
          for (int v = 0; v < 4; ++v) {
            const int c = t[v];
            const Eigen::Vector3d x(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
            const Vec3 u = f.at(d.offset(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)));
            ref[v] = x;
            def[v] = x + Eigen::Vector3d(u[0], u[1], u[2]);
          }
          const double s = homogeneous_volume(def) * (homogeneous_volume(ref) > 0 ? 1.0 : -1.0);
          r.min_det = std::min(r.min_det, s);
          bad += s <= 0.0 ? 1 : 0;
        }
        r.ndv += bad / 10.0;
      }
  r.ndv *= f.spacing[0] * f.spacing[1] * f.spacing[2];
  return r;
}

inline Tensor<double> constant_field(Index batch, const Dims3& d, const Vec3& p) {
  Tensor<double> t(spatial_shape(batch, 3, d));
  for (Index b = 0; b < batch; ++b)
    for (int c = 0; c < 3; ++c)
      std::fill(t.ptr() + (b * 3 + c) * d.count(), t.ptr() + (b * 3 + c + 1) * d.count(), p[c]);
  return t;
}

/// Exact translation family: phi_t = t p on (I0, IL); the synthesized pairs
/// are translations by t p and (1 - t) p, so their own families scale those.
inline FieldSource<double> translation_source(const Vec3& p, double t_hat) {
  return [p, t_hat](PairKind kind, const Tensor<double>& moving, const Tensor<double>&, const std::vector<double>& ts) {
    const Dims3 d = moving.spatial();
    Tensor<double> out(spatial_shape(static_cast<Index>(ts.size()), 3, d));
    for (std::size_t b = 0; b < ts.size(); ++b) {
      double span = 1.0;
      if (kind == PairKind::ForwardSynth) span = t_hat;
      if (kind == PairKind::BackwardSynth) span = 1.0 - t_hat;
      const auto f = constant_field(1, d, {ts[b] * span * p[0], ts[b] * span * p[1], ts[b] * span * p[2]});
      std::copy(f.data.begin(), f.data.end(), out.ptr() + b * f.size());
    }
    return ad::Var<double>(std::move(out));
  };
}

/// Multilinear ramp: trilinear interpolation reproduces it exactly.
inline Volume ramp(const Dims3& d) {
  Volume v(d);
  for (Index k = 0; k < d.z; ++k)
    for (Index j = 0; j < d.y; ++j)
      for (Index i = 0; i < d.x; ++i) v.at(i, j, k) = static_cast<float>(0.02 * i + 0.03 * j - 0.01 * k + 0.001 * i * j);
  return v;
}

inline Tensor<double> interior_mask(const Dims3& d, Index margin) {
  Tensor<double> m(spatial_shape(1, 1, d));
  for (Index k = margin; k < d.z - margin; ++k)
    for (Index j = margin; j < d.y - margin; ++j)
      for (Index i = margin; i < d.x - margin; ++i) m[d.offset(i, j, k)] = 1.0;
  return m;
}

inline Tensor<double> shifted(const Tensor<double>& img, const Vec3& p) {
  Tensor<double> out(img.shape);
  const auto f = constant_field(1, img.spatial(), p);
  kernels::warp_forward(img.ptr(), 1, f.ptr(), img.spatial(), out.ptr());
  return out;
}

}  // namespace timeflow::testing
