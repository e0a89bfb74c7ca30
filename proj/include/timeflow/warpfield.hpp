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

// Deformation-field algebra on plain (non-differentiable) fields.
//
// A displacement field u represents the map phi(x) = x + u(x) in voxel units.
// Warping is a pull-back: warp(I, phi)(x) = I(x + u(x)).

#pragma once

#include <cmath>
#include <vector>

#include "timeflow/kernels.hpp"
#include "timeflow/volume.hpp"

namespace timeflow {

/// Three-component vector field stored as planes (ux, uy, uz), voxel units.
template <class Tag>
struct VectorField {
  Dims3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<float> u;

  VectorField() = default;
  explicit VectorField(const Dims3& d) : dims(d), u(static_cast<std::size_t>(3 * d.count()), 0.0f) {}

  Index voxels() const { return dims.count(); }
  float* component(int c) { return u.data() + c * dims.count(); }
  const float* component(int c) const { return u.data() + c * dims.count(); }
  Vec3 at(Index p) const {
    const Index n = dims.count();
    return {u[p], u[n + p], u[2 * n + p]};
  }
  void set(Index p, const Vec3& v) {
    const Index n = dims.count();
    u[p] = static_cast<float>(v[0]);
    u[n + p] = static_cast<float>(v[1]);
    u[2 * n + p] = static_cast<float>(v[2]);
  }

  void validate() const {
    if (static_cast<Index>(u.size()) != 3 * dims.count()) throw DimensionError("vector field size mismatch");
    for (float v : u) {
      if (!std::isfinite(v)) throw DomainError("vector field contains non-finite values");
    }
  }
};

struct DisplacementTag {};
struct VelocityTag {};
using DisplacementField = VectorField<DisplacementTag>;
using StationaryVelocityField = VectorField<VelocityTag>;

/// Per-voxel scalar map (e.g. Jacobian determinants).
struct ScalarGrid {
  Dims3 dims;
  std::vector<double> values;
};

inline DisplacementField identity_field(const Dims3& dims) {
  if (!dims.positive()) throw DimensionError("identity_field: dims must be positive");
  return DisplacementField(dims);
}

/// Translation by a constant vector (voxel units).
inline DisplacementField translation_field(const Dims3& dims, const Vec3& p) {
  DisplacementField f(dims);
  for (Index q = 0; q < dims.count(); ++q) f.set(q, p);
  return f;
}

/// Trilinear pull-back of intensities; the mask travels with nearest-neighbour sampling.
inline Volume warp(const Volume& image, const DisplacementField& phi) {
  require_same_dims(image.dims, phi.dims, "warp");
  Volume out = image;
  kernels::warp_forward(image.data.data(), 1, phi.u.data(), image.dims, out.data.data());
  if (image.has_mask()) {
    const Dims3& d = image.dims;
    for (Index k = 0; k < d.z; ++k) {
      for (Index j = 0; j < d.y; ++j) {
        for (Index i = 0; i < d.x; ++i) {
          const Index p = d.offset(i, j, k);
          const Vec3 v = phi.at(p);
          out.mask[p] = kernels::sample_nearest(image.mask.data(), d, i + v[0], j + v[1], k + v[2]);
        }
      }
    }
  }
  return out;
}

/// c = a o b, i.e. x + u_c(x) = a(b(x)), so warp(warp(I, a), b) == warp(I, compose(a, b)).
template <class Tag>
VectorField<Tag> compose(const VectorField<Tag>& a, const VectorField<Tag>& b) {
  require_same_dims(a.dims, b.dims, "compose");
  VectorField<Tag> c = b;
  std::vector<float> sampled(a.u.size());
  kernels::warp_forward(a.u.data(), 3, b.u.data(), a.dims, sampled.data());
  for (std::size_t i = 0; i < c.u.size(); ++i) c.u[i] += sampled[i];
  return c;
}

/// Scaling and squaring: exp(v) ~ (id + v / 2^steps) composed with itself `steps` times.
inline DisplacementField integrate_svf(const StationaryVelocityField& v, int steps = 7) {
  if (steps < 1) throw DomainError("integrate_svf: steps must be >= 1");
  DisplacementField u(v.dims);
  u.spacing = v.spacing;
  u.origin = v.origin;
  const float s = 1.0f / static_cast<float>(1 << steps);
  for (std::size_t i = 0; i < u.u.size(); ++i) u.u[i] = v.u[i] * s;
  for (int i = 0; i < steps; ++i) u = compose(u, u);
  return u;
}

/// Spatial derivative matrix of phi at voxel (i,j,k): J[r][c] = d phi_r / d x_c.
/// Central differences in the interior, one-sided at the borders.
inline std::array<std::array<double, 3>, 3> jacobian_matrix(const DisplacementField& phi, Index i, Index j, Index k) {
  const Dims3& d = phi.dims;
  std::array<std::array<double, 3>, 3> J{};
  const Index idx[3] = {i, j, k};
  for (int axis = 0; axis < 3; ++axis) {
    const Index n = d[axis];
    Index lo = idx[axis] - 1, hi = idx[axis] + 1;
    double h = 2.0;
    if (lo < 0) {
      lo = idx[axis];
      h = 1.0;
    }
    if (hi >= n) {
      hi = idx[axis];
      h = (lo == idx[axis]) ? 0.0 : 1.0;
    }
    Index a[3] = {i, j, k}, b[3] = {i, j, k};
    a[axis] = hi;
    b[axis] = lo;
    const Index pa = d.offset(a[0], a[1], a[2]), pb = d.offset(b[0], b[1], b[2]);
    for (int r = 0; r < 3; ++r) {
      const double du = h > 0.0 ? (phi.component(r)[pa] - phi.component(r)[pb]) / h : 0.0;
      J[r][axis] = du + (r == axis ? 1.0 : 0.0);
    }
  }
  return J;
}

inline double det3(const std::array<std::array<double, 3>, 3>& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

/// Per-voxel det(grad phi).
inline ScalarGrid jacobian_det(const DisplacementField& phi) {
  const Dims3& d = phi.dims;
  ScalarGrid out{d, std::vector<double>(static_cast<std::size_t>(d.count()))};
  for (Index k = 0; k < d.z; ++k)
    for (Index j = 0; j < d.y; ++j)
      for (Index i = 0; i < d.x; ++i) out.values[d.offset(i, j, k)] = det3(jacobian_matrix(phi, i, j, k));
  return out;
}

template <class T, class Tag>
Tensor<T> to_tensor(const VectorField<Tag>& f) {
  Tensor<T> t(spatial_shape(1, 3, f.dims));
  std::copy(f.u.begin(), f.u.end(), t.data.begin());
  return t;
}

template <class Field = DisplacementField, class T>
Field field_from_tensor(const Tensor<T>& t) {
  if (t.rank() != 5 || t.channels() != 3 || t.batch() != 1) {
    throw DimensionError("field_from_tensor: expected [1,3,Z,Y,X], got " + to_string(t.shape));
  }
  Field f(t.spatial());
  std::copy(t.data.begin(), t.data.end(), f.u.begin());
  return f;
}

/// Mean Euclidean norm of the difference of two fields (voxel units).
template <class Tag>
double mean_distance(const VectorField<Tag>& a, const VectorField<Tag>& b) {
  require_same_dims(a.dims, b.dims, "mean_distance");
  double acc = 0.0;
  for (Index p = 0; p < a.voxels(); ++p) {
    const Vec3 x = a.at(p), y = b.at(p);
    acc += std::sqrt((x[0] - y[0]) * (x[0] - y[0]) + (x[1] - y[1]) * (x[1] - y[1]) + (x[2] - y[2]) * (x[2] - y[2]));
  }
  return acc / static_cast<double>(a.voxels());
}

}  // namespace timeflow
