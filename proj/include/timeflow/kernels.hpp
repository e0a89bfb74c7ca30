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

// Trilinear sampling kernels shared by the plain field algebra and the
// differentiable operators. Coordinates are voxel indices; samples outside
// the grid are clamped to the nearest edge voxel.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "timeflow/tensor.hpp"

namespace timeflow::kernels {

struct Corner1D {
  Index lo;
  Index hi;
  double frac;
  bool inside;  // false when the coordinate was clamped; derivative is zero then
};

inline Corner1D corner(double q, Index n) {
  const double hi_limit = static_cast<double>(n - 1);
  bool inside = true;
  if (!(q > 0.0)) {  // also catches NaN
    inside = q == 0.0;
    q = 0.0;
  } else if (q > hi_limit) {
    inside = false;
    q = hi_limit;
  }
  Index lo = static_cast<Index>(std::floor(q));
  if (lo > n - 1) lo = n - 1;
  const Index hi = std::min(lo + 1, n - 1);
  return {lo, hi, q - static_cast<double>(lo), inside};
}

template <class T>
inline T lerp(T a, T b, T f) {
  return a + f * (b - a);
}

/// Trilinear value of `img` at (qx, qy, qz). Nested lerps keep constant images exact.
template <class T>
inline T sample(const T* img, const Dims3& d, double qx, double qy, double qz) {
  const Corner1D cx = corner(qx, d.x), cy = corner(qy, d.y), cz = corner(qz, d.z);
  const T fx = static_cast<T>(cx.frac), fy = static_cast<T>(cy.frac), fz = static_cast<T>(cz.frac);
  auto at = [&](Index i, Index j, Index k) { return img[d.offset(i, j, k)]; };
  const T c00 = lerp(at(cx.lo, cy.lo, cz.lo), at(cx.hi, cy.lo, cz.lo), fx);
  const T c10 = lerp(at(cx.lo, cy.hi, cz.lo), at(cx.hi, cy.hi, cz.lo), fx);
  const T c01 = lerp(at(cx.lo, cy.lo, cz.hi), at(cx.hi, cy.lo, cz.hi), fx);
  const T c11 = lerp(at(cx.lo, cy.hi, cz.hi), at(cx.hi, cy.hi, cz.hi), fx);
  return lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
}

/// Nearest-neighbour value with edge clamping.
template <class T>
inline T sample_nearest(const T* img, const Dims3& d, double qx, double qy, double qz) {
  auto idx = [](double q, Index n) {
    const Index i = static_cast<Index>(std::lround(std::clamp(q, 0.0, static_cast<double>(n - 1))));
    return std::clamp<Index>(i, 0, n - 1);
  };
  return img[d.offset(idx(qx, d.x), idx(qy, d.y), idx(qz, d.z))];
}

/// Pull-back resampling: out_c(p) = src_c(p + u(p)) for every channel c.
/// `disp` holds three planes (ux, uy, uz) over the same grid.
template <class T>
void warp_forward(const T* src, Index channels, const T* disp, const Dims3& d, T* out) {
  const Index n = d.count();
  const T* ux = disp;
  const T* uy = disp + n;
  const T* uz = disp + 2 * n;
  for (Index k = 0; k < d.z; ++k) {
    for (Index j = 0; j < d.y; ++j) {
      for (Index i = 0; i < d.x; ++i) {
        const Index p = d.offset(i, j, k);
        const double qx = static_cast<double>(i) + static_cast<double>(ux[p]);
        const double qy = static_cast<double>(j) + static_cast<double>(uy[p]);
        const double qz = static_cast<double>(k) + static_cast<double>(uz[p]);
        for (Index c = 0; c < channels; ++c) out[c * n + p] = sample(src + c * n, d, qx, qy, qz);
      }
    }
  }
}

/// Adjoint of warp_forward. Accumulates into `gsrc` (may be null) and `gdisp` (may be null).
template <class T>
void warp_backward(const T* src, Index channels, const T* disp, const Dims3& d, const T* gout, T* gsrc,
                   T* gdisp) {
  const Index n = d.count();
  const T* ux = disp;
  const T* uy = disp + n;
  const T* uz = disp + 2 * n;
  for (Index k = 0; k < d.z; ++k) {
    for (Index j = 0; j < d.y; ++j) {
      for (Index i = 0; i < d.x; ++i) {
        const Index p = d.offset(i, j, k);
        const Corner1D cx = corner(static_cast<double>(i) + static_cast<double>(ux[p]), d.x);
        const Corner1D cy = corner(static_cast<double>(j) + static_cast<double>(uy[p]), d.y);
        const Corner1D cz = corner(static_cast<double>(k) + static_cast<double>(uz[p]), d.z);
        const T fx = static_cast<T>(cx.frac), fy = static_cast<T>(cy.frac), fz = static_cast<T>(cz.frac);
        const Index o000 = d.offset(cx.lo, cy.lo, cz.lo), o100 = d.offset(cx.hi, cy.lo, cz.lo);
        const Index o010 = d.offset(cx.lo, cy.hi, cz.lo), o110 = d.offset(cx.hi, cy.hi, cz.lo);
        const Index o001 = d.offset(cx.lo, cy.lo, cz.hi), o101 = d.offset(cx.hi, cy.lo, cz.hi);
        const Index o011 = d.offset(cx.lo, cy.hi, cz.hi), o111 = d.offset(cx.hi, cy.hi, cz.hi);
        T gx = 0, gy = 0, gz = 0;
        for (Index c = 0; c < channels; ++c) {
          const T g = gout[c * n + p];
          if (g == T{0}) continue;
          if (gsrc) {
            T* gs = gsrc + c * n;
            gs[o000] += g * (1 - fx) * (1 - fy) * (1 - fz);
            gs[o100] += g * fx * (1 - fy) * (1 - fz);
            gs[o010] += g * (1 - fx) * fy * (1 - fz);
            gs[o110] += g * fx * fy * (1 - fz);
            gs[o001] += g * (1 - fx) * (1 - fy) * fz;
            gs[o101] += g * fx * (1 - fy) * fz;
            gs[o011] += g * (1 - fx) * fy * fz;
            gs[o111] += g * fx * fy * fz;
          }
          if (gdisp) {
            const T* s = src + c * n;
            const T v000 = s[o000], v100 = s[o100], v010 = s[o010], v110 = s[o110];
            const T v001 = s[o001], v101 = s[o101], v011 = s[o011], v111 = s[o111];
            if (cx.inside && cx.hi != cx.lo) {
              gx += g * ((1 - fy) * (1 - fz) * (v100 - v000) + fy * (1 - fz) * (v110 - v010) +
                         (1 - fy) * fz * (v101 - v001) + fy * fz * (v111 - v011));
            }
            if (cy.inside && cy.hi != cy.lo) {
              gy += g * ((1 - fx) * (1 - fz) * (v010 - v000) + fx * (1 - fz) * (v110 - v100) +
                         (1 - fx) * fz * (v011 - v001) + fx * fz * (v111 - v101));
            }
            if (cz.inside && cz.hi != cz.lo) {
              gz += g * ((1 - fx) * (1 - fy) * (v001 - v000) + fx * (1 - fy) * (v101 - v100) +
                         (1 - fx) * fy * (v011 - v010) + fx * fy * (v111 - v110));
            }
          }
        }
        if (gdisp) {
          gdisp[p] += gx;
          gdisp[n + p] += gy;
          gdisp[2 * n + p] += gz;
        }
      }
    }
  }
}

/// Sum over the (2r+1)^3 window clipped to the grid. The operator is symmetric,
/// so it is its own adjoint.
template <class T>
void box_sum(const T* in, const Dims3& d, Index r, T* out) {
  const Index n = d.count();
  std::vector<double> buf(static_cast<std::size_t>(n));
  std::vector<double> tmp(static_cast<std::size_t>(n));
  for (Index p = 0; p < n; ++p) buf[p] = static_cast<double>(in[p]);
  std::vector<double> prefix;
  auto pass = [&](Index len, Index stride, Index lines, auto line_start) {
    prefix.assign(static_cast<std::size_t>(len + 1), 0.0);
    for (Index l = 0; l < lines; ++l) {
      const Index base = line_start(l);
      for (Index t = 0; t < len; ++t) prefix[t + 1] = prefix[t] + buf[base + t * stride];
      for (Index t = 0; t < len; ++t) {
        const Index lo = std::max<Index>(0, t - r);
        const Index hi = std::min<Index>(len - 1, t + r);
        tmp[base + t * stride] = prefix[hi + 1] - prefix[lo];
      }
    }
    std::swap(buf, tmp);
  };
  pass(d.x, 1, d.y * d.z, [&](Index l) { return l * d.x; });
  pass(d.y, d.x, d.x * d.z, [&](Index l) { return (l % d.x) + (l / d.x) * d.x * d.y; });
  pass(d.z, d.x * d.y, d.x * d.y, [&](Index l) { return l; });
  for (Index p = 0; p < n; ++p) out[p] = static_cast<T>(buf[p]);
}

}  // namespace timeflow::kernels
