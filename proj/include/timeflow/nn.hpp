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

// Differentiable layers over [N, C, Z, Y, X] tensors: 3x3x3 convolution,
// normalization, resampling and spatial warping.

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "timeflow/autograd.hpp"
#include "timeflow/kernels.hpp"

namespace timeflow::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_rank(const Shape& s, Index rank, const char* op) {
  if (static_cast<Index>(s.size()) != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

struct ConvGeometry {
  Dims3 in;
  Dims3 out;
  Index cin = 0;
  Index cout = 0;
  Index stride = 1;
};

// Column block for output rows [r0, r0+rows) (a row is one (oz, oy) line of
// out.x voxels). Matrix rows are (ci, kz, ky, kx); columns are output voxels.
template <class T>
void im2col(const T* x, const ConvGeometry& g, Index r0, Index rows, T* col) {
  const Index len = rows * g.out.x;
  const Index n = g.in.count();
  Index krow = 0;
  for (Index ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + ci * n;
    for (Index kz = 0; kz < 3; ++kz) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kx = 0; kx < 3; ++kx, ++krow) {
          T* dst = col + krow * len;
          for (Index r = 0; r < rows; ++r, dst += g.out.x) {
            const Index orow = r0 + r;
            const Index iy = (orow % g.out.y) * g.stride - 1 + ky;
            const Index iz = (orow / g.out.y) * g.stride - 1 + kz;
            if (iy < 0 || iy >= g.in.y || iz < 0 || iz >= g.in.z) {
              std::fill_n(dst, g.out.x, T{0});
              continue;
            }
            const T* src = xc + g.in.offset(0, iy, iz);
            if (g.stride == 1) {
              // ix = ox + kx - 1; only the first/last column can fall outside.
              const Index lo = kx == 0 ? 1 : 0;
              const Index hi = kx == 2 ? g.out.x - 1 : g.out.x;
              if (lo) dst[0] = T{0};
              std::copy(src + lo + kx - 1, src + hi + kx - 1, dst + lo);
              if (hi < g.out.x) dst[g.out.x - 1] = T{0};
              continue;
            }
            for (Index ox = 0; ox < g.out.x; ++ox) {
              const Index ix = ox * g.stride - 1 + kx;
              dst[ox] = (ix >= 0 && ix < g.in.x) ? src[ix] : T{0};
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, Index r0, Index rows, T* gx) {
  const Index len = rows * g.out.x;
  const Index n = g.in.count();
  Index krow = 0;
  for (Index ci = 0; ci < g.cin; ++ci) {
    T* gc = gx + ci * n;
    for (Index kz = 0; kz < 3; ++kz) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kx = 0; kx < 3; ++kx, ++krow) {
          const T* src = col + krow * len;
          for (Index r = 0; r < rows; ++r, src += g.out.x) {
            const Index orow = r0 + r;
            const Index iy = (orow % g.out.y) * g.stride - 1 + ky;
            const Index iz = (orow / g.out.y) * g.stride - 1 + kz;
            if (iy < 0 || iy >= g.in.y || iz < 0 || iz >= g.in.z) continue;
            T* dst = gc + g.in.offset(0, iy, iz);
            if (g.stride == 1) {
              const Index lo = kx == 0 ? 1 : 0;
              const Index hi = kx == 2 ? g.out.x - 1 : g.out.x;
              T* d = dst + kx - 1;
              for (Index ox = lo; ox < hi; ++ox) d[ox] += src[ox];
              continue;
            }
            for (Index ox = 0; ox < g.out.x; ++ox) {
              const Index ix = ox * g.stride - 1 + kx;
              if (ix >= 0 && ix < g.in.x) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

// Output rows per column block, sized to keep the block near 1 MB.
inline Index conv_rows(Index k, const Dims3& out) {
  const Index total_rows = out.y * out.z;
  return std::clamp<Index>((Index{1} << 18) / std::max<Index>(k * out.x, 1), 1, total_rows);
}

}  // namespace detail

/// 3x3x3 convolution, zero padding 1, stride 1 or 2. x [N,Ci,Z,Y,X], w [Co,Ci,3,3,3], b [Co].
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, Index stride) {
  detail::require_rank(x.shape(), 5, "conv3d");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws.size() != 5 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 || ws[4] != 3 || b.size() != ws[0]) {
    throw DimensionError("conv3d: weight " + to_string(ws) + " incompatible with input " + to_string(xs));
  }
  detail::ConvGeometry g;
  g.in = x.value().spatial();
  g.stride = stride;
  g.out = {(g.in.x - 1) / stride + 1, (g.in.y - 1) / stride + 1, (g.in.z - 1) / stride + 1};
  g.cin = xs[1];
  g.cout = ws[0];
  const Index batch = xs[0], k = g.cin * 27, p = g.out.count(), nin = g.in.count();
  const Index chunk_rows = detail::conv_rows(k, g.out);
  const Index total_rows = g.out.y * g.out.z;
  const Index chunk = chunk_rows * g.out.x;

  Tensor<T> out(spatial_shape(batch, g.cout, g.out));
  std::vector<T> col(static_cast<std::size_t>(k * chunk));
  Eigen::Map<const detail::RowMat<T>> wm(w.value().ptr(), g.cout, k);
  for (Index nb = 0; nb < batch; ++nb) {
    const T* xn = x.value().ptr() + nb * g.cin * nin;
    T* on = out.ptr() + nb * g.cout * p;
    for (Index r0 = 0; r0 < total_rows; r0 += chunk_rows) {
      const Index rows = std::min(chunk_rows, total_rows - r0);
      const Index j0 = r0 * g.out.x, len = rows * g.out.x;
      detail::im2col(xn, g, r0, rows, col.data());
      Eigen::Map<const detail::RowMat<T>> cm(col.data(), k, len);
      Eigen::Map<detail::RowMat<T>, 0, Eigen::OuterStride<>> om(on + j0, g.cout, len, Eigen::OuterStride<>(p));
      om.noalias() = wm * cm;
    }
    for (Index c = 0; c < g.cout; ++c) {
      const T bias = b.value()[c];
      T* oc = on + c * p;
      for (Index j = 0; j < p; ++j) oc[j] += bias;
    }
  }

  return make_result<T>(std::move(out), {x, w, b}, [g, batch, k, p, nin, chunk, chunk_rows, total_rows](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    Node<T>& wn = *n.parents[1];
    Node<T>& bn = *n.parents[2];
    std::vector<T> col(static_cast<std::size_t>(k * chunk));
    std::vector<T> dcol(static_cast<std::size_t>(k * chunk));
    Eigen::Map<const detail::RowMat<T>> wm(wn.value.ptr(), g.cout, k);
    T* gw = wn.requires_grad ? wn.grad_buffer().ptr() : nullptr;
    T* gb = bn.requires_grad ? bn.grad_buffer().ptr() : nullptr;
    T* gx = xn.requires_grad ? xn.grad_buffer().ptr() : nullptr;
    for (Index nb = 0; nb < batch; ++nb) {
      const T* xin = xn.value.ptr() + nb * g.cin * nin;
      const T* gon = n.grad.ptr() + nb * g.cout * p;
      if (gb) {
        for (Index c = 0; c < g.cout; ++c) {
          double acc = 0.0;
          for (Index j = 0; j < p; ++j) acc += gon[c * p + j];
          gb[c] += static_cast<T>(acc);
        }
      }
      for (Index r0 = 0; r0 < total_rows; r0 += chunk_rows) {
        const Index rows = std::min(chunk_rows, total_rows - r0);
        const Index j0 = r0 * g.out.x, len = rows * g.out.x;
        Eigen::Map<const detail::RowMat<T>, 0, Eigen::OuterStride<>> gm(gon + j0, g.cout, len,
                                                                          Eigen::OuterStride<>(p));
        if (gw) {
          detail::im2col(xin, g, r0, rows, col.data());
          Eigen::Map<const detail::RowMat<T>> cm(col.data(), k, len);
          Eigen::Map<detail::RowMat<T>> gwm(gw, g.cout, k);
          gwm.noalias() += gm * cm.transpose();
        }
        if (gx) {
          Eigen::Map<detail::RowMat<T>> dm(dcol.data(), k, len);
          dm.noalias() = wm.transpose() * gm;
          detail::col2im(dcol.data(), g, r0, rows, gx + nb * g.cin * nin);
        }
      }
    }
  });
}

/// Fully connected layer: x [N,F], w [O,F], b [O] -> [N,O].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require_rank(x.shape(), 2, "linear");
  const Index batch = x.shape()[0], fin = x.shape()[1], fout = w.shape()[0];
  if (w.shape()[1] != fin || b.size() != fout) throw DimensionError("linear: weight shape mismatch");
  Tensor<T> out({batch, fout});
  for (Index nb = 0; nb < batch; ++nb) {
    for (Index o = 0; o < fout; ++o) {
      double acc = b.value()[o];
      for (Index f = 0; f < fin; ++f) acc += static_cast<double>(w.value()[o * fin + f]) * x.value()[nb * fin + f];
      out[nb * fout + o] = static_cast<T>(acc);
    }
  }
  return make_result<T>(std::move(out), {x, w, b}, [batch, fin, fout](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    Node<T>& wn = *n.parents[1];
    Node<T>& bn = *n.parents[2];
    for (Index nb = 0; nb < batch; ++nb) {
      for (Index o = 0; o < fout; ++o) {
        const T g = n.grad[nb * fout + o];
        if (bn.requires_grad) bn.grad_buffer()[o] += g;
        for (Index f = 0; f < fin; ++f) {
          if (wn.requires_grad) wn.grad_buffer()[o * fin + f] += g * xn.value[nb * fin + f];
          if (xn.requires_grad) xn.grad_buffer()[nb * fin + f] += g * wn.value[o * fin + f];
        }
      }
    }
  });
}

/// Per-sample, per-channel normalization to zero mean and unit variance over space.
template <class T>
Var<T> instance_norm(const Var<T>& x, T eps = T{1e-5}) {
  detail::require_rank(x.shape(), 5, "instance_norm");
  const Index planes = x.shape()[0] * x.shape()[1];
  const Index p = x.value().spatial().count();
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(planes));
  for (Index q = 0; q < planes; ++q) {
    const T* xi = x.value().ptr() + q * p;
    double m = 0.0;
    for (Index j = 0; j < p; ++j) m += xi[j];
    m /= static_cast<double>(p);
    double v = 0.0;
    for (Index j = 0; j < p; ++j) v += (xi[j] - m) * (xi[j] - m);
    v /= static_cast<double>(p);
    const double is = 1.0 / std::sqrt(v + static_cast<double>(eps));
    inv_std[q] = static_cast<T>(is);
    T* oi = out.ptr() + q * p;
    for (Index j = 0; j < p; ++j) oi[j] = static_cast<T>((xi[j] - m) * is);
  }
  return make_result<T>(std::move(out), {x}, [planes, p, inv_std](Node<T>& n) {
    const auto& y = n.value;
    auto& gx = n.parents[0]->grad_buffer();
    for (Index q = 0; q < planes; ++q) {
      const T* gy = n.grad.ptr() + q * p;
      const T* yq = y.ptr() + q * p;
      double mg = 0.0, mgy = 0.0;
      for (Index j = 0; j < p; ++j) {
        mg += gy[j];
        mgy += static_cast<double>(gy[j]) * yq[j];
      }
      mg /= static_cast<double>(p);
      mgy /= static_cast<double>(p);
      T* g = gx.ptr() + q * p;
      for (Index j = 0; j < p; ++j) g[j] += static_cast<T>(inv_std[q] * (gy[j] - mg - yq[j] * mgy));
    }
  });
}

/// y[n,c,...] = x[n,c,...] * scale[n,c] + shift[n,c].
template <class T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& scale_nc, const Var<T>& shift_nc) {
  detail::require_rank(x.shape(), 5, "channel_affine");
  const Index planes = x.shape()[0] * x.shape()[1];
  if (scale_nc.size() != planes || shift_nc.size() != planes) {
    throw DimensionError("channel_affine: scale/shift must have N*C entries");
  }
  const Index p = x.value().spatial().count();
  Tensor<T> out(x.shape());
  for (Index q = 0; q < planes; ++q) {
    const T s = scale_nc.value()[q], b = shift_nc.value()[q];
    for (Index j = 0; j < p; ++j) out[q * p + j] = x.value()[q * p + j] * s + b;
  }
  return make_result<T>(std::move(out), {x, scale_nc, shift_nc}, [planes, p](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    Node<T>& sn = *n.parents[1];
    Node<T>& bn = *n.parents[2];
    for (Index q = 0; q < planes; ++q) {
      const T* g = n.grad.ptr() + q * p;
      const T* xv = xn.value.ptr() + q * p;
      double gs = 0.0, gb = 0.0;
      for (Index j = 0; j < p; ++j) {
        gs += static_cast<double>(g[j]) * xv[j];
        gb += g[j];
      }
      if (sn.requires_grad) sn.grad_buffer()[q] += static_cast<T>(gs);
      if (bn.requires_grad) bn.grad_buffer()[q] += static_cast<T>(gb);
      if (xn.requires_grad) {
        T* gx = xn.grad_buffer().ptr() + q * p;
        const T s = sn.value[q];
        for (Index j = 0; j < p; ++j) gx[j] += g[j] * s;
      }
    }
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a.shape(), 5, "concat_channels");
  if (a.shape()[0] != b.shape()[0] || a.value().spatial() != b.value().spatial()) {
    throw DimensionError("concat_channels: incompatible shapes");
  }
  const Index batch = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  const Index p = a.value().spatial().count();
  Tensor<T> out(spatial_shape(batch, ca + cb, a.value().spatial()));
  for (Index nb = 0; nb < batch; ++nb) {
    std::copy_n(a.value().ptr() + nb * ca * p, ca * p, out.ptr() + nb * (ca + cb) * p);
    std::copy_n(b.value().ptr() + nb * cb * p, cb * p, out.ptr() + nb * (ca + cb) * p + ca * p);
  }
  return make_result<T>(std::move(out), {a, b}, [batch, ca, cb, p](Node<T>& n) {
    for (Index nb = 0; nb < batch; ++nb) {
      const T* g = n.grad.ptr() + nb * (ca + cb) * p;
      if (n.parents[0]->requires_grad) {
        T* ga = n.parents[0]->grad_buffer().ptr() + nb * ca * p;
        for (Index j = 0; j < ca * p; ++j) ga[j] += g[j];
      }
      if (n.parents[1]->requires_grad) {
        T* gbp = n.parents[1]->grad_buffer().ptr() + nb * cb * p;
        for (Index j = 0; j < cb * p; ++j) gbp[j] += g[ca * p + j];
      }
    }
  });
}

namespace detail {

// Copies the overlapping low corner of two grids; used by pad and crop.
template <class T>
void copy_corner(const T* src, const Dims3& ds, T* dst, const Dims3& dd, bool accumulate_into_dst) {
  const Index nx = std::min(ds.x, dd.x), ny = std::min(ds.y, dd.y), nz = std::min(ds.z, dd.z);
  for (Index k = 0; k < nz; ++k) {
    for (Index j = 0; j < ny; ++j) {
      const T* s = src + ds.offset(0, j, k);
      T* d = dst + dd.offset(0, j, k);
      for (Index i = 0; i < nx; ++i) d[i] = accumulate_into_dst ? d[i] + s[i] : s[i];
    }
  }
}

template <class T>
Var<T> resize_corner(const Var<T>& x, const Dims3& target) {
  const Dims3 src = x.value().spatial();
  const Index planes = x.shape()[0] * x.shape()[1];
  Tensor<T> out(spatial_shape(x.shape()[0], x.shape()[1], target));
  for (Index q = 0; q < planes; ++q) {
    copy_corner(x.value().ptr() + q * src.count(), src, out.ptr() + q * target.count(), target, false);
  }
  return make_result<T>(std::move(out), {x}, [src, target, planes](Node<T>& n) {
    T* g = n.parents[0]->grad_buffer().ptr();
    for (Index q = 0; q < planes; ++q) {
      copy_corner(n.grad.ptr() + q * target.count(), target, g + q * src.count(), src, true);
    }
  });
}

}  // namespace detail

/// Zero-pads at the high end of each axis up to `target`.
template <class T>
Var<T> pad_spatial(const Var<T>& x, const Dims3& target) {
  return detail::resize_corner(x, target);
}

/// Keeps the low corner of extent `target`.
template <class T>
Var<T> crop_spatial(const Var<T>& x, const Dims3& target) {
  return detail::resize_corner(x, target);
}

/// Trilinear resize. Aligned corners map the end samples onto each other;
/// otherwise voxel centres are aligned (half-pixel convention), which is the
/// inverse of block averaging.
template <class T>
Var<T> resize_trilinear(const Var<T>& x, const Dims3& target, bool align_corners = true) {
  detail::require_rank(x.shape(), 5, "resize_trilinear");
  const Dims3 src = x.value().spatial();
  const Index planes = x.shape()[0] * x.shape()[1];
  auto ratio = [align_corners](Index in, Index out) {
    if (!align_corners) return static_cast<double>(in) / static_cast<double>(out);
    return out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  };
  const double rx = ratio(src.x, target.x), ry = ratio(src.y, target.y), rz = ratio(src.z, target.z);
  const double ox = align_corners ? 0.0 : 0.5 * rx - 0.5, oy = align_corners ? 0.0 : 0.5 * ry - 0.5,
               oz = align_corners ? 0.0 : 0.5 * rz - 0.5;
  Tensor<T> out(spatial_shape(x.shape()[0], x.shape()[1], target));
  for (Index q = 0; q < planes; ++q) {
    const T* s = x.value().ptr() + q * src.count();
    T* o = out.ptr() + q * target.count();
    for (Index k = 0; k < target.z; ++k) {
      for (Index j = 0; j < target.y; ++j) {
        for (Index i = 0; i < target.x; ++i) {
          o[target.offset(i, j, k)] = kernels::sample(s, src, i * rx + ox, j * ry + oy, k * rz + oz);
        }
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [src, target, planes, rx, ry, rz, ox, oy, oz](Node<T>& n) {
    T* g = n.parents[0]->grad_buffer().ptr();
    for (Index q = 0; q < planes; ++q) {
      const T* go = n.grad.ptr() + q * target.count();
      T* gs = g + q * src.count();
      for (Index k = 0; k < target.z; ++k) {
        const auto cz = kernels::corner(k * rz + oz, src.z);
        for (Index j = 0; j < target.y; ++j) {
          const auto cy = kernels::corner(j * ry + oy, src.y);
          for (Index i = 0; i < target.x; ++i) {
            const auto cx = kernels::corner(i * rx + ox, src.x);
            const T v = go[target.offset(i, j, k)];
            const T fx = static_cast<T>(cx.frac), fy = static_cast<T>(cy.frac), fz = static_cast<T>(cz.frac);
            gs[src.offset(cx.lo, cy.lo, cz.lo)] += v * (1 - fx) * (1 - fy) * (1 - fz);
            gs[src.offset(cx.hi, cy.lo, cz.lo)] += v * fx * (1 - fy) * (1 - fz);
            gs[src.offset(cx.lo, cy.hi, cz.lo)] += v * (1 - fx) * fy * (1 - fz);
            gs[src.offset(cx.hi, cy.hi, cz.lo)] += v * fx * fy * (1 - fz);
            gs[src.offset(cx.lo, cy.lo, cz.hi)] += v * (1 - fx) * (1 - fy) * fz;
            gs[src.offset(cx.hi, cy.lo, cz.hi)] += v * fx * (1 - fy) * fz;
            gs[src.offset(cx.lo, cy.hi, cz.hi)] += v * (1 - fx) * fy * fz;
            gs[src.offset(cx.hi, cy.hi, cz.hi)] += v * fx * fy * fz;
          }
        }
      }
    }
  });
}

/// Mean over non-overlapping factor^3 blocks. Spatial dims must be divisible by `factor`.
template <class T>
Var<T> avg_downsample(const Var<T>& x, Index factor) {
  if (factor == 1) return x;
  const Dims3 src = x.value().spatial();
  if (src.x % factor || src.y % factor || src.z % factor) {
    throw DimensionError("avg_downsample: dims " + to_string(src) + " not divisible by factor");
  }
  const Dims3 dst{src.x / factor, src.y / factor, src.z / factor};
  const Index planes = x.shape()[0] * x.shape()[1];
  const T inv = T{1} / static_cast<T>(factor * factor * factor);
  Tensor<T> out(spatial_shape(x.shape()[0], x.shape()[1], dst));
  for (Index q = 0; q < planes; ++q) {
    const T* s = x.value().ptr() + q * src.count();
    T* o = out.ptr() + q * dst.count();
    for (Index k = 0; k < src.z; ++k)
      for (Index j = 0; j < src.y; ++j)
        for (Index i = 0; i < src.x; ++i) o[dst.offset(i / factor, j / factor, k / factor)] += s[src.offset(i, j, k)] * inv;
  }
  return make_result<T>(std::move(out), {x}, [src, dst, planes, factor, inv](Node<T>& n) {
    T* g = n.parents[0]->grad_buffer().ptr();
    for (Index q = 0; q < planes; ++q) {
      const T* go = n.grad.ptr() + q * dst.count();
      T* gs = g + q * src.count();
      for (Index k = 0; k < src.z; ++k)
        for (Index j = 0; j < src.y; ++j)
          for (Index i = 0; i < src.x; ++i) gs[src.offset(i, j, k)] += go[dst.offset(i / factor, j / factor, k / factor)] * inv;
    }
  });
}

/// Pull-back warp of every channel of `src` [N,C,...] by displacement `disp` [N,3,...].
template <class T>
Var<T> warp(const Var<T>& src, const Var<T>& disp) {
  detail::require_rank(src.shape(), 5, "warp");
  const Dims3 d = src.value().spatial();
  if (disp.shape().size() != 5 || disp.shape()[1] != 3 || disp.value().spatial() != d ||
      disp.shape()[0] != src.shape()[0]) {
    throw DimensionError("warp: displacement " + to_string(disp.shape()) + " incompatible with " +
                         to_string(src.shape()));
  }
  const Index batch = src.shape()[0], c = src.shape()[1], p = d.count();
  Tensor<T> out(src.shape());
  for (Index nb = 0; nb < batch; ++nb) {
    kernels::warp_forward(src.value().ptr() + nb * c * p, c, disp.value().ptr() + nb * 3 * p, d,
                          out.ptr() + nb * c * p);
  }
  return make_result<T>(std::move(out), {src, disp}, [batch, c, p, d](Node<T>& n) {
    Node<T>& sn = *n.parents[0];
    Node<T>& dn = *n.parents[1];
    for (Index nb = 0; nb < batch; ++nb) {
      kernels::warp_backward(sn.value.ptr() + nb * c * p, c, dn.value.ptr() + nb * 3 * p, d,
                             n.grad.ptr() + nb * c * p,
                             sn.requires_grad ? sn.grad_buffer().ptr() + nb * c * p : nullptr,
                             dn.requires_grad ? dn.grad_buffer().ptr() + nb * 3 * p : nullptr);
    }
  });
}

/// Clipped (2r+1)^3 window sum of every channel.
template <class T>
Var<T> box_sum(const Var<T>& x, Index radius) {
  detail::require_rank(x.shape(), 5, "box_sum");
  const Dims3 d = x.value().spatial();
  const Index planes = x.shape()[0] * x.shape()[1], p = d.count();
  Tensor<T> out(x.shape());
  for (Index q = 0; q < planes; ++q) kernels::box_sum(x.value().ptr() + q * p, d, radius, out.ptr() + q * p);
  return make_result<T>(std::move(out), {x}, [d, planes, p, radius](Node<T>& n) {
    std::vector<T> tmp(static_cast<std::size_t>(p));
    T* g = n.parents[0]->grad_buffer().ptr();
    for (Index q = 0; q < planes; ++q) {
      kernels::box_sum(n.grad.ptr() + q * p, d, radius, tmp.data());
      for (Index j = 0; j < p; ++j) g[q * p + j] += tmp[j];
    }
  });
}

/// Batch entries [begin, begin + count) of a 5D tensor.
template <class T>
Var<T> slice_batch(const Var<T>& x, Index begin, Index count) {
  detail::require_rank(x.shape(), 5, "slice_batch");
  if (begin < 0 || count < 1 || begin + count > x.shape()[0]) throw DimensionError("slice_batch: range out of bounds");
  Shape shape = x.shape();
  shape[0] = count;
  const Index per = x.size() / x.shape()[0];
  Tensor<T> out(shape);
  std::copy(x.value().ptr() + begin * per, x.value().ptr() + (begin + count) * per, out.ptr());
  return make_result<T>(std::move(out), {x}, [begin, per](Node<T>& n) {
    T* g = n.parents[0]->grad_buffer().ptr() + begin * per;
    for (Index i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

/// Tiles a batch-1 tensor `times` times along the batch axis.
template <class T>
Var<T> repeat_batch(const Var<T>& x, Index times) {
  detail::require_rank(x.shape(), 5, "repeat_batch");
  if (x.shape()[0] != 1 || times < 1) throw DimensionError("repeat_batch: expects batch 1 and times >= 1");
  if (times == 1) return x;
  Shape shape = x.shape();
  shape[0] = times;
  const Index per = x.size();
  Tensor<T> out(shape);
  for (Index b = 0; b < times; ++b) std::copy(x.value().data.begin(), x.value().data.end(), out.ptr() + b * per);
  return make_result<T>(std::move(out), {x}, [times, per](Node<T>& n) {
    T* g = n.parents[0]->grad_buffer().ptr();
    for (Index b = 0; b < times; ++b)
      for (Index i = 0; i < per; ++i) g[i] += n.grad[b * per + i];
  });
}

/// Concatenation along the batch axis.
template <class T>
Var<T> concat_batch(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a.shape(), 5, "concat_batch");
  Shape sa = a.shape(), sb = b.shape();
  if (sb.size() != 5 || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw DimensionError("concat_batch: " + to_string(sa) + " vs " + to_string(sb));
  }
  Shape shape = sa;
  shape[0] += sb[0];
  Tensor<T> out(shape);
  std::copy(a.value().data.begin(), a.value().data.end(), out.ptr());
  std::copy(b.value().data.begin(), b.value().data.end(), out.ptr() + a.size());
  const Index na = a.size();
  return make_result<T>(std::move(out), {a, b}, [na](Node<T>& n) {
    Node<T>& an = *n.parents[0];
    Node<T>& bn = *n.parents[1];
    if (an.requires_grad) {
      T* g = an.grad_buffer().ptr();
      for (Index i = 0; i < na; ++i) g[i] += n.grad[i];
    }
    if (bn.requires_grad) {
      T* g = bn.grad_buffer().ptr();
      for (Index i = na; i < n.grad.size(); ++i) g[i - na] += n.grad[i];
    }
  });
}

}  // namespace timeflow::ad
