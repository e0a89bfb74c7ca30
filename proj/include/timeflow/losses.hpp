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

// Similarity and temporal consistency losses.
//
// Notation: phi_t is the field predicted for the pair (I0, IL) at time t, and
// compose(a, b) = a o b. For a sampled t in (0, 1) the intermediate
// I_k = I0 o phi_t is synthesized; the pairs (I0, I_k) and (I_k, IL) are then
// extrapolated to t = 1/t and t = 1/(t - 1) and compared with the endpoints.

#pragma once

#include <functional>
#include <random>
#include <vector>

#include "timeflow/nn.hpp"
#include "timeflow/tempnet.hpp"
#include "timeflow/volume.hpp"
#include "timeflow/warpfield.hpp"

namespace timeflow {

struct LossWeights {
  double w_sim_inter = 1.0;
  double w_sim_ext = 1.0;
  double w_flow_inter = 2.0;
  double w_flow_ext = 0.03;

  static LossWeights for_mode(FieldMode mode) {
    if (mode == FieldMode::Diffeomorphic) return {1.0, 1.0, 1.25, 0.025};
    return {};
  }

  void validate() const {
    if (!(w_sim_inter >= 0 && w_sim_ext >= 0 && w_flow_inter >= 0 && w_flow_ext >= 0)) {
      throw ConfigError("loss weights must be non-negative");
    }
  }
};

struct LossOptions {
  Index lncc_radius = 4;
  double guard = 0.05;  // t is drawn from (guard, 1 - guard)
};

struct SampledTriplet {
  double t_hat = 0.5;
  double forward_time() const { return 1.0 / t_hat; }            // (I0, I_k) -> IL
  double backward_time() const { return 1.0 / (t_hat - 1.0); }   // (I_k, IL) -> I0
};

inline SampledTriplet sample_triplet(std::mt19937_64& rng, double guard = 0.05) {
  if (!(guard >= 0.0 && guard < 0.5)) throw DomainError("sample_triplet: guard must be in [0, 0.5)");
  // Uniform on the open interval: redraw the (measure-zero) endpoints.
  std::uniform_real_distribution<double> u(guard, 1.0 - guard);
  double t = u(rng);
  while (!(t > guard && t < 1.0 - guard)) t = u(rng);
  return {t};
}

// ---------------------------------------------------------------------------
// LNCC

/// Mean squared local correlation over the mask, in clipped (2r+1)^3 windows.
/// Windows are clipped at the border and use their own voxel count.
inline double lncc(const Volume& a, const Volume& b, Index radius, const std::vector<std::uint8_t>& mask) {
  require_same_dims(a.dims, b.dims, "lncc");
  const Dims3 d = a.dims;
  const std::size_t n = a.data.size();
  if (!mask.empty() && mask.size() != n) throw DimensionError("lncc: mask size mismatch");
  std::vector<double> ia(n), ib(n), aa(n), bb(n), ab(n), ones(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    ia[i] = a.data[i];
    ib[i] = b.data[i];
    aa[i] = ia[i] * ia[i];
    bb[i] = ib[i] * ib[i];
    ab[i] = ia[i] * ib[i];
  }
  auto box = [&](std::vector<double>& v) {
    std::vector<double> o(n);
    kernels::box_sum(v.data(), d, radius, o.data());
    v.swap(o);
  };
  box(ia), box(ib), box(aa), box(bb), box(ab), box(ones);
  double acc = 0.0;
  Index count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double cross = ab[i] - ia[i] * ib[i] / ones[i];
    const double va = aa[i] - ia[i] * ia[i] / ones[i];
    const double vb = bb[i] - ib[i] * ib[i] / ones[i];
    acc += cross * cross / (va * vb + 1e-5);
    ++count;
  }
  if (count == 0) throw DegenerateError("lncc: empty mask");
  return acc / static_cast<double>(count);
}

inline double lncc(const Volume& a, const Volume& b, Index radius = 4) { return lncc(a, b, radius, b.mask); }

/// Differentiable 1 - LNCC averaged over the batch. a, b: [N,1,Z,Y,X]; mask: [1,1,Z,Y,X].
template <class T>
ad::Var<T> lncc_loss(const ad::Var<T>& a, const ad::Var<T>& b, const Tensor<T>& mask, Index radius) {
  using namespace ad;
  Tensor<T> ones_t(spatial_shape(1, 1, a.value().spatial()), T{1});
  const Var<T> count = box_sum(constant(std::move(ones_t)), radius);
  Tensor<T> inv_count(a.shape());
  const Index per = count.size();
  for (Index i = 0; i < inv_count.size(); ++i) inv_count[i] = T{1} / count.value()[i % per];
  const Var<T> inv = constant(std::move(inv_count));
  const Var<T> sa = box_sum(a, radius), sb = box_sum(b, radius);
  const Var<T> saa = box_sum(square(a), radius), sbb = box_sum(square(b), radius), sab = box_sum(mul(a, b), radius);
  const Var<T> cross = sub(sab, mul(mul(sa, sb), inv));
  const Var<T> va = sub(saa, mul(square(sa), inv));
  const Var<T> vb = sub(sbb, mul(square(sb), inv));
  const Var<T> cc = div(square(cross), add_scalar(mul(va, vb), T{1e-5}));
  return add_scalar(scale(masked_mean(cc, mask), T{-1}), T{1});
}

/// Mean over mask voxels, batch entries and the 3 components of the squared difference.
template <class T>
ad::Var<T> field_mse(const ad::Var<T>& a, const ad::Var<T>& b, const Tensor<T>& mask) {
  return ad::masked_mean(ad::square(ad::sub(a, b)), mask);
}

/// Differentiable a o b on batched fields: u_c = u_b + u_a(x + u_b(x)).
template <class T>
ad::Var<T> compose_fields(const ad::Var<T>& a, const ad::Var<T>& b) {
  return ad::add(b, ad::warp(a, b));
}

// ---------------------------------------------------------------------------
// Field sources

/// Which image pair a field request refers to.
enum class PairKind { Endpoints, ForwardSynth, BackwardSynth };

/// Returns fields [N,3,...] for moving/fixed [N,1,...] at times ts. Networks
/// ignore `kind`; injected analytic families use it to know the pair.
template <class T>
using FieldSource =
    std::function<ad::Var<T>(PairKind kind, const Tensor<T>& moving, const Tensor<T>& fixed, const std::vector<double>& ts)>;

template <class T>
FieldSource<T> network_source(const TimeConditionedRegNet<T>& net) {
  return [&net](PairKind, const Tensor<T>& moving, const Tensor<T>& fixed, const std::vector<double>& ts) {
    return net.forward(moving, fixed, ts);
  };
}

template <class T>
struct LossTerms {
  ad::Var<T> interp_sim, interp_flow, extrap_sim, extrap_flow, total;
};

namespace detail {

template <class T>
Tensor<T> tile(const Tensor<T>& x, Index times) {
  Shape shape = x.shape;
  shape[0] = times;
  Tensor<T> out(shape);
  for (Index b = 0; b < times; ++b) std::copy(x.data.begin(), x.data.end(), out.ptr() + b * x.size());
  return out;
}

template <class T>
Tensor<T> stack(const Tensor<T>& a, const Tensor<T>& b) {
  Shape shape = a.shape;
  shape[0] += b.shape[0];
  Tensor<T> out(shape);
  std::copy(a.data.begin(), a.data.end(), out.ptr());
  std::copy(b.data.begin(), b.data.end(), out.ptr() + a.size());
  return out;
}

inline void require_open_unit(double t, double guard, const char* op) {
  if (!(t > guard && t < 1.0 - guard)) {
    throw DomainError(std::string(op) + ": t=" + std::to_string(t) + " outside (" + std::to_string(guard) + ", " +
                      std::to_string(1.0 - guard) + ")");
  }
}

}  // namespace detail

/// A real intermediate scan I_k of the pair at normalized time t.
template <class T>
struct ObservedIntermediate {
  Tensor<T> image;  // [1,1,Z,Y,X]
  double t = 0.5;
};

/// All four loss terms for the pair (i0, il). Each sampled time in `t_hats`
/// forms a synthetic triplet; each entry of `observed` forms a triplet with a
/// real intermediate, which uses the symmetric similarity against I_k and
/// feeds I_k itself to the extrapolation terms. Terms are averaged over
/// triplets. When `extrapolation` is false only the interpolation terms are
/// evaluated.
template <class T>
LossTerms<T> compute_losses(const FieldSource<T>& source, const Tensor<T>& i0, const Tensor<T>& il, const Tensor<T>& mask,
                            const std::vector<double>& t_hats, const LossWeights& w, const LossOptions& opt = {},
                            bool extrapolation = true, const std::vector<ObservedIntermediate<T>>& observed = {}) {
  using namespace ad;
  if (t_hats.empty() && observed.empty()) throw DomainError("compute_losses: no triplets");
  if (i0.shape != il.shape || i0.rank() != 5 || i0.batch() != 1 || i0.channels() != 1) {
    throw DimensionError("compute_losses: expected equal [1,1,Z,Y,X] images");
  }
  for (double t : t_hats) timeflow::detail::require_open_unit(t, 0.0, "compute_losses");
  for (const auto& ob : observed) {
    if (ob.image.shape != i0.shape) throw DimensionError("compute_losses: intermediate shape differs from the pair");
    timeflow::detail::require_open_unit(ob.t, opt.guard, "compute_losses");
  }
  const Index m = static_cast<Index>(t_hats.size()), o = static_cast<Index>(observed.size()), n = m + o;
  std::vector<double> times = t_hats;
  for (const auto& ob : observed) times.push_back(ob.t);
  const Tensor<T> i0n = timeflow::detail::tile(i0, n), iln = timeflow::detail::tile(il, n);
  const Var<T> v_i0 = constant(i0n), v_il = constant(iln);
  Tensor<T> ik_obs;
  if (o > 0) {
    ik_obs = Tensor<T>(spatial_shape(o, 1, i0.spatial()));
    for (Index b = 0; b < o; ++b) {
      const auto& img = observed[static_cast<std::size_t>(b)].image;
      std::copy(img.data.begin(), img.data.end(), ik_obs.ptr() + b * img.size());
    }
  }

  // Pass over the endpoint pair: phi_t, phi_{t-1}, phi_1, phi_{-1}.
  std::vector<double> ts;
  for (double t : times) ts.push_back(t);
  for (double t : times) ts.push_back(t - 1.0);
  ts.push_back(1.0);
  ts.push_back(-1.0);
  const Var<T> all = source(PairKind::Endpoints, timeflow::detail::tile(i0, 2 * n + 2), timeflow::detail::tile(il, 2 * n + 2), ts);
  const Var<T> phi_t = slice_batch(all, 0, n);
  const Var<T> phi_tm1 = slice_batch(all, n, n);
  const Var<T> phi_1 = repeat_batch(slice_batch(all, 2 * n, 1), n);
  const Var<T> phi_m1 = repeat_batch(slice_batch(all, 2 * n + 1, 1), n);

  LossTerms<T> out;
  const Var<T> warped0 = warp(v_i0, phi_t), warped_l = warp(v_il, phi_tm1);
  if (o == 0) {
    out.interp_sim = lncc_loss(warped0, warped_l, mask, opt.lncc_radius);
  } else {
    const Var<T> target = constant(ik_obs);
    const Var<T> symmetric = add(lncc_loss(slice_batch(warped0, m, o), target, mask, opt.lncc_radius),
                                 lncc_loss(slice_batch(warped_l, m, o), target, mask, opt.lncc_radius));
    if (m == 0) {
      out.interp_sim = symmetric;
    } else {
      const Var<T> generalized =
          lncc_loss(slice_batch(warped0, 0, m), slice_batch(warped_l, 0, m), mask, opt.lncc_radius);
      out.interp_sim = weighted_sum<T>({{static_cast<T>(double(m) / double(n)), generalized},
                                        {static_cast<T>(double(o) / double(n)), symmetric}});
    }
  }
  out.interp_flow = add(field_mse(compose_fields(phi_1, phi_tm1), phi_t, mask),
                        field_mse(compose_fields(phi_m1, phi_t), phi_tm1, mask));

  std::vector<std::pair<T, Var<T>>> terms{{static_cast<T>(w.w_sim_inter), out.interp_sim},
                                          {static_cast<T>(w.w_flow_inter), out.interp_flow}};
  if (extrapolation) {
    // Synthesized intermediates carry no gradient through the synthesis warp.
    Tensor<T> ik = detach(warped0).value();
    if (o > 0) std::copy(ik_obs.data.begin(), ik_obs.data.end(), ik.ptr() + m * i0.size());
    std::vector<double> te;
    for (double t : times) te.push_back(1.0 / t);
    const Var<T> fw = source(PairKind::ForwardSynth, i0n, ik, te);
    te.clear();
    for (double t : times) te.push_back(1.0 / (t - 1.0));
    const Var<T> bw = source(PairKind::BackwardSynth, ik, iln, te);
    out.extrap_sim = add(lncc_loss(warp(v_i0, fw), v_il, mask, opt.lncc_radius),
                         lncc_loss(warp(v_il, bw), v_i0, mask, opt.lncc_radius));
    out.extrap_flow = add(field_mse(phi_1, fw, mask), field_mse(phi_m1, bw, mask));
    terms.push_back({static_cast<T>(w.w_sim_ext), out.extrap_sim});
    terms.push_back({static_cast<T>(w.w_flow_ext), out.extrap_flow});
  } else {
    out.extrap_sim = Var<T>::scalar(T{0});
    out.extrap_flow = Var<T>::scalar(T{0});
  }
  out.total = weighted_sum(terms);
  return out;
}

// ---------------------------------------------------------------------------
// Individual loss operations for a single sampled time.

/// 1 - LNCC(I0 o phi_t, IL o phi_{t-1}).
template <class T>
ad::Var<T> interp_similarity(const FieldSource<T>& source, const Tensor<T>& i0, const Tensor<T>& il,
                             const Tensor<T>& mask, double t, const LossOptions& opt = {}) {
  detail::require_open_unit(t, 0.0, "interp_similarity");
  const auto f = source(PairKind::Endpoints, detail::stack(i0, i0), detail::stack(il, il), {t, t - 1.0});
  return lncc_loss(ad::warp(ad::constant(i0), ad::slice_batch(f, 0, 1)),
                   ad::warp(ad::constant(il), ad::slice_batch(f, 1, 1)), mask, opt.lncc_radius);
}

/// Symmetric form with an observed intermediate I_k at t_k:
/// [1 - LNCC(I0 o phi_tk, I_k)] + [1 - LNCC(IL o phi_{tk-1}, I_k)].
template <class T>
ad::Var<T> interp_similarity_observed(const FieldSource<T>& source, const Tensor<T>& i0, const Tensor<T>& il,
                                      const Tensor<T>& ik, const Tensor<T>& mask, double tk, const LossOptions& opt = {}) {
  detail::require_open_unit(tk, 0.0, "interp_similarity_observed");
  const auto f = source(PairKind::Endpoints, detail::stack(i0, i0), detail::stack(il, il), {tk, tk - 1.0});
  const ad::Var<T> target = ad::constant(ik);
  return ad::add(lncc_loss(ad::warp(ad::constant(i0), ad::slice_batch(f, 0, 1)), target, mask, opt.lncc_radius),
                 lncc_loss(ad::warp(ad::constant(il), ad::slice_batch(f, 1, 1)), target, mask, opt.lncc_radius));
}

/// |phi_1 o phi_{t-1} - phi_t|^2 + |phi_{-1} o phi_t - phi_{t-1}|^2.
template <class T>
ad::Var<T> interp_flow_consistency(const FieldSource<T>& source, const Tensor<T>& i0, const Tensor<T>& il,
                                   const Tensor<T>& mask, double t) {
  detail::require_open_unit(t, 0.0, "interp_flow_consistency");
  const auto f = source(PairKind::Endpoints, detail::tile(i0, 4), detail::tile(il, 4), {t, t - 1.0, 1.0, -1.0});
  const auto phi_t = ad::slice_batch(f, 0, 1), phi_tm1 = ad::slice_batch(f, 1, 1);
  const auto phi_1 = ad::slice_batch(f, 2, 1), phi_m1 = ad::slice_batch(f, 3, 1);
  return ad::add(field_mse(compose_fields(phi_1, phi_tm1), phi_t, mask),
                 field_mse(compose_fields(phi_m1, phi_t), phi_tm1, mask));
}

namespace detail {

/// Fields needed by the extrapolation terms for one sampled time.
template <class T>
struct ExtrapolationFields {
  ad::Var<T> phi_1, phi_m1, forward, backward;
};

template <class T>
ExtrapolationFields<T> extrapolation_fields(const FieldSource<T>& source, const Tensor<T>& i0, const Tensor<T>& il,
                                            double t) {
  const auto f = source(PairKind::Endpoints, detail::tile(i0, 3), detail::tile(il, 3), {t, 1.0, -1.0});
  Tensor<T> ik;
  {
    ad::NoGradGuard guard;
    ik = ad::warp(ad::constant(i0), ad::slice_batch(f, 0, 1)).value();
  }
  ExtrapolationFields<T> e;
  e.phi_1 = ad::slice_batch(f, 1, 1);
  e.phi_m1 = ad::slice_batch(f, 2, 1);
  e.forward = source(PairKind::ForwardSynth, i0, ik, {1.0 / t});
  e.backward = source(PairKind::BackwardSynth, ik, il, {1.0 / (t - 1.0)});
  return e;
}

}  // namespace detail

/// [1 - LNCC(I0 o phi^{0->k}_{1/t}, IL)] + [1 - LNCC(IL o phi^{k->L}_{1/(t-1)}, I0)],
/// with I_k = I0 o phi_t synthesized and inner fields freshly predicted.
template <class T>
ad::Var<T> extrap_similarity(const FieldSource<T>& source, const Tensor<T>& i0, const Tensor<T>& il,
                             const Tensor<T>& mask, double t, const LossOptions& opt = {}) {
  detail::require_open_unit(t, opt.guard, "extrap_similarity");
  const auto e = detail::extrapolation_fields(source, i0, il, t);
  const ad::Var<T> v0 = ad::constant(i0), vl = ad::constant(il);
  return ad::add(lncc_loss(ad::warp(v0, e.forward), vl, mask, opt.lncc_radius),
                 lncc_loss(ad::warp(vl, e.backward), v0, mask, opt.lncc_radius));
}

/// |phi_1 - phi^{0->k}_{1/t}|^2 + |phi_{-1} - phi^{k->L}_{1/(t-1)}|^2.
template <class T>
ad::Var<T> extrap_flow_consistency(const FieldSource<T>& source, const Tensor<T>& i0, const Tensor<T>& il,
                                   const Tensor<T>& mask, double t, const LossOptions& opt = {}) {
  detail::require_open_unit(t, opt.guard, "extrap_flow_consistency");
  const auto e = detail::extrapolation_fields(source, i0, il, t);
  return ad::add(field_mse(e.phi_1, e.forward, mask), field_mse(e.phi_m1, e.backward, mask));
}

}  // namespace timeflow
