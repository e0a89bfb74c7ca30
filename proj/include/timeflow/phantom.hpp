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

// Synthetic longitudinal atrophy phantoms with closed-form ground truth.
//
// The base anatomy is an ellipsoidal two-tissue brain with an ellipsoidal CSF
// ventricle. Atrophy is the flow of a radial velocity field centred on the
// ventricle. Radii are measured with the ventricle's ellipsoidal norm
//   rho(y) = |((y - c) / a)|,
// and the speed along each ray is a piecewise linear profile h(rho). Because
// the flow is an exact one-parameter group, the pull-back field between any
// two visits is known in closed form.

#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "timeflow/volume.hpp"
#include "timeflow/warpfield.hpp"

namespace timeflow {

/// Speed profile h(rho):
///   rho / inner                       for rho < inner
///   1                                 for inner <= rho <= shell
///   (outer - rho) / (outer - shell)   for shell < rho < outer
///   0                                 beyond outer
struct RadialFlowProfile {
  double inner = 1.0;
  double shell = 9.0;
  double outer = 12.0;

  void validate() const {
    if (!(inner > 0.0 && shell >= inner && outer > shell)) {
      throw DomainError("RadialFlowProfile: need 0 < inner <= shell < outer");
    }
  }

  double speed(double rho) const {
    if (rho < inner) return rho / inner;
    if (rho <= shell) return 1.0;
    if (rho < outer) return (outer - rho) / (outer - shell);
    return 0.0;
  }
};

/// Exact solution of d rho / ds = h(rho) after flow time `s` (either sign).
inline double flow_radius(const RadialFlowProfile& p, double rho, double s) {
  if (rho <= 0.0 || rho >= p.outer || s == 0.0) return rho;
  const double w = p.outer - p.shell;
  double left = s;
  for (int guard = 0; guard < 8 && left != 0.0; ++guard) {
    if (rho < p.inner) {
      if (left < 0.0) return rho * std::exp(left / p.inner);
      const double to_exit = p.inner * std::log(p.inner / rho);
      if (left <= to_exit) return rho * std::exp(left / p.inner);
      rho = p.inner;
      left -= to_exit;
    } else if (rho <= p.shell) {
      if (left > 0.0) {
        const double to_exit = p.shell - rho;
        if (left <= to_exit) return rho + left;
        rho = p.shell;
        left -= to_exit;
        // The compression zone is entered with zero remaining gap to shell.
        return p.outer - w * std::exp(-left / w);
      }
      const double to_exit = rho - p.inner;
      if (-left <= to_exit) return rho + left;
      rho = p.inner;
      left += to_exit;
      if (left < 0.0) return rho * std::exp(left / p.inner);
      return rho;
    } else {
      if (left > 0.0) return p.outer - (p.outer - rho) * std::exp(-left / w);
      const double to_exit = w * std::log(w / (p.outer - rho));
      if (-left <= to_exit) return p.outer - (p.outer - rho) * std::exp(-left / w);
      rho = p.shell;
      left += to_exit;
    }
  }
  return rho;
}

struct PhantomSpec {
  Dims3 dims{48, 48, 48};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 center_offset{0.0, 0.0, 0.0};  // voxels, relative to the grid centre
  Vec3 brain_radii{20.0, 18.0, 17.0};
  double gm_thickness = 3.0;
  Vec3 ventricle_axes{1.25, 1.0, 0.85};
  double ventricle_radius = 4.0;  // in ellipsoidal-norm units
  double intensity_csf = 0.15;
  double intensity_gm = 0.55;
  double intensity_wm = 0.85;
  double texture_amplitude = 0.08;
  double edge_width = 1.0;
  RadialFlowProfile profile{};
  double atrophy_rate = 1.0;  // ventricle expansion, norm units per year
  double acceleration = 1.0;  // rate multiplier after `acceleration_onset`
  double acceleration_onset = std::numeric_limits<double>::infinity();  // years
  double noise_sigma = 0.01;
  std::uint64_t seed = 1;

  void validate() const {
    if (!dims.positive()) throw DimensionError("PhantomSpec: dims must be positive");
    if (!(atrophy_rate >= 0.0)) throw DomainError("PhantomSpec: atrophy_rate must be >= 0");
    if (!(acceleration >= 0.0)) throw DomainError("PhantomSpec: acceleration must be >= 0");
    if (!(noise_sigma >= 0.0)) throw DomainError("PhantomSpec: noise_sigma must be >= 0");
    for (int i = 0; i < 3; ++i) {
      if (!(brain_radii[i] > 0.0 && ventricle_axes[i] > 0.0 && spacing[i] > 0.0)) {
        throw DomainError("PhantomSpec: radii, axes and spacing must be positive");
      }
    }
    profile.validate();
  }

  Vec3 center() const {
    return {0.5 * static_cast<double>(dims.x - 1) + center_offset[0],
            0.5 * static_cast<double>(dims.y - 1) + center_offset[1],
            0.5 * static_cast<double>(dims.z - 1) + center_offset[2]};
  }

  /// Flow time accumulated between the first visit `t0` and `t` (years).
  double flow_time(double t0, double t) const {
    const double onset = std::max(acceleration_onset, t0);
    const double slow = std::min(t, onset) - t0;
    const double fast = std::max(t - onset, 0.0);
    return atrophy_rate * (slow + acceleration * fast);
  }
};

/// Preset whose whole inner region expands exponentially, so that composing
/// the one-year map differs clearly from scaling it.
inline PhantomSpec nonlinear_phantom_spec() {
  PhantomSpec s;
  s.profile = {10.0, 12.0, 16.0};
  s.atrophy_rate = 2.0;
  return s;
}

namespace detail {

inline double smoothstep(double x) {
  if (x <= -1.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double u = 0.5 * (x + 1.0);
  return u * u * (3.0 - 2.0 * u);
}

struct TextureWave {
  Vec3 k;
  double phase;
};

inline std::vector<TextureWave> texture_waves(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  std::vector<TextureWave> waves(6);
  for (auto& w : waves) {
    Vec3 d{unit(rng), unit(rng), unit(rng)};
    const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) + 1e-12;
    const double wavelength = 6.0 + 6.0 * (0.5 * (unit(rng) + 1.0));
    for (int i = 0; i < 3; ++i) w.k[i] = 2.0 * M_PI / wavelength * d[i] / n;
    w.phase = angle(rng);
  }
  return waves;
}

}  // namespace detail

/// Continuous-space phantom: base anatomy plus the radial flow acting on it.
class PhantomModel {
 public:
  explicit PhantomModel(PhantomSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    center_ = spec_.center();
    waves_ = detail::texture_waves(spec_.seed);
  }

  const PhantomSpec& spec() const { return spec_; }

  double ventricle_norm(const Vec3& y) const {
    double acc = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double q = (y[i] - center_[i]) / spec_.ventricle_axes[i];
      acc += q * q;
    }
    return std::sqrt(acc);
  }

  /// Psi_s: transports a point along the radial flow for time `s`.
  Vec3 flow(const Vec3& y, double s) const {
    const double rho = ventricle_norm(y);
    if (rho <= 0.0) return y;
    const double ratio = flow_radius(spec_.profile, rho, s) / rho;
    Vec3 out;
    for (int i = 0; i < 3; ++i) out[i] = center_[i] + ratio * (y[i] - center_[i]);
    return out;
  }

  /// Base anatomy intensity at a continuous voxel position.
  double base_intensity(const Vec3& y) const {
    double qb = 0.0;
    double rmean = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double q = (y[i] - center_[i]) / spec_.brain_radii[i];
      qb += q * q;
      rmean += spec_.brain_radii[i] / 3.0;
    }
    const double depth = (1.0 - std::sqrt(qb)) * rmean;
    const double ew = spec_.edge_width;
    const double brain = detail::smoothstep(depth / ew);
    if (brain <= 0.0) return 0.0;
    const double gm = detail::smoothstep((spec_.gm_thickness - depth) / ew);
    double texture = 0.0;
    for (const auto& w : waves_) {
      texture += std::cos(w.k[0] * y[0] + w.k[1] * y[1] + w.k[2] * y[2] + w.phase);
    }
    texture *= spec_.texture_amplitude / std::sqrt(static_cast<double>(waves_.size()));
    const double tissue = (gm * spec_.intensity_gm + (1.0 - gm) * spec_.intensity_wm) * (1.0 + texture);
    const double vent = detail::smoothstep((spec_.ventricle_radius - ventricle_norm(y)) / ew);
    return brain * ((1.0 - vent) * tissue + vent * spec_.intensity_csf);
  }

  /// Noise-free image after flow time `s`: I_s(x) = I_base(Psi_{-s}(x)).
  Volume render(double s) const {
    Volume v(spec_.dims);
    v.spacing = spec_.spacing;
    const Dims3 d = spec_.dims;
    for (Index k = 0; k < d.z; ++k)
      for (Index j = 0; j < d.y; ++j)
        for (Index i = 0; i < d.x; ++i) {
          const Vec3 x{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
          v.at(i, j, k) = static_cast<float>(base_intensity(flow(x, -s)));
        }
    return v;
  }

  /// Pull-back field aligning the image at flow time s_a to the image at s_b.
  DisplacementField field(double s_a, double s_b) const {
    const Dims3 d = spec_.dims;
    DisplacementField f(d);
    f.spacing = spec_.spacing;
    const double ds = s_b - s_a;
    for (Index k = 0; k < d.z; ++k)
      for (Index j = 0; j < d.y; ++j)
        for (Index i = 0; i < d.x; ++i) {
          const Vec3 x{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
          const Vec3 y = flow(x, -ds);
          f.set(d.offset(i, j, k), {y[0] - x[0], y[1] - x[1], y[2] - x[2]});
        }
    return f;
  }

 private:
  PhantomSpec spec_;
  Vec3 center_{};
  std::vector<detail::TextureWave> waves_;
};

struct PhantomSeries {
  LongitudinalSeries series;
  std::vector<DisplacementField> fields;  // baseline -> visit k
  std::vector<double> flow_times;
};

/// Renders visits at `times` (years). Noise is added inside the brain only and
/// is seeded per visit, so the output depends only on the spec.
inline PhantomSeries generate_phantom_series(const PhantomSpec& spec, const std::vector<double>& times,
                                             const std::string& subject_id = "phantom",
                                             Diagnosis diagnosis = Diagnosis::Unknown) {
  if (times.empty()) throw DomainError("generate_phantom_series: no times");
  for (std::size_t k = 1; k < times.size(); ++k) {
    if (!(times[k] > times[k - 1])) throw DomainError("generate_phantom_series: times must be increasing");
  }
  const PhantomModel model(spec);
  PhantomSeries out;
  out.series.subject_id = subject_id;
  for (std::size_t k = 0; k < times.size(); ++k) {
    const double s = spec.flow_time(times.front(), times[k]);
    Volume v = model.render(s);
    if (spec.noise_sigma > 0.0) {
      std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + 7919ULL * (k + 1));
      std::normal_distribution<double> noise(0.0, spec.noise_sigma);
      for (auto& x : v.data) {
        const double n = noise(rng);
        if (x > 0.0f) x = static_cast<float>(x + n);
      }
    }
    v.mask = foreground_mask(v);
    out.series.visits.push_back({std::move(v), times[k], diagnosis});
    out.fields.push_back(model.field(0.0, s));
    out.flow_times.push_back(s);
  }
  return out;
}

/// Per-subject variation drawn around a template spec.
struct CohortSpec {
  PhantomSpec base{};
  std::vector<double> times{0.0, 1.0, 2.0};
  double radius_jitter = 0.06;     // relative
  double center_jitter = 1.0;      // voxels
  double ventricle_jitter = 0.1;   // relative
  double rate_jitter = 0.1;        // relative
  double intensity_jitter = 0.03;  // absolute
  Diagnosis diagnosis = Diagnosis::Unknown;
  std::string prefix = "sub";
};

inline PhantomSpec sample_subject_spec(const CohortSpec& cohort, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PhantomSpec s = cohort.base;
  for (int i = 0; i < 3; ++i) {
    s.brain_radii[i] *= 1.0 + cohort.radius_jitter * u(rng);
    s.center_offset[i] += cohort.center_jitter * u(rng);
  }
  s.ventricle_radius *= 1.0 + cohort.ventricle_jitter * u(rng);
  s.atrophy_rate *= 1.0 + cohort.rate_jitter * u(rng);
  s.intensity_gm += cohort.intensity_jitter * u(rng);
  s.intensity_wm += cohort.intensity_jitter * u(rng);
  s.intensity_csf += cohort.intensity_jitter * u(rng);
  s.seed = rng();
  return s;
}

inline std::vector<PhantomSeries> generate_cohort(const CohortSpec& cohort, std::size_t subjects, std::uint64_t seed) {
  std::vector<PhantomSeries> out;
  out.reserve(subjects);
  std::mt19937_64 rng(seed);
  for (std::size_t n = 0; n < subjects; ++n) {
    const PhantomSpec s = sample_subject_spec(cohort, rng());
    char id[64];
    std::snprintf(id, sizeof(id), "%s%03zu", cohort.prefix.c_str(), n);
    out.push_back(generate_phantom_series(s, cohort.times, id, cohort.diagnosis));
  }
  return out;
}

}  // namespace timeflow
