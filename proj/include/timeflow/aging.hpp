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

// Brain-aging analyses: inferring the temporal state of a query scan,
// prospective aging rates, and retrospective state-versus-age fits.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "timeflow/losses.hpp"
#include "timeflow/tempnet.hpp"
#include "timeflow/warpfield.hpp"

namespace timeflow {

struct InferOptions {
  Index seeds = 32;
  double tolerance = 1e-3;
  double flat_range = 1e-4;  // smaller spread of the seed objective is "indistinguishable"
  Index lncc_radius = 4;
};

struct TimeBounds {
  double lo = 0.0;
  double hi = 1.0;
};

/// t -> field for a fixed input pair.
using FieldFamily = std::function<DisplacementField(double)>;
/// Batched form of the same family; defaults to calling FieldFamily per time.
using FieldBatch = std::function<std::vector<DisplacementField>(const std::vector<double>&)>;

struct InferResult {
  double t = 0.0;
  double score = 0.0;
  std::vector<double> seed_times;
  std::vector<double> seed_scores;
};

/// argmax over t in bounds of lncc(warp(i0, phi_t), query): a grid of seeds,
/// then golden-section search on the bracket around the best seed.
inline InferResult infer_t(const FieldBatch& family, const Volume& i0, const Volume& query, TimeBounds bounds,
                           const InferOptions& opt = {}) {
  if (!std::isfinite(bounds.lo) || !std::isfinite(bounds.hi) || !(bounds.lo < bounds.hi)) {
    throw DomainError("infer_t: bounds must be finite with lo < hi");
  }
  if (opt.seeds < 2) throw ConfigError("infer_t: need at least two seeds");
  require_same_dims(i0.dims, query.dims, "infer_t");
  auto score = [&](const DisplacementField& phi) { return lncc(warp(i0, phi), query, opt.lncc_radius, query.mask); };

  InferResult r;
  const double step = (bounds.hi - bounds.lo) / static_cast<double>(opt.seeds - 1);
  for (Index s = 0; s < opt.seeds; ++s) r.seed_times.push_back(bounds.lo + step * static_cast<double>(s));
  r.seed_times.back() = bounds.hi;
  for (const auto& phi : family(r.seed_times)) r.seed_scores.push_back(score(phi));

  const auto [lo_it, hi_it] = std::minmax_element(r.seed_scores.begin(), r.seed_scores.end());
  if (*hi_it - *lo_it < opt.flat_range) {
    throw DegenerateError("infer_t: indistinguishable timepoints (objective range " + std::to_string(*hi_it - *lo_it) +
                          ")");
  }
  const std::size_t best = static_cast<std::size_t>(hi_it - r.seed_scores.begin());
  double a = r.seed_times[best > 0 ? best - 1 : 0];
  double b = r.seed_times[std::min(best + 1, r.seed_times.size() - 1)];

  auto f = [&](double t) { return score(family({t}).front()); };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > opt.tolerance) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  // The bracket interior can lose to the best seed when the objective is not unimodal.
  const double mid = 0.5 * (a + b);
  const double fmid = f(mid);
  if (fmid >= r.seed_scores[best]) {
    r.t = mid;
    r.score = fmid;
  } else {
    r.t = r.seed_times[best];
    r.score = r.seed_scores[best];
  }
  return r;
}

inline FieldBatch batch_of(const FieldFamily& family) {
  return [family](const std::vector<double>& ts) {
    std::vector<DisplacementField> out;
    for (double t : ts) out.push_back(family(t));
    return out;
  };
}

template <class T>
FieldBatch network_family(const TimeConditionedRegNet<T>& net, const Volume& i0, const Volume& il) {
  return [&net, &i0, &il](const std::vector<double>& ts) { return net.predict_many(i0, il, ts); };
}

template <class T>
InferResult infer_t(const TimeConditionedRegNet<T>& net, const Volume& i0, const Volume& il, const Volume& query,
                    TimeBounds bounds, const InferOptions& opt = {}) {
  require_same_dims(i0.dims, il.dims, "infer_t");
  return infer_t(network_family(net, i0, il), i0, query, bounds, opt);
}

struct AgingRecord {
  std::string subject_id;
  double t_est = 0.0;
  double chronological_ratio = 1.0;
  double rate = 0.0;
  Diagnosis diagnosis = Diagnosis::Unknown;
};

struct TimedScan {
  const Volume* volume = nullptr;
  double tau = 0.0;  // years
};

inline constexpr double kIntervalTolerance = 0.25;

/// Checks the visit times of a prospective triplet and returns (tau2 - tau0) / (tau1 - tau0).
inline double chronological_ratio(double tau0, double tau1, double tau2) {
  if (!(tau0 < tau1 && tau1 < tau2)) throw DomainError("prospective_rate: visit times must increase");
  const double d1 = tau1 - tau0, d2 = tau2 - tau1;
  if (std::abs(d2 - d1) > kIntervalTolerance * d1) {
    throw DomainError("prospective_rate: interval mismatch (" + std::to_string(d1) + " vs " + std::to_string(d2) + ")");
  }
  return (tau2 - tau0) / d1;
}

/// The first two scans are the network inputs; the third is located on
/// t in [1, 8] and compared with its chronological position.
inline AgingRecord prospective_rate(const FieldBatch& family, const TimedScan& s0, const TimedScan& s1,
                                    const TimedScan& s2, const std::string& subject = {},
                                    Diagnosis diagnosis = Diagnosis::Unknown, const InferOptions& opt = {}) {
  AgingRecord rec;
  rec.subject_id = subject;
  rec.diagnosis = diagnosis;
  rec.chronological_ratio = chronological_ratio(s0.tau, s1.tau, s2.tau);
  rec.t_est = infer_t(family, *s0.volume, *s2.volume, {1.0, 8.0}, opt).t;
  rec.rate = rec.t_est / rec.chronological_ratio;
  return rec;
}

template <class T>
AgingRecord prospective_rate(const TimeConditionedRegNet<T>& net, const TimedScan& s0, const TimedScan& s1,
                             const TimedScan& s2, const std::string& subject = {},
                             Diagnosis diagnosis = Diagnosis::Unknown, const InferOptions& opt = {}) {
  require_same_dims(s0.volume->dims, s1.volume->dims, "prospective_rate");
  return prospective_rate(network_family(net, *s0.volume, *s1.volume), s0, s1, s2, subject, diagnosis, opt);
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
};

/// Least-squares line through (x, y) points.
inline LinearFit retrospective_fit(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 2) throw DegenerateError("retrospective_fit: need at least two points");
  double mx = 0.0, my = 0.0;
  for (const auto& [x, y] : points) mx += x, my += y;
  mx /= static_cast<double>(points.size());
  my /= static_cast<double>(points.size());
  double sxx = 0.0, sxy = 0.0;
  for (const auto& [x, y] : points) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
  }
  if (!(sxx > 1e-12 * std::max(1.0, mx * mx))) throw DegenerateError("retrospective_fit: degenerate x variance");
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

struct TrajectoryPoint {
  double years = 0.0;  // since baseline
  double t_est = 0.0;
};

struct Trajectory {
  std::string subject_id;
  Diagnosis diagnosis = Diagnosis::Unknown;
  std::vector<TrajectoryPoint> points;
  LinearFit fit;
};

/// Which visit pair defines t = 1 in a retrospective trajectory.
///   FirstLast:   (first, last), t searched on [0, 1]; endpoints pinned at 0 and 1.
///   FirstSecond: (first, second), t searched on [0, 8]; the first interval is the unit.
enum class RetroReference { FirstLast, FirstSecond };

/// Locates every visit of a series on the t axis of the reference pair and
/// fits t against years since baseline.
/// (moving, fixed) -> field family for that pair.
using FamilyFactory = std::function<FieldBatch(const Volume&, const Volume&)>;

inline Trajectory retrospective_trajectory(const FamilyFactory& make_family, const LongitudinalSeries& s,
                                           RetroReference ref = RetroReference::FirstLast, bool normalize = true,
                                           const InferOptions& opt = {}) {
  s.validate();
  std::vector<Volume> vols;
  for (const auto& v : s.visits) vols.push_back(normalize ? normalize_intensity(v.volume) : v.volume);
  const std::size_t last = vols.size() - 1;
  const std::size_t unit = ref == RetroReference::FirstLast ? last : 1;
  const TimeBounds bounds = ref == RetroReference::FirstLast ? TimeBounds{0.0, 1.0} : TimeBounds{0.0, 8.0};
  Trajectory tr;
  tr.subject_id = s.subject_id;
  tr.diagnosis = s.visits.back().diagnosis;
  const FieldBatch family = make_family(vols[0], vols[unit]);
  std::vector<std::pair<double, double>> pts;
  for (std::size_t k = 0; k <= last; ++k) {
    const double years = s.visits[k].age_years - s.visits[0].age_years;
    double t = 0.0;
    if (k == unit) {
      t = 1.0;
    } else if (k > 0) {
      t = infer_t(family, vols[0], vols[k], bounds, opt).t;
    }
    tr.points.push_back({years, t});
    pts.emplace_back(years, t);
  }
  tr.fit = retrospective_fit(pts);
  return tr;
}

template <class T>
Trajectory retrospective_trajectory(const TimeConditionedRegNet<T>& net, const LongitudinalSeries& s,
                                    RetroReference ref = RetroReference::FirstLast, bool normalize = true,
                                    const InferOptions& opt = {}) {
  return retrospective_trajectory(
      [&net](const Volume& a, const Volume& b) -> FieldBatch {
        return [&net, a, b](const std::vector<double>& ts) { return net.predict_many(a, b, ts); };
      },
      s, ref, normalize, opt);
}

/// Median with 40-60 and 25-75 percentile bands.
struct GroupSummary {
  Index count = 0;
  double median = 0.0;
  double p40 = 0.0, p60 = 0.0;
  double q25 = 0.0, q75 = 0.0;
};

inline GroupSummary summarize(const std::vector<double>& values) {
  if (values.empty()) throw DegenerateError("summarize: empty group");
  GroupSummary g;
  g.count = static_cast<Index>(values.size());
  g.median = percentile(values, 50.0);
  g.p40 = percentile(values, 40.0);
  g.p60 = percentile(values, 60.0);
  g.q25 = percentile(values, 25.0);
  g.q75 = percentile(values, 75.0);
  return g;
}

}  // namespace timeflow
