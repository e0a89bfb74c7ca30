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

#include <gtest/gtest.h>

#include <cmath>

#include "timeflow/aging.hpp"
#include "timeflow/phantom.hpp"

using namespace timeflow;

namespace {

PhantomSpec aging_spec() {
  PhantomSpec s = nonlinear_phantom_spec();
  s.dims = {40, 40, 40};
  s.brain_radii = {17, 15, 14};
  s.profile = {8.0, 10.0, 13.0};
  s.atrophy_rate = 1.5;
  s.noise_sigma = 0.01;
  return s;
}

/// Exact stationary flow of the pair (first visit, visit at `years`): phi_t
/// advances the flow by t times the flow time of that interval.
FieldBatch oracle_family(const PhantomSpec& spec, double years) {
  const double unit = spec.flow_time(0.0, years);
  return batch_of([spec, unit](double t) { return PhantomModel(spec).field(0.0, t * unit); });
}

Volume visit(const PhantomSpec& spec, double years) {
  return normalize_intensity(generate_phantom_series(spec, {0.0, years}).series.visits.back().volume);
}

}  // namespace

TEST(InferT, EndpointsOfThePair) {
  const PhantomSpec s = aging_spec();
  const auto series = generate_phantom_series(s, {0.0, 1.0}).series;
  const Volume v0 = normalize_intensity(series.visits[0].volume), v1 = normalize_intensity(series.visits[1].volume);
  const auto family = oracle_family(s, 1.0);
  EXPECT_NEAR(infer_t(family, v0, v0, {0.0, 1.0}).t, 0.0, 0.05);
  EXPECT_NEAR(infer_t(family, v0, v1, {0.0, 1.0}).t, 1.0, 0.05);
}

TEST(InferT, RecoversGroundTruthTimeTwo) {
  const PhantomSpec s = aging_spec();
  const auto series = generate_phantom_series(s, {0.0, 1.0, 2.0}).series;
  const Volume v0 = normalize_intensity(series.visits[0].volume), v2 = normalize_intensity(series.visits[2].volume);
  const double t = infer_t(oracle_family(s, 1.0), v0, v2, {1.0, 8.0}).t;
  EXPECT_GE(t, 1.85);
  EXPECT_LE(t, 2.15);
}

TEST(InferT, MonotoneInQueryTime) {
  const PhantomSpec s = aging_spec();
  const Volume v0 = normalize_intensity(generate_phantom_series(s, {0.0}).series.visits[0].volume);
  const auto family = oracle_family(s, 1.0);
  double prev = -1.0;
  for (double q : {1.25, 1.5, 2.0, 2.5, 3.0}) {
    const double t = infer_t(family, v0, visit(s, q), {1.0, 8.0}).t;
    EXPECT_GE(t, prev) << "query time " << q;
    EXPECT_NEAR(t, q, 0.2);
    prev = t;
  }
}

TEST(InferT, GoldenSectionPinsATranslation) {
  // Family: translations by t * p of a smooth image; the query sits at t* = 0.37.
  const Dims3 d{24, 24, 24};
  Volume img(d);
  for (Index k = 0; k < d.z; ++k)
    for (Index j = 0; j < d.y; ++j)
      for (Index i = 0; i < d.x; ++i)
        img.at(i, j, k) = static_cast<float>(0.5 + 0.3 * std::sin(0.4 * i) * std::cos(0.3 * j) + 0.1 * std::sin(0.5 * k));
  const Vec3 p{3.0, -2.0, 1.0};
  auto family = batch_of([&](double t) { return translation_field(d, {t * p[0], t * p[1], t * p[2]}); });
  Volume query = warp(img, translation_field(d, {0.37 * p[0], 0.37 * p[1], 0.37 * p[2]}));
  std::vector<std::uint8_t> interior(d.count(), 0);
  for (Index k = 5; k < 19; ++k)
    for (Index j = 5; j < 19; ++j)
      for (Index i = 5; i < 19; ++i) interior[d.offset(i, j, k)] = 1;
  query.mask = interior;
  const auto r = infer_t(family, img, query, {0.0, 1.0});
  EXPECT_NEAR(r.t, 0.37, 2e-3);
  EXPECT_EQ(r.seed_times.size(), 32u);
  EXPECT_DOUBLE_EQ(r.seed_times.front(), 0.0);
  EXPECT_DOUBLE_EQ(r.seed_times.back(), 1.0);
}

TEST(InferT, AffineIntensityChangeKeepsTheArgmax) {
  const PhantomSpec s = aging_spec();
  const Volume v0 = normalize_intensity(generate_phantom_series(s, {0.0}).series.visits[0].volume);
  const Volume q = visit(s, 2.0);
  Volume q2 = q;
  for (auto& x : q2.data) x = 2.5f * x + 0.3f;
  const auto family = oracle_family(s, 1.0);
  EXPECT_NEAR(infer_t(family, v0, q, {1.0, 8.0}).t, infer_t(family, v0, q2, {1.0, 8.0}).t, 2e-3);
}

TEST(InferT, FlatObjectiveIsIndistinguishable) {
  const PhantomSpec s = aging_spec();
  const Volume v0 = normalize_intensity(generate_phantom_series(s, {0.0}).series.visits[0].volume);
  auto still = batch_of([&](double) { return identity_field(v0.dims); });
  EXPECT_THROW(infer_t(still, v0, visit(s, 1.0), {0.0, 1.0}), DegenerateError);
  EXPECT_THROW(infer_t(still, v0, v0, {1.0, 1.0}), DomainError);
  EXPECT_THROW(infer_t(still, v0, v0, {0.0, INFINITY}), DomainError);
}

TEST(Prospective, ChronologicalRatio) {
  EXPECT_DOUBLE_EQ(chronological_ratio(0.0, 1.0, 2.0), 2.0);
  EXPECT_DOUBLE_EQ(chronological_ratio(70.0, 71.5, 73.2), 3.2 / 1.5);
  EXPECT_THROW(chronological_ratio(0.0, 1.0, 2.5), DomainError);  // mismatch 0.5 > 0.25
  EXPECT_NO_THROW(chronological_ratio(0.0, 1.0, 2.25));
  EXPECT_THROW(chronological_ratio(0.0, 1.0, 1.0), DomainError);
  EXPECT_THROW(chronological_ratio(1.0, 0.0, 2.0), DomainError);
}

TEST(Prospective, ConstantRateIsAboutOne) {
  const PhantomSpec s = aging_spec();
  const auto series = generate_phantom_series(s, {0.0, 1.0, 2.0}).series;
  std::vector<Volume> v;
  for (const auto& x : series.visits) v.push_back(normalize_intensity(x.volume));
  const AgingRecord r =
      prospective_rate(oracle_family(s, 1.0), {&v[0], 0.0}, {&v[1], 1.0}, {&v[2], 2.0}, "a", Diagnosis::CN);
  EXPECT_NEAR(r.rate, 1.0, 0.1);
  EXPECT_DOUBLE_EQ(r.chronological_ratio, 2.0);
  EXPECT_DOUBLE_EQ(r.rate, r.t_est / r.chronological_ratio);
  EXPECT_EQ(r.subject_id, "a");
}

TEST(Prospective, AccelerationInTheSecondIntervalRaisesTheRate) {
  PhantomSpec s = aging_spec();
  s.acceleration = 2.0;
  s.acceleration_onset = 1.0;
  const auto series = generate_phantom_series(s, {0.0, 1.0, 2.0}).series;
  std::vector<Volume> v;
  for (const auto& x : series.visits) v.push_back(normalize_intensity(x.volume));
  const AgingRecord r = prospective_rate(oracle_family(s, 1.0), {&v[0], 0.0}, {&v[1], 1.0}, {&v[2], 2.0});
  EXPECT_GT(r.rate, 1.0);
  EXPECT_NEAR(r.rate, 1.5, 0.1);
}

TEST(Prospective, CohortMediansAreOrdered) {
  CohortSpec normal;
  normal.base = aging_spec();
  normal.base.dims = {32, 32, 32};
  normal.base.brain_radii = {13, 12, 11};
  normal.base.profile = {6.0, 8.0, 10.5};
  CohortSpec fast = normal;
  fast.base.acceleration = 2.0;
  fast.base.acceleration_onset = 1.0;
  auto rates = [](const CohortSpec& c, std::uint64_t seed) {
    std::vector<double> out;
    std::mt19937_64 rng(seed);
    for (int n = 0; n < 6; ++n) {
      const PhantomSpec s = sample_subject_spec(c, rng());
      const auto series = generate_phantom_series(s, c.times).series;
      std::vector<Volume> v;
      for (const auto& x : series.visits) v.push_back(normalize_intensity(x.volume));
      out.push_back(prospective_rate(oracle_family(s, 1.0), {&v[0], 0.0}, {&v[1], 1.0}, {&v[2], 2.0}).rate);
    }
    return out;
  };
  const GroupSummary a = summarize(rates(normal, 5)), b = summarize(rates(fast, 6));
  EXPECT_GT(b.median, a.median);
  EXPECT_GT(b.q25, a.q75);
}

TEST(Retrospective, LeastSquaresFits) {
  const LinearFit f = retrospective_fit({{0, 0}, {1, 0.5}, {2, 1.0}, {4, 2.0}});
  EXPECT_NEAR(f.slope, 0.5, 1e-12);
  EXPECT_NEAR(f.intercept, 0.0, 1e-12);
  const LinearFit g = retrospective_fit({{1, 3}, {3, -1}});
  EXPECT_NEAR(g.slope, -2.0, 1e-12);
  EXPECT_NEAR(g.intercept, 5.0, 1e-12);
  // Symmetric noise around y = 1 + 2x leaves the fit unchanged.
  const LinearFit h = retrospective_fit({{0, 1.1}, {0, 0.9}, {1, 3.1}, {1, 2.9}});
  EXPECT_NEAR(h.slope, 2.0, 1e-12);
  EXPECT_NEAR(h.intercept, 1.0, 1e-12);
  EXPECT_THROW(retrospective_fit({{1, 1}}), DegenerateError);
  EXPECT_THROW(retrospective_fit({{1, 1}, {1, 2}}), DegenerateError);
}

TEST(Retrospective, AcceleratedCohortHasSteeperMedianSlope) {
  CohortSpec normal;
  normal.base = aging_spec();
  normal.base.dims = {32, 32, 32};
  normal.base.brain_radii = {13, 12, 11};
  normal.base.profile = {6.0, 8.0, 10.5};
  normal.base.atrophy_rate = 0.8;
  normal.times = {0.0, 1.0, 2.0, 3.0};
  CohortSpec fast = normal;
  fast.base.acceleration = 2.0;
  fast.base.acceleration_onset = 1.0;
  auto slopes = [](const CohortSpec& c, std::uint64_t seed) {
    std::vector<double> out;
    std::mt19937_64 rng(seed);
    for (int n = 0; n < 4; ++n) {
      const PhantomSpec s = sample_subject_spec(c, rng());
      const auto series = generate_phantom_series(s, c.times).series;
      const FamilyFactory make = [&](const Volume&, const Volume&) { return oracle_family(s, 1.0); };
      const Trajectory tr = retrospective_trajectory(make, series, RetroReference::FirstSecond);
      EXPECT_EQ(tr.points.size(), 4u);
      EXPECT_DOUBLE_EQ(tr.points[1].t_est, 1.0);
      out.push_back(tr.fit.slope);
    }
    return out;
  };
  const GroupSummary a = summarize(slopes(normal, 1)), b = summarize(slopes(fast, 2));
  EXPECT_NEAR(a.median, 1.0, 0.1);
  EXPECT_GT(b.median, a.median);
  EXPECT_GT(b.p40, a.p60);
}

TEST(Retrospective, FirstLastReferencePinsEndpoints) {
  PhantomSpec s = aging_spec();
  s.dims = {32, 32, 32};
  s.brain_radii = {13, 12, 11};
  s.profile = {6.0, 8.0, 10.5};
  const auto series = generate_phantom_series(s, {0.0, 1.0, 2.0}).series;
  const FamilyFactory make = [&](const Volume&, const Volume&) { return oracle_family(s, 2.0); };
  const Trajectory tr = retrospective_trajectory(make, series);
  ASSERT_EQ(tr.points.size(), 3u);
  EXPECT_EQ(tr.points[0].t_est, 0.0);
  EXPECT_EQ(tr.points[2].t_est, 1.0);
  EXPECT_NEAR(tr.points[1].t_est, 0.5, 0.05);
  EXPECT_NEAR(tr.fit.slope, 0.5, 0.03);
}

TEST(Summary, Percentiles) {
  const GroupSummary g = summarize({5, 1, 4, 2, 3});
  EXPECT_EQ(g.count, 5);
  EXPECT_DOUBLE_EQ(g.median, 3.0);
  EXPECT_DOUBLE_EQ(g.q25, 2.0);
  EXPECT_DOUBLE_EQ(g.q75, 4.0);
  EXPECT_DOUBLE_EQ(g.p40, 2.6);
  EXPECT_DOUBLE_EQ(g.p60, 3.4);
  EXPECT_THROW(summarize({}), DegenerateError);
}
