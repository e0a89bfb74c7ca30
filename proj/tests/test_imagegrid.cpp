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

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <random>

#include "timeflow/nifti.hpp"
#include "timeflow/phantom.hpp"

using namespace timeflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const fs::path p = fs::temp_directory_path() / "timeflow_test_imagegrid";
  fs::create_directories(p);
  return p;
}

double mean_abs_diff(const Volume& a, const Volume& b, const std::vector<std::uint8_t>& mask) {
  double acc = 0.0;
  Index n = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    if (!mask[i]) continue;
    acc += std::abs(static_cast<double>(a.data[i]) - b.data[i]);
    ++n;
  }
  return acc / static_cast<double>(n);
}

}  // namespace

TEST(Volume, PercentileMatchesSortedOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 10);
  std::vector<double> v(101);
  for (auto& x : v) x = u(rng);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_DOUBLE_EQ(percentile(v, 0.0), sorted.front());
  EXPECT_DOUBLE_EQ(percentile(v, 100.0), sorted.back());
  EXPECT_DOUBLE_EQ(percentile(v, 50.0), sorted[50]);
  EXPECT_NEAR(percentile(v, 99.9), sorted[99] + 0.9 * (sorted[100] - sorted[99]), 1e-12);
}

TEST(Volume, NormalizeUniformForeground) {
  // 1001 foreground values 0..1000 under an explicit mask.
  Volume v(Dims3{11, 13, 7});
  v.mask.assign(v.data.size(), 0);
  for (int i = 0; i <= 1000; ++i) {
    v.data[i] = static_cast<float>(i);
    v.mask[i] = 1;
  }
  std::vector<double> fg;
  for (int i = 0; i <= 1000; ++i) fg.push_back(i);
  std::sort(fg.begin(), fg.end());
  const double pos = 0.999 * 1000.0;
  const double p999 = fg[999] + (pos - 999.0) * (fg[1000] - fg[999]);
  EXPECT_NEAR(p999, 999.0, 1e-9);
  Volume n = normalize_intensity(v);
  EXPECT_NEAR(n.data[0], 0.0, 1e-7);
  EXPECT_NEAR(n.data[1000], 1000.0 / p999, 1e-6);
  EXPECT_NEAR(n.data[1000], 1.001, 1e-3);
}

TEST(Volume, NormalizeIdempotentAndErrors) {
  PhantomSpec s;
  s.dims = {24, 24, 24};
  s.brain_radii = {10, 9, 8};
  s.ventricle_radius = 2.0;
  const Volume v = generate_phantom_series(s, {0.0}).series.visits[0].volume;
  const Volume a = normalize_intensity(v);
  const Volume b = normalize_intensity(a);
  for (std::size_t i = 0; i < a.data.size(); ++i) ASSERT_NEAR(a.data[i], b.data[i], 1e-6);
  for (float x : a.data) EXPECT_LE(x, 1.0011f * 1.01f);

  Volume c(Dims3{4, 4, 4}, 3.0f);
  EXPECT_THROW(normalize_intensity(c), DegenerateError);
  Volume z(Dims3{4, 4, 4}, 0.0f);
  EXPECT_THROW(normalize_intensity(z), DegenerateError);
  Volume bad(Dims3{2, 2, 2});
  bad.data[3] = std::nanf("");
  EXPECT_THROW(bad.validate(), DomainError);
}

TEST(Volume, MaskClosingFillsSingleVoxelHoles) {
  Volume v(Dims3{7, 7, 7});
  for (Index k = 1; k < 6; ++k)
    for (Index j = 1; j < 6; ++j)
      for (Index i = 1; i < 6; ++i) v.at(i, j, k) = 1.0f;
  v.at(3, 3, 3) = 0.0f;
  const auto m = foreground_mask(v);
  EXPECT_EQ(m[v.dims.offset(3, 3, 3)], 1);
  EXPECT_EQ(m[v.dims.offset(0, 0, 0)], 0);
  EXPECT_EQ(mask_count(m), 125);
}

TEST(Volume, SeriesValidation) {
  LongitudinalSeries s;
  s.subject_id = "a";
  s.visits.push_back({Volume(Dims3{2, 2, 2}), 70.0, Diagnosis::CN});
  EXPECT_THROW(s.validate(), ConfigError);
  s.visits.push_back({Volume(Dims3{2, 2, 2}), 70.0, Diagnosis::CN});
  EXPECT_THROW(s.validate(), ConfigError);
  s.visits[1].age_years = 72.0;
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(parse_diagnosis("Dementia"), Diagnosis::Dementia);
  EXPECT_EQ(parse_diagnosis("??"), Diagnosis::Unknown);
}

TEST(Nifti, RoundTripIsLossless) {
  for (const char* name : {"rt.nii", "rt.nii.gz"}) {
    Volume v(Dims3{5, 6, 7});
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0.0f, 2.0f);
    for (auto& x : v.data) x = u(rng);
    v.spacing = {0.9, 1.1, 1.25};
    v.origin = {-10.5, 3.0, 7.25};
    const auto path = (scratch_dir() / name).string();
    nifti::write_volume(path, v);
    const Volume r = nifti::read_volume(path);
    ASSERT_EQ(r.dims, v.dims);
    EXPECT_EQ(r.data, v.data);
    for (int i = 0; i < 3; ++i) {
      EXPECT_FLOAT_EQ(static_cast<float>(r.spacing[i]), static_cast<float>(v.spacing[i]));
      EXPECT_FLOAT_EQ(static_cast<float>(r.origin[i]), static_cast<float>(v.origin[i]));
    }
    nifti::write_volume(path, r);
    const Volume r2 = nifti::read_volume(path);
    EXPECT_EQ(r2.data, v.data);
  }
}

TEST(Nifti, FullSizeDimsAndEmptyMask) {
  Volume v(Dims3{160, 160, 192});
  const auto path = (scratch_dir() / "big.nii.gz").string();
  nifti::write_volume(path, v);
  const Volume r = nifti::read_volume(path);
  EXPECT_EQ(r.dims, (Dims3{160, 160, 192}));
  EXPECT_EQ(mask_count(r.mask), 0);
}

TEST(Nifti, RejectsVectorAndMissingFiles) {
  DisplacementField f(Dims3{3, 4, 5});
  for (std::size_t i = 0; i < f.u.size(); ++i) f.u[i] = static_cast<float>(i) * 0.01f;
  const auto path = (scratch_dir() / "field.nii.gz").string();
  nifti::write_field(path, f);
  EXPECT_THROW(nifti::read_volume(path), FormatError);
  const auto g = nifti::read_field(path);
  EXPECT_EQ(g.u, f.u);
  EXPECT_THROW(nifti::read_volume((scratch_dir() / "missing.nii").string()), IoError);

  const auto junk = (scratch_dir() / "junk.nii").string();
  std::FILE* fp = std::fopen(junk.c_str(), "wb");
  const char text[400] = "not an image";
  std::fwrite(text, 1, sizeof(text), fp);
  std::fclose(fp);
  EXPECT_THROW(nifti::read_volume(junk), FormatError);
}

TEST(Phantom, FlowRadiusGroupProperty) {
  const RadialFlowProfile p{2.0, 5.0, 9.0};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> r(0.1, 10.0), s(-4.0, 4.0);
  for (int n = 0; n < 2000; ++n) {
    const double rho = r(rng), a = s(rng), b = s(rng);
    EXPECT_NEAR(flow_radius(p, flow_radius(p, rho, a), b), flow_radius(p, rho, a + b), 1e-9);
  }
  EXPECT_DOUBLE_EQ(flow_radius(p, 3.0, 1.5), 4.5);
  EXPECT_NEAR(flow_radius(p, 0.5, 1.0), 0.5 * std::exp(0.5), 1e-12);
  EXPECT_NEAR(flow_radius(p, 1.0, 2.0), 2.0 + 2.0 - 2.0 * std::log(2.0), 1e-12);
  EXPECT_DOUBLE_EQ(flow_radius(p, 9.5, 3.0), 9.5);
}

TEST(Phantom, FlowRadiusSolvesTheOde) {
  const RadialFlowProfile p{2.0, 5.0, 9.0};
  // Forward Euler with a tiny step as an independent integrator.
  for (double rho0 : {0.5, 1.9, 3.0, 4.9, 6.0, 8.5}) {
    for (double total : {-3.0, 2.5}) {
      double rho = rho0;
      const int steps = 200000;
      const double h = total / steps;
      for (int i = 0; i < steps; ++i) rho += h * p.speed(rho + 0.5 * h * p.speed(rho));
      EXPECT_NEAR(flow_radius(p, rho0, total), rho, 1e-6) << rho0 << " " << total;
    }
  }
}

TEST(Phantom, ZeroRateGivesIdenticalVisits) {
  PhantomSpec s;
  s.dims = {20, 20, 20};
  s.brain_radii = {8, 8, 7};
  s.ventricle_radius = 2.0;
  s.atrophy_rate = 0.0;
  s.noise_sigma = 0.0;
  const auto out = generate_phantom_series(s, {0.0, 1.0, 2.0});
  for (const auto& v : out.series.visits) EXPECT_EQ(v.volume.data, out.series.visits[0].volume.data);
  for (const auto& f : out.fields)
    for (float x : f.u) EXPECT_EQ(x, 0.0f);
}

TEST(Phantom, LinearShellDoublesField) {
  PhantomSpec s;
  s.dims = {32, 32, 32};
  s.brain_radii = {14, 13, 12};
  s.ventricle_radius = 3.0;
  s.profile = {1.0, 12.0, 13.0};
  s.atrophy_rate = 0.8;
  const auto out = generate_phantom_series(s, {0.0, 1.0, 2.0});
  const Vec3 c = s.center();
  // A point on the x axis whose pre-image stays in the constant-speed shell.
  const Index i = static_cast<Index>(std::lround(c[0] + 7.0 * s.ventricle_axes[0]));
  const Index j = static_cast<Index>(std::lround(c[1])), k = static_cast<Index>(std::lround(c[2]));
  const Index q = s.dims.offset(i, j, k);
  const Vec3 u1 = out.fields[1].at(q), u2 = out.fields[2].at(q);
  const double m1 = std::sqrt(u1[0] * u1[0] + u1[1] * u1[1] + u1[2] * u1[2]);
  const double m2 = std::sqrt(u2[0] * u2[0] + u2[1] * u2[1] + u2[2] * u2[2]);
  EXPECT_GT(m1, 0.1);
  EXPECT_NEAR(m2, 2.0 * m1, 1e-5);
  // Analytic: the ellipsoidal radius of the pre-image shrinks by rate * t.
  const double rho = std::sqrt(std::pow((i - c[0]) / s.ventricle_axes[0], 2) + std::pow((j - c[1]) / s.ventricle_axes[1], 2) +
                               std::pow((k - c[2]) / s.ventricle_axes[2], 2));
  const double dist = std::sqrt(std::pow(i - c[0], 2) + std::pow(j - c[1], 2) + std::pow(k - c[2], 2));
  EXPECT_NEAR(m1, 0.8 * dist / rho, 1e-5);
}

TEST(Phantom, DeterministicUnderSeed) {
  PhantomSpec s;
  s.dims = {16, 16, 16};
  s.brain_radii = {7, 6, 6};
  s.ventricle_radius = 2.0;
  s.seed = 99;
  const auto a = generate_phantom_series(s, {0.0, 1.5});
  const auto b = generate_phantom_series(s, {0.0, 1.5});
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(a.series.visits[k].volume.data, b.series.visits[k].volume.data);
    EXPECT_EQ(a.fields[k].u, b.fields[k].u);
  }
  s.seed = 100;
  const auto c = generate_phantom_series(s, {0.0, 1.5});
  EXPECT_NE(a.series.visits[0].volume.data, c.series.visits[0].volume.data);
}

TEST(Phantom, GroundTruthFieldAlignsVisitsBelowNoiseFloor) {
  PhantomSpec s;
  s.dims = {40, 40, 40};
  s.brain_radii = {17, 15, 14};
  s.ventricle_radius = 3.5;
  s.profile = {5.0, 5.0, 11.0};
  s.atrophy_rate = 1.5;
  s.noise_sigma = 0.02;
  const auto out = generate_phantom_series(s, {0.0, 1.0});
  const Volume& i0 = out.series.visits[0].volume;
  const Volume& i1 = out.series.visits[1].volume;
  const auto& mask = i1.mask;
  const double before = mean_abs_diff(i0, i1, mask);
  const double after = mean_abs_diff(warp(i0, out.fields[1]), i1, mask);
  const double noise_floor = 2.0 * s.noise_sigma / std::sqrt(M_PI);  // E|n1 - n2|
  EXPECT_LT(after, noise_floor);
  EXPECT_LT(after, before);

  // Without noise only interpolation error remains.
  s.noise_sigma = 0.0;
  const auto clean = generate_phantom_series(s, {0.0, 1.0});
  const Volume& c0 = clean.series.visits[0].volume;
  const Volume& c1 = clean.series.visits[1].volume;
  EXPECT_LT(mean_abs_diff(warp(c0, clean.fields[1]), c1, c1.mask), 0.25 * mean_abs_diff(c0, c1, c1.mask));
}

TEST(Phantom, AccelerationChangesFlowTime) {
  PhantomSpec s;
  s.atrophy_rate = 2.0;
  s.acceleration = 2.0;
  s.acceleration_onset = 1.0;
  EXPECT_DOUBLE_EQ(s.flow_time(0.0, 1.0), 2.0);
  EXPECT_DOUBLE_EQ(s.flow_time(0.0, 2.0), 6.0);
  s.atrophy_rate = -1.0;
  EXPECT_THROW(s.validate(), DomainError);
}
