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

// Static PNG figures: group box plots, trajectory lines and slice error maps.
// Figures carry no text; colours encode diagnosis (CN green, MCI orange,
// Dementia red, other grey).

#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "timeflow/aging.hpp"
#include "timeflow/volume.hpp"

namespace timeflow::plot {

using Rgb = std::array<std::uint8_t, 3>;

inline Rgb diagnosis_color(Diagnosis d) {
  switch (d) {
    case Diagnosis::CN: return {46, 160, 67};
    case Diagnosis::MCI: return {240, 140, 20};
    case Diagnosis::Dementia: return {210, 40, 40};
    default: return {120, 120, 120};
  }
}

struct Canvas {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Canvas(int w, int h, Rgb background = {255, 255, 255}) : width(w), height(h), rgb(static_cast<std::size_t>(3 * w * h)) {
    for (int i = 0; i < w * h; ++i) std::copy(background.begin(), background.end(), rgb.begin() + 3 * i);
  }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    std::copy(c.begin(), c.end(), rgb.begin() + 3 * (y * width + x));
  }

  Rgb get(int x, int y) const {
    const auto* p = rgb.data() + 3 * (y * width + x);
    return {p[0], p[1], p[2]};
  }

  void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, c);
  }

  void line(int x0, int y0, int x1, int y1, Rgb c, int thickness = 1) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    const int r = thickness / 2;
    while (true) {
      fill_rect(x0 - r, y0 - r, x0 + r, y0 + r, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void rect_outline(int x0, int y0, int x1, int y1, Rgb c, int thickness = 1) {
    line(x0, y0, x1, y0, c, thickness);
    line(x1, y0, x1, y1, c, thickness);
    line(x1, y1, x0, y1, c, thickness);
    line(x0, y1, x0, y0, c, thickness);
  }
};

inline void write_png(const std::string& path, const Canvas& c) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng write failed for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(c.width), static_cast<png_uint_32>(c.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < c.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(c.rgb.data() + 3 * y * c.width));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

/// Linear map from data range to pixel range (y grows downwards).
struct Axis {
  double lo = 0.0, hi = 1.0;
  int p0 = 0, p1 = 1;
  int operator()(double v) const {
    const double f = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return static_cast<int>(std::lround(p0 + f * (p1 - p0)));
  }
};

inline std::pair<double, double> padded_range(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 1.0};
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  double a = *lo, b = *hi;
  const double pad = b > a ? 0.08 * (b - a) : 0.5;
  return {a - pad, b + pad};
}

struct BoxGroup {
  Diagnosis diagnosis = Diagnosis::Unknown;
  std::vector<double> values;
};

/// One box per group: 25-75 box, median bar, min/max whiskers, and a dashed
/// reference line at `reference` (e.g. rate 1).
inline Canvas box_plot(const std::vector<BoxGroup>& groups, double reference = 1.0, int width = 480, int height = 360) {
  Canvas c(width, height);
  std::vector<double> all{reference};
  for (const auto& g : groups) all.insert(all.end(), g.values.begin(), g.values.end());
  const auto [lo, hi] = padded_range(all);
  const Axis y{lo, hi, height - 30, 20};
  const Rgb axis{40, 40, 40};
  c.line(40, 20, 40, height - 30, axis);
  c.line(40, height - 30, width - 20, height - 30, axis);
  for (int x = 42; x < width - 20; x += 8) c.line(x, y(reference), x + 3, y(reference), {150, 150, 150});
  const int n = static_cast<int>(groups.size());
  const int slot = n > 0 ? (width - 80) / n : 0;
  for (int i = 0; i < n; ++i) {
    if (groups[i].values.empty()) continue;
    const GroupSummary s = summarize(groups[i].values);
    const auto [mn, mx] = std::minmax_element(groups[i].values.begin(), groups[i].values.end());
    const int cx = 60 + slot * i + slot / 2, half = std::max(6, slot / 4);
    const Rgb col = diagnosis_color(groups[i].diagnosis);
    c.line(cx, y(*mn), cx, y(*mx), axis);
    c.line(cx - half / 2, y(*mn), cx + half / 2, y(*mn), axis);
    c.line(cx - half / 2, y(*mx), cx + half / 2, y(*mx), axis);
    c.fill_rect(cx - half, y(s.q75), cx + half, y(s.q25), col);
    c.rect_outline(cx - half, y(s.q75), cx + half, y(s.q25), axis);
    c.line(cx - half, y(s.median), cx + half, y(s.median), axis, 3);
  }
  return c;
}

/// Thin per-subject lines of (years, t) and a thick median fit per diagnosis.
inline Canvas trajectory_plot(const std::vector<Trajectory>& trajectories, int width = 480, int height = 360) {
  Canvas c(width, height);
  std::vector<double> xs, ys;
  for (const auto& t : trajectories)
    for (const auto& p : t.points) xs.push_back(p.years), ys.push_back(p.t_est);
  const auto [x0, x1] = padded_range(xs);
  const auto [y0, y1] = padded_range(ys);
  const Axis ax{x0, x1, 40, width - 20}, ay{y0, y1, height - 30, 20};
  const Rgb axis{40, 40, 40};
  c.line(40, 20, 40, height - 30, axis);
  c.line(40, height - 30, width - 20, height - 30, axis);
  std::map<Diagnosis, std::vector<LinearFit>> fits;
  for (const auto& t : trajectories) {
    Rgb col = diagnosis_color(t.diagnosis);
    for (auto& v : col) v = static_cast<std::uint8_t>(v + (255 - v) / 2);
    for (std::size_t i = 1; i < t.points.size(); ++i) {
      c.line(ax(t.points[i - 1].years), ay(t.points[i - 1].t_est), ax(t.points[i].years), ay(t.points[i].t_est), col);
    }
    fits[t.diagnosis].push_back(t.fit);
  }
  for (const auto& [d, f] : fits) {
    std::vector<double> slopes, intercepts;
    for (const auto& l : f) slopes.push_back(l.slope), intercepts.push_back(l.intercept);
    const double m = percentile(slopes, 50.0), b = percentile(intercepts, 50.0);
    const double lo = std::max(x0, 0.0);
    c.line(ax(lo), ay(b + m * lo), ax(x1), ay(b + m * x1), diagnosis_color(d), 3);
  }
  return c;
}

/// Heat map of |a - b| on the middle axial slice, scaled to [0, vmax].
inline Canvas error_map(const Volume& a, const Volume& b, double vmax = 0.5, int scale = 4) {
  require_same_dims(a.dims, b.dims, "error_map");
  if (!(vmax > 0.0)) throw DomainError("error_map: vmax must be positive");
  const Index k = a.dims.z / 2;
  Canvas c(static_cast<int>(a.dims.x) * scale, static_cast<int>(a.dims.y) * scale, {0, 0, 0});
  for (Index j = 0; j < a.dims.y; ++j)
    for (Index i = 0; i < a.dims.x; ++i) {
      const double f = std::clamp(std::abs(static_cast<double>(a.at(i, j, k)) - b.at(i, j, k)) / vmax, 0.0, 1.0);
      // black -> red -> yellow -> white
      const Rgb col{static_cast<std::uint8_t>(255 * std::min(1.0, 3 * f)),
                    static_cast<std::uint8_t>(255 * std::clamp(3 * f - 1, 0.0, 1.0)),
                    static_cast<std::uint8_t>(255 * std::clamp(3 * f - 2, 0.0, 1.0))};
      const int x = static_cast<int>(i) * scale, y = static_cast<int>(a.dims.y - 1 - j) * scale;
      c.fill_rect(x, y, x + scale - 1, y + scale - 1, col);
    }
  return c;
}

}  // namespace timeflow::plot
