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

// CSV manifests describing longitudinal datasets:
//   subject,age_years,diagnosis,path
// One row per visit; paths are relative to the manifest's directory unless absolute.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "timeflow/nifti.hpp"
#include "timeflow/volume.hpp"

namespace timeflow {

struct ManifestRow {
  std::string subject;
  double age_years = 0.0;
  Diagnosis diagnosis = Diagnosis::Unknown;
  std::string path;  // as resolved against the manifest directory
};

/// Splits one CSV line on commas, trimming surrounding blanks. Quoting is not supported.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Reads a CSV with a header row into maps keyed by column name. Lines that
/// are empty or start with '#' are ignored.
inline std::vector<std::map<std::string, std::string>> read_csv(const std::string& path,
                                                                const std::vector<std::string>& required) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    if (line.find('"') != std::string::npos) throw FormatError(path + ":" + std::to_string(lineno) + ": quoted fields are not supported");
    auto cells = split_csv_line(line);
    if (header.empty()) {
      header = cells;
      for (const auto& r : required) {
        if (std::find(header.begin(), header.end(), r) == header.end()) {
          throw FormatError(path + ":" + std::to_string(lineno) + ": missing column '" + r + "'");
        }
      }
      continue;
    }
    if (cells.size() != header.size()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                        " fields, got " + std::to_string(cells.size()));
    }
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = cells[i];
    row["__line"] = std::to_string(lineno);
    rows.push_back(std::move(row));
  }
  if (header.empty()) throw FormatError(path + ": empty file");
  return rows;
}

inline double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": not a finite number: '" + s + "'");
  }
}

inline std::string resolve_path(const std::string& base_file, const std::string& p) {
  const std::filesystem::path path(p);
  if (path.is_absolute()) return p;
  return (std::filesystem::path(base_file).parent_path() / path).lexically_normal().string();
}

inline std::vector<ManifestRow> read_manifest_rows(const std::string& path) {
  std::vector<ManifestRow> out;
  for (const auto& r : read_csv(path, {"subject", "age_years", "path"})) {
    const std::string where = path + ":" + r.at("__line");
    ManifestRow m;
    m.subject = r.at("subject");
    if (m.subject.empty()) throw FormatError(where + ": empty subject");
    m.age_years = parse_number(r.at("age_years"), where);
    if (r.count("diagnosis")) m.diagnosis = parse_diagnosis(r.at("diagnosis"));
    m.path = resolve_path(path, r.at("path"));
    out.push_back(std::move(m));
  }
  return out;
}

/// Loads every visit, grouped by subject (in order of first appearance) and
/// sorted by age.
inline std::vector<LongitudinalSeries> load_manifest(const std::string& path) {
  std::vector<LongitudinalSeries> out;
  std::map<std::string, std::size_t> index;
  for (const auto& row : read_manifest_rows(path)) {
    auto it = index.find(row.subject);
    if (it == index.end()) {
      it = index.emplace(row.subject, out.size()).first;
      out.push_back({row.subject, {}});
    }
    Visit v;
    v.volume = nifti::read_volume(row.path);
    v.age_years = row.age_years;
    v.diagnosis = row.diagnosis;
    out[it->second].visits.push_back(std::move(v));
  }
  for (auto& s : out) {
    std::stable_sort(s.visits.begin(), s.visits.end(),
                     [](const Visit& a, const Visit& b) { return a.age_years < b.age_years; });
  }
  return out;
}

/// Writes each visit as <dir>/<subject>_v<k>.nii.gz and a manifest.csv indexing them.
inline std::string write_dataset(const std::string& dir, const std::vector<LongitudinalSeries>& data) {
  std::filesystem::create_directories(dir);
  const std::string manifest = (std::filesystem::path(dir) / "manifest.csv").string();
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest);
  out << "subject,age_years,diagnosis,path\n";
  for (const auto& s : data) {
    for (std::size_t k = 0; k < s.visits.size(); ++k) {
      const std::string name = s.subject_id + "_v" + std::to_string(k) + ".nii.gz";
      nifti::write_volume((std::filesystem::path(dir) / name).string(), s.visits[k].volume);
      std::ostringstream age;
      age << std::setprecision(10) << s.visits[k].age_years;
      out << s.subject_id << ',' << age.str() << ',' << to_string(s.visits[k].diagnosis) << ',' << name << '\n';
    }
  }
  return manifest;
}

}  // namespace timeflow
