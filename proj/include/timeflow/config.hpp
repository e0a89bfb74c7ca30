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

// Structured-text (JSON) configuration with strict keys, line/column
// diagnostics and TIMEFLOW_* environment overrides.

#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timeflow/phantom.hpp"
#include "timeflow/trainer.hpp"

extern char** environ;

namespace timeflow {

using nlohmann::json;

/// 1-based line and column of a byte offset in `text`.
inline std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

/// Parses JSON, reporting syntax errors as "source:line:col: message".
inline json parse_json_text(const std::string& text, const std::string& source = "<config>") {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    // e.byte points one past the offending character.
    const auto [line, col] = line_column(text, e.byte > 0 ? e.byte - 1 : 0);
    std::string what = e.what();
    const auto pos = what.find(": ", what.find("parse error"));
    if (pos != std::string::npos) what = what.substr(pos + 2);
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + what);
  }
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), path);
}

/// Environment variables reserved for other purposes; never treated as config keys.
inline const std::set<std::string>& reserved_env_keys() {
  static const std::set<std::string> keys = {"TIMEFLOW_LOG_LEVEL"};
  return keys;
}

/// Applies overrides of the form PREFIX<KEY>=<value>. The key is lower-cased
/// and "__" descends into nested objects, e.g. TIMEFLOW_NETWORK__SEED=3. The
/// value is read as JSON when it parses, otherwise as a string.
inline std::vector<std::string> apply_env_overrides(json& cfg, const std::vector<std::string>& env,
                                                    const std::string& prefix = "TIMEFLOW_") {
  std::vector<std::string> applied;
  for (const auto& entry : env) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    const std::string name = entry.substr(0, eq), value = entry.substr(eq + 1);
    if (name.rfind(prefix, 0) != 0 || reserved_env_keys().count(name)) continue;
    std::string key = name.substr(prefix.size());
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    if (key.empty()) continue;
    json* node = &cfg;
    std::size_t start = 0;
    while (true) {
      const auto sep = key.find("__", start);
      const std::string part = key.substr(start, sep == std::string::npos ? std::string::npos : sep - start);
      if (sep == std::string::npos) {
        json parsed;
        try {
          parsed = json::parse(value);
        } catch (const json::parse_error&) {
          parsed = value;
        }
        (*node)[part] = parsed;
        break;
      }
      if (!node->contains(part)) (*node)[part] = json::object();
      node = &(*node)[part];
      start = sep + 2;
    }
    applied.push_back(name);
  }
  return applied;
}

inline std::vector<std::string> process_environment() {
  std::vector<std::string> env;
  for (char** e = environ; e && *e; ++e) env.emplace_back(*e);
  return env;
}

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

/// Training job: the optimizer/loss/network settings plus data locations.
struct TrainJob {
  TrainConfig train;
  std::string train_manifest;
  std::string validation_manifest;
};

inline TrainJob train_job_from_json(const json& j) {
  detail::check_keys(j,
                     {"mode", "network", "loss", "optimizer", "steps", "triplets_per_step", "seed", "validate_every",
                      "checkpoint_every", "normalize", "observed_intermediates", "train_manifest", "validation_manifest",
                      "out_dir"},
                     "config");
  FieldMode mode = FieldMode::Direct;
  if (j.contains("mode")) mode = parse_field_mode(j.at("mode").get<std::string>());
  TrainJob job;
  TrainConfig& c = job.train;
  c = TrainConfig::for_mode(mode);
  if (j.contains("network")) {
    const json& n = j.at("network");
    detail::check_keys(n, {"channels", "embed_dim", "frequency_base", "time_scale", "svf_steps", "input_downsample",
                           "seed"},
                       "network");
    json full = n;
    full["mode"] = to_string(mode);
    try {
      c.net = net_config_from_json(full);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("network: ") + e.what());
    }
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    detail::check_keys(l, {"weights", "lncc_radius", "guard"}, "loss");
    detail::read(l, "lncc_radius", c.loss.lncc_radius, "loss");
    detail::read(l, "guard", c.loss.guard, "loss");
    if (l.contains("weights")) {
      const json& w = l.at("weights");
      detail::check_keys(w, {"sim_inter", "flow_inter", "sim_ext", "flow_ext"}, "loss.weights");
      detail::read(w, "sim_inter", c.weights.w_sim_inter, "loss.weights");
      detail::read(w, "flow_inter", c.weights.w_flow_inter, "loss.weights");
      detail::read(w, "sim_ext", c.weights.w_sim_ext, "loss.weights");
      detail::read(w, "flow_ext", c.weights.w_flow_ext, "loss.weights");
    }
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    detail::check_keys(o, {"learning_rate", "beta1", "beta2", "eps"}, "optimizer");
    detail::read(o, "learning_rate", c.learning_rate, "optimizer");
    detail::read(o, "beta1", c.adam.beta1, "optimizer");
    detail::read(o, "beta2", c.adam.beta2, "optimizer");
    detail::read(o, "eps", c.adam.eps, "optimizer");
  }
  detail::read(j, "steps", c.steps, "config");
  detail::read(j, "triplets_per_step", c.triplets_per_step, "config");
  detail::read(j, "seed", c.seed, "config");
  detail::read(j, "validate_every", c.validate_every, "config");
  detail::read(j, "checkpoint_every", c.checkpoint_every, "config");
  detail::read(j, "normalize", c.normalize, "config");
  detail::read(j, "observed_intermediates", c.observed_intermediates, "config");
  detail::read(j, "out_dir", c.out_dir, "config");
  detail::read(j, "train_manifest", job.train_manifest, "config");
  detail::read(j, "validation_manifest", job.validation_manifest, "config");
  c.validate();
  return job;
}

inline json to_json(const TrainConfig& c) {
  json net = to_json(c.net);
  const std::string mode = net["mode"];
  net.erase("mode");
  return {{"mode", mode},
          {"network", net},
          {"loss",
           {{"weights",
             {{"sim_inter", c.weights.w_sim_inter},
              {"flow_inter", c.weights.w_flow_inter},
              {"sim_ext", c.weights.w_sim_ext},
              {"flow_ext", c.weights.w_flow_ext}}},
            {"lncc_radius", c.loss.lncc_radius},
            {"guard", c.loss.guard}}},
          {"optimizer",
           {{"learning_rate", c.learning_rate}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"steps", c.steps},
          {"triplets_per_step", c.triplets_per_step},
          {"seed", c.seed},
          {"validate_every", c.validate_every},
          {"checkpoint_every", c.checkpoint_every},
          {"normalize", c.normalize},
          {"observed_intermediates", c.observed_intermediates}};
}

/// Phantom cohort description for dataset generation.
struct PhantomJob {
  CohortSpec cohort;
  std::size_t subjects = 10;
  std::uint64_t seed = 0;
};

inline Vec3 vec3_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of three numbers");
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw ConfigError(where + ": expected three numbers");
  return {v[0], v[1], v[2]};
}

inline PhantomJob phantom_job_from_json(const json& j) {
  detail::check_keys(j, {"subjects", "seed", "times", "diagnosis", "prefix", "jitter", "phantom"}, "config");
  PhantomJob job;
  job.cohort.base = nonlinear_phantom_spec();
  detail::read(j, "subjects", job.subjects, "config");
  detail::read(j, "seed", job.seed, "config");
  detail::read(j, "times", job.cohort.times, "config");
  detail::read(j, "prefix", job.cohort.prefix, "config");
  if (j.contains("diagnosis")) job.cohort.diagnosis = parse_diagnosis(j.at("diagnosis").get<std::string>());
  if (j.contains("jitter")) {
    const json& g = j.at("jitter");
    detail::check_keys(g, {"radius", "center", "ventricle", "rate", "intensity"}, "jitter");
    detail::read(g, "radius", job.cohort.radius_jitter, "jitter");
    detail::read(g, "center", job.cohort.center_jitter, "jitter");
    detail::read(g, "ventricle", job.cohort.ventricle_jitter, "jitter");
    detail::read(g, "rate", job.cohort.rate_jitter, "jitter");
    detail::read(g, "intensity", job.cohort.intensity_jitter, "jitter");
  }
  if (j.contains("phantom")) {
    const json& p = j.at("phantom");
    detail::check_keys(p, {"dims", "spacing", "brain_radii", "gm_thickness", "ventricle_axes", "ventricle_radius",
                           "intensities", "texture_amplitude", "edge_width", "profile", "atrophy_rate", "acceleration",
                           "acceleration_onset", "noise_sigma"},
                       "phantom");
    PhantomSpec& s = job.cohort.base;
    try {
      if (p.contains("dims")) {
        const auto d = p.at("dims").get<std::vector<Index>>();
        if (d.size() != 3) throw ConfigError("phantom.dims: expected three integers");
        s.dims = {d[0], d[1], d[2]};
      }
      if (p.contains("spacing")) s.spacing = vec3_from_json(p.at("spacing"), "phantom.spacing");
      if (p.contains("brain_radii")) s.brain_radii = vec3_from_json(p.at("brain_radii"), "phantom.brain_radii");
      if (p.contains("ventricle_axes")) s.ventricle_axes = vec3_from_json(p.at("ventricle_axes"), "phantom.ventricle_axes");
      if (p.contains("intensities")) {
        const Vec3 v = vec3_from_json(p.at("intensities"), "phantom.intensities");
        s.intensity_csf = v[0];
        s.intensity_gm = v[1];
        s.intensity_wm = v[2];
      }
      if (p.contains("profile")) {
        const Vec3 v = vec3_from_json(p.at("profile"), "phantom.profile");
        s.profile = {v[0], v[1], v[2]};
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("phantom: ") + e.what());
    }
    detail::read(p, "gm_thickness", s.gm_thickness, "phantom");
    detail::read(p, "ventricle_radius", s.ventricle_radius, "phantom");
    detail::read(p, "texture_amplitude", s.texture_amplitude, "phantom");
    detail::read(p, "edge_width", s.edge_width, "phantom");
    detail::read(p, "atrophy_rate", s.atrophy_rate, "phantom");
    detail::read(p, "acceleration", s.acceleration, "phantom");
    detail::read(p, "acceleration_onset", s.acceleration_onset, "phantom");
    detail::read(p, "noise_sigma", s.noise_sigma, "phantom");
  }
  if (job.subjects < 1) throw ConfigError("config.subjects must be >= 1");
  job.cohort.base.validate();
  return job;
}

}  // namespace timeflow
