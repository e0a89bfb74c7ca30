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

// timeflow: command-line entry point.
//
//   timeflow phantom      --out DIR [--config cohort.json] [--subjects N] [--times 0,1,2] [--fields]
//   timeflow train        --config train.json [--out DIR]
//   timeflow register     --checkpoint M --moving A --fixed B --t T --out PREFIX [--reference R]
//   timeflow interpolate  --checkpoint M --moving A --fixed B --times 0.25,0.5 --out DIR
//   timeflow extrapolate  --checkpoint M --moving A --fixed B --times 2,4,6 --out DIR
//   timeflow metrics      --pred-dir DIR --manifest gt.csv --out metrics.csv
//   timeflow aging        --checkpoint M --manifest data.csv --mode prospective|retrospective --out DIR
//
// Global flags: --config, --seed, --device (cpu), --out. TIMEFLOW_* environment
// variables override keys of the JSON config.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "timeflow/plot.hpp"
#include "timeflow/timeflow.hpp"

namespace fs = std::filesystem;
using namespace timeflow;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string device = "cpu";
  std::string out;
  std::string log_level = "info";
};

json load_config(const Globals& g, bool allow_missing) {
  json cfg = json::object();
  if (!g.config.empty()) {
    cfg = load_json_file(g.config);
    if (!cfg.is_object()) throw ConfigError(g.config + ": top level must be an object");
  } else if (!allow_missing) {
    throw UsageError("--config is required");
  }
  for (const auto& name : apply_env_overrides(cfg, process_environment())) log_info("config override from " + name);
  return cfg;
}

std::string format_time(double t) {
  std::ostringstream os;
  os << std::setprecision(10) << t;
  return os.str();
}

std::vector<double> parse_times(const std::string& text) {
  std::vector<double> out;
  for (const auto& cell : split_csv_line(text)) {
    if (cell.empty()) continue;
    out.push_back(parse_number(cell, "--times"));
  }
  if (out.empty()) throw UsageError("--times: no values");
  return out;
}

Volume network_input(const Volume& v, bool normalize) { return normalize ? normalize_intensity(v) : v; }

void require_out(const Globals& g) {
  if (g.out.empty()) throw UsageError("--out is required");
}

// --- phantom ---------------------------------------------------------------

struct PhantomArgs {
  std::optional<std::size_t> subjects;
  std::string times;
  bool fields = false;
};

int cmd_phantom(const Globals& g, const PhantomArgs& a) {
  require_out(g);
  PhantomJob job = phantom_job_from_json(load_config(g, true));
  if (a.subjects) job.subjects = *a.subjects;
  if (!a.times.empty()) job.cohort.times = parse_times(a.times);
  if (g.seed) job.seed = *g.seed;
  const auto cohort = generate_cohort(job.cohort, job.subjects, job.seed);
  std::vector<LongitudinalSeries> data;
  for (const auto& p : cohort) data.push_back(p.series);
  const std::string manifest = write_dataset(g.out, data);
  if (a.fields) {
    for (const auto& p : cohort)
      for (std::size_t k = 1; k < p.fields.size(); ++k) {
        nifti::write_field((fs::path(g.out) / (p.series.subject_id + "_v" + std::to_string(k) + "_field.nii.gz")).string(),
                           p.fields[k]);
      }
  }
  std::cout << manifest << '\n';
  return 0;
}

// --- train -----------------------------------------------------------------

int cmd_train(const Globals& g) {
  TrainJob job = train_job_from_json(load_config(g, false));
  if (g.seed) {
    job.train.seed = *g.seed;
    job.train.net.seed = *g.seed;
  }
  if (!g.out.empty()) job.train.out_dir = g.out;
  if (job.train.out_dir.empty()) throw UsageError("no output directory (--out or out_dir)");
  if (job.train_manifest.empty()) throw ConfigError("config: train_manifest is required");
  const std::string base = g.config.empty() ? std::string(".") : g.config;
  const auto data = load_manifest(resolve_path(base, job.train_manifest));
  std::vector<LongitudinalSeries> held_out;
  if (!job.validation_manifest.empty()) held_out = load_manifest(resolve_path(base, job.validation_manifest));
  fs::create_directories(job.train.out_dir);
  std::ofstream(fs::path(job.train.out_dir) / "config.json") << to_json(job.train).dump(2) << '\n';
  const Index every = std::max<Index>(1, job.train.steps / 20);
  auto progress = [&](const StepRecord& r) {
    if ((r.step + 1) % every == 0 || r.step + 1 == job.train.steps) {
      log_info("step " + std::to_string(r.step + 1) + "/" + std::to_string(job.train.steps) +
               " loss " + format_number(r.total));
    }
  };
  const auto result = train(job.train, data, held_out, progress);
  if (!held_out.empty()) {
    const auto table = validate(result.net, held_out, job.train.normalize);
    write_validation_csv((fs::path(job.train.out_dir) / "validation.csv").string(), table);
  }
  std::cout << (fs::path(job.train.out_dir) / "model.tfck").string() << '\n';
  return 0;
}

// --- register / interpolate / extrapolate ------------------------------------

struct PairArgs {
  std::string checkpoint, moving, fixed, reference, times, subject = "subject";
  double t = 1.0;
  bool raw = false;
};

struct LoadedPair {
  TimeConditionedRegNet<float> net;
  Volume moving, fixed, moving_in, fixed_in;
};

LoadedPair load_pair(const PairArgs& a) {
  LoadedPair p{load_checkpoint<float>(a.checkpoint), nifti::read_volume(a.moving), nifti::read_volume(a.fixed), {}, {}};
  require_same_dims(p.moving.dims, p.fixed.dims, "moving/fixed");
  p.moving_in = network_input(p.moving, !a.raw);
  p.fixed_in = network_input(p.fixed, !a.raw);
  return p;
}

int cmd_register(const Globals& g, const PairArgs& a) {
  require_out(g);
  if (!std::isfinite(a.t)) throw UsageError("--t must be finite");
  const LoadedPair p = load_pair(a);
  DisplacementField phi = p.net.predict(p.moving_in, p.fixed_in, a.t);
  phi.spacing = p.moving.spacing;
  phi.origin = p.moving.origin;
  const Volume warped = warp(p.moving, phi);
  const fs::path parent = fs::path(g.out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  nifti::write_field(g.out + "_field.nii.gz", phi);
  nifti::write_volume(g.out + "_warped.nii.gz", warped);
  if (!a.reference.empty()) {
    const Volume ref = nifti::read_volume(a.reference);
    plot::write_png(g.out + "_error.png",
                    plot::error_map(network_input(warped, !a.raw), network_input(ref, !a.raw)));
  }
  std::cout << g.out + "_warped.nii.gz" << '\n';
  return 0;
}

int cmd_series(const Globals& g, const PairArgs& a, bool extrapolate) {
  require_out(g);
  const auto times = parse_times(a.times);
  for (double t : times) {
    const bool inside = t >= 0.0 && t <= 1.0;
    if (!extrapolate && !inside) throw UsageError("interpolate: t must lie in [0, 1], got " + format_time(t));
    if (extrapolate && t > 0.0 && t < 1.0) throw UsageError("extrapolate: t must lie outside (0, 1), got " + format_time(t));
  }
  const LoadedPair p = load_pair(a);
  fs::create_directories(g.out);
  const auto fields = p.net.predict_many(p.moving_in, p.fixed_in, times);
  for (std::size_t i = 0; i < times.size(); ++i) {
    DisplacementField phi = fields[i];
    if (times[i] == 0.0) phi = identity_field(p.moving.dims);
    phi.spacing = p.moving.spacing;
    phi.origin = p.moving.origin;
    const std::string stem = (fs::path(g.out) / (a.subject + "_t" + format_time(times[i]))).string();
    nifti::write_volume(stem + ".nii.gz", warp(p.moving, phi));
    nifti::write_field(stem + "_field.nii.gz", phi);
    std::cout << stem << ".nii.gz\n";
  }
  return 0;
}

// --- metrics ---------------------------------------------------------------

struct MetricsArgs {
  std::string pred_dir, manifest;
  bool raw = false;
};

int cmd_metrics(const Globals& g, const MetricsArgs& a) {
  require_out(g);
  const auto rows = read_csv(a.manifest, {"subject", "t", "path"});
  const fs::path parent = fs::path(g.out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(g.out);
  if (!out) throw IoError("cannot write " + g.out);
  out << "subject,t,MAE,PSNR,SDlogJ,NDV\n";
  for (const auto& r : rows) {
    const std::string where = a.manifest + ":" + r.at("__line");
    const double t = parse_number(r.at("t"), where);
    const Volume gt_raw = nifti::read_volume(resolve_path(a.manifest, r.at("path")));
    const std::string stem = (fs::path(a.pred_dir) / (r.at("subject") + "_t" + format_time(t))).string();
    const Volume pred_raw = nifti::read_volume(stem + ".nii.gz");
    const Volume gt = network_input(gt_raw, !a.raw), pred = network_input(pred_raw, !a.raw);
    const auto& mask = gt_raw.mask;
    out << r.at("subject") << ',' << format_time(t) << ',' << format_number(mae(pred, gt, mask)) << ','
        << format_number(psnr(pred, gt, mask)) << ',';
    if (fs::exists(stem + "_field.nii.gz")) {
      const auto phi = nifti::read_field(stem + "_field.nii.gz");
      out << format_number(sdlogj(phi, mask)) << ',' << format_number(ndv(phi, mask));
    } else {
      out << ',';
    }
    out << '\n';
  }
  std::cout << g.out << '\n';
  return 0;
}

// --- aging -----------------------------------------------------------------

struct AgingArgs {
  std::string checkpoint, manifest, mode = "prospective", reference = "first-last";
  bool raw = false, skip_invalid = false;
};

InferOptions infer_options_from_json(const json& j) {
  detail::check_keys(j, {"seeds", "tolerance", "flat_range", "lncc_radius"}, "config");
  InferOptions o;
  detail::read(j, "seeds", o.seeds, "config");
  detail::read(j, "tolerance", o.tolerance, "config");
  detail::read(j, "flat_range", o.flat_range, "config");
  detail::read(j, "lncc_radius", o.lncc_radius, "config");
  if (o.seeds < 2 || !(o.tolerance > 0.0) || o.lncc_radius < 1) throw ConfigError("config: invalid search options");
  return o;
}

int cmd_aging(const Globals& g, const AgingArgs& a) {
  require_out(g);
  const InferOptions opt = infer_options_from_json(load_config(g, true));
  const auto net = load_checkpoint<float>(a.checkpoint);
  const auto data = load_manifest(a.manifest);
  fs::create_directories(g.out);
  if (a.mode == "prospective") {
    std::ofstream csv(fs::path(g.out) / "aging.csv");
    csv << "subject,diagnosis,t_est,chronological_ratio,rate\n";
    std::map<Diagnosis, std::vector<double>> groups;
    for (const auto& s : data) {
      if (s.visits.size() < 3) {
        log_warning("aging: subject " + s.subject_id + " has fewer than 3 visits, skipped");
        continue;
      }
      std::vector<Volume> v;
      for (std::size_t k = 0; k < 3; ++k) v.push_back(network_input(s.visits[k].volume, !a.raw));
      AgingRecord r;
      try {
        r = prospective_rate(net, {&v[0], s.visits[0].age_years}, {&v[1], s.visits[1].age_years},
                             {&v[2], s.visits[2].age_years}, s.subject_id, s.visits[2].diagnosis, opt);
      } catch (const Error& e) {
        if (!a.skip_invalid) throw;
        log_warning("aging: subject " + s.subject_id + " skipped: " + e.what());
        continue;
      }
      csv << r.subject_id << ',' << to_string(r.diagnosis) << ',' << format_number(r.t_est) << ','
          << format_number(r.chronological_ratio) << ',' << format_number(r.rate) << '\n';
      groups[r.diagnosis].push_back(r.rate);
    }
    if (groups.empty()) throw DegenerateError("aging: no subject could be analysed");
    std::vector<plot::BoxGroup> boxes;
    for (const auto& [d, rates] : groups) {
      boxes.push_back({d, rates});
      const GroupSummary sm = summarize(rates);
      std::cout << to_string(d) << ": n=" << sm.count << " median rate " << format_number(sm.median) << " IQR ["
                << format_number(sm.q25) << ", " << format_number(sm.q75) << "]\n";
    }
    plot::write_png((fs::path(g.out) / "aging_rates.png").string(), plot::box_plot(boxes));
    return 0;
  }
  if (a.mode == "retrospective") {
    RetroReference ref = RetroReference::FirstLast;
    if (a.reference == "first-second") ref = RetroReference::FirstSecond;
    else if (a.reference != "first-last") throw UsageError("--reference must be first-last or first-second");
    std::ofstream points(fs::path(g.out) / "trajectories.csv"), fits(fs::path(g.out) / "fits.csv");
    points << "subject,diagnosis,years,t_est\n";
    fits << "subject,diagnosis,slope,intercept\n";
    std::vector<Trajectory> all;
    std::map<Diagnosis, std::vector<double>> slopes;
    for (const auto& s : data) {
      if (s.visits.size() < 3) {
        log_warning("aging: subject " + s.subject_id + " has fewer than 3 visits, skipped");
        continue;
      }
      Trajectory tr;
      try {
        tr = retrospective_trajectory(net, s, ref, !a.raw, opt);
      } catch (const Error& e) {
        if (!a.skip_invalid) throw;
        log_warning("aging: subject " + s.subject_id + " skipped: " + e.what());
        continue;
      }
      for (const auto& p : tr.points) {
        points << tr.subject_id << ',' << to_string(tr.diagnosis) << ',' << format_number(p.years) << ','
               << format_number(p.t_est) << '\n';
      }
      fits << tr.subject_id << ',' << to_string(tr.diagnosis) << ',' << format_number(tr.fit.slope) << ','
           << format_number(tr.fit.intercept) << '\n';
      slopes[tr.diagnosis].push_back(tr.fit.slope);
      all.push_back(std::move(tr));
    }
    if (all.empty()) throw DegenerateError("aging: no subject could be analysed");
    for (const auto& [d, v] : slopes) {
      const GroupSummary sm = summarize(v);
      std::cout << to_string(d) << ": n=" << sm.count << " median slope " << format_number(sm.median) << " band ["
                << format_number(sm.p40) << ", " << format_number(sm.p60) << "]\n";
    }
    plot::write_png((fs::path(g.out) / "trajectories.png").string(), plot::trajectory_plot(all));
    return 0;
  }
  throw UsageError("--mode must be prospective or retrospective");
}

void set_log_level(const std::string& name) {
  static const std::map<std::string, LogLevel> levels = {
      {"debug", LogLevel::Debug}, {"info", LogLevel::Info}, {"warning", LogLevel::Warning}, {"error", LogLevel::Error}};
  const auto it = levels.find(name);
  if (it == levels.end()) throw UsageError("unknown log level '" + name + "'");
  log_threshold() = it->second;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TimeFlow: time-conditioned longitudinal registration"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "JSON configuration file");
  auto* seed_opt = app.add_option("--seed", seed, "Seed for all randomness");
  app.add_option("--device", g.device, "Compute device (cpu)");
  app.add_option("--out", g.out, "Output path");
  if (const char* env = std::getenv("TIMEFLOW_LOG_LEVEL")) g.log_level = env;
  app.add_option("--log-level", g.log_level, "debug, info, warning or error");

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic longitudinal cohort");
  phantom->add_option("--subjects", pa.subjects, "Number of subjects");
  phantom->add_option("--times", pa.times, "Visit times in years, comma separated");
  phantom->add_flag("--fields", pa.fields, "Also write ground-truth baseline-to-visit fields");

  auto* trainc = app.add_subcommand("train", "Train a network from a JSON config");

  PairArgs ra;
  auto add_pair = [&](CLI::App* c) {
    c->add_option("--checkpoint", ra.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    c->add_option("--moving", ra.moving, "Moving image I0 (NIfTI)")->required()->check(CLI::ExistingFile);
    c->add_option("--fixed", ra.fixed, "Fixed image IL (NIfTI)")->required()->check(CLI::ExistingFile);
    c->add_flag("--raw", ra.raw, "Skip percentile normalization of the network inputs");
  };
  auto* reg = app.add_subcommand("register", "Predict the field for one time and warp the moving image");
  add_pair(reg);
  reg->add_option("--t", ra.t, "Time parameter")->required();
  reg->add_option("--reference", ra.reference, "Optional target image; writes an error map PNG");
  auto* interp = app.add_subcommand("interpolate", "Warp the moving image to times in [0, 1]");
  auto* extrap = app.add_subcommand("extrapolate", "Warp the moving image to times outside (0, 1)");
  for (auto* c : {interp, extrap}) {
    add_pair(c);
    c->add_option("--times", ra.times, "Comma separated times")->required();
    c->add_option("--subject", ra.subject, "Name used for output files");
  }

  MetricsArgs ma;
  auto* metrics = app.add_subcommand("metrics", "Score predicted volumes against ground truth");
  metrics->add_option("--pred-dir", ma.pred_dir, "Directory with <subject>_t<t>.nii.gz predictions")
      ->required()
      ->check(CLI::ExistingDirectory);
  metrics->add_option("--manifest", ma.manifest, "CSV with columns subject,t,path")->required()->check(CLI::ExistingFile);
  metrics->add_flag("--raw", ma.raw, "Compare raw intensities instead of normalized ones");

  AgingArgs aa;
  auto* aging = app.add_subcommand("aging", "Prospective aging rates or retrospective trajectories");
  aging->add_option("--checkpoint", aa.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  aging->add_option("--manifest", aa.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  aging->add_option("--mode", aa.mode, "prospective or retrospective");
  aging->add_option("--reference", aa.reference, "Retrospective unit pair: first-last or first-second");
  aging->add_flag("--raw", aa.raw, "Skip percentile normalization");
  aging->add_flag("--skip-invalid", aa.skip_invalid, "Skip subjects whose analysis fails instead of aborting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    set_log_level(g.log_level);
    if (seed_opt->count()) g.seed = seed;
    if (g.device != "cpu") throw UsageError("unsupported device '" + g.device + "' (only cpu is available)");
    const bool uses_config = phantom->parsed() || trainc->parsed() || aging->parsed();
    if (!g.config.empty() && !uses_config) throw UsageError("this command does not take --config");
    if (phantom->parsed()) return cmd_phantom(g, pa);
    if (trainc->parsed()) return cmd_train(g);
    if (reg->parsed()) return cmd_register(g, ra);
    if (interp->parsed()) return cmd_series(g, ra, false);
    if (extrap->parsed()) return cmd_series(g, ra, true);
    if (metrics->parsed()) return cmd_metrics(g, ma);
    if (aging->parsed()) return cmd_aging(g, aa);
  } catch (const UsageError& e) {
    std::cerr << "timeflow: usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "timeflow: config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "timeflow: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
