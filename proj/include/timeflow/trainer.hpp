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

// Training loop over (first, last) visit pairs, Adam optimizer, and held-out
// validation of interpolation and extrapolation accuracy.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timeflow/log.hpp"
#include "timeflow/losses.hpp"
#include "timeflow/metrics.hpp"
#include "timeflow/nifti.hpp"
#include "timeflow/tempnet.hpp"

namespace timeflow {

enum class PairPolicy { FirstLast };

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  NetConfig net;
  LossWeights weights;
  LossOptions loss;
  double learning_rate = 1e-4;
  Index steps = 1000;
  Index triplets_per_step = 2;
  std::uint64_t seed = 0;
  Index validate_every = 0;    // 0 disables periodic validation
  Index checkpoint_every = 0;  // 0 writes only the final checkpoint
  bool normalize = true;       // per-scan percentile normalization of every visit
  bool observed_intermediates = true;  // add a triplet with a real intermediate visit when one exists
  PairPolicy pairs = PairPolicy::FirstLast;
  AdamOptions adam;
  std::string out_dir;  // empty: no files are written

  static TrainConfig for_mode(FieldMode mode) {
    TrainConfig c;
    c.net.mode = mode;
    c.weights = LossWeights::for_mode(mode);
    return c;
  }

  /// The extrapolation pass is skipped when both of its weights are zero.
  bool uses_extrapolation() const { return weights.w_sim_ext != 0.0 || weights.w_flow_ext != 0.0; }

  void validate() const {
    net.validate();
    weights.validate();
    if (steps < 0) throw ConfigError("steps must be non-negative");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
    if (triplets_per_step < 1) throw ConfigError("triplets_per_step must be >= 1");
    if (validate_every < 0 || checkpoint_every < 0) throw ConfigError("cadences must be non-negative");
    if (!(loss.guard >= 0.0 && loss.guard < 0.5)) throw ConfigError("triplet guard must be in [0, 0.5)");
    if (loss.lncc_radius < 1) throw ConfigError("lncc radius must be >= 1");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
      throw ConfigError("invalid Adam constants");
    }
  }
};

/// Adam over a fixed list of parameters, no schedule.
template <class T>
class Adam {
 public:
  Adam(std::vector<ad::Var<T>> params, double lr, AdamOptions opt = {})
      : params_(std::move(params)), lr_(lr), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
  }

  /// Applies one update from the accumulated gradients, then clears them.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (p.grad().data.empty()) continue;
      auto& w = p.mutable_value().data;
      const auto& g = p.grad().data;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        w[i] -= static_cast<T>(lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps));
      }
      p.zero_grad();
    }
  }

  Index steps_taken() const { return t_; }

 private:
  std::vector<ad::Var<T>> params_;
  double lr_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  Index t_ = 0;
};

struct StepRecord {
  Index step = 0;
  std::string subject;
  std::vector<double> t_hats;
  std::vector<double> observed_t;  // time of the real intermediate, if one was used
  double interp_sim = 0.0, interp_flow = 0.0, extrap_sim = 0.0, extrap_flow = 0.0, total = 0.0;
};

/// Per-subject held-out evaluation. Interpolation uses the pair (first, last)
/// and every intermediate visit; extrapolation uses (first, second) and every
/// later visit. Values are averaged over the targets of each kind.
struct ValidationRow {
  std::string subject;
  Index interp_targets = 0, extrap_targets = 0;
  double interp_mae = 0, interp_psnr = 0, interp_sdlogj = 0, interp_ndv = 0;
  double extrap_mae = 0, extrap_psnr = 0, extrap_sdlogj = 0, extrap_ndv = 0;
  double extrap_positive_jacobian = 0;
  double rigid_extrap_mae = 0;   // no deformation
  double linear_extrap_mae = 0;  // the t = 1 field scaled by the target time
  double pair_mae = 0;           // the t = 1 field on (first, second)
};

struct ValidationTable {
  std::vector<ValidationRow> rows;

  double mean(double ValidationRow::*field) const {
    if (rows.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& r : rows) acc += r.*field;
    return acc / static_cast<double>(rows.size());
  }
};

template <class T>
struct TrainResult {
  TimeConditionedRegNet<T> net;
  std::vector<StepRecord> history;
  std::vector<std::pair<Index, ValidationTable>> validations;
};

/// Visit volume as used by training and evaluation.
inline Volume prepared_volume(const Visit& v, bool normalize) {
  return normalize ? normalize_intensity(v.volume) : v.volume;
}

inline std::vector<std::uint8_t> mask_union(const Volume& a, const Volume& b) {
  require_same_dims(a.dims, b.dims, "mask_union");
  if (!a.has_mask() && !b.has_mask()) return {};
  std::vector<std::uint8_t> m(static_cast<std::size_t>(a.size()), 0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = ((a.has_mask() ? a.mask[i] : 1) || (b.has_mask() ? b.mask[i] : 1)) ? 1 : 0;
  }
  return m;
}

/// Field provider used by validation: (subject, moving, fixed, t) -> displacement.
using FieldProvider = std::function<DisplacementField(const std::string&, const Volume&, const Volume&, double)>;

template <class T>
FieldProvider network_provider(const TimeConditionedRegNet<T>& net) {
  return [&net](const std::string&, const Volume& a, const Volume& b, double t) { return net.predict(a, b, t); };
}

inline DisplacementField scaled_field(const DisplacementField& f, double s) {
  DisplacementField out = f;
  for (auto& v : out.u) v = static_cast<float>(v * s);
  return out;
}

/// Interpolation and extrapolation metrics on subjects with at least three
/// visits; others are skipped with a warning.
inline ValidationTable validate(const FieldProvider& fields, const std::vector<LongitudinalSeries>& dataset,
                                bool normalize = true) {
  ValidationTable table;
  for (const auto& s : dataset) {
    if (s.visits.size() < 3) {
      log_warning("validate: subject " + s.subject_id + " has fewer than 3 visits, skipped");
      continue;
    }
    s.validate();
    std::vector<Volume> vols;
    for (const auto& v : s.visits) vols.push_back(prepared_volume(v, normalize));
    const std::size_t last = vols.size() - 1;
    ValidationRow row;
    row.subject = s.subject_id;

    for (std::size_t k = 1; k < last; ++k) {
      const double t = s.normalized_time(k, 0, last);
      const DisplacementField phi = fields(s.subject_id, vols[0], vols[last], t);
      const Volume pred = warp(vols[0], phi);
      row.interp_mae += mae(pred, vols[k], vols[k].mask);
      row.interp_psnr += psnr(pred, vols[k], vols[k].mask);
      row.interp_sdlogj += sdlogj(phi, vols[k].mask);
      row.interp_ndv += ndv(phi, vols[k].mask);
      ++row.interp_targets;
    }
    const DisplacementField phi1 = fields(s.subject_id, vols[0], vols[1], 1.0);
    row.pair_mae = mae(warp(vols[0], phi1), vols[1], vols[1].mask);
    for (std::size_t k = 2; k <= last; ++k) {
      const double t = s.normalized_time(k, 0, 1);
      const DisplacementField phi = fields(s.subject_id, vols[0], vols[1], t);
      const Volume pred = warp(vols[0], phi);
      const auto& mask = vols[k].mask;
      row.extrap_mae += mae(pred, vols[k], mask);
      row.extrap_psnr += psnr(pred, vols[k], mask);
      row.extrap_sdlogj += sdlogj(phi, mask);
      row.extrap_ndv += ndv(phi, mask);
      row.extrap_positive_jacobian += positive_jacobian_fraction(phi, mask);
      row.rigid_extrap_mae += mae(vols[0], vols[k], mask);
      row.linear_extrap_mae += mae(warp(vols[0], scaled_field(phi1, t)), vols[k], mask);
      ++row.extrap_targets;
    }
    const double ni = static_cast<double>(row.interp_targets), ne = static_cast<double>(row.extrap_targets);
    for (double* v : {&row.interp_mae, &row.interp_psnr, &row.interp_sdlogj, &row.interp_ndv}) *v /= ni;
    for (double* v : {&row.extrap_mae, &row.extrap_psnr, &row.extrap_sdlogj, &row.extrap_ndv,
                      &row.extrap_positive_jacobian, &row.rigid_extrap_mae, &row.linear_extrap_mae}) {
      *v /= ne;
    }
    table.rows.push_back(row);
  }
  return table;
}

template <class T>
ValidationTable validate(const TimeConditionedRegNet<T>& net, const std::vector<LongitudinalSeries>& dataset,
                         bool normalize = true) {
  return validate(network_provider(net), dataset, normalize);
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline void write_validation_csv(const std::string& path, const ValidationTable& table) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "subject,interp_mae,interp_psnr,interp_sdlogj,interp_ndv,extrap_mae,extrap_psnr,extrap_sdlogj,extrap_ndv,"
         "extrap_positive_jacobian,rigid_extrap_mae,linear_extrap_mae,pair_mae\n";
  for (const auto& r : table.rows) {
    out << r.subject;
    for (double v : {r.interp_mae, r.interp_psnr, r.interp_sdlogj, r.interp_ndv, r.extrap_mae, r.extrap_psnr,
                     r.extrap_sdlogj, r.extrap_ndv, r.extrap_positive_jacobian, r.rigid_extrap_mae,
                     r.linear_extrap_mae, r.pair_mae}) {
      out << ',' << format_number(v);
    }
    out << '\n';
  }
}

inline void write_loss_csv(const std::string& path, const std::vector<StepRecord>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "step,subject,t_hats,observed_t,interp_sim,interp_flow,extrap_sim,extrap_flow,total\n";
  for (const auto& r : history) {
    out << r.step << ',' << r.subject << ',';
    for (std::size_t i = 0; i < r.t_hats.size(); ++i) out << (i ? ";" : "") << format_number(r.t_hats[i]);
    out << ',';
    for (std::size_t i = 0; i < r.observed_t.size(); ++i) out << (i ? ";" : "") << format_number(r.observed_t[i]);
    for (double v : {r.interp_sim, r.interp_flow, r.extrap_sim, r.extrap_flow, r.total}) out << ',' << format_number(v);
    out << '\n';
  }
}

namespace detail {

struct PreparedPair {
  std::string subject;
  Volume first, last;
  Tensor<float> mask;
  std::vector<std::pair<Volume, double>> intermediates;  // visits strictly inside the guard band
};

inline void dump_nan_batch(const std::string& dir, const StepRecord& rec, const PreparedPair& pair) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"step", rec.step},         {"subject", rec.subject},         {"t_hats", rec.t_hats},
                   {"observed_t", rec.observed_t},
                   {"interp_sim", rec.interp_sim}, {"interp_flow", rec.interp_flow}, {"extrap_sim", rec.extrap_sim},
                   {"extrap_flow", rec.extrap_flow}};
  std::ofstream(dir + "/nan_dump.json") << j.dump(2) << '\n';
  nifti::write_volume(dir + "/nan_dump_moving.nii.gz", pair.first);
  nifti::write_volume(dir + "/nan_dump_fixed.nii.gz", pair.last);
}

}  // namespace detail

/// Progress hook, called after every optimizer step.
using StepCallback = std::function<void(const StepRecord&)>;

/// Trains `net` in place. The subject order is reshuffled every epoch from
/// the config seed; each step draws `triplets_per_step` times and, when the
/// subject has intermediate visits, one of them as an observed triplet.
template <class T>
std::vector<StepRecord> train_network(TimeConditionedRegNet<T>& net, const TrainConfig& cfg,
                                      const std::vector<LongitudinalSeries>& dataset,
                                      std::vector<std::pair<Index, ValidationTable>>* validations = nullptr,
                                      const std::vector<LongitudinalSeries>& held_out = {},
                                      const StepCallback& on_step = {}) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  std::vector<detail::PreparedPair> pairs;
  for (const auto& s : dataset) {
    s.validate();
    detail::PreparedPair p;
    p.subject = s.subject_id;
    p.first = prepared_volume(s.visits.front(), cfg.normalize);
    p.last = prepared_volume(s.visits.back(), cfg.normalize);
    require_same_dims(p.first.dims, p.last.dims, "train");
    Volume m = p.last;
    m.mask = mask_union(p.first, p.last);
    p.mask = mask_tensor<float>(m);
    const std::size_t last = s.visits.size() - 1;
    for (std::size_t k = 1; cfg.observed_intermediates && k < last; ++k) {
      const double t = s.normalized_time(k, 0, last);
      if (t > cfg.loss.guard && t < 1.0 - cfg.loss.guard) {
        p.intermediates.emplace_back(prepared_volume(s.visits[k], cfg.normalize), t);
      }
    }
    pairs.push_back(std::move(p));
  }
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

  std::vector<ad::Var<T>> params;
  for (auto& [name, var] : net.parameters()) params.push_back(var);
  Adam<T> opt(params, cfg.learning_rate, cfg.adam);
  const auto source = network_source(net);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(pairs.size());
  std::vector<StepRecord> history;

  auto save = [&](const std::string& name, Index step) {
    if (cfg.out_dir.empty()) return;
    save_checkpoint(cfg.out_dir + "/" + name, net, {{"step", step}, {"seed", cfg.seed}});
  };

  for (Index step = 0; step < cfg.steps; ++step) {
    const std::size_t slot = static_cast<std::size_t>(step) % pairs.size();
    if (slot == 0) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
    }
    const auto& pair = pairs[order[slot]];
    StepRecord rec;
    rec.step = step;
    rec.subject = pair.subject;
    for (Index k = 0; k < cfg.triplets_per_step; ++k) rec.t_hats.push_back(sample_triplet(rng, cfg.loss.guard).t_hat);
    std::vector<ObservedIntermediate<T>> observed;
    if (!pair.intermediates.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, pair.intermediates.size() - 1);
      const auto& [volume, t] = pair.intermediates[pick(rng)];
      observed.push_back({to_tensor<T>(volume), t});
      rec.observed_t.push_back(t);
    }

    const auto i0 = to_tensor<T>(pair.first), il = to_tensor<T>(pair.last);
    Tensor<T> mask(pair.mask.shape);
    std::copy(pair.mask.data.begin(), pair.mask.data.end(), mask.data.begin());
    const LossTerms<T> terms =
        compute_losses<T>(source, i0, il, mask, rec.t_hats, cfg.weights, cfg.loss, cfg.uses_extrapolation(), observed);
    rec.interp_sim = terms.interp_sim.item();
    rec.interp_flow = terms.interp_flow.item();
    if (cfg.uses_extrapolation()) {
      rec.extrap_sim = terms.extrap_sim.item();
      rec.extrap_flow = terms.extrap_flow.item();
    }
    rec.total = terms.total.item();
    if (!std::isfinite(rec.total)) {
      detail::dump_nan_batch(cfg.out_dir, rec, pair);
      throw NumericalError("non-finite loss at step " + std::to_string(step) + " (subject " + pair.subject + ")");
    }
    ad::backward(terms.total);
    opt.step();
    history.push_back(rec);
    if (on_step) on_step(rec);

    const Index done = step + 1;
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps) {
      save("checkpoint_" + std::to_string(done) + ".tfck", done);
    }
    if (validations && cfg.validate_every > 0 && done % cfg.validate_every == 0 && !held_out.empty()) {
      validations->emplace_back(done, validate(net, held_out, cfg.normalize));
    }
  }
  if (!cfg.out_dir.empty()) {
    save("model.tfck", cfg.steps);
    write_loss_csv(cfg.out_dir + "/loss.csv", history);
  }
  return history;
}

/// Builds a network from `cfg.net` and trains it.
template <class T = float>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<LongitudinalSeries>& dataset,
                     const std::vector<LongitudinalSeries>& held_out = {}, const StepCallback& on_step = {}) {
  cfg.validate();
  TrainResult<T> result{TimeConditionedRegNet<T>(cfg.net), {}, {}};
  result.history = train_network(result.net, cfg, dataset, &result.validations, held_out, on_step);
  return result;
}

}  // namespace timeflow
