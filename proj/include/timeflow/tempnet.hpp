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

// Time-conditioned registration network f(I0, IL, t) -> displacement field.
//
// A small U-Net over the channel-concatenated pair. Every convolution is
// followed by instance normalization whose per-channel scale and shift are
// produced from a sinusoidal embedding of t, then LeakyReLU(0.2).

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "timeflow/log.hpp"
#include "timeflow/nn.hpp"
#include "timeflow/volume.hpp"
#include "timeflow/warpfield.hpp"

namespace timeflow {

enum class FieldMode { Direct, Diffeomorphic };

inline std::string to_string(FieldMode m) { return m == FieldMode::Direct ? "direct" : "diffeomorphic"; }

inline FieldMode parse_field_mode(const std::string& s) {
  if (s == "direct") return FieldMode::Direct;
  if (s == "diffeomorphic" || s == "diff") return FieldMode::Diffeomorphic;
  throw ConfigError("unknown mode '" + s + "' (expected direct or diffeomorphic)");
}

struct NetConfig {
  FieldMode mode = FieldMode::Direct;
  std::vector<Index> channels{32, 32, 48, 48, 96};
  Index embed_dim = 16;
  double frequency_base = 1e4;
  double time_scale = 100.0;
  int svf_steps = 7;
  Index input_downsample = 1;  // block-average the inputs, upsample the field
  std::uint64_t seed = 0;

  void validate() const {
    if (channels.size() < 2) throw ConfigError("network needs at least two channel stages");
    for (Index c : channels) {
      if (c < 1) throw ConfigError("channel counts must be positive");
    }
    if (embed_dim < 2 || embed_dim % 2) throw ConfigError("embed_dim must be even and >= 2");
    if (!(frequency_base > 1.0) || !(time_scale > 0.0)) throw ConfigError("invalid time embedding constants");
    if (svf_steps < 1) throw ConfigError("svf_steps must be >= 1");
    if (input_downsample < 1) throw ConfigError("input_downsample must be >= 1");
  }

  Index levels() const { return static_cast<Index>(channels.size()); }

  /// Spatial dims are padded to a multiple of this value.
  Index multiple() const { return input_downsample * (Index{1} << (levels() - 1)); }
};

/// Sinusoidal encoding: [sin(s t w_k)..., cos(s t w_k)...], w_k = base^(-k / (dim/2)).
inline std::vector<double> sinusoidal_encoding(double t, Index dim = 16, double base = 1e4, double scale = 100.0) {
  if (!std::isfinite(t)) throw DomainError("time must be finite");
  const Index half = dim / 2;
  std::vector<double> e(static_cast<std::size_t>(dim));
  for (Index k = 0; k < half; ++k) {
    const double w = std::pow(base, -static_cast<double>(k) / static_cast<double>(half));
    e[k] = std::sin(scale * t * w);
    e[half + k] = std::cos(scale * t * w);
  }
  return e;
}

/// Smallest multiple of `m` not below `n`.
inline Index round_up(Index n, Index m) { return (n + m - 1) / m * m; }

template <class T>
class TimeConditionedRegNet {
 public:
  using Var = ad::Var<T>;
  using NamedParams = std::vector<std::pair<std::string, Var>>;

  explicit TimeConditionedRegNet(NetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const NetConfig& config() const { return cfg_; }
  NamedParams& parameters() { return params_; }
  const NamedParams& parameters() const { return params_; }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.second.size();
    return n;
  }

  /// MLP-projected time latent, one row per entry of `ts`: [N, embed_dim].
  Var embed_time(const std::vector<double>& ts) const {
    const Index n = static_cast<Index>(ts.size()), dim = cfg_.embed_dim;
    Tensor<T> enc({n, dim});
    for (Index b = 0; b < n; ++b) {
      const auto e = sinusoidal_encoding(ts[b], dim, cfg_.frequency_base, cfg_.time_scale);
      for (Index k = 0; k < dim; ++k) enc[b * dim + k] = static_cast<T>(e[k]);
    }
    Var h = ad::silu(ad::linear(ad::constant(std::move(enc)), p(embed_w1_), p(embed_b1_)));
    return ad::linear(h, p(embed_w2_), p(embed_b2_));
  }

  /// Instance normalization followed by the time-dependent affine of layer `layer`.
  /// `act` is silu(latent) as shared by all heads.
  Var adain(const Var& x, const Var& act, std::size_t layer) const {
    const AdaIn& a = adain_[layer];
    Var scale = ad::linear(act, p(a.scale_w), p(a.scale_b));
    Var shift = ad::linear(act, p(a.shift_w), p(a.shift_b));
    return ad::channel_affine(ad::instance_norm(x), scale, shift);
  }

  /// Batched forward pass. `moving` and `fixed` are [N,1,Z,Y,X]; returns [N,3,Z,Y,X].
  Var forward(const Tensor<T>& moving, const Tensor<T>& fixed, const std::vector<double>& ts) const {
    if (moving.rank() != 5 || moving.channels() != 1 || moving.shape != fixed.shape) {
      throw DimensionError("forward: moving " + to_string(moving.shape) + " and fixed " + to_string(fixed.shape) +
                           " must be equal [N,1,Z,Y,X] shapes");
    }
    const Index batch = moving.batch();
    if (static_cast<Index>(ts.size()) != batch) throw DimensionError("forward: one time value per batch entry");
    for (double t : ts) {
      if (!std::isfinite(t)) throw DomainError("forward: time must be finite");
    }
    const Dims3 full = moving.spatial();
    const Index m = cfg_.multiple();
    const Dims3 padded{round_up(full.x, m), round_up(full.y, m), round_up(full.z, m)};

    Tensor<T> input(spatial_shape(batch, 2, padded));
    for (Index b = 0; b < batch; ++b) {
      ad::detail::copy_corner(moving.ptr() + b * full.count(), full, input.ptr() + (2 * b) * padded.count(), padded, false);
      ad::detail::copy_corner(fixed.ptr() + b * full.count(), full, input.ptr() + (2 * b + 1) * padded.count(), padded, false);
    }
    Var x = ad::constant(std::move(input));
    if (cfg_.input_downsample > 1) x = ad::avg_downsample(x, cfg_.input_downsample);

    const Var act = ad::silu(embed_time(ts));
    const std::size_t levels = cfg_.channels.size();
    std::vector<Var> skips;
    std::size_t norm = 0;
    for (std::size_t l = 0; l < levels; ++l) {
      x = ad::conv3d(x, p(enc_[l].w), p(enc_[l].b), l == 0 ? 1 : 2);
      x = ad::leaky_relu(adain(x, act, norm++));
      skips.push_back(x);
    }
    for (std::size_t i = 0; i + 1 < levels; ++i) {
      const std::size_t l = levels - 2 - i;
      const Var& skip = skips[l];
      x = ad::resize_trilinear(x, skip.value().spatial());
      x = ad::concat_channels(x, skip);
      x = ad::conv3d(x, p(dec_[i].w), p(dec_[i].b), 1);
      x = ad::leaky_relu(adain(x, act, norm++));
    }
    Var field = ad::conv3d(x, p(head_.w), p(head_.b), 1);

    if (cfg_.mode == FieldMode::Diffeomorphic) field = integrate(field, cfg_.svf_steps);
    if (cfg_.input_downsample > 1) {
      field = ad::scale(ad::resize_trilinear(field, padded, false), static_cast<T>(cfg_.input_downsample));
    }
    field = ad::crop_spatial(field, full);

    // The identity at t = 0 holds by definition, not by learning.
    bool any_zero = false;
    for (double t : ts) any_zero = any_zero || t == 0.0;
    if (any_zero) {
      Tensor<T> keep(field.shape(), T{1});
      const Index plane = 3 * full.count();
      for (Index b = 0; b < batch; ++b) {
        if (ts[b] == 0.0) std::fill(keep.ptr() + b * plane, keep.ptr() + (b + 1) * plane, T{0});
      }
      field = ad::mul(field, ad::constant(std::move(keep)));
    }
    return field;
  }

  /// Scaling and squaring on a batched velocity tensor.
  static Var integrate(const Var& velocity, int steps) {
    Var u = ad::scale(velocity, static_cast<T>(1.0 / static_cast<double>(Index{1} << steps)));
    for (int s = 0; s < steps; ++s) u = ad::add(u, ad::warp(u, u));
    return u;
  }

  /// Inference for a single pair. t = 0 returns the identity exactly.
  DisplacementField predict(const Volume& i0, const Volume& il, double t) const {
    require_same_dims(i0.dims, il.dims, "predict_field");
    if (!std::isfinite(t)) throw DomainError("predict_field: time must be finite");
    DisplacementField out(i0.dims);
    out.spacing = i0.spacing;
    out.origin = i0.origin;
    if (t == 0.0) return out;
    warn_if_unnormalized(i0);
    warn_if_unnormalized(il);
    ad::NoGradGuard guard;
    const Var f = forward(to_tensor<T>(i0), to_tensor<T>(il), {t});
    std::copy(f.value().data.begin(), f.value().data.end(), out.u.begin());
    return out;
  }

  /// Several time points for one pair, evaluated in batches of `chunk`.
  std::vector<DisplacementField> predict_many(const Volume& i0, const Volume& il, const std::vector<double>& ts,
                                              std::size_t chunk = 4) const {
    std::vector<DisplacementField> out;
    for (std::size_t s = 0; s < ts.size(); s += chunk) {
      const std::size_t e = std::min(ts.size(), s + chunk);
      std::vector<double> part(ts.begin() + static_cast<std::ptrdiff_t>(s), ts.begin() + static_cast<std::ptrdiff_t>(e));
      ad::NoGradGuard guard;
      const auto a = to_tensor<T>(i0), b = to_tensor<T>(il);
      Tensor<T> mv(spatial_shape(static_cast<Index>(part.size()), 1, i0.dims)), fx(mv.shape);
      for (std::size_t k = 0; k < part.size(); ++k) {
        std::copy(a.data.begin(), a.data.end(), mv.ptr() + k * a.size());
        std::copy(b.data.begin(), b.data.end(), fx.ptr() + k * b.size());
      }
      const Var f = forward(mv, fx, part);
      const Index plane = 3 * i0.dims.count();
      for (std::size_t k = 0; k < part.size(); ++k) {
        DisplacementField d(i0.dims);
        d.spacing = i0.spacing;
        d.origin = i0.origin;
        std::copy(f.value().ptr() + k * plane, f.value().ptr() + (k + 1) * plane, d.u.begin());
        out.push_back(std::move(d));
      }
    }
    return out;
  }

  /// Flattened copy of all parameter values, in declaration order.
  std::vector<T> flat_parameters() const {
    std::vector<T> v;
    v.reserve(static_cast<std::size_t>(parameter_count()));
    for (const auto& [name, var] : params_) v.insert(v.end(), var.value().data.begin(), var.value().data.end());
    return v;
  }

 private:
  struct Conv {
    std::size_t w, b;
  };
  struct AdaIn {
    std::size_t scale_w, scale_b, shift_w, shift_b;
  };

  const Var& p(std::size_t i) const { return params_[i].second; }

  std::size_t add_param(const std::string& name, Tensor<T> value) {
    params_.emplace_back(name, Var::parameter(std::move(value)));
    return params_.size() - 1;
  }

  Tensor<T> normal(const Shape& shape, double std) {
    std::normal_distribution<double> dist(0.0, std);
    Tensor<T> t(shape);
    for (auto& x : t.data) x = static_cast<T>(dist(rng_));
    return t;
  }

  Conv add_conv(const std::string& name, Index cin, Index cout, double std) {
    Conv c;
    c.w = add_param(name + ".weight", normal({cout, cin, 3, 3, 3}, std));
    c.b = add_param(name + ".bias", Tensor<T>({cout}));
    return c;
  }

  void add_adain(const std::string& name, Index channels) {
    const Index dim = cfg_.embed_dim;
    const double std = 1.0 / std::sqrt(static_cast<double>(dim));
    AdaIn a;
    a.scale_w = add_param(name + ".scale.weight", normal({channels, dim}, std));
    a.scale_b = add_param(name + ".scale.bias", Tensor<T>({channels}, T{1}));
    a.shift_w = add_param(name + ".shift.weight", normal({channels, dim}, std));
    a.shift_b = add_param(name + ".shift.bias", Tensor<T>({channels}));
    adain_.push_back(a);
  }

  void build() {
    rng_.seed(cfg_.seed);
    const Index dim = cfg_.embed_dim;
    const double lin = 1.0 / std::sqrt(static_cast<double>(dim));
    embed_w1_ = add_param("time.fc1.weight", normal({dim, dim}, lin));
    embed_b1_ = add_param("time.fc1.bias", Tensor<T>({dim}));
    embed_w2_ = add_param("time.fc2.weight", normal({dim, dim}, lin));
    embed_b2_ = add_param("time.fc2.bias", Tensor<T>({dim}));

    auto he = [](Index cin) { return std::sqrt(2.0 / (1.04 * 27.0 * static_cast<double>(cin))); };
    const auto& ch = cfg_.channels;
    const std::size_t levels = ch.size();
    for (std::size_t l = 0; l < levels; ++l) {
      const Index cin = l == 0 ? 2 : ch[l - 1];
      enc_.push_back(add_conv("enc" + std::to_string(l), cin, ch[l], he(cin)));
      add_adain("enc" + std::to_string(l) + ".norm", ch[l]);
    }
    for (std::size_t i = 0; i + 1 < levels; ++i) {
      const std::size_t l = levels - 2 - i;
      const Index cin = ch[l + 1] + ch[l];
      dec_.push_back(add_conv("dec" + std::to_string(l), cin, ch[l], he(cin)));
      add_adain("dec" + std::to_string(l) + ".norm", ch[l]);
    }
    head_ = add_conv("flow", ch[0], 3, 1e-5);
  }

  static void warn_if_unnormalized(const Volume& v) {
    const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
    if (*lo < -0.5f || *hi > 1.5f) {
      log_warning("predict_field: input intensities in [" + std::to_string(*lo) + ", " + std::to_string(*hi) +
                  "] look unnormalized");
    }
  }

  NetConfig cfg_;
  std::mt19937_64 rng_;
  NamedParams params_;
  std::size_t embed_w1_ = 0, embed_b1_ = 0, embed_w2_ = 0, embed_b2_ = 0;
  std::vector<Conv> enc_, dec_;
  std::vector<AdaIn> adain_;
  Conv head_{};
};

/// Free-function form of inference.
template <class T>
DisplacementField predict_field(const TimeConditionedRegNet<T>& net, const Volume& i0, const Volume& il, double t) {
  return net.predict(i0, il, t);
}

// ---------------------------------------------------------------------------
// Checkpoints: "TFCKPT01", uint64 header size, JSON header, float32 blob.

constexpr char kCheckpointMagic[9] = "TFCKPT01";

inline nlohmann::json to_json(const NetConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"channels", c.channels},
          {"embed_dim", c.embed_dim},
          {"frequency_base", c.frequency_base},
          {"time_scale", c.time_scale},
          {"svf_steps", c.svf_steps},
          {"input_downsample", c.input_downsample},
          {"seed", c.seed}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  if (j.contains("mode")) c.mode = parse_field_mode(j.at("mode").get<std::string>());
  if (j.contains("channels")) c.channels = j.at("channels").get<std::vector<Index>>();
  if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<Index>();
  if (j.contains("frequency_base")) c.frequency_base = j.at("frequency_base").get<double>();
  if (j.contains("time_scale")) c.time_scale = j.at("time_scale").get<double>();
  if (j.contains("svf_steps")) c.svf_steps = j.at("svf_steps").get<int>();
  if (j.contains("input_downsample")) c.input_downsample = j.at("input_downsample").get<Index>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

template <class T>
void save_checkpoint(const std::string& path, const TimeConditionedRegNet<T>& net,
                     const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json header;
  header["format"] = "timeflow-checkpoint";
  header["version"] = 1;
  header["network"] = to_json(net.config());
  header["metadata"] = metadata;
  nlohmann::json params = nlohmann::json::array();
  Index offset = 0;
  for (const auto& [name, var] : net.parameters()) {
    params.push_back({{"name", name}, {"shape", var.shape()}, {"offset", offset}});
    offset += var.size();
  }
  header["parameters"] = params;
  header["count"] = offset;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 8);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, var] : net.parameters()) {
    std::vector<float> blob(var.value().data.begin(), var.value().data.end());
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for checkpoint " + path);
}

template <class T>
TimeConditionedRegNet<T> load_checkpoint(const std::string& path, nlohmann::json* metadata = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kCheckpointMagic, 8)) throw FormatError(path + ": not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 28)) throw FormatError(path + ": corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  TimeConditionedRegNet<T> net(net_config_from_json(header.at("network")));
  const auto& entries = header.at("parameters");
  auto& params = net.parameters();
  if (entries.size() != params.size()) throw FormatError(path + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, var] = params[i];
    if (entries[i].at("name").get<std::string>() != name || entries[i].at("shape").get<Shape>() != var.shape()) {
      throw FormatError(path + ": parameter " + name + " does not match the network layout");
    }
    std::vector<float> blob(static_cast<std::size_t>(var.size()));
    in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (!in) throw FormatError(path + ": truncated parameter data");
    std::copy(blob.begin(), blob.end(), var.mutable_value().data.begin());
  }
  if (metadata) *metadata = header.value("metadata", nlohmann::json::object());
  return net;
}

}  // namespace timeflow
