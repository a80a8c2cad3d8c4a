#pragma once

// RunConfig: one JSON document with model, training, loss, sampling, tiling
// and synthetic-data settings. Missing keys keep their defaults; unknown keys
// are rejected.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>

#include <json.hpp>

#include "poredit/checkpoint.hpp"
#include "poredit/diffusion.hpp"
#include "poredit/errors.hpp"
#include "poredit/network.hpp"
#include "poredit/tiling.hpp"
#include "poredit/training.hpp"
#include "poredit/volume.hpp"

namespace poredit {

struct SampleSettings {
  int steps = 100;  // reverse steps (respaced from the training schedule)
  SamplerMode mode = SamplerMode::Ancestral;
  double eta = 1.0;
  double cfg_scale = 1.0;
  double porosity = 0.25;

  void validate() const {
    if (steps < 1) throw ValidationError("sample: steps must be >= 1");
    if (eta < 0) throw ValidationError("sample: eta must be >= 0");
    if (!(porosity > 0 && porosity < 1)) throw ValidationError("sample: porosity must lie in (0,1)");
  }
};

struct TilingSettings {
  std::size_t size = 128;
  std::size_t tile = 64;
  std::size_t overlap = 16;
  NoiseMode noise = NoiseMode::Coherent;
};

struct SynthSettings {
  int count = 24;
  double porosity_spread = 0.1;
  SynthSpec spec;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  LossWeights loss;
  SampleSettings sample;
  TilingSettings tiling;
  SynthSettings synth;

  void validate() const {
    model.validate();
    train.validate();
    loss.validate();
    sample.validate();
    synth.spec.validate();
    if (synth.count < 1) throw ValidationError("synth: count must be >= 1");
    if (synth.porosity_spread < 0 || synth.spec.porosity - 0.5 * synth.porosity_spread <= 0 ||
        synth.spec.porosity + 0.5 * synth.porosity_spread >= 1)
      throw ValidationError("synth: porosity spread leaves (0,1)");
    if (sample.steps > train.diffusion_steps)
      throw ValidationError("sample: steps exceed the training schedule length");
    if (tiling.tile != std::size_t(model.input_size))
      throw ValidationError("tiling: tile size must equal the model input size");
    if (tiling.overlap >= tiling.tile) throw ValidationError("tiling: overlap must be smaller than the tile");
    if (tiling.size < tiling.tile) throw ValidationError("tiling: volume size smaller than the tile");
  }
};

/// Desk-scale defaults: 64^3 volumes, p=8, C=96, L=4, h=4, M=4, trained with
/// a raised learning rate so a few thousand samples suffice.
inline RunConfig desk_config() {
  RunConfig c;
  c.train.lr = 5e-4;
  c.train.epochs = 292;
  c.train.max_steps = 7000;
  c.sample.steps = 50;
  c.sample.cfg_scale = 2.0;
  return c;
}

namespace detail {

using FieldSetters = std::map<std::string, std::function<void(const nlohmann::json&)>>;

inline void apply_fields(const nlohmann::json& obj, const std::string& section, const FieldSetters& setters) {
  if (!obj.is_object()) throw ValidationError("config: section '" + section + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    auto s = setters.find(it.key());
    if (s == setters.end()) throw ValidationError("config: unknown key '" + section + "." + it.key() + "'");
    try {
      s->second(it.value());
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("config: bad value for '" + section + "." + it.key() + "'");
    }
  }
}

template <class T>
std::function<void(const nlohmann::json&)> setter(T& field) {
  return [&field](const nlohmann::json& v) { field = v.get<T>(); };
}

}  // namespace detail

/// The desk-scale defaults with `j` applied on top.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c = desk_config();
  using detail::setter;
  std::string mode = to_string(c.sample.mode), noise = to_string(c.tiling.noise);
  detail::FieldSetters top{
      {"model",
       [&](const nlohmann::json& v) {
         auto& m = c.model;
         detail::apply_fields(v, "model",
                              {{"input_size", setter(m.input_size)}, {"patch", setter(m.patch)},
                               {"embed_dim", setter(m.embed_dim)}, {"depth", setter(m.depth)},
                               {"heads", setter(m.heads)}, {"window", setter(m.window)},
                               {"mlp_ratio", setter(m.mlp_ratio)}, {"cond_dropout", setter(m.cond_dropout)},
                               {"s2_features", setter(m.s2_features)}});
       }},
      {"train",
       [&](const nlohmann::json& v) {
         auto& t = c.train;
         detail::apply_fields(v, "train",
                              {{"lr", setter(t.lr)}, {"batch", setter(t.batch)}, {"epochs", setter(t.epochs)},
                               {"max_steps", setter(t.max_steps)}, {"seed", setter(t.seed)},
                               {"beta1", setter(t.beta1)}, {"beta2", setter(t.beta2)},
                               {"adam_eps", setter(t.adam_eps)}, {"weight_decay", setter(t.weight_decay)},
                               {"diffusion_steps", setter(t.diffusion_steps)}, {"s_offset", setter(t.s_offset)}});
       }},
      {"loss",
       [&](const nlohmann::json& v) {
         auto& l = c.loss;
         detail::apply_fields(v, "loss",
                              {{"lambda_phy", setter(l.lambda_phy)}, {"lambda_s2", setter(l.lambda_s2)},
                               {"lambda_grad", setter(l.lambda_grad)}, {"warmup_epochs", setter(l.warmup_epochs)},
                               {"use_plain_mse", setter(l.use_plain_mse)}});
       }},
      {"sample",
       [&](const nlohmann::json& v) {
         auto& s = c.sample;
         detail::apply_fields(v, "sample",
                              {{"steps", setter(s.steps)}, {"mode", setter(mode)}, {"eta", setter(s.eta)},
                               {"cfg_scale", setter(s.cfg_scale)}, {"porosity", setter(s.porosity)}});
       }},
      {"tiling",
       [&](const nlohmann::json& v) {
         auto& t = c.tiling;
         detail::apply_fields(v, "tiling",
                              {{"size", setter(t.size)}, {"tile", setter(t.tile)}, {"overlap", setter(t.overlap)},
                               {"noise", setter(noise)}});
       }},
      {"synth",
       [&](const nlohmann::json& v) {
         auto& s = c.synth;
         detail::apply_fields(v, "synth",
                              {{"count", setter(s.count)}, {"porosity_spread", setter(s.porosity_spread)},
                               {"size", setter(s.spec.size)},
                               {"porosity", setter(s.spec.porosity)}, {"corr_len", setter(s.spec.corr_len)}});
       }},
  };
  detail::apply_fields(j, "config", top);
  c.sample.mode = parse_sampler_mode(mode);
  c.tiling.noise = parse_noise_mode(noise);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("file not found: " + path.string());
  std::ifstream in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config: malformed JSON in " + path.string());
  }
  return parse_run_config(j);
}

inline nlohmann::ordered_json run_config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = model_config_json(c.model);
  const auto& t = c.train;
  j["train"] = {{"lr", t.lr},           {"batch", t.batch},       {"epochs", t.epochs},
                {"max_steps", t.max_steps}, {"seed", t.seed},     {"beta1", t.beta1},
                {"beta2", t.beta2},     {"adam_eps", t.adam_eps}, {"weight_decay", t.weight_decay},
                {"diffusion_steps", t.diffusion_steps}, {"s_offset", t.s_offset}};
  const auto& l = c.loss;
  j["loss"] = {{"lambda_phy", l.lambda_phy}, {"lambda_s2", l.lambda_s2}, {"lambda_grad", l.lambda_grad},
               {"warmup_epochs", l.warmup_epochs}, {"use_plain_mse", l.use_plain_mse}};
  const auto& s = c.sample;
  j["sample"] = {{"steps", s.steps}, {"mode", to_string(s.mode)}, {"eta", s.eta}, {"cfg_scale", s.cfg_scale},
                 {"porosity", s.porosity}};
  j["tiling"] = {{"size", c.tiling.size}, {"tile", c.tiling.tile}, {"overlap", c.tiling.overlap},
                 {"noise", to_string(c.tiling.noise)}};
  j["synth"] = {{"count", c.synth.count}, {"porosity_spread", c.synth.porosity_spread}, {"size", c.synth.spec.size}, {"porosity", c.synth.spec.porosity},
                {"corr_len", c.synth.spec.corr_len}};
  return j;
}

}  // namespace poredit
