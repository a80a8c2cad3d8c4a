#pragma once

// PDTC checkpoints: "PDTC" | u64le header length | JSON header | float32 LE
// payload. The header holds the model config, porosity statistics, the
// training noise schedule and a manifest of named tensors (offset and count
// in floats from the start of the payload, shape).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "poredit/errors.hpp"
#include "poredit/network.hpp"

namespace poredit {

inline constexpr char kCheckpointMagic[4] = {'P', 'D', 'T', 'C'};
inline constexpr int kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  return {{"input_size", c.input_size}, {"patch", c.patch},         {"embed_dim", c.embed_dim},
          {"depth", c.depth},           {"heads", c.heads},         {"window", c.window},
          {"mlp_ratio", c.mlp_ratio},   {"cond_dropout", c.cond_dropout}, {"s2_features", c.s2_features}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.input_size = j.at("input_size").get<int>();
  c.patch = j.at("patch").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.window = j.at("window").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.cond_dropout = j.at("cond_dropout").get<double>();
  c.s2_features = j.at("s2_features").get<int>();
  return c;
}

struct CheckpointMeta {
  int diffusion_steps = 1000;
  double s_offset = 0.008;
  std::vector<std::size_t> s2_lags;  // lags of the S2 conditioning vector, if any
};

template <class Real>
struct LoadedModel {
  Model<Real> model;
  CheckpointMeta meta;
};

template <class Real>
std::string encode_checkpoint(Model<Real>& model, const CheckpointMeta& meta) {
  nlohmann::ordered_json header;
  header["format"] = "pdtc";
  header["version"] = kCheckpointVersion;
  header["config"] = model_config_json(model.config());
  header["porosity_stats"] = {{"mean", model.porosity_stats().mean}, {"std", model.porosity_stats().std}};
  header["schedule"] = {{"steps", meta.diffusion_steps}, {"s_offset", meta.s_offset}};
  header["s2_lags"] = meta.s2_lags;
  auto tensors = nlohmann::ordered_json::array();
  std::vector<float> payload;
  for (auto& [name, t] : model.parameters()) {
    tensors.push_back({{"name", name}, {"shape", t->shape()}, {"offset", payload.size()}, {"count", t->size()}});
    for (Real v : t->data()) payload.push_back(static_cast<float>(v));
  }
  header["tensors"] = tensors;
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += h;
  out.append(reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(float));
  return out;
}

template <class Real>
LoadedModel<Real> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw ValidationError("checkpoint: bad magic");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 8);
  if (bytes.size() < 12 + len) throw ValidationError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + std::ptrdiff_t(len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed header: ") + e.what());
  }
  try {
    if (header.at("format") != "pdtc" || header.at("version").get<int>() != kCheckpointVersion)
      throw ValidationError("checkpoint: unsupported format or version");
    const ModelConfig cfg = model_config_from_json(header.at("config"));
    cfg.validate();
    CheckpointMeta meta;
    meta.diffusion_steps = header.at("schedule").at("steps").get<int>();
    meta.s_offset = header.at("schedule").at("s_offset").get<double>();
    meta.s2_lags = header.at("s2_lags").get<std::vector<std::size_t>>();
    LoadedModel<Real> out{Model<Real>(cfg), meta};
    out.model.porosity_stats().mean = header.at("porosity_stats").at("mean").get<double>();
    out.model.porosity_stats().std = header.at("porosity_stats").at("std").get<double>();
    const std::size_t payload_floats = (bytes.size() - 12 - len) / sizeof(float);
    if ((bytes.size() - 12 - len) % sizeof(float)) throw ValidationError("checkpoint: ragged payload");
    const char* payload = bytes.data() + 12 + len;
    auto params = out.model.parameters();
    const auto& manifest = header.at("tensors");
    if (manifest.size() != params.size()) throw ValidationError("checkpoint: tensor count does not match config");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& e = manifest[i];
      auto& [name, t] = params[i];
      if (e.at("name").get<std::string>() != name) throw ValidationError("checkpoint: expected tensor " + name);
      if (e.at("shape").get<Shape>() != t->shape()) throw ValidationError("checkpoint: shape mismatch for " + name);
      const std::size_t off = e.at("offset").get<std::size_t>(), count = e.at("count").get<std::size_t>();
      if (count != t->size() || off + count > payload_floats) throw ValidationError("checkpoint: payload out of range for " + name);
      auto dst = t->mutable_data();
      for (std::size_t k = 0; k < count; ++k) {
        float v;
        std::memcpy(&v, payload + (off + k) * sizeof(float), sizeof(float));
        dst[k] = static_cast<Real>(v);
      }
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed header: ") + e.what());
  }
}

template <class Real>
void save_checkpoint(Model<Real>& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + path.string());
  const std::string bytes = encode_checkpoint(model, meta);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw RuntimeFailure("write failed: " + path.string());
}

template <class Real>
LoadedModel<Real> load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint<Real>(bytes);
}

}  // namespace poredit
