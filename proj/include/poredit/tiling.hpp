#pragma once

// Sliding-window sampling of volumes larger than one model window. Each
// reverse step denoises every tile from the same global state and fuses the
// results with separable Hann weights.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "poredit/diffusion.hpp"
#include "poredit/errors.hpp"
#include "poredit/metrics.hpp"
#include "poredit/rng.hpp"
#include "poredit/volume.hpp"

namespace poredit {

inline constexpr double kHannFloor = 1e-3;

struct Tile {
  std::size_t z = 0, y = 0, x = 0;  // origin in the global volume
};

struct TilePlan {
  Dims dims;
  std::size_t tile = 0;
  std::size_t overlap = 0;
  std::array<std::vector<std::size_t>, 3> starts;
  std::vector<Tile> tiles;  // z-major order over the start lists

  std::size_t stride() const { return tile - overlap; }
};

/// Starts 0, S-O, 2(S-O), ... per axis with the last clamped to dim - S.
inline std::vector<std::size_t> plan_axis(std::size_t dim, std::size_t S, std::size_t O) {
  std::vector<std::size_t> out;
  const std::size_t stride = S - O;
  for (std::size_t s = 0;; s += stride) {
    if (s + S >= dim) {
      out.push_back(dim - S);
      break;
    }
    out.push_back(s);
  }
  return out;
}

inline TilePlan plan_tiles(Dims dims, std::size_t S, std::size_t O) {
  if (S < 2) throw ValidationError("tile size must be >= 2");
  if (O >= S) throw ValidationError("overlap " + std::to_string(O) + " must be smaller than tile size " + std::to_string(S));
  for (int a = 0; a < 3; ++a)
    if (S > dims.extent(a))
      throw ValidationError("tile size " + std::to_string(S) + " exceeds volume extent " + std::to_string(dims.extent(a)));
  TilePlan p;
  p.dims = dims;
  p.tile = S;
  p.overlap = O;
  for (int a = 0; a < 3; ++a) p.starts[a] = plan_axis(dims.extent(a), S, O);
  for (auto z : p.starts[0])
    for (auto y : p.starts[1])
      for (auto x : p.starts[2]) p.tiles.push_back({z, y, x});
  return p;
}

/// Number of tiles covering each voxel.
inline std::vector<int> coverage_counts(const TilePlan& plan) {
  std::vector<int> count(plan.dims.size(), 0);
  const std::size_t S = plan.tile;
  for (const auto& t : plan.tiles)
    for (std::size_t a = 0; a < S; ++a)
      for (std::size_t b = 0; b < S; ++b)
        for (std::size_t c = 0; c < S; ++c) ++count[plan.dims.index(t.z + a, t.y + b, t.x + c)];
  return count;
}

/// h(n) = 0.5 - 0.5 cos(2 pi (n + 0.5) / S), floored at 1e-3.
inline std::vector<double> hann_profile(std::size_t S) {
  if (S < 2) throw ValidationError("hann window needs S >= 2");
  std::vector<double> h(S);
  for (std::size_t n = 0; n < S; ++n)
    h[n] = std::max(kHannFloor, 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (double(n) + 0.5) / double(S)));
  return h;
}

/// Per-axis weight profile of one tile. A side lying on the global boundary
/// is held at 1 from the face up to the window center, since no neighbour
/// tile blends in there.
inline std::vector<double> tile_axis_profile(std::size_t S, bool low_boundary, bool high_boundary) {
  auto h = hann_profile(S);
  for (std::size_t n = 0; n < S; ++n) {
    if (low_boundary && 2 * n + 1 <= S) h[n] = 1.0;
    if (high_boundary && 2 * n + 1 >= S) h[n] = 1.0;
  }
  return h;
}

/// Separable S^3 weights for `tile` within `plan`.
inline Field<double> tile_weights(const TilePlan& plan, const Tile& tile) {
  const std::size_t S = plan.tile;
  const std::array<std::size_t, 3> origin{tile.z, tile.y, tile.x};
  std::array<std::vector<double>, 3> prof;
  for (int a = 0; a < 3; ++a)
    prof[a] = tile_axis_profile(S, origin[a] == 0, origin[a] + S == plan.dims.extent(a));
  Field<double> w(Dims::cube(S));
  for (std::size_t a = 0; a < S; ++a)
    for (std::size_t b = 0; b < S; ++b)
      for (std::size_t c = 0; c < S; ++c) w.at(a, b, c) = prof[0][a] * prof[1][b] * prof[2][c];
  return w;
}

// ---------------------------------------------------------------------------
// Noise

enum class NoiseMode { Coherent, Independent };

inline NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "coherent") return NoiseMode::Coherent;
  if (s == "independent") return NoiseMode::Independent;
  throw ValidationError("unknown noise mode '" + s + "' (expected coherent or independent)");
}

inline std::string to_string(NoiseMode m) { return m == NoiseMode::Coherent ? "coherent" : "independent"; }

/// Coherent mode: one global field per (seed, tag, step), sliced per tile.
/// Independent mode: a fresh field per tile.
struct NoiseField {
  NoiseMode mode = NoiseMode::Coherent;
  std::uint64_t seed = 0;
  Dims dims;

  SignedVolume region(const char* tag, std::uint64_t step, std::size_t tile_index, const Tile& origin,
                      std::size_t S) const {
    SignedVolume out(Dims::cube(S));
    if (mode == NoiseMode::Coherent) {
      const StreamKey key = StreamKey::make(seed, tag, step);
      for (std::size_t a = 0; a < S; ++a)
        for (std::size_t b = 0; b < S; ++b)
          for (std::size_t c = 0; c < S; ++c)
            out.at(a, b, c) = keyed_normal(key, dims.index(origin.z + a, origin.y + b, origin.x + c));
    } else {
      const StreamKey key = StreamKey::make(seed, tag, step, tile_index + 1);
      for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = keyed_normal(key, i);
    }
    return out;
  }

  SignedVolume global(const char* tag, std::uint64_t step) const {
    return normal_field(dims, StreamKey::make(seed, tag, step));
  }
};

// ---------------------------------------------------------------------------
// Fusion

inline SignedVolume extract_tile(const SignedVolume& x, const Tile& t, std::size_t S) {
  SignedVolume out(Dims::cube(S));
  for (std::size_t a = 0; a < S; ++a)
    for (std::size_t b = 0; b < S; ++b) {
      const std::size_t src = x.dims.index(t.z + a, t.y + b, t.x);
      std::copy_n(x.values.begin() + std::ptrdiff_t(src), S, out.values.begin() + std::ptrdiff_t((a * S + b) * S));
    }
  return out;
}

/// Weighted-mean accumulator. The running mean m <- m + (w/W)(x - m) is
/// algebraically V/W and returns equal contributions unchanged.
class FusionBuffers {
 public:
  explicit FusionBuffers(Dims dims) : mean_(dims), weight_(dims.size(), 0.0) {}

  void add(const SignedVolume& tile_values, const Field<double>& w, const Tile& t) {
    const std::size_t S = w.dims.d;
    const Dims& g = mean_.dims;
    for (std::size_t a = 0; a < S; ++a)
      for (std::size_t b = 0; b < S; ++b)
        for (std::size_t c = 0; c < S; ++c) {
          const std::size_t gi = g.index(t.z + a, t.y + b, t.x + c), li = (a * S + b) * S + c;
          const double wi = w.values[li];
          weight_[gi] += wi;
          mean_.values[gi] += (wi / weight_[gi]) * (tile_values.values[li] - mean_.values[gi]);
        }
  }

  const std::vector<double>& weights() const { return weight_; }

  SignedVolume result() const {
    for (double w : weight_)
      if (!(w > 0.0)) throw RuntimeFailure("tile fusion: accumulated weight is zero (coverage violated)");
    return mean_;
  }

 private:
  SignedVolume mean_;
  std::vector<double> weight_;
};

/// Runs `update(x_tile, k, z_tile)` on every tile of the global state `x` and
/// fuses the results. `z_tile` is empty at k = 1.
template <class Update>
SignedVolume tiled_step(const SignedVolume& x, int k, const TilePlan& plan, const NoiseField& noise, Update&& update) {
  if (!(x.dims == plan.dims)) throw ValidationError("tiled_step: state dims differ from plan dims");
  FusionBuffers fuse(plan.dims);
  for (std::size_t i = 0; i < plan.tiles.size(); ++i) {
    const Tile& t = plan.tiles[i];
    const SignedVolume x_tile = extract_tile(x, t, plan.tile);
    const SignedVolume z = k > 1 ? noise.region(kStepNoiseTag, std::uint64_t(k), i, t, plan.tile) : SignedVolume();
    const SignedVolume out = update(x_tile, k, z);
    fuse.add(out, tile_weights(plan, t), t);
  }
  return fuse.result();
}

/// Fused raw noise: the passthrough of each tile's noise slice.
inline SignedVolume fuse_noise(const TilePlan& plan, const NoiseField& noise, const char* tag, std::uint64_t step) {
  FusionBuffers fuse(plan.dims);
  for (std::size_t i = 0; i < plan.tiles.size(); ++i)
    fuse.add(noise.region(tag, step, i, plan.tiles[i], plan.tile), tile_weights(plan, plan.tiles[i]), plan.tiles[i]);
  return fuse.result();
}

struct TiledReport {
  Dims dims;
  std::size_t tile = 0, overlap = 0, tiles = 0;
  NoiseMode mode = NoiseMode::Coherent;
  double porosity = 0.0;
  double largest_cluster_fraction = 0.0;
  double otsu_threshold = 0.0;
};

struct TiledResult {
  BinaryVolume volume;
  SignedVolume field;
  TiledReport report;
};

/// Full reverse loop with per-step tile fusion, then Otsu binarization. The
/// initial state is the global field (coherent) or fused per-tile draws
/// (independent).
inline TiledResult sample_tiled(const Denoiser& denoise, Dims dims, std::size_t S, std::size_t O, NoiseMode mode,
                                const NoiseSchedule& s, const SamplerSpec& spec, std::uint64_t seed) {
  const TilePlan plan = plan_tiles(dims, S, O);
  const NoiseField noise{mode, seed, dims};
  SignedVolume x = mode == NoiseMode::Coherent ? noise.global(kInitNoiseTag, 0) : fuse_noise(plan, noise, kInitNoiseTag, 0);
  for (int k = s.steps; k >= 1; --k) {
    x = tiled_step(x, k, plan, noise, [&](const SignedVolume& xt, int step, const SignedVolume& z) {
      const SignedVolume x0_hat = logits_to_x0(denoise(xt, s.model_t[step]));
      return reverse_step(spec, xt, x0_hat, step, s, z);
    });
  }
  auto otsu = otsu_threshold(x);
  TiledResult r;
  r.report.dims = dims;
  r.report.tile = S;
  r.report.overlap = O;
  r.report.tiles = plan.tiles.size();
  r.report.mode = mode;
  r.report.porosity = otsu.volume.porosity();
  r.report.largest_cluster_fraction = otsu.volume.pore_count() ? connectivity_fraction(otsu.volume) : 0.0;
  r.report.otsu_threshold = otsu.threshold;
  r.volume = std::move(otsu.volume);
  r.field = std::move(x);
  return r;
}

}  // namespace poredit
