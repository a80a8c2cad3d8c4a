#pragma once

// The ten acceptance criteria. Shared by the acceptance binary and the
// `repro-desk` subcommand of the CLI.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oracles/oracles.hpp"
#include "poredit/poredit.hpp"

namespace acceptance {

using namespace poredit;
namespace fs = std::filesystem;

struct Result {
  int id = 0;
  std::string name;
  bool pass = false;
  bool skipped = false;
  std::string detail;
  double seconds = 0;
};

struct Options {
  std::uint64_t seed = 1;
  fs::path work_dir = "acceptance_work";
  fs::path cli;  // executable used by the determinism criterion
  bool quick = false;
  RunConfig desk = desk_config();
  std::ostream* log = nullptr;
};

inline std::string num(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

/// Collects sub-checks of one criterion.
struct Checks {
  bool pass = true;
  std::vector<std::string> parts;

  void add(bool ok, const std::string& what) {
    pass = pass && ok;
    parts.push_back(ok ? what : "FAIL " + what);
  }
  void note(const std::string& what) { parts.push_back(what); }

  Result finish(int id, std::string name, const Timer& t) const {
    std::string d;
    for (const auto& p : parts) d += (d.empty() ? "" : "; ") + p;
    return {id, std::move(name), pass, false, d, t.seconds()};
  }
};

inline void log_line(const Options& o, const std::string& s) {
  if (o.log) *o.log << "  .. " << s << std::endl;
}

inline BinaryVolume bernoulli_volume(Dims d, double p, std::uint64_t seed) {
  BinaryVolume v(d);
  const StreamKey key = StreamKey::make(seed, "acceptance-bernoulli");
  for (std::size_t i = 0; i < v.size(); ++i) v.set(i, keyed_uniform(key, i) < p);
  return v;
}

inline Tensor<double> normal_tensor(Shape shape, std::uint64_t seed, const char* tag, double stdev = 1.0) {
  std::vector<double> v(shape_size(shape));
  const StreamKey key = StreamKey::make(seed, tag);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = stdev * keyed_normal(key, i);
  return Tensor<double>::constant(std::move(shape), std::move(v));
}

/// Adds N(0, stdev) to every value of `t` in place.
template <class Real>
void jitter(Tensor<Real>& t, std::uint64_t seed, std::uint64_t which, double stdev) {
  const StreamKey key = StreamKey::make(seed, "acceptance-jitter", which);
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<Real>(stdev * keyed_normal(key, i));
}

template <class Real>
void jitter_model(Model<Real>& m, std::uint64_t seed, double stdev) {
  std::uint64_t k = 0;
  for (auto& [name, t] : m.parameters()) jitter(*t, seed, k++, stdev);
}

inline ModelConfig small_config(int input, int patch, int embed, int heads, int window) {
  ModelConfig c;
  c.input_size = input;
  c.patch = patch;
  c.embed_dim = embed;
  c.depth = 2;
  c.heads = heads;
  c.window = window;
  return c;
}

// ---------------------------------------------------------------------------
// 1

inline Result criterion_schedule(const Options&) {
  Timer timer;
  Checks c;
  const auto s = cosine_schedule(1000, 0.008);
  c.add(std::abs(s.alpha_bar[0] - 1.0) <= 1e-12, "alpha_bar_0=" + num(s.alpha_bar[0], 17));
  bool mono = true;
  for (int t = 1; t <= s.steps; ++t) mono = mono && s.alpha_bar[t] < s.alpha_bar[t - 1];
  c.add(mono, "strictly decreasing over 1000 steps");
  const double err = std::abs(s.alpha_bar[500] - oracle::kAlphaBar500);
  c.add(err <= 1e-10, "|alpha_bar_500 - reference|=" + num(err, 3));
  const double sec = timer.seconds();
  c.add(sec < 1.0, "runtime " + num(sec, 3) + " s < 1 s");
  return c.finish(1, "schedule", timer);
}

// ---------------------------------------------------------------------------
// 2

inline Result criterion_gradients(const Options& o) {
  Timer timer;
  Checks c;
  const ModelConfig cfg = small_config(8, 4, 16, 2, 2);
  Model<double> model(cfg, o.seed, false);
  // Move away from the zero-initialized modulation so every path carries signal.
  jitter(model.adaln().weight, o.seed, 9001, 0.05);
  // phi of the sample sits away from the mean so the phi embedding is not at its zero point.
  model.porosity_stats() = {0.25, 0.05};
  const BinaryVolume g = synth_grf({8, 0.3, 1.5, o.seed});
  const auto sched = cosine_schedule(1000);
  const int t = 300;
  const SignedVolume eps = normal_field(g.dims(), StreamKey::make(o.seed, "acceptance-grad-noise"));
  const SignedVolume x_t = forward_corrupt(map_to_signed(g), t, eps, sched);
  Condition cond;
  cond.t = t;
  cond.phi = g.porosity();
  LossWeights w;
  w.lambda_s2 = 0.0;  // no lag fits an 8-voxel edge
  const PhysicsTarget target = physics_target(g);
  const int epoch = 3;
  auto loss_value = [&] { return total_loss(model.forward(x_t, cond, false), g, target, w, epoch).total; };

  model.zero_grad();
  backward(loss_value());
  const double h = 1e-5;
  double worst = 0, worst_resolved = 0;
  std::string worst_name;
  std::size_t checked = 0, at_floor = 0;
  // One ulp of the loss over 2h: the smallest nonzero central difference.
  const double quantum = std::ldexp(std::abs(loss_value().item()), -52) / (2 * h);
  NoGradGuard no_grad;
  for (auto& [name, p] : model.parameters()) {
    std::vector<double> analytic(p->size(), 0.0);
    if (p->has_grad()) std::copy(p->grad().begin(), p->grad().end(), analytic.begin());
    auto d = p->mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double keep = d[i];
      d[i] = keep + h;
      const double lp = loss_value().item();
      d[i] = keep - h;
      const double lm = loss_value().item();
      d[i] = keep;
      const double numeric = (lp - lm) / (2 * h);
      const double rel = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-8);
      if (rel > worst) {
        worst = rel;
        worst_name = name + "[" + std::to_string(i) + "]";
      }
      // Below 1e5 quanta, one quantum of noise alone is over 1e-5 relative.
      if (std::abs(analytic[i]) < 1e5 * quantum) {
        ++at_floor;
      } else {
        worst_resolved = std::max(worst_resolved, rel);
      }
      ++checked;
    }
  }
  c.add(worst < 1e-4, "max relative error " + num(worst, 3) + " at " + worst_name + " over " +
                          std::to_string(checked) + " parameters");
  c.note("difference quantum " + num(quantum, 3) + "; " + std::to_string(at_floor) +
         " entries with |g| < 1e5 quanta; max relative error over the rest " + num(worst_resolved, 3));
  const double sec = timer.seconds();
  c.add(sec < 300, "runtime " + num(sec, 3) + " s < 300 s");
  return c.finish(2, "gradients", timer);
}

// ---------------------------------------------------------------------------
// 3

inline Result criterion_attention(const Options& o) {
  Timer timer;
  Checks c;
  {
    // Window = latent edge: one window spans every token.
    const ModelConfig cfg = small_config(16, 4, 16, 2, 4);
    Model<double> model(cfg, o.seed, false);
    auto& b = model.block(0);
    std::uint64_t which = 100;
    for (auto* t : {&b.qkv.weight, &b.qkv.bias, &b.proj.bias, &b.rel_bias}) jitter(*t, o.seed, which++, 0.3);
    const std::size_t N = cfg.tokens(), C = cfg.embed_dim;
    auto x = normal_tensor({N, C}, o.seed, "acceptance-attn-x");
    NoGradGuard no_grad;
    auto got = model.window_attention(x, b, false);
    const auto ref = oracle::dense_attention(std::vector<double>(x.data().begin(), x.data().end()), b, cfg.latent(),
                                             cfg.embed_dim, cfg.heads);
    double err = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(ref[i] - got.data()[i]));
    c.add(err < 1e-6, "W-MSA vs dense max diff " + num(err, 3));
  }
  {
    // Shifted windows on an 8^3 latent grid with M=4: weight that lands on
    // pairs which are neighbours only through the cyclic roll.
    const ModelConfig cfg = small_config(32, 4, 16, 2, 4);
    Model<double> model(cfg, o.seed, false);
    auto& b = model.block(1);
    jitter(b.qkv.weight, o.seed, 1, 0.3);
    const std::size_t N = cfg.tokens(), C = cfg.embed_dim;
    auto x = normal_tensor({N, C}, o.seed, "acceptance-mask-x");
    NoGradGuard no_grad;
    Tensor<double> probs;
    model.window_attention(x, b, true, &probs);
    const int L = cfg.latent(), M = cfg.window, nw = L / M;
    const std::size_t T = std::size_t(M) * M * M, heads = cfg.heads, W = std::size_t(nw) * nw * nw;
    const auto& token_of = *model.layout().shifted;
    auto coords = [&](std::size_t tok) {
      return std::array<int, 3>{int(tok) / (L * L), (int(tok) / L) % L, int(tok) % L};
    };
    double leak = 0;
    std::size_t far_pairs = 0;
    for (std::size_t w = 0; w < W; ++w) {
      const int wz = int(w) / (nw * nw), wy = (int(w) / nw) % nw, wx = int(w) % nw;
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) {
          // Position inside the rolled frame.
          const std::array<int, 3> ri{wz * M + int(i) / (M * M), wy * M + (int(i) / M) % M, wx * M + int(i) % M};
          const std::array<int, 3> rj{wz * M + int(j) / (M * M), wy * M + (int(j) / M) % M, wx * M + int(j) % M};
          const auto oi = coords(token_of[w * T + i]), oj = coords(token_of[w * T + j]);
          bool adjacent = true;
          for (int a = 0; a < 3; ++a) adjacent = adjacent && (oi[a] - oj[a]) == (ri[a] - rj[a]);
          if (adjacent) continue;
          ++far_pairs;
          for (std::size_t hh = 0; hh < heads; ++hh) leak += probs.data()[((w * heads + hh) * T + i) * T + j];
        }
    }
    c.add(far_pairs > 0 && leak < 1e-6,
          "SW-MSA weight on " + std::to_string(far_pairs) + " non-adjacent pairs " + num(leak, 3));
  }
  {
    const ModelConfig cfg = small_config(32, 4, 32, 2, 4);
    Model<double> model(cfg, o.seed, false);
    const std::uint64_t N = cfg.tokens(), C = cfg.embed_dim, M = cfg.window;
    auto x = normal_tensor({N, C}, o.seed, "acceptance-count-x");
    NoGradGuard no_grad;
    reset_matmul_multiply_count();
    model.window_attention(x, model.block(0), false);
    const std::uint64_t counted = matmul_multiply_count();
    const std::uint64_t expected = 4 * N * C * C + 2 * N * M * M * M * C;
    c.add(counted == expected, "multiplies " + std::to_string(counted) + " vs 4NC^2+2NM^3C=" + std::to_string(expected) +
                                   " (N=" + std::to_string(N) + ", C=" + std::to_string(C) + ", M=" + std::to_string(M) + ")");
  }
  return c.finish(3, "attention", timer);
}

// ---------------------------------------------------------------------------
// 4

inline Result criterion_variance(const Options& o) {
  Timer timer;
  Checks c;
  const Dims dims = Dims::cube(13);
  const TilePlan plan = plan_tiles(dims, 8, 3);  // starts {0, 5}: overlap slab 5..7, midplane 6
  const NoiseField noise{NoiseMode::Independent, o.seed, dims};
  const int draws = 20000;
  std::vector<double> sum(dims.size(), 0.0), sq(dims.size(), 0.0);
  for (int n = 0; n < draws; ++n) {
    const auto f = fuse_noise(plan, noise, "acceptance-variance", std::uint64_t(n));
    for (std::size_t i = 0; i < f.size(); ++i) {
      sum[i] += f.values[i];
      sq[i] += f.values[i] * f.values[i];
    }
  }
  auto variance = [&](std::size_t i) {
    const double m = sum[i] / draws;
    return (sq[i] - draws * m * m) / (draws - 1);
  };
  auto in_overlap = [](std::size_t k) { return k >= 5 && k <= 7; };
  double face = 0, face_worst = 0, edge = 0;
  int face_n = 0, edge_n = 0;
  for (std::size_t z = 0; z < 13; ++z)
    for (std::size_t y = 0; y < 13; ++y)
      for (std::size_t x = 0; x < 13; ++x) {
        const std::size_t k[3] = {z, y, x};
        int mid = 0, other_overlap = 0;
        for (auto v : k) {
          mid += v == 6;
          other_overlap += v != 6 && in_overlap(v);
        }
        if (other_overlap) continue;
        const double var = variance(dims.index(z, y, x));
        if (mid == 1) {
          face += var;
          face_worst = std::max(face_worst, std::abs(var / 0.5 - 1));
          ++face_n;
        } else if (mid == 2) {
          edge += var;
          ++edge_n;
        }
      }
  face /= face_n;
  edge /= edge_n;
  const double corner = variance(dims.index(6, 6, 6));
  c.add(std::abs(face / 0.5 - 1) <= 0.05,
        "face midplane variance " + num(face) + " (target 0.5, " + std::to_string(face_n) + " voxels, worst dev " +
            num(100 * face_worst, 3) + "%)");
  c.add(std::abs(corner / 0.125 - 1) <= 0.05, "corner variance " + num(corner) + " (target 0.125)");
  c.note("edge variance " + num(edge) + " (0.25 expected)");
  c.note(std::to_string(draws) + " draws");

  bool exact = true;
  for (auto [edge_len, S, O] : {std::array<std::size_t, 3>{13, 8, 3}, std::array<std::size_t, 3>{20, 8, 4}}) {
    const Dims d = Dims::cube(edge_len);
    const TilePlan p = plan_tiles(d, S, O);
    const NoiseField coherent{NoiseMode::Coherent, o.seed, d};
    for (std::uint64_t step = 1; step <= 3; ++step) {
      const auto fused = fuse_noise(p, coherent, "acceptance-coherent", step);
      const auto global = coherent.global("acceptance-coherent", step);
      exact = exact && std::memcmp(fused.values.data(), global.values.data(), fused.size() * sizeof(double)) == 0;
    }
  }
  c.add(exact, "coherent fused noise bit-identical to the global field (13^3/8/3, 20^3/8/4)");
  const double sec = timer.seconds();
  c.add(sec < 120, "runtime " + num(sec, 3) + " s < 120 s");
  return c.finish(4, "tiled noise variance", timer);
}

// ---------------------------------------------------------------------------
// 5

inline Result criterion_single_tile(const Options& o) {
  Timer timer;
  Checks c;
  const ModelConfig cfg = small_config(16, 4, 16, 2, 2);
  Model<float> model(cfg, o.seed, false);
  jitter(model.adaln().weight, o.seed, 9002, 0.05f);
  Condition cond;
  cond.phi = 0.3;
  const Denoiser den = make_denoiser(model, cond, GuidanceSpec{1.5, true});
  const auto sched = respace(cosine_schedule(1000), 10);
  for (SamplerMode mode : {SamplerMode::Ancestral, SamplerMode::Ddim}) {
    const SamplerSpec spec{mode, 0.7};
    const auto mono = sample(den, Dims::cube(16), sched, spec, o.seed);
    const auto tiled = sample_tiled(den, Dims::cube(16), 16, 4, NoiseMode::Coherent, sched, spec, o.seed);
    const bool same_field =
        std::memcmp(mono.field.values.data(), tiled.field.values.data(), mono.field.size() * sizeof(double)) == 0;
    const bool same_volume = mono.volume == tiled.volume && mono.otsu_threshold == tiled.report.otsu_threshold;
    c.add(same_field && same_volume, to_string(mode) + ": final field and volume bit-identical (porosity " +
                                         num(mono.volume.porosity()) + ")");
  }
  return c.finish(5, "single-tile degeneracy", timer);
}

// ---------------------------------------------------------------------------
// 6

inline BinaryVolume volume_from(Dims d, const std::vector<std::array<std::size_t, 3>>& pores) {
  BinaryVolume v(d);
  for (auto [z, y, x] : pores) v.set(z, y, x, true);
  return v;
}

inline Result criterion_metrics(const Options& o) {
  Timer timer;
  Checks c;
  double s2_err = 0, lp_err = 0;
  for (Dims d : {Dims::cube(16), Dims{8, 12, 10}}) {
    const BinaryVolume v = bernoulli_volume(d, 0.35, o.seed + d.size());
    const auto fast = autocorrelation(v);
    const auto slow = oracle::autocorrelation(v);
    for (std::size_t i = 0; i < fast.size(); ++i) s2_err = std::max(s2_err, std::abs(fast[i] - slow[i]));
    const auto radial = s2_radial(v).radial;
    const auto radial_ref = oracle::s2_radial(v);
    for (std::size_t i = 0; i < radial.size(); ++i) s2_err = std::max(s2_err, std::abs(radial[i] - radial_ref[i]));
  }
  c.add(s2_err <= 1e-10, "FFT S2 vs brute force max diff " + num(s2_err, 3));
  for (const BinaryVolume& w : {bernoulli_volume({8, 12, 10}, 0.7, o.seed), synth_grf({16, 0.6, 1.5, o.seed})}) {
    for (int axis = 0; axis < 3; ++axis) {
      const auto a = lineal_path(w, axis), b = oracle::lineal_path(w, axis);
      if (a.size() != b.size()) lp_err = INFINITY;
      for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) lp_err = std::max(lp_err, std::abs(a[i] - b[i]));
    }
  }
  c.add(lp_err <= 1e-12, "lineal path vs brute force max diff " + num(lp_err, 3));

  const Dims d5 = Dims::cube(5);
  const BinaryVolume single = volume_from(d5, {{2, 2, 2}});
  std::vector<std::array<std::size_t, 3>> shell, ring;
  for (std::size_t z = 1; z <= 3; ++z)
    for (std::size_t y = 1; y <= 3; ++y)
      for (std::size_t x = 1; x <= 3; ++x)
        if (!(z == 2 && y == 2 && x == 2)) shell.push_back({z, y, x});
  for (std::size_t y = 1; y <= 3; ++y)
    for (std::size_t x = 1; x <= 3; ++x)
      if (!(y == 2 && x == 2)) ring.push_back({2, y, x});
  const BinaryVolume hollow = volume_from(d5, shell), square_ring = volume_from(d5, ring);
  const long long chi1 = euler_characteristic(single), chi2 = euler_characteristic(hollow),
                  chi0 = euler_characteristic(square_ring);
  const bool oracle_agrees = oracle::euler_vefc(single) == chi1 && oracle::euler_vefc(hollow) == chi2 &&
                             oracle::euler_vefc(square_ring) == chi0;
  c.add(chi1 == 1 && chi2 == 2 && chi0 == 0 && oracle_agrees,
        "Euler chi single/hollow/ring = " + std::to_string(chi1) + "/" + std::to_string(chi2) + "/" +
            std::to_string(chi0) + (oracle_agrees ? ", V-E+F-C oracle agrees" : ", oracle disagrees"));

  // 3x11 and 2x17 plates, far apart.
  std::vector<std::array<std::size_t, 3>> plates;
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 11; ++x) plates.push_back({2, 2 + y, 2 + x});
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 17; ++x) plates.push_back({12, 2 + y, 1 + x});
  const BinaryVolume two = volume_from(Dims::cube(20), plates);
  const auto cleaned = clean_isolated(two);
  const bool removed33 = cleaned.volume.at(2, 3, 5) == 0 && cleaned.removed == 33;
  const bool kept34 = cleaned.volume.at(12, 2, 5) == 1 && cleaned.volume.pore_count() == 34;
  c.add(removed33 && kept34, "clean_isolated removes the 33-voxel cluster, keeps the 34-voxel one");

  bool otsu_ok = true;
  std::string otsu_detail;
  for (int k = 0; k < 4; ++k) {
    SignedVolume f(Dims::cube(12));
    const StreamKey key = StreamKey::make(o.seed, "acceptance-otsu", std::uint64_t(k));
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double u = keyed_uniform(key, 2 * i), n = keyed_normal(key, 2 * i + 1);
      switch (k) {
        case 0: f.values[i] = (u < 0.3 ? 0.8 : -0.8) + 0.2 * n; break;
        case 1: f.values[i] = (u < 0.5 ? 0.8 : -0.8) + 0.4 * n; break;
        case 2: f.values[i] = u * u * u; break;
        default: f.values[i] = n; break;
      }
    }
    const int got = otsu_threshold(f).bin, ref = oracle::otsu_bin(f);
    otsu_ok = otsu_ok && got == ref;
    otsu_detail += (otsu_detail.empty() ? "" : ",") + std::to_string(got) + "/" + std::to_string(ref);
  }
  c.add(otsu_ok, "Otsu bin vs exhaustive scan " + otsu_detail);
  return c.finish(6, "metrics oracles", timer);
}

// ---------------------------------------------------------------------------
// 7

/// Plane channel along z: `aperture` fluid rows between solid rows y=0 and
/// y=aperture+1, periodic in x.
inline BinaryVolume channel_volume(std::size_t length, std::size_t aperture, std::size_t width) {
  const Dims d{length, aperture + 2, width};
  BinaryVolume v(d, 1);
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t x = 0; x < d.w; ++x) {
      v.set(z, 0, x, false);
      v.set(z, d.h - 1, x, false);
    }
  return v;
}

inline Result criterion_lbm(const Options& o) {
  Timer timer;
  Checks c;
  const std::size_t aperture = 20;
  const BinaryVolume channel = channel_volume(32, aperture, 2);
  const double k_ref = oracle::channel_permeability(double(aperture), double(aperture + 2));
  LbmConfig base;
  base.tol = 1e-9;
  base.max_steps = 200000;
  auto run = [&](double tau, double rho_in, double rho_out) {
    LbmConfig cfg = base;
    cfg.tau = tau;
    cfg.rho_in = rho_in;
    cfg.rho_out = rho_out;
    return run_permeability(channel, cfg);
  };
  const auto r1 = run(1.0, 1.001, 0.999);
  const double dev = r1.k_lattice / k_ref - 1;
  c.add(r1.converged && std::abs(dev) <= 0.02,
        "channel K=" + num(r1.k_lattice, 6) + " vs h^3/(12H)=" + num(k_ref, 6) + " (" + num(100 * dev, 3) + "%)");
  const auto r2 = run(1.0, 1.002, 0.998);
  const double ratio = r2.mean_velocity / r1.mean_velocity;
  c.add(std::abs(ratio / 2 - 1) <= 0.01, "doubling the density drop scales u by " + num(ratio, 6));
  double k_lo = INFINITY, k_hi = -INFINITY;
  std::string ks;
  for (double tau : {0.8, 1.0, 1.2}) {
    const double k = tau == 1.0 ? r1.k_lattice : run(tau, 1.001, 0.999).k_lattice;
    k_lo = std::min(k_lo, k);
    k_hi = std::max(k_hi, k);
    ks += (ks.empty() ? "" : "/") + num(k, 5);
  }
  const double spread = (k_hi - k_lo) / r1.k_lattice;
  c.add(spread <= 0.01, "K at tau 0.8/1.0/1.2 = " + ks + " (spread " + num(100 * spread, 3) + "%)");

  {
    const BinaryVolume open(Dims::cube(8), 1);
    LbmConfig cfg;
    LbmSolver solver(open, cfg, LbmBoundary::Periodic);
    const StreamKey key = StreamKey::make(o.seed, "acceptance-lbm-mass");
    for (std::size_t n = 0; n < open.size(); ++n)
      solver.set_equilibrium(n, 1.0 + 0.01 * keyed_normal(key, 4 * n), 0.02 * keyed_normal(key, 4 * n + 1),
                             0.02 * keyed_normal(key, 4 * n + 2), 0.02 * keyed_normal(key, 4 * n + 3));
    double prev = solver.total_mass(), worst = 0;
    for (int s = 0; s < 200; ++s) {
      solver.step();
      const double m = solver.total_mass();
      worst = std::max(worst, std::abs(m - prev) / prev);
      prev = m;
    }
    c.add(worst <= 1e-12, "periodic 8^3 relative mass change per step <= " + num(worst, 3));
  }
  {
    Timer t64;
    BinaryVolume v;
    std::uint64_t s = o.seed;
    do v = synth_grf({64, 0.3, 3.0, s++});
    while (!percolates(v, 0));
    LbmConfig cfg;
    cfg.tol = 1e-5;
    const auto r = run_permeability(v, cfg);
    const double sec = t64.seconds();
    c.add(r.converged && sec < 120, "64^3 GRF (porosity " + num(v.porosity(), 3) + ") converged in " +
                                        std::to_string(r.steps) + " steps, " + num(sec, 3) + " s < 120 s, K=" +
                                        num(r.k_lattice, 4));
  }
  return c.finish(7, "lattice Boltzmann", timer);
}

// ---------------------------------------------------------------------------
// 8

inline Result criterion_desk(const Options& o) {
  Timer timer;
  Checks c;
  const RunConfig& rc = o.desk;
  rc.validate();
  fs::create_directories(o.work_dir / "desk");
  const fs::path dir = o.work_dir / "desk";

  SynthSpec spec = rc.synth.spec;
  spec.seed = o.seed;
  Dataset ds;
  ds.volumes = synth_ensemble(spec, rc.synth.count, rc.synth.porosity_spread, o.seed);
  for (std::size_t i = 0; i < ds.size(); ++i) ds.names.push_back("train_" + std::to_string(i));
  log_line(o, "synthesized " + std::to_string(ds.size()) + " training volumes");

  TrainConfig tc = rc.train;
  tc.seed = o.seed;
  Model<float> trained(rc.model, o.seed);
  const auto tr = train(trained, ds, tc, rc.loss, [&](const EpochRecord& e) {
    if (o.log && (e.epoch % 10 == 0 || e.epoch + 1 == tc.epochs))
      log_line(o, "epoch " + std::to_string(e.epoch) + " loss " + num(e.loss));
  });
  write_epoch_csv(tr.epochs, dir / "train_log.csv");
  const long long steps = (long long)tr.step_losses.size() / tc.batch;
  c.add(steps >= 500, std::to_string(steps) + " optimizer steps (>= 500), " + num(timer.seconds(), 4) + " s training");
  save_checkpoint(trained, CheckpointMeta{tc.diffusion_steps, tc.s_offset, {}}, dir / "desk.pdtc");
  const auto loaded = load_checkpoint<float>(dir / "desk.pdtc");

  const auto sched = respace(cosine_schedule(loaded.meta.diffusion_steps, loaded.meta.s_offset), rc.sample.steps);
  Condition cond;
  cond.phi = rc.sample.porosity;
  const Denoiser den = make_denoiser(loaded.model, cond, GuidanceSpec{rc.sample.cfg_scale, true});
  const SamplerSpec sspec{rc.sample.mode, rc.sample.eta};
  const Dims dims = Dims::cube(std::size_t(rc.model.input_size));

  std::vector<BinaryVolume> gen;
  int close = 0;
  std::string phis;
  double lcf_mean = 0;
  for (int i = 0; i < 10; ++i) {
    auto r = sample(den, dims, sched, sspec, StreamKey::make(o.seed, "desk-sample", std::uint64_t(i)).value);
    const double phi = r.volume.porosity();
    close += std::abs(phi - rc.sample.porosity) <= 0.03;
    phis += (phis.empty() ? "" : ",") + num(phi, 3);
    lcf_mean += r.volume.pore_count() ? connectivity_fraction(r.volume) : 0.0;
    write_volume(r.volume, dir / ("sample_" + std::to_string(i) + ".pdtv"));
    gen.push_back(std::move(r.volume));
    log_line(o, "sample " + std::to_string(i) + " porosity " + num(phi, 4));
  }
  lcf_mean /= double(gen.size());
  c.add(close >= 8, "(a) " + std::to_string(close) + "/10 samples within 0.03 of porosity " +
                        num(rc.sample.porosity) + " [" + phis + "]");

  std::vector<std::vector<double>> gt_curves, gen_curves;
  for (const auto& v : ds.volumes) gt_curves.push_back(s2_radial(v).radial);
  for (const auto& v : gen) gen_curves.push_back(s2_radial(v).radial);
  const std::size_t lags = gt_curves.front().size();
  double worst_z = 0;
  std::size_t worst_lag = 0;
  for (std::size_t r = 0; r < lags; ++r) {
    double gm = 0, gs = 0, m = 0;
    for (const auto& cv : gt_curves) gm += cv[r];
    gm /= double(gt_curves.size());
    for (const auto& cv : gt_curves) gs += (cv[r] - gm) * (cv[r] - gm);
    gs = std::sqrt(gs / double(gt_curves.size() - 1));
    for (const auto& cv : gen_curves) m += cv[r];
    m /= double(gen_curves.size());
    const double z = gs > 0 ? std::abs(m - gm) / gs : (m == gm ? 0.0 : INFINITY);
    if (z > worst_z) {
      worst_z = z;
      worst_lag = r;
    }
  }
  c.add(worst_z <= 3.0, "(b) mean S2 within " + num(worst_z, 3) + " GT std (worst lag " + std::to_string(worst_lag) +
                            " of 0.." + std::to_string(lags - 1) + ", limit 3)");

  const std::size_t big = rc.tiling.size;
  const auto tiled = sample_tiled(den, Dims::cube(big), rc.tiling.tile, rc.tiling.overlap, NoiseMode::Coherent, sched,
                                  sspec, StreamKey::make(o.seed, "desk-tiled").value);
  write_volume(tiled.volume, dir / "tiled.pdtv");
  const double dl = std::abs(tiled.report.largest_cluster_fraction - lcf_mean);
  c.add(dl <= 0.05, "(c) " + std::to_string(big) + "^3 tiled largest-cluster fraction " +
                        num(tiled.report.largest_cluster_fraction, 4) + " vs monolithic mean " + num(lcf_mean, 4) +
                        " (porosity " + num(tiled.report.porosity, 3) + ")");

  double dmin = 1;
  for (const auto& g : gen) dmin = std::min(dmin, novelty_dmin(g, ds.volumes));
  const double planted = novelty_dmin(ds.volumes[3], ds.volumes);
  c.add(dmin > 0 && planted == 0, "(d) min D_min over samples " + num(dmin, 4) + ", planted copy " + num(planted));

  const auto rep = analyze(gen.front(), true);
  c.note("sample 0: chi " + std::to_string(rep.euler_chi) + ", largest cluster " + num(rep.largest_cluster_fraction, 4));
  if (percolates(gen.front(), 0)) {
    LbmConfig lc;
    lc.tol = 1e-5;
    const auto k = run_permeability(gen.front(), lc);
    c.note("sample 0 K_lattice " + num(k.k_lattice, 4) + (k.converged ? "" : " (not converged)"));
  } else {
    c.note("sample 0 does not percolate along z; no permeability");
  }
  const double sec = timer.seconds();
  c.add(sec <= 3600, "runtime " + num(sec, 4) + " s <= 3600 s");
  return c.finish(8, "desk reproduction", timer);
}

// ---------------------------------------------------------------------------
// 9

inline Result criterion_losses(const Options& o) {
  Timer timer;
  Checks c;
  const BinaryVolume g = synth_grf({16, 0.3, 2.0, o.seed});
  const auto gt = binary_tensor<double>(g);
  const double dice = dice_loss(gt, gt).item();
  c.add(std::abs(dice) <= 1e-12, "Dice(P=G)=" + num(dice, 3));
  const auto half = Tensor<double>::filled(gt.shape(), 0.5);
  const double bce = bce_loss(half, gt).item();
  c.add(std::abs(bce - std::log(2.0)) <= 1e-12, "BCE(P=0.5)-ln2=" + num(bce - std::log(2.0), 3));
  const PhysicsTarget target = physics_target(g);
  const double phys = physics_loss(gt, target, 1.0).item();
  c.add(target.lags.size() == 1 && std::abs(phys) <= 1e-12,
        "physics loss at P=G " + num(phys, 3) + " (lags " + std::to_string(target.lags.size()) + ")");
  LossWeights w;
  bool linear = true;
  std::string ws;
  for (int e = 0; e <= 5; ++e) {
    const double expect = e >= 3 ? w.lambda_phy : w.lambda_phy * e / 3.0;
    linear = linear && w.physics_weight(e) == expect;
    ws += (ws.empty() ? "" : ",") + num(w.physics_weight(e));
  }
  c.add(linear, "warm-up weights epochs 0..5 = " + ws);
  return c.finish(9, "loss identities", timer);
}

// ---------------------------------------------------------------------------
// 10

struct CliStep {
  std::string name;
  std::string args;
};

inline std::vector<CliStep> cli_script() {
  return {
      {"synth", "synth --count 3 --size 16 --porosity 0.3 --corr-len 1.5 --seed 5 --out data"},
      {"train", "train --data data --config tiny.json --out model.pdtc --seed 5 --log train.csv"},
      {"sample", "sample --ckpt model.pdtc --porosity 0.3 --steps 4 --mode ancestral --cfg 1.5 --seed 7 "
                 "--out gen/a.pdtv --report gen_a.json"},
      {"sample-ddim", "sample --ckpt model.pdtc --porosity 0.3 --steps 4 --mode ddim --eta 0.5 --seed 8 "
                      "--out gen/b.pdtv --report gen_b.json"},
      {"sample-tiled", "sample-tiled --ckpt model.pdtc --porosity 0.3 --size 24 --tile 16 --overlap 4 --noise coherent "
                       "--steps 3 --seed 9 --out tiled.pdtv --report tiled.json"},
      {"sample-tiled-indep", "sample-tiled --ckpt model.pdtc --porosity 0.3 --size 24 --tile 16 --overlap 4 "
                             "--noise independent --steps 3 --seed 9 --out tiled_i.pdtv --report tiled_i.json"},
      {"analyze", "analyze --in data/synth_000.pdtv --clean --report analyze.json"},
      {"lbm", "lbm --in data/synth_000.pdtv --axis z --tol 1e-4 --max-steps 3000 --report runs/lbm_0.json"},
      {"lbm-2", "lbm --in data/synth_001.pdtv --axis x --tau 0.9 --tol 1e-4 --max-steps 3000 --report runs/lbm_1.json"},
      {"novelty", "novelty --gen gen --train data --report novelty.json"},
      {"report", "report --dir runs --out scatter.csv"},
  };
}

inline const char* kTinyConfig = R"({
  "model": {"input_size": 16, "patch": 4, "embed_dim": 16, "depth": 2, "heads": 2, "window": 2},
  "train": {"epochs": 2, "max_steps": 0, "lr": 0.001},
  "sample": {"steps": 4},
  "tiling": {"size": 24, "tile": 16, "overlap": 4},
  "synth": {"count": 3, "size": 16, "corr_len": 1.5}
})";

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char ch : s) out += ch == '\'' ? std::string("'\\''") : std::string(1, ch);
  return out + "'";
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// All regular files under `dir`, keyed by relative path.
inline std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

inline Result criterion_determinism(const Options& o) {
  Timer timer;
  Checks c;
  if (o.cli.empty() || !fs::exists(o.cli)) {
    c.add(false, "CLI executable not found: '" + o.cli.string() + "'");
    return c.finish(10, "CLI determinism", timer);
  }
  const fs::path cli = fs::absolute(o.cli);
  const fs::path root = fs::absolute(o.work_dir / "determinism");
  fs::remove_all(root);
  const auto script = cli_script();
  struct Run {
    std::string label;
    int threads;
  };
  const std::vector<Run> runs{{"run1_t1", 1}, {"run2_t1", 1}, {"run3_t8", 8}};
  bool all_ok = true;
  for (const auto& run : runs) {
    const fs::path dir = root / run.label;
    fs::create_directories(dir / "gen");
    fs::create_directories(dir / "runs");
    std::ofstream(dir / "tiny.json") << kTinyConfig;
    for (std::size_t i = 0; i < script.size(); ++i) {
      const std::string out = "stdout_" + std::to_string(i) + "_" + script[i].name + ".txt";
      const std::string cmd = "cd " + shell_quote(dir.string()) + " && " + shell_quote(cli.string()) + " --threads " +
                              std::to_string(run.threads) + " " + script[i].args + " > " + out + " 2> /dev/null";
      const int rc = std::system(cmd.c_str());
      if (rc != 0) {
        all_ok = false;
        c.add(false, run.label + ": '" + script[i].name + "' exited with status " + std::to_string(rc));
      }
    }
  }
  c.add(all_ok, std::to_string(script.size()) + " subcommand invocations per run succeeded");
  const auto ref = snapshot(root / runs[0].label);
  for (std::size_t r = 1; r < runs.size(); ++r) {
    const auto other = snapshot(root / runs[r].label);
    std::vector<std::string> diffs;
    for (const auto& [name, bytes] : ref) {
      auto it = other.find(name);
      if (it == other.end() || it->second != bytes) diffs.push_back(name);
    }
    for (const auto& [name, bytes] : other)
      if (!ref.count(name)) diffs.push_back(name);
    std::string list;
    for (const auto& d : diffs) list += " " + d;
    c.add(diffs.empty(), runs[r].label + " vs " + runs[0].label + ": " + std::to_string(ref.size()) + " files " +
                             (diffs.empty() ? "byte-identical" : "differ:" + list));
  }
  return c.finish(10, "CLI determinism", timer);
}

// ---------------------------------------------------------------------------

inline std::string format_line(const Result& r) {
  std::ostringstream o;
  o << (r.skipped ? "SKIP" : r.pass ? "PASS" : "FAIL") << "  [" << std::setw(2) << r.id << "] " << r.name << " ("
    << std::fixed << std::setprecision(1) << r.seconds << " s): " << r.detail;
  return o.str();
}

using Criterion = std::function<Result(const Options&)>;

inline std::vector<std::pair<int, Criterion>> all_criteria() {
  return {{1, criterion_schedule},     {2, criterion_gradients}, {3, criterion_attention},
          {4, criterion_variance},     {5, criterion_single_tile}, {6, criterion_metrics},
          {7, criterion_lbm},          {8, criterion_desk},      {9, criterion_losses},
          {10, criterion_determinism}};
}

/// Runs the selected criteria (all when `only` is empty; 6 and 7 in quick
/// mode), reporting each line through `emit` as it finishes. Exceptions
/// inside a criterion count as failures.
inline std::vector<Result> run_all(const Options& o, const std::vector<int>& only,
                                   const std::function<void(const Result&)>& emit) {
  std::vector<Result> out;
  for (auto& [id, fn] : all_criteria()) {
    const bool selected = only.empty() ? (!o.quick || id == 6 || id == 7)
                                       : std::find(only.begin(), only.end(), id) != only.end();
    if (!selected) continue;
    Timer t;
    Result r;
    try {
      r = fn(o);
    } catch (const std::exception& e) {
      r = {id, "criterion " + std::to_string(id), false, false, std::string("exception: ") + e.what(), t.seconds()};
    }
    if (emit) emit(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace acceptance
