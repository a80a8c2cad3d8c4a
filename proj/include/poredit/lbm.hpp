#pragma once

// Single-phase D3Q19 BGK lattice Boltzmann solver and Darcy permeability.
//
// Streaming is a pull gather through a precomputed table: population i at a
// fluid node reads the post-collision value of its upstream neighbour, or its
// own opposite population when that neighbour is solid (half-way bounce-back).
// Transverse faces are periodic. In pressure mode the inlet (coordinate 0
// along the flow axis) and outlet (coordinate n-1) planes carry prescribed
// densities; the five unknown populations of each boundary node are closed by
// non-equilibrium bounce-back with zero transverse velocity:
//
//   u_a     = s (1 - (S_0 + 2 S_out) / rho)          s = +1 inlet, -1 outlet
//   f_axis  = f_opp + e_a rho u_a / 3
//   f_diag  = f_opp + e_a rho u_a / 6 - e_t N_t,     N_t = 1/2 sum_{e_a=0} f_j e_jt
//
// S_0 sums populations with e_a = 0 and S_out those leaving the domain.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "poredit/errors.hpp"
#include "poredit/metrics.hpp"
#include "poredit/parallel.hpp"
#include "poredit/volume.hpp"

namespace poredit {

inline constexpr int kQ = 19;

// (z, y, x) components.
inline constexpr std::array<std::array<int, 3>, kQ> kLatticeDirs{{
    {0, 0, 0},
    {1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1},
    {1, 1, 0}, {-1, -1, 0}, {1, -1, 0}, {-1, 1, 0},
    {1, 0, 1}, {-1, 0, -1}, {1, 0, -1}, {-1, 0, 1},
    {0, 1, 1}, {0, -1, -1}, {0, 1, -1}, {0, -1, 1},
}};

inline constexpr std::array<double, kQ> kLatticeWeights{
    1.0 / 3,
    1.0 / 18, 1.0 / 18, 1.0 / 18, 1.0 / 18, 1.0 / 18, 1.0 / 18,
    1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36,
    1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36,
};

inline constexpr std::array<int, kQ> kOpposite{0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15, 18, 17};

inline constexpr double kCs2 = 1.0 / 3.0;

/// f_i^eq = w_i rho [1 + 3 e.u + 4.5 (e.u)^2 - 1.5 |u|^2]
inline double lbm_equilibrium(int i, double rho, double uz, double uy, double ux) {
  const auto& e = kLatticeDirs[i];
  const double eu = e[0] * uz + e[1] * uy + e[2] * ux;
  const double uu = uz * uz + uy * uy + ux * ux;
  return kLatticeWeights[i] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * uu);
}

inline int parse_axis(const std::string& s) {
  if (s == "z" || s == "0") return 0;
  if (s == "y" || s == "1") return 1;
  if (s == "x" || s == "2") return 2;
  throw ValidationError("unknown axis '" + s + "' (expected z, y or x)");
}

inline std::string axis_name(int a) { return a == 0 ? "z" : a == 1 ? "y" : "x"; }

struct LbmConfig {
  double tau = 1.0;
  int axis = 0;
  double rho_in = 1.001;
  double rho_out = 0.999;
  long long max_steps = 200000;
  double tol = 1e-5;
  int check_interval = 100;
  std::optional<double> voxel_size;  // physical edge length per voxel

  void validate() const {
    if (!(tau > 0.5)) throw ValidationError("lbm: tau must exceed 0.5");
    if (axis < 0 || axis > 2) throw ValidationError("lbm: axis must be 0, 1 or 2");
    if (!(rho_in > 0 && rho_out > 0)) throw ValidationError("lbm: boundary densities must be positive");
    if (max_steps < 1) throw ValidationError("lbm: max_steps must be >= 1");
    if (!(tol > 0)) throw ValidationError("lbm: tol must be positive");
    if (check_interval < 1) throw ValidationError("lbm: check_interval must be >= 1");
    if (voxel_size && !(*voxel_size > 0)) throw ValidationError("lbm: voxel size must be positive");
  }

  double viscosity() const { return (tau - 0.5) / 3.0; }
};

enum class LbmBoundary { Pressure, Periodic };

class LbmSolver {
 public:
  LbmSolver(const BinaryVolume& v, const LbmConfig& cfg, LbmBoundary boundary = LbmBoundary::Pressure)
      : dims_(v.dims()), cfg_(cfg), boundary_(boundary), n_(v.size()) {
    if (!(cfg.tau > 0.5)) throw ValidationError("lbm: tau must exceed 0.5");
    if (cfg.axis < 0 || cfg.axis > 2) throw ValidationError("lbm: axis must be 0, 1 or 2");
    fluid_mask_.assign(n_, 0);
    for (std::size_t i = 0; i < n_; ++i)
      if (v[i]) {
        fluid_mask_[i] = 1;
        fluid_.push_back(i);
      }
    if (boundary_ == LbmBoundary::Pressure) {
      if (dims_.extent(cfg_.axis) < 2) throw ValidationError("lbm: flow axis needs at least 2 nodes");
      for (std::size_t node : fluid_) {
        const std::size_t c = coord(node, cfg_.axis);
        if (c == 0) inlet_.push_back(node);
        if (c + 1 == dims_.extent(cfg_.axis)) outlet_.push_back(node);
      }
      if (inlet_.empty()) throw ValidationError("no inlet flow path");
      if (outlet_.empty()) throw ValidationError("no outlet flow path");
    }
    build_stream_table();
    f_.assign(std::size_t(kQ) * n_, 0.0);
    tmp_.assign(std::size_t(kQ) * n_, 0.0);
    const double n_axis = double(dims_.extent(cfg_.axis));
    for (std::size_t node : fluid_) {
      double rho = 1.0;
      if (boundary_ == LbmBoundary::Pressure) {
        const double frac = n_axis > 1 ? double(coord(node, cfg_.axis)) / (n_axis - 1) : 0.0;
        rho = cfg_.rho_in + (cfg_.rho_out - cfg_.rho_in) * frac;
      }
      for (int i = 0; i < kQ; ++i) f_[i * n_ + node] = lbm_equilibrium(i, rho, 0, 0, 0);
    }
  }

  const Dims& dims() const { return dims_; }
  const std::vector<std::size_t>& fluid_nodes() const { return fluid_; }
  bool is_fluid(std::size_t node) const { return fluid_mask_[node] != 0; }
  long long steps() const { return steps_; }

  double population(int i, std::size_t node) const { return f_[i * n_ + node]; }
  void set_population(int i, std::size_t node, double v) { f_[i * n_ + node] = v; }

  void set_equilibrium(std::size_t node, double rho, double uz, double uy, double ux) {
    for (int i = 0; i < kQ; ++i) f_[i * n_ + node] = lbm_equilibrium(i, rho, uz, uy, ux);
  }

  double density(std::size_t node) const {
    double rho = 0;
    for (int i = 0; i < kQ; ++i) rho += f_[i * n_ + node];
    return rho;
  }

  /// (u_z, u_y, u_x) at a node; zero on solids.
  std::array<double, 3> velocity(std::size_t node) const {
    if (!fluid_mask_[node]) return {0, 0, 0};
    double rho = 0, m[3] = {0, 0, 0};
    for (int i = 0; i < kQ; ++i) {
      const double fi = f_[i * n_ + node];
      rho += fi;
      for (int a = 0; a < 3; ++a) m[a] += fi * kLatticeDirs[i][a];
    }
    return {m[0] / rho, m[1] / rho, m[2] / rho};
  }

  double total_mass() const {
    return deterministic_sum(fluid_.size(), [&](std::size_t k) { return density(fluid_[k]); });
  }

  /// Superficial axial velocity: sum over fluid nodes divided by all nodes.
  double mean_axial_velocity() const {
    return deterministic_sum(fluid_.size(), [&](std::size_t k) { return velocity(fluid_[k])[cfg_.axis]; }) / double(n_);
  }

  double mean_fluid_density() const { return total_mass() / double(fluid_.size()); }

  /// BGK relaxation in place on every fluid node.
  void collide() {
    const double omega = 1.0 / cfg_.tau;
    parallel_for(fluid_.size(), 400, [&](std::size_t k) {
      const std::size_t node = fluid_[k];
      double fl[kQ];
      double rho = 0, m[3] = {0, 0, 0};
      for (int i = 0; i < kQ; ++i) {
        fl[i] = f_[i * n_ + node];
        rho += fl[i];
        for (int a = 0; a < 3; ++a) m[a] += fl[i] * kLatticeDirs[i][a];
      }
      const double uz = m[0] / rho, uy = m[1] / rho, ux = m[2] / rho;
      for (int i = 0; i < kQ; ++i) f_[i * n_ + node] = fl[i] - omega * (fl[i] - lbm_equilibrium(i, rho, uz, uy, ux));
    });
  }

  /// Pull streaming with half-way bounce-back.
  void stream() {
    parallel_for(fluid_.size(), kQ * 4, [&](std::size_t k) {
      const std::size_t node = fluid_[k];
      for (int i = 0; i < kQ; ++i) tmp_[i * n_ + node] = f_[source_[k * kQ + i]];
    });
    f_.swap(tmp_);
  }

  /// Closes the unknown populations on the inlet and outlet planes.
  void apply_pressure_bc() {
    if (boundary_ != LbmBoundary::Pressure) return;
    close_plane(inlet_, cfg_.rho_in, +1);
    close_plane(outlet_, cfg_.rho_out, -1);
  }

  void step() {
    collide();
    stream();
    apply_pressure_bc();
    ++steps_;
  }

  /// Velocity components of all nodes (solid = 0), z/y/x interleaved.
  std::vector<double> velocity_field() const {
    std::vector<double> u(3 * n_, 0.0);
    parallel_for(fluid_.size(), 60, [&](std::size_t k) {
      const auto v = velocity(fluid_[k]);
      for (int a = 0; a < 3; ++a) u[3 * fluid_[k] + a] = v[a];
    });
    return u;
  }

  bool finite() const {
    for (std::size_t node : fluid_)
      for (int i = 0; i < kQ; ++i)
        if (!std::isfinite(f_[i * n_ + node])) return false;
    return true;
  }

 private:
  std::size_t coord(std::size_t node, int axis) const {
    if (axis == 0) return node / (dims_.h * dims_.w);
    if (axis == 1) return (node / dims_.w) % dims_.h;
    return node % dims_.w;
  }

  void build_stream_table() {
    source_.assign(fluid_.size() * kQ, 0);
    const long long ext[3] = {(long long)dims_.d, (long long)dims_.h, (long long)dims_.w};
    for (std::size_t k = 0; k < fluid_.size(); ++k) {
      const std::size_t node = fluid_[k];
      const long long c[3] = {(long long)coord(node, 0), (long long)coord(node, 1), (long long)coord(node, 2)};
      for (int i = 0; i < kQ; ++i) {
        long long s[3];
        bool outside = false;
        for (int a = 0; a < 3; ++a) {
          s[a] = c[a] - kLatticeDirs[i][a];
          if (s[a] < 0 || s[a] >= ext[a]) {
            if (boundary_ == LbmBoundary::Pressure && a == cfg_.axis) outside = true;
            s[a] = (s[a] % ext[a] + ext[a]) % ext[a];
          }
        }
        const std::size_t src = dims_.index(std::size_t(s[0]), std::size_t(s[1]), std::size_t(s[2]));
        // Unknown boundary populations get a bounce-back placeholder; the
        // pressure closure overwrites them.
        if (outside || !fluid_mask_[src]) source_[k * kQ + i] = std::size_t(kOpposite[i]) * n_ + node;
        else source_[k * kQ + i] = std::size_t(i) * n_ + src;
      }
    }
  }

  void close_plane(const std::vector<std::size_t>& nodes, double rho, int side) {
    const int a = cfg_.axis;
    parallel_for(nodes.size(), 200, [&](std::size_t k) {
      const std::size_t node = nodes[k];
      double s0 = 0, s_out = 0, n_t[3] = {0, 0, 0};
      for (int i = 0; i < kQ; ++i) {
        const double fi = f_[i * n_ + node];
        const int ea = kLatticeDirs[i][a];
        if (ea == 0) {
          s0 += fi;
          for (int t = 0; t < 3; ++t) n_t[t] += 0.5 * fi * kLatticeDirs[i][t];
        } else if (ea == -side) {
          s_out += fi;
        }
      }
      const double u = side * (1.0 - (s0 + 2.0 * s_out) / rho);
      for (int i = 0; i < kQ; ++i) {
        const int ea = kLatticeDirs[i][a];
        if (ea != side) continue;
        double v = f_[kOpposite[i] * n_ + node];
        int transverse = -1;
        for (int t = 0; t < 3; ++t)
          if (t != a && kLatticeDirs[i][t] != 0) transverse = t;
        if (transverse < 0) {
          v += ea * rho * u / 3.0;
        } else {
          v += ea * rho * u / 6.0 - kLatticeDirs[i][transverse] * n_t[transverse];
        }
        f_[i * n_ + node] = v;
      }
    });
  }

  Dims dims_;
  LbmConfig cfg_;
  LbmBoundary boundary_;
  std::size_t n_;
  std::vector<std::uint8_t> fluid_mask_;
  std::vector<std::size_t> fluid_, inlet_, outlet_;
  std::vector<std::size_t> source_;
  std::vector<double> f_, tmp_;
  long long steps_ = 0;
};

struct LbmCheck {
  long long step = 0;
  double rel_change = 0;
  double mean_velocity = 0;
};

struct PermeabilityResult {
  double k_lattice = 0;
  std::optional<double> k_physical;
  double mean_velocity = 0;   // superficial, lattice units
  double mean_density = 0;
  double viscosity = 0;       // kinematic
  double pressure_drop = 0;
  double length = 0;          // distance between inlet and outlet planes
  double porosity = 0;
  long long steps = 0;
  bool converged = false;
  double final_rel_change = 0;
  std::vector<LbmCheck> history;
};

/// Iterates the solver until the relative L2 change of the velocity field
/// between checks drops below tol, then applies Darcy's law.
inline PermeabilityResult solve_to_steady_state(LbmSolver& solver, const LbmConfig& cfg) {
  PermeabilityResult r;
  std::vector<double> prev = solver.velocity_field();
  while (solver.steps() < cfg.max_steps) {
    const long long todo = std::min<long long>(cfg.check_interval, cfg.max_steps - solver.steps());
    for (long long s = 0; s < todo; ++s) solver.step();
    if (!solver.finite()) throw RuntimeFailure("lbm: non-finite distribution at step " + std::to_string(solver.steps()));
    std::vector<double> u = solver.velocity_field();
    const double diff = deterministic_sum(u.size(), [&](std::size_t i) { return (u[i] - prev[i]) * (u[i] - prev[i]); });
    const double norm = deterministic_sum(u.size(), [&](std::size_t i) { return u[i] * u[i]; });
    const double rel = norm > 0 ? std::sqrt(diff / norm) : (diff > 0 ? INFINITY : 0.0);
    r.history.push_back({solver.steps(), rel, solver.mean_axial_velocity()});
    r.final_rel_change = rel;
    prev.swap(u);
    if (rel < cfg.tol) {
      r.converged = true;
      break;
    }
  }
  r.steps = solver.steps();
  r.mean_velocity = solver.mean_axial_velocity();
  r.mean_density = solver.mean_fluid_density();
  r.viscosity = cfg.viscosity();
  r.pressure_drop = (cfg.rho_in - cfg.rho_out) * kCs2;
  r.length = double(solver.dims().extent(cfg.axis) - 1);
  if (r.pressure_drop != 0.0)
    r.k_lattice = r.mean_density * r.viscosity * r.mean_velocity * r.length / r.pressure_drop;
  if (cfg.voxel_size) r.k_physical = r.k_lattice * (*cfg.voxel_size) * (*cfg.voxel_size);
  return r;
}

/// K = mu u_bar L / dP for the pore phase of `v` under a density drop along cfg.axis.
inline PermeabilityResult run_permeability(const BinaryVolume& v, const LbmConfig& cfg) {
  cfg.validate();
  if (!(cfg.rho_in > cfg.rho_out)) throw ValidationError("lbm: rho_in must exceed rho_out");
  if (!percolates(v, cfg.axis)) throw ValidationError("non-percolating: no pore path along axis " + axis_name(cfg.axis));
  LbmSolver solver(v, cfg, LbmBoundary::Pressure);
  auto r = solve_to_steady_state(solver, cfg);
  r.porosity = v.porosity();
  return r;
}

}  // namespace poredit
