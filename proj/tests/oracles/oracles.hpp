#pragma once

// Brute-force references used by the unit and acceptance suites. Each one is
// written from the defining formula with plain loops and shares no code with
// the library beyond its data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <tuple>
#include <vector>

#include "poredit/lbm.hpp"
#include "poredit/network.hpp"
#include "poredit/volume.hpp"

namespace oracle {

using poredit::BinaryVolume;
using poredit::Dims;

// alpha_bar(500) for T=1000, s=0.008 evaluated with mpmath at 50 digits:
//   f = lambda t: mp.cos(((t/1000 + mp.mpf('0.008'))/(1 + mp.mpf('0.008'))) * mp.pi/2)**2
//   f(500)/f(0)
inline constexpr double kAlphaBar500 = 0.49384359044063771331655;

/// Periodic A(r) = (1/N) sum_x I(x) I(x + r) by direct double loop.
inline std::vector<double> autocorrelation(const BinaryVolume& v) {
  const Dims d = v.dims();
  std::vector<double> out(d.size(), 0.0);
  for (std::size_t rz = 0; rz < d.d; ++rz)
    for (std::size_t ry = 0; ry < d.h; ++ry)
      for (std::size_t rx = 0; rx < d.w; ++rx) {
        long long hits = 0;
        for (std::size_t z = 0; z < d.d; ++z)
          for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t x = 0; x < d.w; ++x)
              hits += v.at(z, y, x) * v.at((z + rz) % d.d, (y + ry) % d.h, (x + rx) % d.w);
        out[d.index(rz, ry, rx)] = double(hits) / double(d.size());
      }
  return out;
}

/// Radial average of the periodic A(r): every displacement with minimal-image
/// length in [k - 0.5, k + 0.5) contributes to bin k.
inline std::vector<double> s2_radial(const BinaryVolume& v) {
  const Dims d = v.dims();
  const auto a = oracle::autocorrelation(v);
  const std::size_t rmax = std::min({d.d, d.h, d.w}) / 2;
  std::vector<double> sum(rmax + 1, 0.0), cnt(rmax + 1, 0.0);
  auto signed_lag = [](long long i, long long n) { return i > n / 2 ? i - n : i; };
  for (long long z = 0; z < (long long)d.d; ++z)
    for (long long y = 0; y < (long long)d.h; ++y)
      for (long long x = 0; x < (long long)d.w; ++x) {
        const double dz = signed_lag(z, d.d), dy = signed_lag(y, d.h), dx = signed_lag(x, d.w);
        const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
        for (std::size_t k = 0; k <= rmax; ++k)
          if (r >= double(k) - 0.5 && r < double(k) + 0.5) {
            sum[k] += a[d.index(z, y, x)];
            cnt[k] += 1;
          }
      }
  for (std::size_t k = 0; k <= rmax; ++k) sum[k] = cnt[k] > 0 ? sum[k] / cnt[k] : 0.0;
  return sum;
}

/// Non-wrapping pair count along one axis.
inline double s2_shift(const BinaryVolume& v, std::size_t r, int axis) {
  const Dims d = v.dims();
  long long hits = 0, pairs = 0;
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        std::size_t p[3] = {z, y, x};
        p[axis] += r;
        if (p[axis] >= d.extent(axis)) continue;
        hits += v.at(z, y, x) && v.at(p[0], p[1], p[2]);
        ++pairs;
      }
  return double(hits) / double(pairs);
}

/// Fraction of placements of a segment covering voxels c..c+r along `axis`
/// that lie entirely in pore.
inline std::vector<double> lineal_path(const BinaryVolume& v, int axis) {
  const Dims d = v.dims();
  const std::size_t n = d.extent(axis);
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    long long ok = 0, total = 0;
    for (std::size_t z = 0; z < d.d; ++z)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) {
          std::size_t p[3] = {z, y, x};
          if (p[axis] + r >= n) continue;
          bool all = true;
          for (std::size_t k = 0; k <= r && all; ++k) {
            std::size_t q[3] = {z, y, x};
            q[axis] += k;
            all = v.at(q[0], q[1], q[2]) == 1;
          }
          ok += all;
          ++total;
        }
    out[r] = double(ok) / double(total);
  }
  return out;
}

/// V - E + F - C of the union of closed unit cubes, counting each cell of the
/// cubical complex once via its lowest corner and orientation.
inline long long euler_vefc(const BinaryVolume& v) {
  using Key = std::tuple<long long, long long, long long, int>;
  std::set<Key> verts, edges, faces;
  long long cubes = 0;
  const Dims d = v.dims();
  for (long long z = 0; z < (long long)d.d; ++z)
    for (long long y = 0; y < (long long)d.h; ++y)
      for (long long x = 0; x < (long long)d.w; ++x) {
        if (!v.at(z, y, x)) continue;
        ++cubes;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) verts.insert({z + a, y + b, x + c, 0});
        // Edges along z, y, x: 4 of each orientation.
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            edges.insert({z, y + a, x + b, 0});
            edges.insert({z + a, y, x + b, 1});
            edges.insert({z + a, y + b, x, 2});
          }
        // Faces normal to z, y, x: 2 of each.
        for (int a = 0; a < 2; ++a) {
          faces.insert({z + a, y, x, 0});
          faces.insert({z, y + a, x, 1});
          faces.insert({z, y, x + a, 2});
        }
      }
  return (long long)verts.size() - (long long)edges.size() + (long long)faces.size() - cubes;
}

/// Exhaustive Otsu: every split k of the 256-bin histogram is scored by
/// classifying voxels directly; the first maximum wins.
template <class Real>
int otsu_bin(const poredit::Field<Real>& f) {
  const double lo = *std::min_element(f.values.begin(), f.values.end());
  const double hi = *std::max_element(f.values.begin(), f.values.end());
  const double width = (hi - lo) / 256.0;
  std::vector<int> bins(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) bins[i] = std::min(255, int((double(f.values[i]) - lo) / width));
  double best = -1;
  int best_k = 0;
  for (int k = 0; k < 255; ++k) {
    double n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (int b : bins) {
      if (b <= k) {
        n0 += 1;
        s0 += b;
      } else {
        n1 += 1;
        s1 += b;
      }
    }
    if (n0 == 0 || n1 == 0) continue;
    const double m0 = s0 / n0, m1 = s1 / n1;
    const double score = n0 * n1 * (m0 - m1) * (m0 - m1);
    if (score > best) {
      best = score;
      best_k = k;
    }
  }
  return best_k;
}

/// Global multi-head attention with relative position bias over an L^3 token
/// grid, written per query/key pair. x is [N, C] row-major.
inline std::vector<double> dense_attention(const std::vector<double>& x, const poredit::BlockWeights<double>& b,
                                           int L, int C, int heads) {
  const int N = L * L * L, d = C / heads, E = 2 * L - 1;
  auto W = [&](const poredit::Linear<double>& l, int in, int out, int cols) { return l.weight.data()[in * cols + out]; };
  std::vector<double> qkv(std::size_t(N) * 3 * C);
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < 3 * C; ++o) {
      double s = b.qkv.bias.data()[o];
      for (int i = 0; i < C; ++i) s += x[n * C + i] * W(b.qkv, i, o, 3 * C);
      qkv[std::size_t(n) * 3 * C + o] = s;
    }
  std::vector<double> mixed(std::size_t(N) * C, 0.0);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < N; ++i) {
      const int zi = i / (L * L), yi = (i / L) % L, xi = i % L;
      std::vector<double> score(N);
      double mx = -1e300;
      for (int j = 0; j < N; ++j) {
        const int zj = j / (L * L), yj = (j / L) % L, xj = j % L;
        double s = 0;
        for (int k = 0; k < d; ++k) s += qkv[std::size_t(i) * 3 * C + h * d + k] * qkv[std::size_t(j) * 3 * C + C + h * d + k];
        s /= std::sqrt(double(d));
        const int rel = ((zi - zj + L - 1) * E + (yi - yj + L - 1)) * E + (xi - xj + L - 1);
        s += b.rel_bias.data()[rel * heads + h];
        score[j] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (double& s : score) z += (s = std::exp(s - mx));
      for (int j = 0; j < N; ++j)
        for (int k = 0; k < d; ++k)
          mixed[std::size_t(i) * C + h * d + k] += score[j] / z * qkv[std::size_t(j) * 3 * C + 2 * C + h * d + k];
    }
  std::vector<double> out(std::size_t(N) * C);
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < C; ++o) {
      double s = b.proj.bias.data()[o];
      for (int i = 0; i < C; ++i) s += mixed[std::size_t(n) * C + i] * W(b.proj, i, o, C);
      out[std::size_t(n) * C + o] = s;
    }
  return out;
}

/// One BGK collide + push-stream step on a fully periodic lattice with
/// half-way bounce-back at solid nodes. f is indexed [node][i].
inline std::vector<std::array<double, 19>> lbm_step(const std::vector<std::array<double, 19>>& f,
                                                    const BinaryVolume& fluid, double tau) {
  static const int e[19][3] = {{0, 0, 0},  {1, 0, 0},  {-1, 0, 0}, {0, 1, 0},  {0, -1, 0}, {0, 0, 1},  {0, 0, -1},
                               {1, 1, 0},  {-1, -1, 0}, {1, -1, 0}, {-1, 1, 0}, {1, 0, 1},  {-1, 0, -1}, {1, 0, -1},
                               {-1, 0, 1}, {0, 1, 1},  {0, -1, -1}, {0, 1, -1}, {0, -1, 1}};
  auto weight = [](int i) { return i == 0 ? 1.0 / 3 : i <= 6 ? 1.0 / 18 : 1.0 / 36; };
  auto opposite = [&](int i) {
    for (int j = 0; j < 19; ++j)
      if (e[j][0] == -e[i][0] && e[j][1] == -e[i][1] && e[j][2] == -e[i][2]) return j;
    return -1;
  };
  const Dims d = fluid.dims();
  std::vector<std::array<double, 19>> post = f, out(f.size());
  for (std::size_t n = 0; n < f.size(); ++n) {
    if (!fluid[n]) continue;
    double rho = 0, j[3] = {0, 0, 0};
    for (int i = 0; i < 19; ++i) {
      rho += f[n][i];
      for (int a = 0; a < 3; ++a) j[a] += f[n][i] * e[i][a];
    }
    const double u[3] = {j[0] / rho, j[1] / rho, j[2] / rho};
    for (int i = 0; i < 19; ++i) {
      const double eu = e[i][0] * u[0] + e[i][1] * u[1] + e[i][2] * u[2];
      const double uu = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
      const double feq = weight(i) * rho * (1 + 3 * eu + 4.5 * eu * eu - 1.5 * uu);
      post[n][i] = f[n][i] - (f[n][i] - feq) / tau;
    }
  }
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const std::size_t n = d.index(z, y, x);
        if (!fluid[n]) continue;
        for (int i = 0; i < 19; ++i) {
          const std::size_t t = d.index((z + d.d + e[i][0]) % d.d, (y + d.h + e[i][1]) % d.h, (x + d.w + e[i][2]) % d.w);
          if (fluid[t]) out[t][i] = post[n][i];
          else out[n][opposite(i)] = post[n][i];
        }
      }
  return out;
}

/// Plane Poiseuille channel of aperture h (walls mid-link) inside a domain of
/// total transverse height H: K = h^3 / (12 H) for the superficial velocity.
inline double channel_permeability(double h, double H) { return h * h * h / (12.0 * H); }

}  // namespace oracle
