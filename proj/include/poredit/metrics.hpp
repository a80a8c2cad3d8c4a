#pragma once

// Validation statistics for binary volumes: porosity, two-point correlation
// (spectral periodic form and shift form), lineal path, surface estimates,
// Euler characteristic, small-cluster cleaning, connectivity, Otsu
// binarization and nearest-neighbour novelty.
//
// The pore phase uses 6-connectivity throughout. The Euler characteristic is
// counted on the cubical complex of closed pore voxels.

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <span>
#include <vector>

#include "poredit/errors.hpp"
#include "poredit/parallel.hpp"
#include "poredit/volume.hpp"

namespace poredit {

inline double porosity(const BinaryVolume& v) { return v.porosity(); }

// ---------------------------------------------------------------------------
// Two-point correlation, periodic spectral estimator.

namespace detail {
inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// A(r) = (1/N) sum_x I(x) I(x + r) for every periodic displacement r,
/// returned on the same D x H x W grid (index = displacement mod dims).
inline std::vector<double> autocorrelation(const BinaryVolume& v) {
  const Dims dims = v.dims();
  const int n0 = int(dims.d), n1 = int(dims.h), n2 = int(dims.w);
  const std::size_t nc = std::size_t(n0) * n1 * (n2 / 2 + 1);
  std::vector<double> real(dims.size());
  for (std::size_t i = 0; i < real.size(); ++i) real[i] = v[i];
  auto* spec = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * nc));
  fftw_plan fwd, inv;
  {
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    fwd = fftw_plan_dft_r2c_3d(n0, n1, n2, real.data(), spec, FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_3d(n0, n1, n2, spec, real.data(), FFTW_ESTIMATE);
  }
  fftw_execute(fwd);
  for (std::size_t i = 0; i < nc; ++i) {
    spec[i][0] = spec[i][0] * spec[i][0] + spec[i][1] * spec[i][1];
    spec[i][1] = 0.0;
  }
  fftw_execute(inv);
  {
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  fftw_free(spec);
  // Unnormalized inverse carries a factor N; the average carries 1/N.
  const double scale = 1.0 / (double(dims.size()) * double(dims.size()));
  for (double& x : real) x *= scale;
  return real;
}

struct S2Curves {
  std::vector<double> radial;      // bin k collects |r| in [k - 0.5, k + 0.5)
  std::vector<double> axis_mean;   // mean of A along the three axes at lag r
};

/// Periodic S2, radially binned (minimal-image distances, bin width 1) and
/// axis-averaged, for lags 0..min(dims)/2.
inline S2Curves s2_radial(const BinaryVolume& v) {
  const Dims dims = v.dims();
  const auto a = autocorrelation(v);
  const std::size_t rmax = std::min({dims.d, dims.h, dims.w}) / 2;
  std::vector<double> sum(rmax + 1, 0.0);
  std::vector<std::size_t> count(rmax + 1, 0);
  auto wrap = [](std::size_t i, std::size_t n) { return i <= n / 2 ? double(i) : double(i) - double(n); };
  for (std::size_t z = 0; z < dims.d; ++z)
    for (std::size_t y = 0; y < dims.h; ++y)
      for (std::size_t x = 0; x < dims.w; ++x) {
        const double dz = wrap(z, dims.d), dy = wrap(y, dims.h), dx = wrap(x, dims.w);
        const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
        const auto bin = static_cast<std::size_t>(std::floor(r + 0.5));
        if (bin > rmax) continue;
        sum[bin] += a[dims.index(z, y, x)];
        ++count[bin];
      }
  S2Curves out;
  out.radial.resize(rmax + 1);
  out.axis_mean.resize(rmax + 1);
  for (std::size_t r = 0; r <= rmax; ++r) {
    out.radial[r] = count[r] ? sum[r] / double(count[r]) : 0.0;
    out.axis_mean[r] = (a[dims.index(r, 0, 0)] + a[dims.index(0, r, 0)] + a[dims.index(0, 0, r)]) / 3.0;
  }
  return out;
}

/// Non-wrapping shift estimator on a binary volume along one axis:
/// mean over the valid overlap of I(x) I(x + r e_axis).
inline double s2_shift(const BinaryVolume& v, std::size_t r, int axis) {
  const Dims dims = v.dims();
  const std::size_t n = dims.extent(axis);
  if (r >= n) throw ValidationError("s2_shift: lag " + std::to_string(r) + " out of range");
  const std::size_t stride = axis == 0 ? dims.h * dims.w : axis == 1 ? dims.w : 1;
  std::size_t hits = 0, total = 0;
  for (std::size_t z = 0; z < dims.d; ++z)
    for (std::size_t y = 0; y < dims.h; ++y)
      for (std::size_t x = 0; x < dims.w; ++x) {
        const std::size_t c = axis == 0 ? z : axis == 1 ? y : x;
        if (c + r >= n) continue;
        const std::size_t i = dims.index(z, y, x);
        hits += v[i] & v[i + r * stride];
        ++total;
      }
  return double(hits) / double(total);
}

inline double s2_shift_axis_mean(const BinaryVolume& v, std::size_t r) {
  return (s2_shift(v, r, 0) + s2_shift(v, r, 1) + s2_shift(v, r, 2)) / 3.0;
}

/// Lag set used for S2 matching and conditioning, clipped to lags below `edge`.
inline constexpr std::array<std::size_t, 6> kS2Lags{8, 16, 32, 64, 96, 128};

/// May be empty for edges of 8 or less.
inline std::vector<std::size_t> clip_lags(std::size_t edge) {
  std::vector<std::size_t> out;
  for (auto r : kS2Lags)
    if (r < edge) out.push_back(r);
  return out;
}

inline std::vector<double> s2_at_lags(const BinaryVolume& v, const std::vector<std::size_t>& lags) {
  std::vector<double> out;
  for (auto r : lags) out.push_back(s2_shift_axis_mean(v, r));
  return out;
}

// ---------------------------------------------------------------------------
// Surface estimates

struct SurfaceEstimate {
  double from_slope = 0.0;       // -4 (S2(1) - S2(0)), axis-averaged periodic S2
  double from_faces = 0.0;       // pore/solid faces per voxel, periodic
  std::size_t face_count = 0;
};

inline std::size_t interface_faces(const BinaryVolume& v) {
  const Dims d = v.dims();
  std::size_t faces = 0;
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const auto c = v.at(z, y, x);
        faces += c != v.at((z + 1) % d.d, y, x);
        faces += c != v.at(z, (y + 1) % d.h, x);
        faces += c != v.at(z, y, (x + 1) % d.w);
      }
  return faces;
}

inline SurfaceEstimate s2_slope_surface(const BinaryVolume& v) {
  const auto s2 = s2_radial(v).axis_mean;
  SurfaceEstimate out;
  out.from_slope = s2.size() > 1 ? -4.0 * (s2[1] - s2[0]) : 0.0;
  out.face_count = interface_faces(v);
  out.from_faces = double(out.face_count) / double(v.size());
  return out;
}

// ---------------------------------------------------------------------------
// Lineal path

/// L(r), r = 0..n-1: fraction of valid positions where r + 1 consecutive
/// voxels along `axis` are all pore.
inline std::vector<double> lineal_path(const BinaryVolume& v, int axis) {
  const Dims dims = v.dims();
  const std::size_t n = dims.extent(axis);
  const std::size_t stride = axis == 0 ? dims.h * dims.w : axis == 1 ? dims.w : 1;
  const std::size_t lines = dims.size() / n;
  std::vector<std::size_t> runs(n + 1, 0);  // runs[k] = number of maximal runs of length k
  for (std::size_t line = 0; line < lines; ++line) {
    std::size_t base;
    if (axis == 0) base = line;
    else if (axis == 1) base = (line / dims.w) * dims.h * dims.w + line % dims.w;
    else base = line * dims.w;
    std::size_t run = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (v[base + i * stride]) {
        ++run;
      } else if (run) {
        ++runs[run];
        run = 0;
      }
    }
    if (run) ++runs[run];
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t segments = 0;
    for (std::size_t k = r + 1; k <= n; ++k) segments += runs[k] * (k - r);
    out[r] = double(segments) / double(lines * (n - r));
  }
  return out;
}

inline std::vector<double> lineal_path_mean(const BinaryVolume& v) {
  const auto a = lineal_path(v, 0), b = lineal_path(v, 1), c = lineal_path(v, 2);
  const std::size_t n = std::min({a.size(), b.size(), c.size()});
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) out[r] = (a[r] + b[r] + c[r]) / 3.0;
  return out;
}

// ---------------------------------------------------------------------------
// Connected components (6-connectivity, non-periodic)

struct Components {
  std::vector<std::int32_t> label;   // -1 for matrix voxels
  std::vector<std::size_t> sizes;    // voxel count per label
};

inline Components label_pores(const BinaryVolume& v) {
  const Dims d = v.dims();
  Components out;
  out.label.assign(v.size(), -1);
  std::vector<std::size_t> queue;
  for (std::size_t seed = 0; seed < v.size(); ++seed) {
    if (!v[seed] || out.label[seed] >= 0) continue;
    const auto id = static_cast<std::int32_t>(out.sizes.size());
    out.sizes.push_back(0);
    queue.assign(1, seed);
    out.label[seed] = id;
    while (!queue.empty()) {
      const std::size_t i = queue.back();
      queue.pop_back();
      ++out.sizes[id];
      const std::size_t x = i % d.w, y = (i / d.w) % d.h, z = i / (d.w * d.h);
      auto visit = [&](std::size_t j) {
        if (v[j] && out.label[j] < 0) {
          out.label[j] = id;
          queue.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < d.w) visit(i + 1);
      if (y > 0) visit(i - d.w);
      if (y + 1 < d.h) visit(i + d.w);
      if (z > 0) visit(i - d.w * d.h);
      if (z + 1 < d.d) visit(i + d.w * d.h);
    }
  }
  return out;
}

inline constexpr std::size_t kMinClusterVoxels = 34;

struct CleanResult {
  BinaryVolume volume;
  std::size_t removed = 0;
};

/// Pore clusters with fewer than `min_volume` voxels become matrix.
inline CleanResult clean_isolated(const BinaryVolume& v, std::size_t min_volume = kMinClusterVoxels) {
  const auto comps = label_pores(v);
  std::vector<std::uint8_t> voxels = v.voxels();
  std::size_t removed = 0;
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    if (comps.label[i] >= 0 && comps.sizes[comps.label[i]] < min_volume) {
      voxels[i] = 0;
      ++removed;
    }
  }
  return {BinaryVolume(v.dims(), std::move(voxels)), removed};
}

/// |largest pore component| / |pore|; 0 (with a warning) when there is no pore.
inline double connectivity_fraction(const BinaryVolume& v) {
  const auto comps = label_pores(v);
  const std::size_t pore = v.pore_count();
  if (pore == 0) {
    std::cerr << "warning: connectivity_fraction on a volume without pore voxels\n";
    return 0.0;
  }
  const std::size_t largest = comps.sizes.empty() ? 0 : *std::max_element(comps.sizes.begin(), comps.sizes.end());
  return double(largest) / double(pore);
}

/// True when a 6-connected pore path joins the first and last slab along `axis`.
inline bool percolates(const BinaryVolume& v, int axis) {
  const auto comps = label_pores(v);
  const Dims d = v.dims();
  const std::size_t n = d.extent(axis);
  std::vector<bool> at_inlet(comps.sizes.size(), false);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t c = axis == 0 ? i / (d.w * d.h) : axis == 1 ? (i / d.w) % d.h : i % d.w;
    if (c == 0 && comps.label[i] >= 0) at_inlet[comps.label[i]] = true;
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t c = axis == 0 ? i / (d.w * d.h) : axis == 1 ? (i / d.w) % d.h : i % d.w;
    if (c == n - 1 && comps.label[i] >= 0 && at_inlet[comps.label[i]]) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Euler characteristic

/// chi = V - E + F - C over the union of closed unit cubes at pore voxels.
inline long long euler_characteristic(const BinaryVolume& v) {
  const Dims d = v.dims();
  // Cells of the complex live on the doubled grid (2D+1)^3: a cell's parity
  // pattern gives its dimension (all even = vertex, all odd = cube).
  const std::size_t gd = 2 * d.d + 1, gh = 2 * d.h + 1, gw = 2 * d.w + 1;
  std::vector<std::uint8_t> mark(gd * gh * gw, 0);
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        if (!v.at(z, y, x)) continue;
        for (std::size_t a = 2 * z; a <= 2 * z + 2; ++a)
          for (std::size_t b = 2 * y; b <= 2 * y + 2; ++b)
            for (std::size_t c = 2 * x; c <= 2 * x + 2; ++c) mark[(a * gh + b) * gw + c] = 1;
      }
  long long chi = 0;
  for (std::size_t a = 0; a < gd; ++a)
    for (std::size_t b = 0; b < gh; ++b)
      for (std::size_t c = 0; c < gw; ++c) {
        if (!mark[(a * gh + b) * gw + c]) continue;
        const int odd = int(a & 1) + int(b & 1) + int(c & 1);
        chi += (odd % 2 == 0) ? 1 : -1;
      }
  return chi;
}

// ---------------------------------------------------------------------------
// Otsu

struct OtsuResult {
  BinaryVolume volume;
  double threshold = 0.0;  // upper edge of the last matrix bin
  int bin = -1;            // last bin assigned to matrix, -1 for a constant field
};

inline constexpr int kOtsuBins = 256;

/// 256-bin histogram over [min, max]; the split maximizing between-class
/// variance wins, ties to the lowest bin. Voxels in bins above the split are
/// pore. A constant field maps to all-matrix with a warning.
template <class Real>
OtsuResult otsu_threshold(const Field<Real>& field) {
  OtsuResult out;
  out.volume = BinaryVolume(field.dims);
  if (field.values.empty()) return out;
  for (Real x : field.values)
    if (!std::isfinite(double(x))) throw ValidationError("otsu: non-finite field value");
  const auto [mn_it, mx_it] = std::minmax_element(field.values.begin(), field.values.end());
  const double lo = double(*mn_it), hi = double(*mx_it);
  if (!(hi > lo)) {
    std::cerr << "warning: otsu on a constant field; returning all-matrix volume\n";
    out.threshold = lo;
    return out;
  }
  const double width = (hi - lo) / kOtsuBins;
  auto bin_of = [&](double x) { return std::min(kOtsuBins - 1, static_cast<int>((x - lo) / width)); };
  std::vector<double> hist(kOtsuBins, 0.0);
  for (Real x : field.values) hist[bin_of(double(x))] += 1.0;
  const double total = double(field.values.size());
  double sum_all = 0.0;
  for (int b = 0; b < kOtsuBins; ++b) sum_all += b * hist[b];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0;
  for (int k = 0; k < kOtsuBins - 1; ++k) {
    w0 += hist[k];
    sum0 += k * hist[k];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = k;
    }
  }
  out.bin = best_bin;
  out.threshold = lo + (best_bin + 1) * width;
  for (std::size_t i = 0; i < field.values.size(); ++i)
    out.volume.set(i, bin_of(double(field.values[i])) > best_bin);
  return out;
}

// ---------------------------------------------------------------------------
// Novelty

/// Mean absolute voxel difference (normalized Hamming distance).
inline double voxel_distance(const BinaryVolume& a, const BinaryVolume& b) {
  if (!(a.dims() == b.dims())) throw ValidationError("novelty: dims " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
  return double(diff) / double(a.size());
}

/// D_min: distance from `generated` to its nearest training volume.
inline double novelty_dmin(const BinaryVolume& generated, std::span<const BinaryVolume> training) {
  if (training.empty()) throw ValidationError("novelty: empty training set");
  double best = 2.0;
  for (const auto& r : training) best = std::min(best, voxel_distance(generated, r));
  return best;
}

// ---------------------------------------------------------------------------
// Full report

struct MetricsReport {
  double porosity = 0.0;
  std::vector<double> s2_radial;
  std::vector<double> s2_axis;
  std::vector<double> lineal_path;
  double specific_surface = 0.0;        // faces per voxel
  double specific_surface_slope = 0.0;  // -4 dS2/dr
  long long euler_chi = 0;
  double largest_cluster_fraction = 0.0;
  std::size_t cleaned_voxel_count = 0;
  bool cleaned = false;
};

/// Porosity and the S2/L(r) curves describe the volume as given; topology
/// (Euler, connectivity) uses the cleaned volume when `clean` is set.
inline MetricsReport analyze(const BinaryVolume& v, bool clean) {
  MetricsReport r;
  r.porosity = v.porosity();
  const auto s2 = s2_radial(v);
  r.s2_radial = s2.radial;
  r.s2_axis = s2.axis_mean;
  r.lineal_path = lineal_path_mean(v);
  const auto surf = s2_slope_surface(v);
  r.specific_surface = surf.from_faces;
  r.specific_surface_slope = surf.from_slope;
  BinaryVolume topo = v;
  if (clean) {
    auto c = clean_isolated(v);
    r.cleaned_voxel_count = c.removed;
    r.cleaned = true;
    topo = std::move(c.volume);
  }
  r.euler_chi = euler_characteristic(topo);
  r.largest_cluster_fraction = topo.pore_count() ? connectivity_fraction(topo) : 0.0;
  return r;
}

}  // namespace poredit
