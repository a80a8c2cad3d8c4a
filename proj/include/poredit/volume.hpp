#pragma once

// Binary pore/matrix volumes, the PDTV file format, the signed signal mapping,
// and the thresholded-Gaussian-field generator used as desk-scale data.
//
// PDTV layout: "PDTV" | u8 version (1) | u32le D | u32le H | u32le W |
// D*H*W bytes, each 0 (matrix) or 1 (pore), W fastest.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "poredit/errors.hpp"
#include "poredit/parallel.hpp"
#include "poredit/rng.hpp"

namespace poredit {

struct Dims {
  std::size_t d = 0, h = 0, w = 0;

  std::size_t size() const { return d * h * w; }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * h + y) * w + x; }
  std::size_t extent(int axis) const { return axis == 0 ? d : axis == 1 ? h : w; }
  static Dims cube(std::size_t n) { return {n, n, n}; }
  bool operator==(const Dims&) const = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.d) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
}

/// Real-valued volume. SignedVolume (x_map, x_t, logits) is the double instance.
template <class Real>
struct Field {
  Dims dims;
  std::vector<Real> values;

  Field() = default;
  explicit Field(Dims d, Real fill = Real(0)) : dims(d), values(d.size(), fill) {}
  Field(Dims d, std::vector<Real> v) : dims(d), values(std::move(v)) {
    if (values.size() != dims.size()) throw ValidationError("field: value count does not match dims");
  }

  std::size_t size() const { return values.size(); }
  Real& at(std::size_t z, std::size_t y, std::size_t x) { return values[dims.index(z, y, x)]; }
  Real at(std::size_t z, std::size_t y, std::size_t x) const { return values[dims.index(z, y, x)]; }
};

using SignedVolume = Field<double>;

class BinaryVolume {
 public:
  BinaryVolume() = default;
  explicit BinaryVolume(Dims dims, std::uint8_t fill = 0) : dims_(dims), voxels_(dims.size(), fill) {
    if (fill > 1) throw ValidationError("binary volume: fill must be 0 or 1");
  }
  BinaryVolume(Dims dims, std::vector<std::uint8_t> voxels) : dims_(dims), voxels_(std::move(voxels)) {
    if (voxels_.size() != dims_.size()) throw ValidationError("binary volume: voxel count does not match dims");
    for (auto v : voxels_)
      if (v > 1) throw ValidationError("binary volume: voxel value outside {0,1}");
  }

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return voxels_.size(); }
  const std::vector<std::uint8_t>& voxels() const { return voxels_; }

  std::uint8_t operator[](std::size_t i) const { return voxels_[i]; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const { return voxels_[dims_.index(z, y, x)]; }
  void set(std::size_t i, bool pore) { voxels_[i] = pore ? 1 : 0; }
  void set(std::size_t z, std::size_t y, std::size_t x, bool pore) { set(dims_.index(z, y, x), pore); }

  std::size_t pore_count() const {
    return static_cast<std::size_t>(std::count(voxels_.begin(), voxels_.end(), std::uint8_t{1}));
  }
  double porosity() const { return voxels_.empty() ? 0.0 : double(pore_count()) / double(voxels_.size()); }

  bool operator==(const BinaryVolume&) const = default;

 private:
  Dims dims_;
  std::vector<std::uint8_t> voxels_;
};

/// x_map = 2 x0 - 1
inline SignedVolume map_to_signed(const BinaryVolume& v) {
  SignedVolume out(v.dims());
  for (std::size_t i = 0; i < v.size(); ++i) out.values[i] = 2.0 * double(v[i]) - 1.0;
  return out;
}

/// Inverse of map_to_signed for exactly binary signed inputs: positive -> pore.
inline BinaryVolume map_to_binary(const SignedVolume& s) {
  BinaryVolume out(s.dims);
  for (std::size_t i = 0; i < s.size(); ++i) out.set(i, s.values[i] > 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// PDTV I/O

inline constexpr std::array<char, 4> kVolumeMagic{'P', 'D', 'T', 'V'};
inline constexpr std::uint8_t kVolumeVersion = 1;

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_volume(const BinaryVolume& v) {
  std::string out(kVolumeMagic.begin(), kVolumeMagic.end());
  out.push_back(static_cast<char>(kVolumeVersion));
  detail::put_u32le(out, static_cast<std::uint32_t>(v.dims().d));
  detail::put_u32le(out, static_cast<std::uint32_t>(v.dims().h));
  detail::put_u32le(out, static_cast<std::uint32_t>(v.dims().w));
  out.append(reinterpret_cast<const char*>(v.voxels().data()), v.size());
  return out;
}

inline BinaryVolume decode_volume(const std::string& bytes) {
  constexpr std::size_t header = 4 + 1 + 12;
  if (bytes.size() < 4 || !std::equal(kVolumeMagic.begin(), kVolumeMagic.end(), bytes.begin()))
    throw ValidationError("bad magic");
  if (bytes.size() < header) throw ValidationError("truncated header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (p[4] != kVolumeVersion) throw ValidationError("unsupported version " + std::to_string(p[4]));
  Dims dims{detail::get_u32le(p + 5), detail::get_u32le(p + 9), detail::get_u32le(p + 13)};
  if (dims.size() == 0) throw ValidationError("empty dims");
  if (bytes.size() < header + dims.size()) throw ValidationError("truncated payload");
  if (bytes.size() > header + dims.size()) throw ValidationError("trailing bytes after payload");
  std::vector<std::uint8_t> voxels(p + header, p + header + dims.size());
  for (auto b : voxels)
    if (b > 1) throw ValidationError("voxel byte " + std::to_string(b) + " is not 0 or 1");
  return BinaryVolume(dims, std::move(voxels));
}

inline void write_volume(const BinaryVolume& v, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + path.string());
  const std::string bytes = encode_volume(v);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFailure("write failed: " + path.string());
}

inline BinaryVolume read_volume(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_volume(bytes);
}

// ---------------------------------------------------------------------------
// Synthetic porous media

struct SynthSpec {
  std::size_t size = 64;
  double porosity = 0.25;
  double corr_len = 3.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (size == 0) throw ValidationError("synth: size must be positive");
    if (!(porosity > 0.0 && porosity < 1.0)) throw ValidationError("synth: porosity must lie in (0,1)");
    if (!(corr_len >= 1.0)) throw ValidationError("synth: corr_len must be >= 1");
    if (corr_len > 0.5 * double(size)) throw ValidationError("synth: corr_len exceeds half the volume edge");
  }
};

namespace detail {

// Half-sample symmetric reflection into [0, n).
inline std::size_t reflect_index(long long i, long long n) {
  const long long period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - 1 - i);
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    s += k[i + radius];
  }
  for (double& v : k) v /= s;
  return k;
}

// One separable smoothing pass along `axis` with reflective boundaries.
inline void smooth_axis(std::vector<double>& field, const Dims& dims, int axis, const std::vector<double>& kernel) {
  const long long radius = static_cast<long long>(kernel.size() / 2);
  const std::size_t n = dims.extent(axis);
  const std::size_t stride = axis == 0 ? dims.h * dims.w : axis == 1 ? dims.w : 1;
  const std::size_t lines = dims.size() / n;
  std::vector<double> out(field.size());
  parallel_for(lines, n * kernel.size(), [&](std::size_t line) {
    // Base offset of this line: decompose line over the two other axes.
    std::size_t base;
    if (axis == 0) base = line;
    else if (axis == 1) base = (line / dims.w) * dims.h * dims.w + line % dims.w;
    else base = line * dims.w;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (long long k = -radius; k <= radius; ++k) {
        const std::size_t j = reflect_index(static_cast<long long>(i) + k, static_cast<long long>(n));
        acc += kernel[k + radius] * field[base + j * stride];
      }
      out[base + i * stride] = acc;
    }
  });
  field.swap(out);
}

}  // namespace detail

/// White noise smoothed by a separable Gaussian of std corr_len, thresholded
/// so that exactly round(porosity * N) voxels (the largest field values) are
/// pore. Ties break on voxel index.
inline BinaryVolume synth_grf(const SynthSpec& spec) {
  spec.validate();
  const Dims dims = Dims::cube(spec.size);
  const StreamKey key = StreamKey::make(spec.seed, "synth-grf");
  std::vector<double> field(dims.size());
  parallel_for(field.size(), 16, [&](std::size_t i) { field[i] = keyed_normal(key, i); });
  const auto kernel = detail::gaussian_kernel(spec.corr_len);
  for (int axis = 0; axis < 3; ++axis) detail::smooth_axis(field, dims, axis, kernel);

  const std::size_t pores = static_cast<std::size_t>(std::llround(spec.porosity * double(dims.size())));
  std::vector<std::size_t> order(dims.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto greater = [&](std::size_t a, std::size_t b) {
    return field[a] > field[b] || (field[a] == field[b] && a < b);
  };
  BinaryVolume out(dims);
  if (pores > 0) {
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(pores - 1), order.end(), greater);
    for (std::size_t i = 0; i < pores; ++i) out.set(order[i], true);
  }
  return out;
}

/// `count` volumes with porosities spread evenly over
/// [porosity - spread/2, porosity + spread/2] and per-member seeds derived
/// from `seed`.
inline std::vector<BinaryVolume> synth_ensemble(const SynthSpec& base, int count, double spread, std::uint64_t seed) {
  if (count < 1) throw ValidationError("synth: count must be >= 1");
  if (spread < 0) throw ValidationError("synth: porosity spread must be >= 0");
  std::vector<BinaryVolume> out;
  for (int i = 0; i < count; ++i) {
    SynthSpec s = base;
    if (count > 1) s.porosity = base.porosity - 0.5 * spread + spread * double(i) / double(count - 1);
    s.seed = StreamKey::make(seed, "synth-member", std::uint64_t(i)).value;
    out.push_back(synth_grf(s));
  }
  return out;
}

}  // namespace poredit
