#pragma once

// Keyed, counter-based random numbers.
//
// A stream is identified by (seed, purpose tag, step, extra) and every value is
// a pure function of that key plus an element index, so any sub-region of a
// noise field can be regenerated independently and identically on every
// platform. The standard library distributions are implementation-defined and
// are not used for anything that must reproduce.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace poredit {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t hash_tag(std::string_view tag) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

struct StreamKey {
  std::uint64_t value = 0;

  static constexpr StreamKey make(std::uint64_t seed, std::string_view purpose,
                                  std::uint64_t step = 0, std::uint64_t extra = 0) {
    std::uint64_t k = splitmix64(seed);
    k = splitmix64(k ^ hash_tag(purpose));
    k = splitmix64(k ^ step);
    k = splitmix64(k ^ (extra * 0xD1342543DE82EF95ull));
    return StreamKey{k};
  }
};

/// 64 random bits at position `index` of the stream.
inline constexpr std::uint64_t keyed_bits(StreamKey key, std::uint64_t index) {
  return splitmix64(key.value ^ splitmix64(index + 0x632BE59BD9B4E019ull));
}

/// Uniform double in (0, 1).
inline double keyed_uniform(StreamKey key, std::uint64_t index) {
  return (static_cast<double>(keyed_bits(key, index) >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal via Box-Muller; element i uses uniforms 2i and 2i+1.
inline double keyed_normal(StreamKey key, std::uint64_t index) {
  const double u1 = keyed_uniform(key, 2 * index);
  const double u2 = keyed_uniform(key, 2 * index + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sequential generator over a keyed stream.
class KeyedRng {
 public:
  explicit KeyedRng(StreamKey key) : key_(key) {}
  KeyedRng(std::uint64_t seed, std::string_view purpose, std::uint64_t step = 0)
      : key_(StreamKey::make(seed, purpose, step)) {}

  double uniform() { return keyed_uniform(key_, counter_++); }
  double normal() { return keyed_normal(key_, counter_++); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t bits = keyed_bits(key_, counter_++);
    // Multiply-shift maps 64 bits onto [0, span) without modulo bias worth caring about.
    const auto r = static_cast<std::uint64_t>((static_cast<unsigned __int128>(bits) * span) >> 64);
    return lo + static_cast<std::int64_t>(r);
  }

 private:
  StreamKey key_;
  std::uint64_t counter_ = 0;
};

}  // namespace poredit
