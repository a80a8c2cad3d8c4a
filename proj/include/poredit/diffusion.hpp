#pragma once

// Cosine noise schedule, forward corruption, classifier-free guidance and the
// two reverse samplers (the eta-parameterized x0 sampler and the ancestral
// posterior sampler) driving a generic logits denoiser.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "poredit/errors.hpp"
#include "poredit/metrics.hpp"
#include "poredit/parallel.hpp"
#include "poredit/rng.hpp"
#include "poredit/volume.hpp"

namespace poredit {

inline constexpr double kMaxBeta = 0.999;

struct NoiseSchedule {
  int steps = 0;
  double s_offset = 0.008;
  std::vector<double> alpha_bar;     // [0..T], alpha_bar[0] = 1
  std::vector<double> beta;          // [0..T], beta[0] = 0 unused
  std::vector<double> signal_coeff;  // sqrt(alpha_bar)
  std::vector<double> noise_coeff;   // sqrt(1 - alpha_bar)
  std::vector<int> model_t;          // time index fed to the network at step k

  double alpha(int t) const { return 1.0 - beta[t]; }
};

namespace detail {
inline void fill_coefficients(NoiseSchedule& s) {
  s.beta.assign(s.steps + 1, 0.0);
  s.signal_coeff.resize(s.steps + 1);
  s.noise_coeff.resize(s.steps + 1);
  for (int t = 0; t <= s.steps; ++t) {
    s.signal_coeff[t] = std::sqrt(s.alpha_bar[t]);
    s.noise_coeff[t] = std::sqrt(1.0 - s.alpha_bar[t]);
    if (t > 0) s.beta[t] = std::min(kMaxBeta, 1.0 - s.alpha_bar[t] / s.alpha_bar[t - 1]);
  }
}
}  // namespace detail

/// alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2);
/// beta_t = 1 - alpha_bar_t/alpha_bar_{t-1}, clipped to 0.999.
inline NoiseSchedule cosine_schedule(int steps, double s_offset = 0.008) {
  if (steps < 1) throw ValidationError("schedule: steps must be >= 1");
  NoiseSchedule s;
  s.steps = steps;
  s.s_offset = s_offset;
  auto f = [&](double t) {
    const double c = std::cos(((t / steps + s_offset) / (1.0 + s_offset)) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  s.alpha_bar.resize(steps + 1);
  s.model_t.resize(steps + 1);
  for (int t = 0; t <= steps; ++t) {
    s.alpha_bar[t] = t == 0 ? 1.0 : f(double(t)) / f0;
    s.model_t[t] = t;
  }
  detail::fill_coefficients(s);
  return s;
}

/// A K-step sub-schedule of `base` on evenly spaced training timesteps; step
/// k runs the network at base time model_t[k].
inline NoiseSchedule respace(const NoiseSchedule& base, int k_steps) {
  if (k_steps < 1 || k_steps > base.steps)
    throw ValidationError("schedule: sampling steps must lie in [1, " + std::to_string(base.steps) + "]");
  if (k_steps == base.steps) return base;
  NoiseSchedule s;
  s.steps = k_steps;
  s.s_offset = base.s_offset;
  s.alpha_bar.resize(k_steps + 1);
  s.model_t.resize(k_steps + 1);
  for (int k = 0; k <= k_steps; ++k) {
    const int t = static_cast<int>(std::llround(double(k) * base.steps / k_steps));
    s.model_t[k] = t;
    s.alpha_bar[k] = base.alpha_bar[t];
  }
  detail::fill_coefficients(s);
  return s;
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline SignedVolume forward_corrupt(const SignedVolume& x0, int t, const SignedVolume& eps, const NoiseSchedule& s) {
  if (t < 0 || t > s.steps) throw ValidationError("forward_corrupt: t=" + std::to_string(t) + " outside [0,T]");
  if (!(x0.dims == eps.dims)) throw ValidationError("forward_corrupt: noise dims differ from x0");
  SignedVolume out(x0.dims);
  const double a = s.signal_coeff[t], b = s.noise_coeff[t];
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = a * x0.values[i] + b * eps.values[i];
  return out;
}

/// Fresh standard-normal field on the keyed stream.
inline SignedVolume normal_field(Dims dims, StreamKey key) {
  SignedVolume out(dims);
  parallel_for(out.size(), 16, [&](std::size_t i) { out.values[i] = keyed_normal(key, i); });
  return out;
}

// ---------------------------------------------------------------------------
// Guidance

struct GuidanceSpec {
  double scale = 1.0;
  bool enabled = false;

  /// True when the unconditional branch contributes.
  bool active() const { return enabled && scale != 1.0; }
};

/// l = l_uncond + s (l_cond - l_uncond); the conditional logits are returned
/// untouched when guidance is off.
template <class Real>
Field<Real> cfg_combine(const Field<Real>& l_uncond, const Field<Real>& l_cond, const GuidanceSpec& g) {
  if (!g.active()) return l_cond;
  if (!(l_uncond.dims == l_cond.dims)) throw ValidationError("cfg: logits dims differ");
  Field<Real> out(l_cond.dims);
  const Real s = static_cast<Real>(g.scale);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values[i] = l_uncond.values[i] + s * (l_cond.values[i] - l_uncond.values[i]);
  return out;
}

/// x0_hat = tanh(logits / 2), the signed image of sigmoid(logits).
template <class Real>
SignedVolume logits_to_x0(const Field<Real>& logits) {
  SignedVolume out(logits.dims);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = std::tanh(0.5 * double(logits.values[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Reverse steps

/// eps_hat = (x_t - a_t x0_hat)/s_t; x_{t-1} = a_{t-1} x0_hat + s_{t-1} eps_hat + eta s_{t-1} z.
/// `z` is ignored at t = 1 and may be empty (treated as zero).
inline SignedVolume ddim_step(const SignedVolume& x_t, const SignedVolume& x0_hat, int t, double eta,
                              const NoiseSchedule& s, const SignedVolume& z) {
  if (t < 1 || t > s.steps) throw ValidationError("ddim_step: t=" + std::to_string(t) + " outside [1,T]");
  const bool use_z = t > 1 && !z.values.empty();
  SignedVolume out(x_t.dims);
  const double a_t = s.signal_coeff[t], s_t = s.noise_coeff[t];
  const double a_p = s.signal_coeff[t - 1], s_p = s.noise_coeff[t - 1];
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps_hat = (x_t.values[i] - a_t * x0_hat.values[i]) / s_t;
    const double mu = a_p * x0_hat.values[i] + s_p * eps_hat;
    out.values[i] = use_z ? mu + eta * s_p * z.values[i] : mu;
  }
  return out;
}

struct PosteriorCoefficients {
  double x0 = 0.0;        // sqrt(alpha_bar_{t-1}) beta_t / (1 - alpha_bar_t)
  double xt = 0.0;        // sqrt(alpha_t) (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)
  double variance = 0.0;  // (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) beta_t
};

inline PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, int t) {
  const double ab_t = s.alpha_bar[t], ab_p = s.alpha_bar[t - 1], beta = s.beta[t];
  PosteriorCoefficients c;
  c.x0 = std::sqrt(ab_p) * beta / (1.0 - ab_t);
  c.xt = std::sqrt(s.alpha(t)) * (1.0 - ab_p) / (1.0 - ab_t);
  c.variance = (1.0 - ab_p) / (1.0 - ab_t) * beta;
  return c;
}

/// x_{t-1} = mu_tilde + sigma_tilde z with the q(x_{t-1} | x_t, x0_hat) posterior.
inline SignedVolume ancestral_step(const SignedVolume& x_t, const SignedVolume& x0_hat, int t, const NoiseSchedule& s,
                                   const SignedVolume& z) {
  if (t < 1 || t > s.steps) throw ValidationError("ancestral_step: t=" + std::to_string(t) + " outside [1,T]");
  const auto c = posterior_coefficients(s, t);
  const double sigma = std::sqrt(c.variance);
  const bool use_z = t > 1 && !z.values.empty();
  SignedVolume out(x_t.dims);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double mu = c.x0 * x0_hat.values[i] + c.xt * x_t.values[i];
    out.values[i] = use_z ? mu + sigma * z.values[i] : mu;
  }
  return out;
}

enum class SamplerMode { Ancestral, Ddim };

inline SamplerMode parse_sampler_mode(const std::string& s) {
  if (s == "ancestral") return SamplerMode::Ancestral;
  if (s == "ddim") return SamplerMode::Ddim;
  throw ValidationError("unknown sampler mode '" + s + "' (expected ddim or ancestral)");
}

inline std::string to_string(SamplerMode m) { return m == SamplerMode::Ancestral ? "ancestral" : "ddim"; }

struct SamplerSpec {
  SamplerMode mode = SamplerMode::Ancestral;
  double eta = 1.0;  // ddim only
};

inline SignedVolume reverse_step(const SamplerSpec& spec, const SignedVolume& x_t, const SignedVolume& x0_hat, int t,
                                 const NoiseSchedule& s, const SignedVolume& z) {
  return spec.mode == SamplerMode::Ancestral ? ancestral_step(x_t, x0_hat, t, s, z)
                                             : ddim_step(x_t, x0_hat, t, spec.eta, s, z);
}

// Stream tags shared by the monolithic and tiled samplers so that a single
// tile reproduces the monolithic run.
inline constexpr const char* kInitNoiseTag = "sample-init";
inline constexpr const char* kStepNoiseTag = "sample-step";

/// Logits for the current state at sampling step k (network time model_t[k]).
using Denoiser = std::function<Field<float>(const SignedVolume& x_t, int model_t)>;

struct SampleResult {
  BinaryVolume volume;
  SignedVolume field;  // final continuous x0 before binarization
  double otsu_threshold = 0.0;
};

/// Full reverse loop from keyed Gaussian noise, then Otsu binarization.
inline SampleResult sample(const Denoiser& denoise, Dims dims, const NoiseSchedule& s, const SamplerSpec& spec,
                           std::uint64_t seed) {
  SignedVolume x = normal_field(dims, StreamKey::make(seed, kInitNoiseTag));
  for (int k = s.steps; k >= 1; --k) {
    const SignedVolume x0_hat = logits_to_x0(denoise(x, s.model_t[k]));
    const SignedVolume z = k > 1 ? normal_field(dims, StreamKey::make(seed, kStepNoiseTag, std::uint64_t(k)))
                                 : SignedVolume();
    x = reverse_step(spec, x, x0_hat, k, s, z);
  }
  auto otsu = otsu_threshold(x);
  return {std::move(otsu.volume), std::move(x), otsu.threshold};
}

}  // namespace poredit
