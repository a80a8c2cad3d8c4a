#pragma once

// Composite reconstruction + physics objective, decoupled-weight-decay Adam,
// and the x0-prediction training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "poredit/diffusion.hpp"
#include "poredit/errors.hpp"
#include "poredit/metrics.hpp"
#include "poredit/network.hpp"
#include "poredit/rng.hpp"
#include "poredit/tensor.hpp"
#include "poredit/volume.hpp"

namespace poredit {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

struct LossWeights {
  double lambda_phy = 1.5;
  double lambda_s2 = 1.0;
  double lambda_grad = 0.008;
  int warmup_epochs = 3;
  bool use_plain_mse = false;

  void validate() const {
    if (lambda_phy < 0 || lambda_s2 < 0 || lambda_grad < 0 || warmup_epochs < 0)
      throw ValidationError("loss weights must be non-negative");
  }

  /// lambda_phy * min(1, epoch / warmup_epochs)
  double physics_weight(int epoch) const {
    if (warmup_epochs == 0) return lambda_phy;
    return lambda_phy * std::min(1.0, double(epoch) / double(warmup_epochs));
  }
};

struct TrainConfig {
  double lr = 3e-5;
  int batch = 1;          // samples whose gradients are averaged per optimizer step
  int epochs = 1;
  int max_steps = 0;      // optional cap on total samples seen; 0 = none
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.01;
  int diffusion_steps = 1000;
  double s_offset = 0.008;

  void validate() const {
    if (!(lr > 0)) throw ValidationError("train config: lr must be positive");
    if (batch < 1) throw ValidationError("train config: batch must be >= 1");
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
    if (max_steps < 0) throw ValidationError("train config: max_steps must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ValidationError("train config: betas must lie in [0,1)");
    if (!(adam_eps > 0) || weight_decay < 0) throw ValidationError("train config: bad optimizer constants");
    if (diffusion_steps < 1) throw ValidationError("train config: diffusion_steps must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Loss terms on probability fields

namespace detail {
template <class Real>
void require_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

/// Binary volume as a constant tensor of 0/1 values.
template <class Real>
Tensor<Real> binary_tensor(const BinaryVolume& v) {
  std::vector<Real> vals(v.voxels().begin(), v.voxels().end());
  return Tensor<Real>::constant({v.dims().d, v.dims().h, v.dims().w}, std::move(vals));
}

template <class Real>
Tensor<Real> signed_tensor(const SignedVolume& v) {
  std::vector<Real> vals(v.values.begin(), v.values.end());
  return Tensor<Real>::constant({v.dims.d, v.dims.h, v.dims.w}, std::move(vals));
}

/// -mean[G log P + (1-G) log(1-P)], P clamped to [1e-7, 1-1e-7].
template <class Real>
Tensor<Real> bce_loss(const Tensor<Real>& p, const Tensor<Real>& g) {
  detail::require_same_shape("bce_loss", p, g);
  const Real lo = Real(kProbClamp), hi = Real(1 - kProbClamp);
  auto pc = clamp(p, lo, hi);
  auto log_p = log(pc);
  auto log_q = log(affine(pc, Real(-1), Real(1)));
  auto term = add(mul(g, log_p), mul(affine(g, Real(-1), Real(1)), log_q));
  return scale(mean(term), Real(-1));
}

/// 1 - (2 sum(PG) + eps) / (sum(P) + sum(G) + eps), eps = 1.
template <class Real>
Tensor<Real> dice_loss(const Tensor<Real>& p, const Tensor<Real>& g) {
  detail::require_same_shape("dice_loss", p, g);
  const Real eps = Real(kDiceSmooth);
  auto num = affine(sum(mul(p, g)), Real(2), eps);
  auto den = affine(add(sum(p), sum(g)), Real(1), eps);
  return affine(div(num, den), Real(-1), Real(1));
}

/// Mean of P(x) P(x + r e_axis) over the non-wrapping overlap.
template <class Real>
Tensor<Real> s2_shift(const Tensor<Real>& p, std::size_t r, int axis) {
  if (p.rank() != 3 || axis < 0 || axis > 2) throw ShapeError("s2_shift", "expected a 3D field and axis in {0,1,2}");
  const std::size_t n = p.dim(axis);
  if (r >= n) throw ValidationError("s2_shift: lag " + std::to_string(r) + " out of range for extent " + std::to_string(n));
  if (r == 0) return mean(mul(p, p));
  return mean(mul(slice(p, axis, 0, n - r), slice(p, axis, r, n)));
}

template <class Real>
Tensor<Real> s2_shift_axis_mean(const Tensor<Real>& p, std::size_t r) {
  return scale(add(add(s2_shift(p, r, 0), s2_shift(p, r, 1)), s2_shift(p, r, 2)), Real(1.0 / 3.0));
}

/// Target statistics of one training volume.
struct PhysicsTarget {
  double porosity = 0.0;
  std::vector<std::size_t> lags;
  std::vector<double> s2;  // axis-mean shift S2 at each lag
};

inline PhysicsTarget physics_target(const BinaryVolume& g) {
  PhysicsTarget t;
  t.porosity = g.porosity();
  t.lags = clip_lags(std::min({g.dims().d, g.dims().h, g.dims().w}));
  t.s2 = s2_at_lags(g, t.lags);
  return t;
}

/// (mean(P) - phi)^2 + lambda_s2 sum_r (S2_hat(r) - S2(r))^2
template <class Real>
Tensor<Real> physics_loss(const Tensor<Real>& p, const PhysicsTarget& target, double lambda_s2) {
  if (target.lags.size() != target.s2.size()) throw ValidationError("physics_loss: lag/S2 length mismatch");
  auto d = affine(mean(p), Real(1), Real(-target.porosity));
  auto loss = mul(d, d);
  if (lambda_s2 == 0.0) return loss;
  if (target.lags.empty()) throw ValidationError("physics_loss: S2 lag set is empty after clipping to the volume edge");
  Tensor<Real> acc;
  for (std::size_t i = 0; i < target.lags.size(); ++i) {
    auto e = affine(s2_shift_axis_mean(p, target.lags[i]), Real(1), Real(-target.s2[i]));
    auto sq = mul(e, e);
    acc = acc.defined() ? add(acc, sq) : sq;
  }
  return add(loss, scale(acc, Real(lambda_s2)));
}

/// Mean over axes of the MSE between forward differences of P and G.
template <class Real>
Tensor<Real> gradient_loss(const Tensor<Real>& p, const Tensor<Real>& g) {
  detail::require_same_shape("gradient_loss", p, g);
  if (p.rank() != 3) throw ShapeError("gradient_loss", "expected a 3D field");
  Tensor<Real> acc;
  int axes = 0;
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t n = p.dim(axis);
    if (n < 2) continue;
    auto dp = sub(slice(p, axis, 1, n), slice(p, axis, 0, n - 1));
    auto dg = sub(slice(g, axis, 1, n), slice(g, axis, 0, n - 1));
    auto e = sub(dp, dg);
    auto m = mean(mul(e, e));
    acc = acc.defined() ? add(acc, m) : m;
    ++axes;
  }
  if (!acc.defined()) return Tensor<Real>::scalar(Real(0));
  return scale(acc, Real(1.0 / axes));
}

template <class Real>
struct LossBreakdown {
  Tensor<Real> total;
  double bce = 0, dice = 0, grad = 0, phys = 0, phys_weight = 0, mse = 0;
};

/// Composite objective, or the plain x0 MSE when weights.use_plain_mse.
template <class Real>
LossBreakdown<Real> total_loss(const Tensor<Real>& logits, const BinaryVolume& g, const PhysicsTarget& target,
                               const LossWeights& w, int epoch) {
  LossBreakdown<Real> out;
  if (w.use_plain_mse) {
    auto x0_hat = tanh(scale(logits, Real(0.5)));
    auto e = sub(x0_hat, signed_tensor<Real>(map_to_signed(g)));
    out.total = mean(mul(e, e));
    out.mse = double(out.total.item());
    return out;
  }
  auto p = sigmoid(logits);
  auto gt = binary_tensor<Real>(g);
  auto bce = bce_loss(p, gt);
  auto dice = dice_loss(p, gt);
  auto grad = gradient_loss(p, gt);
  out.phys_weight = w.physics_weight(epoch);
  auto total = add(add(bce, dice), scale(grad, Real(w.lambda_grad)));
  out.bce = double(bce.item());
  out.dice = double(dice.item());
  out.grad = double(grad.item());
  if (out.phys_weight > 0.0) {
    auto phys = physics_loss(p, target, w.lambda_s2);
    out.phys = double(phys.item());
    total = add(total, scale(phys, Real(out.phys_weight)));
  }
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay.
template <class Real>
class AdamW {
 public:
  AdamW(std::vector<Tensor<Real>*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  /// Applies one update using the accumulated gradients divided by `grad_scale`.
  void step(double grad_scale = 1.0) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, double(t_)), c2 = 1.0 - std::pow(b2, double(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto* p = params_[k];
      if (!p->has_grad()) continue;
      auto g = p->grad();
      auto w = p->mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]) / grad_scale;
        m[i] = b1 * m[i] + (1 - b1) * gi;
        v[i] = b2 * v[i] + (1 - b2) * gi * gi;
        const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
        w[i] = static_cast<Real>(double(w[i]) - cfg_.lr * (upd + cfg_.weight_decay * double(w[i])));
      }
    }
  }

  long long steps() const { return t_; }

 private:
  std::vector<Tensor<Real>*> params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long long t_ = 0;
};

// ---------------------------------------------------------------------------
// Data and loop

struct Dataset {
  std::vector<BinaryVolume> volumes;
  std::vector<std::string> names;

  std::size_t size() const { return volumes.size(); }
};

/// All *.pdtv files in `dir`, in name order. They must share one cubic shape.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pdtv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("dataset is empty: no .pdtv files in " + dir.string());
  Dataset ds;
  for (const auto& f : files) {
    ds.volumes.push_back(read_volume(f));
    ds.names.push_back(f.filename().string());
    if (!(ds.volumes.back().dims() == ds.volumes.front().dims()))
      throw ValidationError("dataset volumes differ in shape: " + f.filename().string());
  }
  const Dims d = ds.volumes.front().dims();
  if (d.d != d.h || d.h != d.w) throw ValidationError("dataset volumes must be cubic");
  return ds;
}

/// Mean/std of the dataset porosities; a degenerate std is floored to 1 so a
/// constant-porosity dataset normalizes to 0.
inline PorosityStats porosity_stats(const Dataset& ds) {
  PorosityStats s;
  double m = 0;
  for (const auto& v : ds.volumes) m += v.porosity();
  m /= double(ds.size());
  double var = 0;
  for (const auto& v : ds.volumes) var += (v.porosity() - m) * (v.porosity() - m);
  var /= double(ds.size());
  s.mean = m;
  s.std = std::sqrt(var) < 1e-6 ? 1.0 : std::sqrt(var);
  return s;
}

struct EpochRecord {
  int epoch = 0;
  int samples = 0;
  double loss = 0, bce = 0, dice = 0, grad = 0, phys = 0, phys_weight = 0, mse = 0;
};

struct TrainResult {
  std::vector<double> step_losses;  // one entry per sample
  std::vector<EpochRecord> epochs;
};

inline void write_epoch_csv(const std::vector<EpochRecord>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open log for writing: " + path.string());
  out << "epoch,samples,loss,bce,dice,grad,phys,phys_weight,mse\n";
  out.precision(10);
  for (const auto& r : rows)
    out << r.epoch << ',' << r.samples << ',' << r.loss << ',' << r.bce << ',' << r.dice << ',' << r.grad << ','
        << r.phys << ',' << r.phys_weight << ',' << r.mse << '\n';
}

/// Conditional-dropout draw for one training sample.
inline bool draw_condition_drop(KeyedRng& rng, double p) { return rng.bernoulli(p); }

/// Trains `model` in place. The model's porosity statistics are set from the
/// dataset. `on_epoch` (optional) observes each finished epoch.
template <class Real>
TrainResult train(Model<Real>& model, const Dataset& ds, const TrainConfig& tc, const LossWeights& w,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  tc.validate();
  w.validate();
  if (ds.size() == 0) throw ValidationError("train: dataset is empty");
  const ModelConfig& mc = model.config();
  const Dims dims = ds.volumes.front().dims();
  if (dims.d != std::size_t(mc.input_size))
    throw ValidationError("train: volume edge " + std::to_string(dims.d) + " differs from model input_size " +
                          std::to_string(mc.input_size));
  model.porosity_stats() = porosity_stats(ds);
  const NoiseSchedule sched = cosine_schedule(tc.diffusion_steps, tc.s_offset);

  std::vector<PhysicsTarget> targets;
  for (const auto& v : ds.volumes) targets.push_back(physics_target(v));
  if (mc.s2_features > 0 && targets.front().s2.size() != std::size_t(mc.s2_features))
    throw ValidationError("train: model expects " + std::to_string(mc.s2_features) + " S2 features but the lag set has " +
                          std::to_string(targets.front().s2.size()));

  std::vector<Tensor<Real>*> params;
  for (auto& [name, t] : model.parameters()) params.push_back(t);
  AdamW<Real> opt(params, tc);
  model.zero_grad();

  TrainResult result;
  long long seen = 0;
  int pending = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    KeyedRng shuffle(tc.seed, "train-shuffle", std::uint64_t(epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::size_t(shuffle.uniform_int(0, std::int64_t(i) - 1))]);

    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t idx : order) {
      if (tc.max_steps > 0 && seen >= tc.max_steps) break;
      const BinaryVolume& g = ds.volumes[idx];
      KeyedRng draw(tc.seed, "train-step", std::uint64_t(seen));
      const int t = int(draw.uniform_int(1, sched.steps));
      const bool drop = draw_condition_drop(draw, mc.cond_dropout);
      const SignedVolume eps = normal_field(dims, StreamKey::make(tc.seed, "train-noise", std::uint64_t(seen)));
      const SignedVolume x_t = forward_corrupt(map_to_signed(g), t, eps, sched);

      Condition cond;
      cond.t = t;
      cond.phi = targets[idx].porosity;
      if (mc.s2_features > 0) cond.s2 = targets[idx].s2;
      auto logits = model.forward(x_t, cond, drop);
      auto loss = total_loss(logits, g, targets[idx], w, epoch);
      const double value = double(loss.total.item());
      if (!std::isfinite(value))
        throw RuntimeFailure("training diverged: loss is " + std::to_string(value) + " at sample " + std::to_string(seen) +
                             " (epoch " + std::to_string(epoch) + ", t=" + std::to_string(t) + ")");
      backward(loss.total);
      ++pending;
      ++seen;
      result.step_losses.push_back(value);
      rec.samples += 1;
      rec.loss += value;
      rec.bce += loss.bce;
      rec.dice += loss.dice;
      rec.grad += loss.grad;
      rec.phys += loss.phys;
      rec.mse += loss.mse;
      rec.phys_weight = loss.phys_weight;
      if (pending == tc.batch) {
        opt.step(double(pending));
        model.zero_grad();
        pending = 0;
      }
    }
    if (rec.samples > 0) {
      const double n = rec.samples;
      rec.loss /= n;
      rec.bce /= n;
      rec.dice /= n;
      rec.grad /= n;
      rec.phys /= n;
      rec.mse /= n;
      result.epochs.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
    if (tc.max_steps > 0 && seen >= tc.max_steps) break;
  }
  if (pending > 0) {
    opt.step(double(pending));
    model.zero_grad();
  }
  return result;
}

}  // namespace poredit
