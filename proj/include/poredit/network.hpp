#pragma once

// The diffusion transformer backbone: 3D patch embedding, learnable positional
// table, frequency-embedded time/porosity(/S2) conditions, alternating
// window / shifted-window attention blocks with relative position bias, and an
// AdaLN-modulated linear decoder back to voxel logits.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "poredit/diffusion.hpp"
#include "poredit/errors.hpp"
#include "poredit/rng.hpp"
#include "poredit/tensor.hpp"
#include "poredit/volume.hpp"

namespace poredit {

struct ModelConfig {
  int input_size = 64;
  int patch = 8;
  int embed_dim = 96;
  int depth = 4;
  int heads = 4;
  int window = 4;
  double mlp_ratio = 4.0;
  double cond_dropout = 0.1;
  int s2_features = 0;  // length of the S2 conditioning vector; 0 disables it

  int latent() const { return input_size / patch; }
  int tokens() const { return latent() * latent() * latent(); }
  int patch_volume() const { return patch * patch * patch; }
  int window_tokens() const { return window * window * window; }
  int head_dim() const { return embed_dim / heads; }
  int hidden() const { return static_cast<int>(std::lround(embed_dim * mlp_ratio)); }
  int shift() const { return window / 2; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
    if (input_size <= 0 || patch <= 0 || embed_dim <= 0 || depth <= 0 || heads <= 0 || window <= 0)
      fail("all extents must be positive");
    if (input_size % patch) fail("input_size " + std::to_string(input_size) + " not divisible by patch " + std::to_string(patch));
    if (latent() % window) fail("latent edge " + std::to_string(latent()) + " not divisible by window " + std::to_string(window));
    if (embed_dim % heads) fail("embed_dim not divisible by heads");
    if (embed_dim % 2) fail("embed_dim must be even for frequency embeddings");
    if (depth % 2) fail("depth must be even (window/shifted-window pairs)");
    if (!(mlp_ratio > 0.0)) fail("mlp_ratio must be positive");
    if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) fail("cond_dropout must lie in [0,1)");
    if (s2_features < 0) fail("s2_features must be >= 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form parameter count for a configuration.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t C = c.embed_dim, P = c.patch_volume(), N = c.tokens(), H = c.hidden();
  const std::size_t rel = std::size_t(2 * c.window - 1) * (2 * c.window - 1) * (2 * c.window - 1) * c.heads;
  const std::size_t cond_mlp = C * C + C + C * C + C;  // frequency dim equals C
  std::size_t n = P * C + C + N * C;
  n += 2 * cond_mlp + C;
  if (c.s2_features > 0) n += std::size_t(c.s2_features) * C + C + C * C + C;
  n += std::size_t(c.depth) * (4 * C + 3 * C * C + 3 * C + C * C + C + rel + C * H + H + H * C + C);
  n += C * 2 * C + 2 * C + C * P + P;
  return n;
}

/// Sinusoidal embedding: e[2i] = sin(s / 10000^(2i/d)), e[2i+1] = cos(...).
template <class Real>
Tensor<Real> embed_scalar(double s, int d) {
  if (d <= 0 || d % 2) throw ValidationError("embed_scalar: dimension must be positive and even");
  std::vector<Real> args(d / 2);
  for (int i = 0; i < d / 2; ++i) args[i] = static_cast<Real>(s / std::pow(10000.0, 2.0 * i / d));
  auto a = Tensor<Real>::constant({std::size_t(d / 2), 1}, std::move(args));
  return reshape(concat<Real>({sin(a), cos(a)}, 1), {std::size_t(d)});
}

// ---------------------------------------------------------------------------
// Window bookkeeping

/// Index tables for window partitioning of the latent grid, shared by every
/// block of a model.
struct AttentionLayout {
  using Index = std::shared_ptr<const std::vector<std::size_t>>;
  Index partition;        // window-ordered position -> token
  Index partition_inv;
  Index shifted;          // same after a cyclic roll by -floor(M/2)
  Index shifted_inv;
  Index rel_index;        // (i, j) pair within a window -> bias table row
  std::shared_ptr<const std::vector<double>> shift_mask;  // [windows, T, T], 0 or -1e9
  std::size_t windows = 0, window_tokens = 0;

  static AttentionLayout build(int latent, int window);
};

inline constexpr double kMaskValue = -1e9;

inline AttentionLayout AttentionLayout::build(int latent, int window) {
  const int L = latent, M = window, s = window / 2, nw = L / M;
  const std::size_t T = std::size_t(M) * M * M, N = std::size_t(L) * L * L;
  AttentionLayout out;
  out.windows = std::size_t(nw) * nw * nw;
  out.window_tokens = T;
  auto part = std::make_shared<std::vector<std::size_t>>(N);
  auto shifted = std::make_shared<std::vector<std::size_t>>(N);
  auto mask = std::make_shared<std::vector<double>>(out.windows * T * T, 0.0);
  std::vector<int> region(N);
  // Region label of a coordinate in the rolled frame along one axis.
  auto label = [&](int c) { return c < L - M ? 0 : (c < L - s ? 1 : 2); };
  std::size_t pos = 0;
  for (int wd = 0; wd < nw; ++wd)
    for (int wh = 0; wh < nw; ++wh)
      for (int ww = 0; ww < nw; ++ww)
        for (int a = 0; a < M; ++a)
          for (int b = 0; b < M; ++b)
            for (int c = 0; c < M; ++c, ++pos) {
              const int d = wd * M + a, h = wh * M + b, w = ww * M + c;
              (*part)[pos] = (std::size_t(d) * L + h) * L + w;
              const int sd = (d + s) % L, sh = (h + s) % L, sw = (w + s) % L;
              (*shifted)[pos] = (std::size_t(sd) * L + sh) * L + sw;
              region[pos] = (label(d) * 3 + label(h)) * 3 + label(w);
            }
  for (std::size_t w = 0; w < out.windows; ++w)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j)
        if (region[w * T + i] != region[w * T + j]) (*mask)[(w * T + i) * T + j] = kMaskValue;
  auto inverse = [N](const std::vector<std::size_t>& p) {
    auto inv = std::make_shared<std::vector<std::size_t>>(N);
    for (std::size_t i = 0; i < N; ++i) (*inv)[p[i]] = i;
    return inv;
  };
  auto rel = std::make_shared<std::vector<std::size_t>>(T * T);
  const int E = 2 * M - 1;
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) {
      const int di = int(i) / (M * M), hi = (int(i) / M) % M, wi = int(i) % M;
      const int dj = int(j) / (M * M), hj = (int(j) / M) % M, wj = int(j) % M;
      (*rel)[i * T + j] = std::size_t(((di - dj + M - 1) * E + (hi - hj + M - 1)) * E + (wi - wj + M - 1));
    }
  out.partition_inv = inverse(*part);
  out.shifted_inv = inverse(*shifted);
  out.partition = std::move(part);
  out.shifted = std::move(shifted);
  out.rel_index = std::move(rel);
  out.shift_mask = std::move(mask);
  return out;
}

// ---------------------------------------------------------------------------
// Weights

template <class Real>
struct Linear {
  Tensor<Real> weight;  // [in, out]
  Tensor<Real> bias;    // [out]

  Tensor<Real> operator()(const Tensor<Real>& x) const { return add(matmul(x, weight), bias); }
};

template <class Real>
struct BlockWeights {
  Tensor<Real> ln1_scale, ln1_shift;
  Linear<Real> qkv;
  Linear<Real> proj;
  Tensor<Real> rel_bias;  // [(2M-1)^3, heads]
  Tensor<Real> ln2_scale, ln2_shift;
  Linear<Real> fc1, fc2;
};

template <class Real>
struct ConditionMlp {
  Linear<Real> fc1, fc2;

  Tensor<Real> operator()(const Tensor<Real>& x) const { return fc2(silu(fc1(x))); }
};

struct Condition {
  double t = 0.0;
  double phi = 0.25;  // raw porosity; normalized by the model's training statistics
  std::optional<std::vector<double>> s2;
};

template <class Real>
struct ConditionParts {
  Tensor<Real> time;      // c_t [C]
  Tensor<Real> physics;   // c_phi (+ c_s2), or the null embedding when dropped [C]
  Tensor<Real> combined;  // time + physics
};

struct PorosityStats {
  double mean = 0.25;
  double std = 1.0;

  double normalize(double phi) const { return (phi - mean) / std; }
};

template <class Real>
class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0, bool zero_output = true) : cfg_(cfg) {
    cfg_.validate();
    layout_ = AttentionLayout::build(cfg_.latent(), cfg_.window);
    init(seed, zero_output);
  }

  const ModelConfig& config() const { return cfg_; }
  const AttentionLayout& layout() const { return layout_; }
  PorosityStats& porosity_stats() { return stats_; }
  const PorosityStats& porosity_stats() const { return stats_; }

  /// Named parameters in a fixed order (serialization, optimizer state).
  std::vector<std::pair<std::string, Tensor<Real>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<Real>*>> p;
    auto lin = [&](const std::string& n, Linear<Real>& l) {
      p.emplace_back(n + ".weight", &l.weight);
      p.emplace_back(n + ".bias", &l.bias);
    };
    lin("patch", patch_);
    p.emplace_back("pos", &pos_);
    lin("time.fc1", time_mlp_.fc1);
    lin("time.fc2", time_mlp_.fc2);
    lin("phi.fc1", phi_mlp_.fc1);
    lin("phi.fc2", phi_mlp_.fc2);
    if (cfg_.s2_features > 0) {
      lin("s2.fc1", s2_mlp_.fc1);
      lin("s2.fc2", s2_mlp_.fc2);
    }
    p.emplace_back("null", &null_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto& b = blocks_[i];
      const std::string k = "blocks." + std::to_string(i);
      p.emplace_back(k + ".ln1.scale", &b.ln1_scale);
      p.emplace_back(k + ".ln1.shift", &b.ln1_shift);
      lin(k + ".qkv", b.qkv);
      lin(k + ".proj", b.proj);
      p.emplace_back(k + ".rel_bias", &b.rel_bias);
      p.emplace_back(k + ".ln2.scale", &b.ln2_scale);
      p.emplace_back(k + ".ln2.shift", &b.ln2_shift);
      lin(k + ".fc1", b.fc1);
      lin(k + ".fc2", b.fc2);
    }
    lin("final.ada", ada_);
    lin("final.out", out_);
    return p;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, t] : parameters()) n += t->size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : parameters()) t->zero_grad();
  }

  BlockWeights<Real>& block(std::size_t i) { return blocks_.at(i); }
  const BlockWeights<Real>& block(std::size_t i) const { return blocks_.at(i); }
  Linear<Real>& patch_projection() { return patch_; }
  Tensor<Real>& positional() { return pos_; }
  Tensor<Real>& null_embedding() { return null_; }
  Linear<Real>& adaln() { return ada_; }
  Linear<Real>& output_projection() { return out_; }

  // -------------------------------------------------------------------------
  // Forward pieces

  /// [D,H,W] -> [N, p^3] with patches and in-patch voxels both z-major.
  Tensor<Real> patchify(const Tensor<Real>& x) const {
    const std::size_t L = cfg_.latent(), p = cfg_.patch;
    if (x.rank() != 3 || x.dim(0) != L * p || x.dim(1) != L * p || x.dim(2) != L * p) {
      throw ShapeError("patch_embed", "expected " + std::to_string(L * p) + "^3 input, got " + shape_str(x.shape()));
    }
    auto v = reshape(x, {L, p, L, p, L, p});
    v = permute(v, {0, 2, 4, 1, 3, 5});
    return reshape(v, {L * L * L, p * p * p});
  }

  Tensor<Real> unpatchify(const Tensor<Real>& patches) const {
    const std::size_t L = cfg_.latent(), p = cfg_.patch;
    auto v = reshape(patches, {L, L, L, p, p, p});
    v = permute(v, {0, 3, 1, 4, 2, 5});
    return reshape(v, {L * p, L * p, L * p});
  }

  Tensor<Real> patch_embed(const Tensor<Real>& x) const { return patch_(patchify(x)); }

  ConditionParts<Real> build_condition(const Condition& c, bool drop) const {
    const int C = cfg_.embed_dim;
    const std::size_t uC = C;
    auto row = [&](const Tensor<Real>& v) { return reshape(v, {1, std::size_t(v.size())}); };
    ConditionParts<Real> out;
    out.time = reshape(time_mlp_(row(embed_scalar<Real>(c.t, C))), {uC});
    if (drop) {
      out.physics = null_;
    } else {
      auto phys = phi_mlp_(row(embed_scalar<Real>(stats_.normalize(c.phi), C)));
      if (cfg_.s2_features > 0) {
        if (!c.s2 || c.s2->size() != std::size_t(cfg_.s2_features)) {
          throw ValidationError("condition: model expects " + std::to_string(cfg_.s2_features) + " S2 features");
        }
        std::vector<Real> feats(c.s2->begin(), c.s2->end());
        auto s2 = Tensor<Real>::constant({1, feats.size()}, std::move(feats));
        phys = add(phys, s2_mlp_(s2));
      }
      out.physics = reshape(phys, {uC});
    }
    out.combined = add(out.time, out.physics);
    return out;
  }

  /// Multi-head attention inside (optionally shifted) windows, with relative
  /// position bias. `x` is [N, C] in z-major token order. `weights_out`, if
  /// given, receives the post-softmax weights [windows, heads, T, T].
  Tensor<Real> window_attention(const Tensor<Real>& x, const BlockWeights<Real>& b, bool shifted,
                                Tensor<Real>* weights_out = nullptr) const {
    const std::size_t N = cfg_.tokens(), C = cfg_.embed_dim, h = cfg_.heads, d = cfg_.head_dim();
    const std::size_t W = layout_.windows, T = layout_.window_tokens;
    if (x.rank() != 2 || x.dim(0) != N || x.dim(1) != C)
      throw ShapeError("window_attention", "expected [" + std::to_string(N) + "," + std::to_string(C) + "] tokens, got " + shape_str(x.shape()));
    auto xw = gather_rows(x, shifted ? layout_.shifted : layout_.partition);
    auto qkv = b.qkv(xw);                                      // [N, 3C]
    qkv = permute(reshape(qkv, {W, T, 3, h, d}), {2, 0, 3, 1, 4});  // [3, W, h, T, d]
    auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, i + 1), {W * h, T, d}); };
    auto q = scale(part(0), static_cast<Real>(1.0 / std::sqrt(double(d))));
    auto k = permute(part(1), {0, 2, 1});
    auto v = part(2);
    auto scores = reshape(matmul(q, k), {W, h, T, T});
    auto bias = reshape(permute(gather_rows(b.rel_bias, layout_.rel_index), {1, 0}), {h, T, T});
    scores = add(scores, bias);
    if (shifted) scores = masked_add(scores, mask());
    auto probs = softmax(scores);
    if (weights_out) *weights_out = probs;
    auto attn = reshape(probs, {W * h, T, T});
    auto out = matmul(attn, v);                                     // [W*h, T, d]
    out = reshape(permute(reshape(out, {W, h, T, d}), {0, 2, 1, 3}), {N, C});
    out = b.proj(out);
    return gather_rows(out, shifted ? layout_.shifted_inv : layout_.partition_inv);
  }

  /// Pre-LN residual block: attention then MLP.
  Tensor<Real> block_forward(const Tensor<Real>& x, const BlockWeights<Real>& b, bool shifted) const {
    auto h = add(x, window_attention(layer_norm(x, b.ln1_scale, b.ln1_shift), b, shifted));
    auto m = b.fc2(gelu(b.fc1(layer_norm(h, b.ln2_scale, b.ln2_shift))));
    return add(h, m);
  }

  /// One window / shifted-window pair starting at block index `first`.
  Tensor<Real> swin_block_pair(const Tensor<Real>& x, std::size_t first) const {
    return block_forward(block_forward(x, blocks_.at(first), false), blocks_.at(first + 1), true);
  }

  /// [gamma, beta] = Linear(SiLU(c)); logits = unpatchify(GELU(gamma * LN(z) + beta) W_out + b_out).
  Tensor<Real> final_layer(const Tensor<Real>& z, const Tensor<Real>& c) const {
    const std::size_t C = cfg_.embed_dim;
    auto mod = reshape(ada_(reshape(silu(c), {1, C})), {2 * C});
    auto gamma = slice(mod, 0, 0, C);
    auto beta = slice(mod, 0, C, 2 * C);
    auto normed = layer_norm(z, Tensor<Real>(), Tensor<Real>());
    auto modulated = add(mul(normed, gamma), beta);
    return unpatchify(out_(gelu(modulated)));
  }

  /// Logits for a noisy volume [D,H,W].
  Tensor<Real> forward(const Tensor<Real>& x_t, const Condition& c, bool drop) const {
    auto cond = build_condition(c, drop);
    auto z = add(patch_embed(x_t), pos_);
    z = add(z, cond.combined);
    for (std::size_t l = 0; l < blocks_.size(); l += 2) z = swin_block_pair(z, l);
    return final_layer(z, cond.combined);
  }

  Tensor<Real> forward(const SignedVolume& x_t, const Condition& c, bool drop) const {
    std::vector<Real> v(x_t.values.begin(), x_t.values.end());
    auto x = Tensor<Real>::constant({x_t.dims.d, x_t.dims.h, x_t.dims.w}, std::move(v));
    return forward(x, c, drop);
  }

 private:
  std::shared_ptr<const std::vector<Real>> mask() const {
    if (!mask_) {
      auto m = std::make_shared<std::vector<Real>>(layout_.shift_mask->begin(), layout_.shift_mask->end());
      mask_ = std::move(m);
    }
    return mask_;
  }

  void init(std::uint64_t seed, bool zero_output) {
    const std::size_t C = cfg_.embed_dim, P = cfg_.patch_volume(), N = cfg_.tokens(), H = cfg_.hidden();
    const std::size_t E = 2 * cfg_.window - 1;
    std::uint64_t counter = 0;
    auto xavier = [&](std::size_t in, std::size_t out) {
      KeyedRng rng(seed, "init", counter++);
      const double a = std::sqrt(6.0 / double(in + out));
      std::vector<Real> w(in * out);
      for (auto& x : w) x = static_cast<Real>((2.0 * rng.uniform() - 1.0) * a);
      return Tensor<Real>::parameter({in, out}, std::move(w));
    };
    auto normal = [&](Shape shape, double stdev) {
      KeyedRng rng(seed, "init", counter++);
      std::vector<Real> w(shape_size(shape));
      for (auto& x : w) x = static_cast<Real>(stdev * rng.normal());
      return Tensor<Real>::parameter(std::move(shape), std::move(w));
    };
    auto filled = [](Shape shape, Real v) {
      return Tensor<Real>::parameter(shape, std::vector<Real>(shape_size(shape), v));
    };
    auto linear = [&](std::size_t in, std::size_t out) { return Linear<Real>{xavier(in, out), filled({out}, Real(0))}; };

    patch_ = linear(P, C);
    pos_ = normal({N, C}, 0.02);
    time_mlp_ = {linear(C, C), linear(C, C)};
    phi_mlp_ = {linear(C, C), linear(C, C)};
    if (cfg_.s2_features > 0) s2_mlp_ = {linear(cfg_.s2_features, C), linear(C, C)};
    null_ = normal({C}, 0.02);
    blocks_.clear();
    for (int i = 0; i < cfg_.depth; ++i) {
      BlockWeights<Real> b;
      b.ln1_scale = filled({C}, Real(1));
      b.ln1_shift = filled({C}, Real(0));
      b.qkv = linear(C, 3 * C);
      b.proj = linear(C, C);
      b.rel_bias = normal({E * E * E, std::size_t(cfg_.heads)}, 0.02);
      b.ln2_scale = filled({C}, Real(1));
      b.ln2_shift = filled({C}, Real(0));
      b.fc1 = linear(C, H);
      b.fc2 = linear(H, C);
      blocks_.push_back(std::move(b));
    }
    std::vector<Real> ada_bias(2 * C, Real(0));
    std::fill(ada_bias.begin(), ada_bias.begin() + static_cast<std::ptrdiff_t>(C), Real(1));
    ada_ = {filled({C, 2 * C}, Real(0)), Tensor<Real>::parameter({2 * C}, std::move(ada_bias))};
    out_ = zero_output ? Linear<Real>{filled({C, P}, Real(0)), filled({P}, Real(0))} : linear(C, P);
  }

  ModelConfig cfg_;
  AttentionLayout layout_;
  PorosityStats stats_;
  mutable std::shared_ptr<const std::vector<Real>> mask_;

  Linear<Real> patch_;
  Tensor<Real> pos_;
  ConditionMlp<Real> time_mlp_, phi_mlp_, s2_mlp_;
  Tensor<Real> null_;
  std::vector<BlockWeights<Real>> blocks_;
  Linear<Real> ada_, out_;
};

/// Copies parameter values between models of the same configuration
/// (e.g. a float model into a double one for gradient checks).
template <class To, class From>
void copy_parameters(Model<To>& dst, Model<From>& src) {
  auto d = dst.parameters();
  auto s = src.parameters();
  if (d.size() != s.size()) throw ValidationError("copy_parameters: parameter lists differ");
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto out = d[i].second->mutable_data();
    auto in = s[i].second->data();
    if (out.size() != in.size()) throw ValidationError("copy_parameters: size mismatch at " + d[i].first);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<To>(in[j]);
  }
  dst.porosity_stats() = src.porosity_stats();
}

/// Sampler adaptor: conditional logits, plus the guided combination with the
/// null-condition branch when guidance is active.
template <class Real>
Denoiser make_denoiser(const Model<Real>& model, Condition cond, GuidanceSpec guidance) {
  return [&model, cond, guidance](const SignedVolume& x_t, int model_t) {
    NoGradGuard no_grad;
    Condition c = cond;
    c.t = model_t;
    auto to_field = [&](const Tensor<Real>& t) {
      Field<float> f(x_t.dims);
      auto d = t.data();
      for (std::size_t i = 0; i < f.size(); ++i) f.values[i] = static_cast<float>(d[i]);
      return f;
    };
    Field<float> cond_logits = to_field(model.forward(x_t, c, false));
    if (!guidance.active()) return cond_logits;
    Field<float> uncond_logits = to_field(model.forward(x_t, c, true));
    return cfg_combine(uncond_logits, cond_logits, guidance);
  };
}

}  // namespace poredit
