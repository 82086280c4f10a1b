// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/denoiser.hpp"

#include <cmath>

namespace ffa {

template <typename T>
SourceEmbedder<T>::SourceEmbedder(const EmbedderArch& arch, int image_channels) : arch_(arch) {
  if (arch_.widths.empty() || arch_.grid < 1) throw ConfigError("embedder: need at least one stage and grid >= 1");
  Rng rng(arch_.seed);
  int cin = image_channels;
  for (std::size_t i = 0; i < arch_.widths.size(); ++i) {
    stages_.emplace_back(ps_, "stage" + std::to_string(i), cin, arch_.widths[i], 3, 2, 1, rng, std::sqrt(6.0));
    cin = arch_.widths[i];
  }
  ps_.set_trainable(false);
}

template <typename T>
Var<T> SourceEmbedder<T>::operator()(const Var<T>& images) const {
  using O = Ops<T>;
  if (images.shape().size() != 4) throw Error("embedder: expected NCHW images, got " + shape_str(images.shape()));
  Var<T> h = O::scale(O::add_scalar(images, T(-0.5)), T(2));
  for (const auto& s : stages_) h = O::silu(s(h));
  const int hh = h.dim(2), ww = h.dim(3);
  if (hh != ww || hh % arch_.grid)
    throw Error("embedder: feature map " + std::to_string(hh) + "x" + std::to_string(ww) +
                " cannot be pooled to a " + std::to_string(arch_.grid) + "x" + std::to_string(arch_.grid) + " grid");
  if (hh != arch_.grid) h = O::avg_pool(h, hh / arch_.grid);
  return O::layer_norm(O::to_tokens(h), Var<T>(), Var<T>(), T(1e-5));
}

template <typename T>
Tensor<T> SourceEmbedder<T>::embed(const Tensor<T>& images) const {
  NoGradGuard ng;
  return (*this)(constant(images)).value();
}

void UNetArch::validate() const {
  if (latent_channels < 1 || widths.empty() || res_blocks < 1 || time_dim < 2 || time_dim % 2 || context_dim < 1 ||
      head_dim < 1)
    throw ConfigError("unet: invalid architecture");
  for (int w : widths)
    if (w < 1 || w % head_dim) throw ConfigError("unet: widths must be positive multiples of head_dim");
}

template <typename T>
Tensor<T> timestep_features(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  Tensor<T> out({static_cast<int>(t.size()), dim});
  for (std::size_t n = 0; n < t.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double a = t[n] * freq;
      out[n * dim + i] = static_cast<T>(std::cos(a));
      out[n * dim + half + i] = static_cast<T>(std::sin(a));
    }
  return out;
}

template <typename T>
TransformerBlock<T>::TransformerBlock(ParamSet<T>& ps, const std::string& name, int channels, int context_dim,
                                      int heads_, bool cross_, Rng& rng)
    : heads(heads_), cross(cross_) {
  const int c = channels;
  norm_self = LayerNorm<T>(ps, name + ".norm_self", c);
  q_self = Linear<T>(ps, name + ".q_self", c, c, rng, false);
  k_self = Linear<T>(ps, name + ".k_self", c, c, rng, false);
  v_self = Linear<T>(ps, name + ".v_self", c, c, rng, false);
  o_self = Linear<T>(ps, name + ".o_self", c, c, rng);
  if (cross) {
    norm_cross = LayerNorm<T>(ps, name + ".norm_cross", c);
    q_cross = Linear<T>(ps, name + ".q_cross", c, c, rng, false);
    k_cross = Linear<T>(ps, name + ".k_cross", context_dim, c, rng, false);
    v_cross = Linear<T>(ps, name + ".v_cross", context_dim, c, rng, false);
    o_cross = Linear<T>(ps, name + ".o_cross", c, c, rng);
  }
  norm_ff = LayerNorm<T>(ps, name + ".norm_ff", c);
  ff_in = Linear<T>(ps, name + ".ff_in", c, 2 * c, rng);
  ff_out = Linear<T>(ps, name + ".ff_out", 2 * c, c, rng);
}

template <typename T>
Var<T> TransformerBlock<T>::operator()(const Var<T>& x, const Var<T>& context) const {
  using O = Ops<T>;
  const int h = x.dim(2), w = x.dim(3);
  Var<T> s = O::to_tokens(x);
  Var<T> a = norm_self(s);
  s = O::add(s, o_self(O::attention(q_self(a), k_self(a), v_self(a), heads)));
  if (cross) {
    a = norm_cross(s);
    s = O::add(s, o_cross(O::attention(q_cross(a), k_cross(context), v_cross(context), heads)));
  }
  a = norm_ff(s);
  s = O::add(s, ff_out(O::silu(ff_in(a))));
  return O::from_tokens(s, h, w);
}

template <typename T>
UNet<T>::UNet(const UNetArch& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  Rng rng(seed);
  const auto& w = arch_.widths;
  const int nlev = static_cast<int>(w.size());
  const int temb = 2 * arch_.time_dim;
  const int g = arch_.groups;
  const bool cross = arch_.use_cross_attention;
  const int ctx = arch_.context_dim;

  time_fc1_ = Linear<T>(ps_, "time.fc1", arch_.time_dim, temb, rng);
  time_fc2_ = Linear<T>(ps_, "time.fc2", temb, temb, rng);
  conv_in_ = Conv2d<T>(ps_, "conv_in", arch_.input_channels(), w[0], 3, 1, 1, rng);

  levels_.resize(static_cast<std::size_t>(nlev));
  for (int l = 0; l < nlev; ++l) {
    auto& lv = levels_[static_cast<std::size_t>(l)];
    const std::string p = "down" + std::to_string(l);
    const bool attn = l >= arch_.attention_from_level;
    for (int b = 0; b < arch_.res_blocks; ++b) {
      lv.down.emplace_back(ps_, p + ".res" + std::to_string(b), w[l], w[l], temb, g, rng);
      if (attn) lv.down_attn.emplace_back(ps_, p + ".attn" + std::to_string(b), w[l], ctx, w[l] / arch_.head_dim, cross, rng);
    }
    if (l + 1 < nlev) lv.downsample = Conv2d<T>(ps_, p + ".downsample", w[l], w[l + 1], 3, 2, 1, rng);
  }
  const int wl = w.back();
  mid1_ = ResBlock<T>(ps_, "mid.res0", wl, wl, temb, g, rng);
  has_mid_attn_ = nlev - 1 >= arch_.attention_from_level;
  if (has_mid_attn_)
    mid_attn_ = TransformerBlock<T>(ps_, "mid.attn", wl, ctx, wl / arch_.head_dim, cross, rng);
  mid2_ = ResBlock<T>(ps_, "mid.res1", wl, wl, temb, g, rng);
  for (int l = nlev - 1; l >= 0; --l) {
    auto& lv = levels_[static_cast<std::size_t>(l)];
    const std::string p = "up" + std::to_string(l);
    const bool attn = l >= arch_.attention_from_level;
    for (int b = 0; b < arch_.res_blocks; ++b) {
      lv.up.emplace_back(ps_, p + ".res" + std::to_string(b), 2 * w[l], w[l], temb, g, rng);
      if (attn) lv.up_attn.emplace_back(ps_, p + ".attn" + std::to_string(b), w[l], ctx, w[l] / arch_.head_dim, cross, rng);
    }
    if (l > 0) lv.upsample = Conv2d<T>(ps_, p + ".upsample", w[l], w[l - 1], 3, 1, 1, rng);
  }
  norm_out_ = GroupNorm<T>(ps_, "norm_out", w[0], g);
  conv_out_ = Conv2d<T>(ps_, "conv_out", w[0], arch_.latent_channels, 3, 1, 1, rng);
}

template <typename T>
Var<T> UNet<T>::join_inputs(const V& z_t, const V& z_source) const {
  const int dz = arch_.latent_channels;
  if (z_t.shape().size() != 4 || z_t.dim(1) != dz)
    throw Error("denoiser: expected [N, " + std::to_string(dz) + ", h, w] noisy latents, got " + shape_str(z_t.shape()));
  if (!arch_.use_concat) return z_t;
  if (z_source.shape() != z_t.shape())
    throw Error("denoiser: source latents " + shape_str(z_source.shape()) + " do not match " + shape_str(z_t.shape()));
  return Ops<T>::concat1(z_t, z_source);
}

template <typename T>
Var<T> UNet<T>::input_features(const V& z_t, const V& z_source) const {
  return conv_in_(join_inputs(z_t, z_source));
}

template <typename T>
Var<T> UNet<T>::operator()(const V& z_t, const V& z_source, const std::vector<int>& t, const V& context) const {
  using O = Ops<T>;
  const int n = z_t.shape().empty() ? 0 : z_t.dim(0);
  if (static_cast<int>(t.size()) != n) throw Error("denoiser: one timestep per batch item required");
  for (int ti : t)
    if (ti < 0) throw Error("denoiser: negative timestep");
  const int down = 1 << (static_cast<int>(levels_.size()) - 1);
  if (z_t.shape().size() == 4 && (z_t.dim(2) % down || z_t.dim(3) % down))
    throw Error("denoiser: latent size must be divisible by " + std::to_string(down));
  if (arch_.use_cross_attention) {
    const auto& cs = context.shape();
    if (!context.defined() || cs.size() != 3 || cs[0] != n || cs[2] != arch_.context_dim)
      throw Error("denoiser: context must be [N, K, " + std::to_string(arch_.context_dim) + "]");
  }

  const V temb = O::silu(time_fc2_(O::silu(time_fc1_(constant(timestep_features<T>(t, arch_.time_dim))))));
  V h = input_features(z_t, z_source);
  std::vector<V> skips;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const auto& lv = levels_[l];
    for (std::size_t b = 0; b < lv.down.size(); ++b) {
      h = lv.down[b](h, temb);
      if (!lv.down_attn.empty()) h = lv.down_attn[b](h, context);
      skips.push_back(h);
    }
    if (l + 1 < levels_.size()) h = lv.downsample(h);
  }
  h = mid1_(h, temb);
  if (has_mid_attn_) h = mid_attn_(h, context);
  h = mid2_(h, temb);
  for (std::size_t li = levels_.size(); li-- > 0;) {
    const auto& lv = levels_[li];
    for (std::size_t b = 0; b < lv.up.size(); ++b) {
      h = lv.up[b](O::concat1(h, skips.back()), temb);
      skips.pop_back();
      if (!lv.up_attn.empty()) h = lv.up_attn[b](h, context);
    }
    if (li > 0) h = lv.upsample(O::upsample_nearest(h, 2));
  }
  return conv_out_(O::silu(norm_out_(h)));
}

template <typename T>
Tensor<T> expand_input_projection(const Tensor<T>& weight) {
  if (weight.rank() != 4) throw Error("expand_input_projection: expected [O, C, k, k], got " + shape_str(weight.shape()));
  const int o = weight.dim(0), c = weight.dim(1);
  const std::size_t kk = static_cast<std::size_t>(weight.dim(2)) * weight.dim(3);
  Tensor<T> out({o, 2 * c, weight.dim(2), weight.dim(3)});
  for (int i = 0; i < o; ++i)
    for (int j = 0; j < c; ++j)
      for (std::size_t k = 0; k < kk; ++k) {
        const T half = weight[(static_cast<std::size_t>(i) * c + j) * kk + k] / T(2);
        out[(static_cast<std::size_t>(i) * 2 * c + j) * kk + k] = half;
        out[(static_cast<std::size_t>(i) * 2 * c + c + j) * kk + k] = half;
      }
  return out;
}

template <typename T>
void UNet<T>::init_from_single(const UNet& single) {
  if (single.arch_.use_concat || !arch_.use_concat)
    throw Error("init_from_single: source must be single-input and this model must concatenate");
  UNetArch probe = single.arch_;
  probe.use_concat = true;
  if (probe.widths != arch_.widths || probe.latent_channels != arch_.latent_channels ||
      probe.res_blocks != arch_.res_blocks || probe.use_cross_attention != arch_.use_cross_attention ||
      probe.time_dim != arch_.time_dim || probe.context_dim != arch_.context_dim ||
      probe.attention_from_level != arch_.attention_from_level || probe.head_dim != arch_.head_dim)
    throw Error("init_from_single: architectures differ beyond the input projection");
  for (auto& [name, v] : ps_) {
    const Tensor<T>& src = single.ps_.at(name).value();
    v.mutable_value() = name == "conv_in.weight" ? expand_input_projection(src) : src;
  }
}

template <typename T>
Var<T> stage1_loss_at(const NoisePredictor<T>& model, const Stage1Batch<T>& batch, const NoiseSchedule& schedule,
                      const std::vector<int>& t, const Tensor<T>& noise) {
  if (batch.target_latents.empty()) throw Error("stage1_loss: empty batch");
  const Tensor<T> z_t = q_sample(batch.target_latents, t, noise, schedule);
  const Var<T> pred = model(constant(z_t), constant(batch.source_latents), t, constant(batch.context));
  return Ops<T>::mse(pred, constant(noise));
}

template <typename T>
Var<T> stage1_loss(const NoisePredictor<T>& model, const Stage1Batch<T>& batch, const NoiseSchedule& schedule,
                   const OffsetNoiseParams& offset, Rng& rng) {
  if (batch.target_latents.empty()) throw Error("stage1_loss: empty batch");
  std::uniform_int_distribution<int> td(1, schedule.steps);
  std::vector<int> t(static_cast<std::size_t>(batch.target_latents.dim(0)));
  for (auto& ti : t) ti = td(rng);
  const Tensor<T> noise = sample_composite_noise<T>(offset, batch.target_latents.shape(), rng);
  return stage1_loss_at(model, batch, schedule, t, noise);
}

#define FFA_INSTANTIATE_DENOISER(T)                                                                            \
  template class SourceEmbedder<T>;                                                                            \
  template struct TransformerBlock<T>;                                                                         \
  template class UNet<T>;                                                                                      \
  template Tensor<T> timestep_features<T>(const std::vector<int>&, int);                                       \
  template Tensor<T> expand_input_projection<T>(const Tensor<T>&);                                             \
  template Var<T> stage1_loss_at<T>(const NoisePredictor<T>&, const Stage1Batch<T>&, const NoiseSchedule&,     \
                                    const std::vector<int>&, const Tensor<T>&);                                \
  template Var<T> stage1_loss<T>(const NoisePredictor<T>&, const Stage1Batch<T>&, const NoiseSchedule&,        \
                                 const OffsetNoiseParams&, Rng&);

FFA_INSTANTIATE_DENOISER(float)
FFA_INSTANTIATE_DENOISER(double)

}  // namespace ffa
