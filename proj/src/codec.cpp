// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/codec.hpp"

#include <cmath>

namespace ffa {

template <typename T>
Codec<T>::Codec(const CodecArch& arch, std::uint64_t seed) : arch_(arch) {
  if (arch_.widths.empty()) throw ConfigError("codec: at least one width level required");
  if (arch_.latent_channels < 1) throw ConfigError("codec: latent_channels must be >= 1");
  Rng rng(seed);
  const auto& w = arch_.widths;
  const int levels = static_cast<int>(w.size());
  const int g = arch_.groups;

  enc_in_ = Conv2d<T>(enc_ps_, "in", arch_.image_channels, w[0], 3, 1, 1, rng);
  for (int i = 0; i < levels; ++i) {
    enc_blocks_.emplace_back(enc_ps_, "block" + std::to_string(i), w[i], w[i], 0, g, rng);
    if (i + 1 < levels) enc_down_.emplace_back(enc_ps_, "down" + std::to_string(i), w[i], w[i + 1], 3, 2, 1, rng);
  }
  enc_norm_ = GroupNorm<T>(enc_ps_, "norm_out", w.back(), g);
  enc_out_ = Conv2d<T>(enc_ps_, "out", w.back(), 2 * arch_.latent_channels, 3, 1, 1, rng);

  dec_in_ = Conv2d<T>(dec_ps_, "in", arch_.latent_channels, w.back(), 3, 1, 1, rng);
  dec_mid_ = ResBlock<T>(dec_ps_, "mid", w.back(), w.back(), 0, g, rng);
  for (int i = levels - 2; i >= 0; --i) {
    dec_up_.emplace_back(dec_ps_, "up" + std::to_string(i), w[i + 1], w[i], 3, 1, 1, rng);
    dec_blocks_.emplace_back(dec_ps_, "block" + std::to_string(i), w[i], w[i], 0, g, rng);
  }
  dec_norm_ = GroupNorm<T>(dec_ps_, "norm_out", w[0], g);
  dec_out_ = Conv2d<T>(dec_ps_, "out", w[0], arch_.image_channels, 3, 1, 1, rng);
}

template <typename T>
void Codec<T>::check_image(const Shape& s) const {
  const int f = arch_.downsample();
  if (s.size() != 4 || s[1] != arch_.image_channels)
    throw Error("codec: expected [N, " + std::to_string(arch_.image_channels) + ", H, W] images, got " + shape_str(s));
  if (s[2] % f || s[3] % f)
    throw Error("codec: image size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                " is not divisible by the downsample factor " + std::to_string(f));
}

template <typename T>
void Codec<T>::check_latent(const Shape& s) const {
  if (s.size() != 4 || s[1] != arch_.latent_channels)
    throw Error("codec: expected [N, " + std::to_string(arch_.latent_channels) + ", h, w] latents, got " + shape_str(s));
}

template <typename T>
typename Codec<T>::Posterior Codec<T>::encode_posterior(const V& images) const {
  using O = Ops<T>;
  check_image(images.shape());
  V h = enc_in_(O::add_scalar(images, T(-0.5)));
  for (std::size_t i = 0; i < enc_blocks_.size(); ++i) {
    h = enc_blocks_[i](h);
    if (i < enc_down_.size()) h = enc_down_[i](h);
  }
  h = enc_out_(O::silu(enc_norm_(h)));
  const int d = arch_.latent_channels;
  return {O::slice1(h, 0, d), O::clamp(O::slice1(h, d, d), T(-30), T(20))};
}

template <typename T>
Var<T> Codec<T>::encode(const V& images) const {
  return encode_posterior(images).mean;
}

template <typename T>
Tensor<T> Codec<T>::encode(const Tensor<T>& images) const {
  NoGradGuard ng;
  return encode(constant(images)).value();
}

template <typename T>
Var<T> Codec<T>::decode_raw(const V& latents) const {
  using O = Ops<T>;
  check_latent(latents.shape());
  V h = dec_mid_(dec_in_(latents));
  for (std::size_t i = 0; i < dec_up_.size(); ++i) {
    h = dec_up_[i](O::upsample_nearest(h, 2));
    h = dec_blocks_[i](h);
  }
  return O::add_scalar(dec_out_(O::silu(dec_norm_(h))), T(0.5));
}

template <typename T>
Var<T> Codec<T>::decode(const V& latents) const {
  return Ops<T>::clamp(decode_raw(latents), T(0), T(1));
}

template <typename T>
Tensor<T> Codec<T>::decode(const Tensor<T>& latents) const {
  NoGradGuard ng;
  return decode(constant(latents)).value();
}

template <typename T>
PatchDiscriminator<T>::PatchDiscriminator(const DiscriminatorArch& arch, int image_channels, std::uint64_t seed)
    : arch_(arch) {
  Rng rng(seed);
  int cin = image_channels;
  for (std::size_t i = 0; i < arch_.widths.size(); ++i) {
    convs_.emplace_back(ps_, "conv" + std::to_string(i), cin, arch_.widths[i], 3, 2, 1, rng);
    cin = arch_.widths[i];
  }
  head_ = Conv2d<T>(ps_, "head", cin, 1, 3, 1, 1, rng);
}

template <typename T>
Var<T> PatchDiscriminator<T>::operator()(const Var<T>& images) const {
  using O = Ops<T>;
  Var<T> h = O::add_scalar(images, T(-0.5));
  for (const auto& c : convs_) h = O::silu(c(h));
  return head_(h);
}

template <typename T>
FeatureExtractor<T>::FeatureExtractor(const ExtractorArch& arch, int image_channels) : arch_(arch) {
  Rng rng(arch_.seed);
  int cin = image_channels;
  for (std::size_t i = 0; i < arch_.widths.size(); ++i) {
    // He-uniform bound keeps activations O(1) through the random stack.
    stages_.emplace_back(ps_, "stage" + std::to_string(i), cin, arch_.widths[i], 3, i == 0 ? 1 : 2, 1, rng,
                         std::sqrt(6.0));
    cin = arch_.widths[i];
  }
  ps_.set_trainable(false);
}

template <typename T>
std::vector<Var<T>> FeatureExtractor<T>::features(const Var<T>& images) const {
  using O = Ops<T>;
  std::vector<Var<T>> out;
  Var<T> h = O::scale(O::add_scalar(images, T(-0.5)), T(2));
  for (const auto& s : stages_) {
    h = O::silu(s(h));
    out.push_back(h);
  }
  return out;
}

template <typename T>
Tensor<T> FeatureExtractor<T>::pooled(const Tensor<T>& images) const {
  NoGradGuard ng;
  const auto feats = features(constant(images));
  const int n = images.dim(0);
  const int d = pooled_dim();
  Tensor<T> out({n, d});
  int off = 0;
  for (const auto& f : feats) {
    const auto p = Ops<T>::global_avg_pool(f).value();
    const int c = f.dim(1);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * d + off + j] = p[static_cast<std::size_t>(i) * c + j];
    off += c;
  }
  return out;
}

template <typename T>
int FeatureExtractor<T>::pooled_dim() const {
  int d = 0;
  for (int w : arch_.widths) d += w;
  return d;
}

void Stage2LossWeights::validate() const {
  if (!(std::isfinite(lambda_perceptual) && lambda_perceptual >= 0) ||
      !(std::isfinite(lambda_adversarial) && lambda_adversarial >= 0))
    throw ConfigError("stage-2 loss weights must be finite and non-negative");
}

template <typename T>
Var<T> reconstruction_loss(const Var<T>& pred, const Var<T>& target) {
  return Ops<T>::l1(pred, target);
}

template <typename T>
Var<T> perceptual_loss(const Var<T>& pred, const Var<T>& target, const FeatureExtractor<T>& extractor) {
  using O = Ops<T>;
  if (pred.shape() != target.shape())
    throw Error("perceptual_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const auto fp = extractor.features(pred);
  const auto ft = extractor.features(target);
  Var<T> total;
  for (std::size_t i = 0; i < fp.size(); ++i) {
    const T channels = static_cast<T>(fp[i].dim(1));
    Var<T> d = O::scale(O::mse(O::channel_normalize(fp[i], T(1e-10)), O::channel_normalize(ft[i], T(1e-10))), channels);
    total = total.defined() ? O::add(total, d) : d;
  }
  return total;
}

template <typename T>
AdversarialTerms<T> adversarial_losses(const Var<T>& pred, const Var<T>& target, const PatchDiscriminator<T>& disc) {
  using O = Ops<T>;
  if (pred.shape() != target.shape()) throw Error("adversarial_losses: shape mismatch");
  const Var<T> d_fake = disc(pred);
  const Var<T> d_real = disc(target);
  AdversarialTerms<T> out;
  out.generator = O::scale(O::mean(d_fake), T(-1));
  out.discriminator = O::add(O::mean(O::relu(O::add_scalar(O::scale(d_real, T(-1)), T(1)))),
                             O::mean(O::relu(O::add_scalar(d_fake, T(1)))));
  return out;
}

template <typename T>
Var<T> stage2_loss(const Var<T>& pred, const Var<T>& target, const Stage2LossWeights& weights,
                   const FeatureExtractor<T>& extractor, const PatchDiscriminator<T>& disc) {
  using O = Ops<T>;
  weights.validate();
  Var<T> loss = reconstruction_loss(pred, target);
  if (weights.lambda_perceptual > 0)
    loss = O::add(loss, O::scale(perceptual_loss(pred, target, extractor), static_cast<T>(weights.lambda_perceptual)));
  if (weights.lambda_adversarial > 0) {
    const Var<T> gen = O::scale(O::mean(disc(pred)), T(-1));
    loss = O::add(loss, O::scale(gen, static_cast<T>(weights.lambda_adversarial)));
  }
  return loss;
}

#define FFA_INSTANTIATE_CODEC(T)                                                                              \
  template class Codec<T>;                                                                                    \
  template class PatchDiscriminator<T>;                                                                       \
  template class FeatureExtractor<T>;                                                                         \
  template Var<T> reconstruction_loss<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> perceptual_loss<T>(const Var<T>&, const Var<T>&, const FeatureExtractor<T>&);               \
  template AdversarialTerms<T> adversarial_losses<T>(const Var<T>&, const Var<T>&, const PatchDiscriminator<T>&); \
  template Var<T> stage2_loss<T>(const Var<T>&, const Var<T>&, const Stage2LossWeights&, const FeatureExtractor<T>&, \
                                 const PatchDiscriminator<T>&);

FFA_INSTANTIATE_CODEC(float)
FFA_INSTANTIATE_CODEC(double)

}  // namespace ffa
