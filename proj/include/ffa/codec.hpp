// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Image autoencoder defining the shared latent space, the patch discriminator, the frozen
// feature extractor used for perceptual distances, and the decoder fine-tuning losses.

#pragma once

#include <cstdint>
#include <vector>

#include "ffa/blocks.hpp"

namespace ffa {

struct CodecArch {
  int image_channels = 3;
  int latent_channels = 4;
  /// One width per resolution level; each level after the first halves the spatial size.
  std::vector<int> widths{16, 32, 64};
  int groups = 8;

  int downsample() const { return 1 << (static_cast<int>(widths.size()) - 1); }
};

/// Latents are NCHW tensors [N, latent_channels, H / f, W / f].
template <typename T>
class Codec {
 public:
  using V = Var<T>;

  Codec(const CodecArch& arch, std::uint64_t seed);

  const CodecArch& arch() const noexcept { return arch_; }
  ParamSet<T>& encoder_params() noexcept { return enc_ps_; }
  ParamSet<T>& decoder_params() noexcept { return dec_ps_; }
  const ParamSet<T>& encoder_params() const noexcept { return enc_ps_; }
  const ParamSet<T>& decoder_params() const noexcept { return dec_ps_; }

  struct Posterior {
    V mean;
    V logvar;
  };
  Posterior encode_posterior(const V& images) const;
  /// Posterior mode; no sampling.
  V encode(const V& images) const;
  Tensor<T> encode(const Tensor<T>& images) const;

  /// Unclamped decoder output; training losses are computed on this.
  V decode_raw(const V& latents) const;
  /// Decoder output clamped to [0, 1].
  V decode(const V& latents) const;
  Tensor<T> decode(const Tensor<T>& latents) const;

 private:
  void check_image(const Shape& s) const;
  void check_latent(const Shape& s) const;

  CodecArch arch_;
  ParamSet<T> enc_ps_{"encoder"};
  ParamSet<T> dec_ps_{"decoder"};

  Conv2d<T> enc_in_;
  std::vector<ResBlock<T>> enc_blocks_;
  std::vector<Conv2d<T>> enc_down_;
  GroupNorm<T> enc_norm_;
  Conv2d<T> enc_out_;

  Conv2d<T> dec_in_;
  ResBlock<T> dec_mid_;
  std::vector<Conv2d<T>> dec_up_;
  std::vector<ResBlock<T>> dec_blocks_;
  GroupNorm<T> dec_norm_;
  Conv2d<T> dec_out_;
};

struct DiscriminatorArch {
  std::vector<int> widths{16, 32};
};

/// Strided convolutional classifier emitting a score map (one logit per receptive patch).
template <typename T>
class PatchDiscriminator {
 public:
  PatchDiscriminator(const DiscriminatorArch& arch, int image_channels, std::uint64_t seed);
  Var<T> operator()(const Var<T>& images) const;
  ParamSet<T>& params() noexcept { return ps_; }
  const ParamSet<T>& params() const noexcept { return ps_; }
  const DiscriminatorArch& arch() const noexcept { return arch_; }

 private:
  DiscriminatorArch arch_;
  ParamSet<T> ps_{"discriminator"};
  std::vector<Conv2d<T>> convs_;
  Conv2d<T> head_;
};

struct ExtractorArch {
  std::vector<int> widths{16, 32, 64};
  std::uint64_t seed = 0x5eed0fea7ull;
};

/// Fixed, seeded convolutional feature stack. Never trained.
template <typename T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(const ExtractorArch& arch = {}, int image_channels = 3);
  /// Per-stage SiLU feature maps of images shifted to zero mean range.
  std::vector<Var<T>> features(const Var<T>& images) const;
  /// Concatenated spatial means of all stages: [N, sum(widths)].
  Tensor<T> pooled(const Tensor<T>& images) const;
  int pooled_dim() const;
  const ParamSet<T>& params() const noexcept { return ps_; }

 private:
  ExtractorArch arch_;
  ParamSet<T> ps_{"extractor"};
  std::vector<Conv2d<T>> stages_;
};

struct Stage2LossWeights {
  double lambda_perceptual = 1.0;
  double lambda_adversarial = 0.1;
  void validate() const;
};

/// Mean absolute error.
template <typename T>
Var<T> reconstruction_loss(const Var<T>& pred, const Var<T>& target);

/// Sum over extractor stages of the mean (over positions) squared distance between
/// channel-normalized feature vectors.
template <typename T>
Var<T> perceptual_loss(const Var<T>& pred, const Var<T>& target, const FeatureExtractor<T>& extractor);

template <typename T>
struct AdversarialTerms {
  Var<T> generator;      // -mean(D(pred))
  Var<T> discriminator;  // mean(relu(1 - D(target))) + mean(relu(1 + D(pred)))
};

template <typename T>
AdversarialTerms<T> adversarial_losses(const Var<T>& pred, const Var<T>& target, const PatchDiscriminator<T>& disc);

/// L_recon + lambda_p * L_perceptual + lambda_a * generator term.
template <typename T>
Var<T> stage2_loss(const Var<T>& pred, const Var<T>& target, const Stage2LossWeights& weights,
                   const FeatureExtractor<T>& extractor, const PatchDiscriminator<T>& disc);

}  // namespace ffa
