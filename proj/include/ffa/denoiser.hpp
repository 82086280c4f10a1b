// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Conditional noise predictor over concatenated (noisy target, source) latents.

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ffa/blocks.hpp"
#include "ffa/schedule.hpp"

namespace ffa {

struct EmbedderArch {
  std::vector<int> widths{16, 32, 64};  // stride-2 stages; the last width is the token dimension
  int grid = 4;                         // tokens = grid * grid
  std::uint64_t seed = 0xc0de5eedull;

  int token_dim() const { return widths.back(); }
  int tokens() const { return grid * grid; }
};

/// Fixed, seeded conv encoder producing [N, tokens, token_dim] conditioning sequences.
template <typename T>
class SourceEmbedder {
 public:
  explicit SourceEmbedder(const EmbedderArch& arch = {}, int image_channels = 3);
  Var<T> operator()(const Var<T>& images) const;
  Tensor<T> embed(const Tensor<T>& images) const;
  const EmbedderArch& arch() const noexcept { return arch_; }
  ParamSet<T>& params() noexcept { return ps_; }
  const ParamSet<T>& params() const noexcept { return ps_; }

 private:
  EmbedderArch arch_;
  ParamSet<T> ps_{"embedder"};
  std::vector<Conv2d<T>> stages_;
};

struct UNetArch {
  int latent_channels = 4;
  std::vector<int> widths{64, 128};  // one per resolution level
  int res_blocks = 2;
  int attention_from_level = 1;      // levels >= this carry transformer blocks
  int head_dim = 32;
  int time_dim = 128;
  int context_dim = 64;
  int groups = 8;
  bool use_concat = true;
  bool use_cross_attention = true;

  int input_channels() const { return use_concat ? 2 * latent_channels : latent_channels; }
  void validate() const;
};

/// Sinusoidal features [N, dim] (cos half, then sin half).
template <typename T>
Tensor<T> timestep_features(const std::vector<int>& t, int dim);

template <typename T>
struct TransformerBlock {
  LayerNorm<T> norm_self, norm_cross, norm_ff;
  Linear<T> q_self, k_self, v_self, o_self;
  Linear<T> q_cross, k_cross, v_cross, o_cross;
  Linear<T> ff_in, ff_out;
  int heads = 1;
  bool cross = false;

  TransformerBlock() = default;
  TransformerBlock(ParamSet<T>& ps, const std::string& name, int channels, int context_dim, int heads_, bool cross_,
                   Rng& rng);
  /// x: [N, C, H, W]; context: [N, K, context_dim] (ignored without cross-attention).
  Var<T> operator()(const Var<T>& x, const Var<T>& context) const;
};

template <typename T>
class UNet {
 public:
  using V = Var<T>;

  UNet(const UNetArch& arch, std::uint64_t seed);
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;
  UNet(UNet&&) = default;

  const UNetArch& arch() const noexcept { return arch_; }
  ParamSet<T>& params() noexcept { return ps_; }
  const ParamSet<T>& params() const noexcept { return ps_; }

  /// z_t, z_source: [N, Dz, h, w]; context: [N, K, D_f]. Returns predicted noise shaped like z_t.
  V operator()(const V& z_t, const V& z_source, const std::vector<int>& t, const V& context) const;
  /// First-layer activations (after the input projection).
  V input_features(const V& z_t, const V& z_source) const;

  /// Copies every parameter of a single-input model and widens its input projection so that
  /// this model on (z, z) reproduces `single` on z.
  void init_from_single(const UNet& single);

 private:
  V join_inputs(const V& z_t, const V& z_source) const;

  UNetArch arch_;
  ParamSet<T> ps_{"denoiser"};
  Linear<T> time_fc1_, time_fc2_;
  Conv2d<T> conv_in_;
  struct Level {
    std::vector<ResBlock<T>> down, up;
    std::vector<TransformerBlock<T>> down_attn, up_attn;
    Conv2d<T> downsample, upsample;
  };
  std::vector<Level> levels_;
  ResBlock<T> mid1_, mid2_;
  TransformerBlock<T> mid_attn_;
  bool has_mid_attn_ = false;
  GroupNorm<T> norm_out_;
  Conv2d<T> conv_out_;
};

/// [O, C, k, k] -> [O, 2C, k, k] as (W / 2, W / 2) along the input-channel dimension.
template <typename T>
Tensor<T> expand_input_projection(const Tensor<T>& weight);

template <typename T>
using NoisePredictor = std::function<Var<T>(const Var<T>& z_t, const Var<T>& z_source, const std::vector<int>& t,
                                            const Var<T>& context)>;

template <typename T>
NoisePredictor<T> as_predictor(const UNet<T>& net) {
  return [&net](const Var<T>& z, const Var<T>& s, const std::vector<int>& t, const Var<T>& c) { return net(z, s, t, c); };
}

template <typename T>
struct Stage1Batch {
  Tensor<T> target_latents;  // [N, Dz, h, w]
  Tensor<T> source_latents;  // [N, Dz, h, w]
  Tensor<T> context;         // [N, K, D_f]
};

/// Mean squared error between the given noise and the prediction at the given timesteps.
template <typename T>
Var<T> stage1_loss_at(const NoisePredictor<T>& model, const Stage1Batch<T>& batch, const NoiseSchedule& schedule,
                      const std::vector<int>& t, const Tensor<T>& noise);

/// Draws t ~ U{1..T} per item, then composite noise, then applies stage1_loss_at.
template <typename T>
Var<T> stage1_loss(const NoisePredictor<T>& model, const Stage1Batch<T>& batch, const NoiseSchedule& schedule,
                   const OffsetNoiseParams& offset, Rng& rng);

}  // namespace ffa
