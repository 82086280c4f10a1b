// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "ffa/image.hpp"
#include "ffa/nn.hpp"

namespace ffa {

template <typename T>
class Codec;

enum class ScheduleKind { kLinear };

/// Tables are indexed by timestep t = 0..T; entry 0 encodes the clean state (alpha_bar = 1).
struct NoiseSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::kLinear;
  double beta_start = 0;
  double beta_end = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double alpha_bar_at(int t) const;
};

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::kLinear);

/// Evenly spaced, strictly decreasing timesteps from start_t down to 0 (inclusive), count + 1 entries.
std::vector<int> ddim_timesteps(int start_t, int count);

enum class OffsetGranularity { kChannel, kScalar };
OffsetGranularity parse_granularity(const std::string& s);

/// Where the offset statistics are measured. Pixel statistics are a single grey-level mean / std.
enum class OffsetSpace { kLatent, kPixel };
OffsetSpace parse_offset_space(const std::string& s);

struct OffsetNoiseParams {
  std::vector<double> mu;     // per latent channel
  std::vector<double> sigma;  // per latent channel
  double lambda = 0.1;

  void validate() const;
};

/// Population mean / std per channel (or over all channels when granularity is scalar) of
/// [N, C, H, W] latents. lambda is left at its default.
template <typename T>
OffsetNoiseParams offset_stats_from_latents(const Tensor<T>& latents, OffsetGranularity granularity);

/// Encodes every target image and measures its latent statistics.
template <typename T>
OffsetNoiseParams estimate_offset_stats(const std::vector<Image>& targets, const Codec<T>& codec, double latent_scale,
                                        OffsetGranularity granularity);

/// mu + sigma * Z, Z ~ N(0, I), broadcast per channel (dimension 1).
template <typename T>
Tensor<T> offset_noise(const OffsetNoiseParams& params, const Shape& shape, Rng& rng);

/// Z + lambda * offset.
template <typename T>
Tensor<T> composite_noise(const Tensor<T>& z, const Tensor<T>& offset, double lambda);

/// Draws Z, then an independent offset sample, and combines them.
template <typename T>
Tensor<T> sample_composite_noise(const OffsetNoiseParams& params, const Shape& shape, Rng& rng);

/// sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise, with one timestep per batch item.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, const std::vector<int>& t, const Tensor<T>& noise, const NoiseSchedule& schedule);

template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& noise, const NoiseSchedule& schedule);

/// Deterministic (eta = 0) step from t to t_prev < t.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev, const NoiseSchedule& schedule);

}  // namespace ffa
