// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/schedule.hpp"

#include <cmath>

#include "ffa/codec.hpp"

namespace ffa {

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t < 0 || t > steps) throw Error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
  return alpha_bar[static_cast<std::size_t>(t)];
}

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind) {
  if (steps < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.kind = kind;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  s.alpha.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  s.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_start + frac * (beta_end - beta_start);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
  }
  return s;
}

std::vector<int> ddim_timesteps(int start_t, int count) {
  if (start_t < 1 || count < 1) throw ConfigError("ddim: need start_t >= 1 and at least one step");
  if (count > start_t) count = start_t;
  std::vector<int> ts;
  for (int k = 0; k <= count; ++k)
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(start_t) * (count - k) / count)));
  return ts;
}

OffsetGranularity parse_granularity(const std::string& s) {
  if (s == "channel") return OffsetGranularity::kChannel;
  if (s == "scalar") return OffsetGranularity::kScalar;
  throw ConfigError("offset granularity must be channel|scalar, got '" + s + "'");
}

OffsetSpace parse_offset_space(const std::string& s) {
  if (s == "latent") return OffsetSpace::kLatent;
  if (s == "pixel") return OffsetSpace::kPixel;
  throw ConfigError("offset space must be latent|pixel, got '" + s + "'");
}

void OffsetNoiseParams::validate() const {
  if (mu.size() != sigma.size() || mu.empty()) throw Error("offset noise: mu/sigma length mismatch");
  for (std::size_t i = 0; i < mu.size(); ++i)
    if (!std::isfinite(mu[i]) || !std::isfinite(sigma[i]) || sigma[i] < 0)
      throw Error("offset noise: statistics must be finite with sigma >= 0");
  if (!std::isfinite(lambda) || lambda < 0) throw Error("offset noise: lambda must be finite and >= 0");
}

template <typename T>
OffsetNoiseParams offset_stats_from_latents(const Tensor<T>& latents, OffsetGranularity granularity) {
  if (latents.rank() != 4 || latents.empty()) throw Error("offset stats: expected nonempty [N, C, H, W] latents");
  const int n = latents.dim(0), c = latents.dim(1);
  const std::size_t hw = static_cast<std::size_t>(latents.dim(2)) * latents.dim(3);
  std::vector<double> s(static_cast<std::size_t>(c), 0.0), s2(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const double v = latents[(static_cast<std::size_t>(i) * c + ch) * hw + p];
        s[static_cast<std::size_t>(ch)] += v;
        s2[static_cast<std::size_t>(ch)] += v * v;
      }
  OffsetNoiseParams out;
  if (granularity == OffsetGranularity::kChannel) {
    const double cnt = static_cast<double>(n) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const double m = s[static_cast<std::size_t>(ch)] / cnt;
      out.mu.push_back(m);
      out.sigma.push_back(std::sqrt(std::max(0.0, s2[static_cast<std::size_t>(ch)] / cnt - m * m)));
    }
  } else {
    const double cnt = static_cast<double>(n) * hw * c;
    double ts = 0, ts2 = 0;
    for (int ch = 0; ch < c; ++ch) {
      ts += s[static_cast<std::size_t>(ch)];
      ts2 += s2[static_cast<std::size_t>(ch)];
    }
    const double m = ts / cnt;
    out.mu.assign(static_cast<std::size_t>(c), m);
    out.sigma.assign(static_cast<std::size_t>(c), std::sqrt(std::max(0.0, ts2 / cnt - m * m)));
  }
  return out;
}

template <typename T>
OffsetNoiseParams estimate_offset_stats(const std::vector<Image>& targets, const Codec<T>& codec, double latent_scale,
                                        OffsetGranularity granularity) {
  if (targets.empty()) throw Error("estimate_offset_stats: no target images");
  std::vector<Tensor<T>> parts;
  int total = 0;
  for (const auto& img : targets) {
    Tensor<T> z = codec.encode(images_to_tensor<T>(std::span<const Image>(&img, 1)));
    for (auto& v : z.vec()) v = static_cast<T>(v * latent_scale);
    total += z.dim(0);
    parts.push_back(std::move(z));
  }
  Shape s = parts.front().shape();
  s[0] = total;
  Tensor<T> all(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    if (p.dim(1) != s[1] || p.dim(2) != s[2] || p.dim(3) != s[3])
      throw Error("estimate_offset_stats: all target images must share one size");
    std::copy(p.vec().begin(), p.vec().end(), all.vec().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  return offset_stats_from_latents(all, granularity);
}

template <typename T>
Tensor<T> offset_noise(const OffsetNoiseParams& params, const Shape& shape, Rng& rng) {
  if (shape.size() < 2 || static_cast<std::size_t>(shape[1]) != params.mu.size())
    throw Error("offset_noise: shape " + shape_str(shape) + " does not match " + std::to_string(params.mu.size()) +
                " offset channels");
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor<T> out(shape);
  const int n = shape[0], c = shape[1];
  const std::size_t inner = out.size() / (static_cast<std::size_t>(n) * c);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double m = params.mu[static_cast<std::size_t>(ch)], sd = params.sigma[static_cast<std::size_t>(ch)];
      T* p = out.data() + (static_cast<std::size_t>(i) * c + ch) * inner;
      for (std::size_t k = 0; k < inner; ++k) p[k] = static_cast<T>(m + sd * nd(rng));
    }
  return out;
}

template <typename T>
Tensor<T> composite_noise(const Tensor<T>& z, const Tensor<T>& offset, double lambda) {
  if (z.shape() != offset.shape())
    throw Error("composite_noise: shape mismatch " + shape_str(z.shape()) + " vs " + shape_str(offset.shape()));
  Tensor<T> out = z;
  const T l = static_cast<T>(lambda);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += l * offset[i];
  return out;
}

template <typename T>
Tensor<T> sample_composite_noise(const OffsetNoiseParams& params, const Shape& shape, Rng& rng) {
  Tensor<T> z = normal_tensor<T>(shape, 1.0, rng);
  if (params.lambda == 0.0) return z;
  return composite_noise(z, offset_noise<T>(params, shape, rng), params.lambda);
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, const std::vector<int>& t, const Tensor<T>& noise, const NoiseSchedule& schedule) {
  if (z0.shape() != noise.shape()) throw Error("q_sample: shape mismatch");
  if (z0.rank() < 1 || static_cast<int>(t.size()) != z0.dim(0)) throw Error("q_sample: one timestep per batch item");
  Tensor<T> out(z0.shape());
  const std::size_t inner = z0.size() / t.size();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 1 || t[i] > schedule.steps)
      throw Error("q_sample: timestep " + std::to_string(t[i]) + " outside [1, " + std::to_string(schedule.steps) + "]");
    const double ab = schedule.alpha_bar[static_cast<std::size_t>(t[i])];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t k = i * inner; k < (i + 1) * inner; ++k)
      out[k] = static_cast<T>(a * static_cast<double>(z0[k]) + b * static_cast<double>(noise[k]));
  }
  return out;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& noise, const NoiseSchedule& schedule) {
  return q_sample(z0, std::vector<int>(static_cast<std::size_t>(z0.dim(0)), t), noise, schedule);
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev, const NoiseSchedule& schedule) {
  if (t_prev >= t) throw Error("ddim_step: t_prev must be smaller than t");
  if (z_t.shape() != eps_pred.shape()) throw Error("ddim_step: shape mismatch");
  const double ab = schedule.alpha_bar_at(t), ab_prev = schedule.alpha_bar_at(t_prev);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const double sa_prev = std::sqrt(ab_prev), sb_prev = std::sqrt(1.0 - ab_prev);
  Tensor<T> out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps = eps_pred[i];
    const double x0 = (static_cast<double>(z_t[i]) - sb * eps) / sa;
    out[i] = static_cast<T>(sa_prev * x0 + sb_prev * eps);
  }
  return out;
}

#define FFA_INSTANTIATE_SCHEDULE(T)                                                                                 \
  template OffsetNoiseParams offset_stats_from_latents<T>(const Tensor<T>&, OffsetGranularity);                      \
  template OffsetNoiseParams estimate_offset_stats<T>(const std::vector<Image>&, const Codec<T>&, double,            \
                                                      OffsetGranularity);                                           \
  template Tensor<T> offset_noise<T>(const OffsetNoiseParams&, const Shape&, Rng&);                                 \
  template Tensor<T> composite_noise<T>(const Tensor<T>&, const Tensor<T>&, double);                                \
  template Tensor<T> sample_composite_noise<T>(const OffsetNoiseParams&, const Shape&, Rng&);                       \
  template Tensor<T> q_sample<T>(const Tensor<T>&, const std::vector<int>&, const Tensor<T>&, const NoiseSchedule&); \
  template Tensor<T> q_sample<T>(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);                    \
  template Tensor<T> ddim_step<T>(const Tensor<T>&, const Tensor<T>&, int, int, const NoiseSchedule&);

FFA_INSTANTIATE_SCHEDULE(float)
FFA_INSTANTIATE_SCHEDULE(double)

}  // namespace ffa
