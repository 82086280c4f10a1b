// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Training stages, sampling and the checkpoint container.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ffa/config.hpp"

namespace ffa {

struct ModelBundle {
  Config config;
  std::unique_ptr<Codec<float>> codec;
  std::unique_ptr<UNet<float>> denoiser;
  std::unique_ptr<SourceEmbedder<float>> embedder;
  std::unique_ptr<PatchDiscriminator<float>> discriminator;
  NoiseSchedule schedule;
  OffsetNoiseParams offset;
  double latent_scale = 1.0;

  bool codec_trained = false;
  bool stage1_done = false;
  bool stage2_done = false;

  std::vector<double> codec_trace;
  std::vector<double> stage1_trace;
  std::vector<double> stage2_trace;           // mean training objective per epoch
  std::vector<double> stage2_heldout_recon;   // held-out reconstruction term, before training then per epoch

  /// encoder, decoder, denoiser, embedder, discriminator (in that order).
  std::vector<ParamSet<float>*> sets();
  std::vector<const ParamSet<float>*> sets() const;
  ParamSet<float>& set(const std::string& name);
  std::map<std::string, std::uint64_t> checksums() const;
};

/// Freshly initialized bundle; every component seed derives from config.train.seed.
ModelBundle make_bundle(const Config& cfg);

/// Progress sink; receives one line per log event.
using LogFn = std::function<void(const std::string&)>;

/// Called after every optimizer step; tests use it to tamper with frozen sets.
using StepHook = std::function<void(ModelBundle&, int step)>;

struct StageOptions {
  LogFn log;
  StepHook after_step;
};

/// Scaled source / target latents and source embeddings of a set of pairs.
struct EncodedPairs {
  Tensor<float> source_latents;
  Tensor<float> target_latents;
  Tensor<float> context;
};
EncodedPairs encode_pairs(const ModelBundle& bundle, const std::vector<ImagePair>& pairs);

/// Trains encoder + decoder on crops of both modalities, then fixes latent_scale and the
/// offset statistics (from the class-0 targets of `train`).
void pretrain_codec(ModelBundle& bundle, const std::vector<ImagePair>& train, const StageOptions& opt = {});

/// Offset statistics from the given target images under the bundle's configuration.
OffsetNoiseParams measure_offset(const ModelBundle& bundle, const std::vector<Image>& targets);

void train_stage1(ModelBundle& bundle, const std::vector<ImagePair>& train, const StageOptions& opt = {});

/// `heldout` (may be empty) only feeds the stage2_heldout_recon trace.
void train_stage2(ModelBundle& bundle, const std::vector<ImagePair>& train, const std::vector<ImagePair>& heldout = {},
                  const StageOptions& opt = {});

/// Mean stage-1 loss of the current denoiser over `draws` batches with a fixed seed.
double evaluate_stage1_loss(const ModelBundle& bundle, const std::vector<ImagePair>& pairs, int draws,
                            std::uint64_t seed);

/// Image i uses initial noise drawn from seed + i.
std::vector<Image> generate(const ModelBundle& bundle, const std::vector<Image>& sources, int steps,
                            std::uint64_t seed);
Image generate(const ModelBundle& bundle, const Image& source, int steps, std::uint64_t seed);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace ffa
