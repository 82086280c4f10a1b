// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Flat `key = value` run configuration. One key table drives parsing, echoing and the
// reference page, so every documented key round-trips.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ffa/codec.hpp"
#include "ffa/denoiser.hpp"
#include "ffa/dualmodal.hpp"
#include "ffa/imgdata.hpp"
#include "ffa/schedule.hpp"

namespace ffa {

struct CodecTrainConfig {
  int steps = 1500;
  double lr = 1e-3;
  int batch_size = 8;
  int crop = 32;  // pixel side of training crops; 0 trains on whole images
  double kl_weight = 1e-6;
};

enum class Stage2Mode { kShort, kFull };
Stage2Mode parse_stage2_mode(const std::string& s);
std::string stage2_mode_name(Stage2Mode m);

struct TrainConfig {
  AdamOptions adam;  // lr = 1e-4
  int batch_size = 6;
  int stage1_steps = 3000;
  int stage2_epochs = 20;
  std::uint64_t seed = 1234;
  int log_every = 100;
  int stage1_crop = 8;  // latent side of stage-1 training windows; 0 uses whole latents
  Stage2Mode stage2_mode = Stage2Mode::kShort;
  int chain_steps = 5;
  int start_t = 500;
  int stage2_variants = 2;  // decoder inputs prepared per training image

  void validate() const;
};

struct Config {
  DatasetSpec data;
  double train_frac = 0.7;
  BalanceTarget balance = BalanceTarget::kBoth;

  CodecArch codec;
  CodecTrainConfig codec_train;
  DiscriminatorArch discriminator;
  Stage2LossWeights loss;

  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  ScheduleKind schedule_kind = ScheduleKind::kLinear;
  int sample_steps = 50;

  double offset_lambda = 0.1;
  OffsetSpace offset_space = OffsetSpace::kLatent;
  OffsetGranularity offset_granularity = OffsetGranularity::kChannel;

  UNetArch unet;
  EmbedderArch embed;
  TrainConfig train;
  ClassifierConfig classify;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
};

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

const std::vector<ConfigKey>& config_keys();

/// Applies one assignment; unknown keys and malformed values throw ConfigError naming the key.
void set_config_value(Config& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const Config& cfg, const std::string& key);

/// Parses `key = value` lines over the defaults. `origin` names the source in messages.
Config parse_config(const std::string& text, const std::string& origin = "config");
Config load_config(const std::filesystem::path& path);
/// Applies the `key = value` lines of `text` on top of `cfg`.
void apply_config(Config& cfg, const std::string& text, const std::string& origin = "config");
std::string read_config_text(const std::filesystem::path& path);

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

/// Every key with its current value, one `key = value` per line, in table order.
std::string config_echo(const Config& cfg);
/// Markdown page listing every key, its default and its meaning.
std::string config_reference();

}  // namespace ffa
