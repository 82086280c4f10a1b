// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace ffa {

Stage2Mode parse_stage2_mode(const std::string& s) {
  if (s == "short") return Stage2Mode::kShort;
  if (s == "full") return Stage2Mode::kFull;
  throw ConfigError("stage2.mode must be short|full, got '" + s + "'");
}

std::string stage2_mode_name(Stage2Mode m) { return m == Stage2Mode::kShort ? "short" : "full"; }

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + v + "'");
}

std::string fmt_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt_strings(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& item : split_list(v)) out.push_back(parse_number<int>(key, item));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

std::string balance_name(BalanceTarget b) {
  switch (b) {
    case BalanceTarget::kNone: return "none";
    case BalanceTarget::kSource: return "source";
    case BalanceTarget::kTarget: return "target";
    case BalanceTarget::kBoth: return "both";
  }
  return "both";
}

template <typename F>
ConfigKey int_key(std::string key, std::string help, F field) {
  return {key, std::move(help), [field](const Config& c) { return std::to_string(field(const_cast<Config&>(c))); },
          [field, key](Config& c, const std::string& v) { field(c) = parse_number<int>(key, v); }};
}

template <typename F>
ConfigKey u64_key(std::string key, std::string help, F field) {
  return {key, std::move(help), [field](const Config& c) { return std::to_string(field(const_cast<Config&>(c))); },
          [field, key](Config& c, const std::string& v) { field(c) = parse_number<std::uint64_t>(key, v); }};
}

template <typename F>
ConfigKey double_key(std::string key, std::string help, F field) {
  return {key, std::move(help), [field](const Config& c) { return format_double(field(const_cast<Config&>(c))); },
          [field, key](Config& c, const std::string& v) { field(c) = parse_number<double>(key, v); }};
}

template <typename F>
ConfigKey bool_key(std::string key, std::string help, F field) {
  return {key, std::move(help),
          [field](const Config& c) { return std::string(field(const_cast<Config&>(c)) ? "true" : "false"); },
          [field, key](Config& c, const std::string& v) { field(c) = parse_bool(key, v); }};
}

template <typename F>
ConfigKey ints_key(std::string key, std::string help, F field) {
  return {key, std::move(help), [field](const Config& c) { return fmt_ints(field(const_cast<Config&>(c))); },
          [field, key](Config& c, const std::string& v) { field(c) = parse_ints(key, v); }};
}

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> k;
  k.push_back({"data.classes", "comma-separated class names; index = label",
               [](const Config& c) { return fmt_strings(c.data.class_names); },
               [](Config& c, const std::string& v) { c.data.class_names = split_list(v); }});
  k.push_back(ints_key("data.counts", "pairs per class, aligned with data.classes",
                       [](Config& c) -> std::vector<int>& { return c.data.n_per_class; }));
  k.push_back(int_key("data.image_size", "square image side in pixels",
                      [](Config& c) -> int& { return c.data.image_size; }));
  k.push_back(u64_key("data.seed", "dataset generation and split seed",
                      [](Config& c) -> std::uint64_t& { return c.data.seed; }));
  k.push_back(double_key("data.vessel_density", "branching density of the vessel tree",
                         [](Config& c) -> double& { return c.data.vessel_density; }));
  k.push_back(double_key("data.lesion_intensity", "strength of class-specific lesions",
                         [](Config& c) -> double& { return c.data.lesion_intensity; }));
  k.push_back(double_key("data.train_frac", "per-class training fraction (round half up)",
                         [](Config& c) -> double& { return c.train_frac; }));
  k.push_back({"data.color_balance", "gray-world balance applied to none|source|target|both",
               [](const Config& c) { return balance_name(c.balance); },
               [](Config& c, const std::string& v) { c.balance = parse_balance_target(v); }});

  k.push_back(ints_key("codec.widths", "autoencoder width per level; downsample factor is 2^(levels-1)",
                       [](Config& c) -> std::vector<int>& { return c.codec.widths; }));
  k.push_back(int_key("codec.latent_channels", "latent channels",
                      [](Config& c) -> int& { return c.codec.latent_channels; }));
  k.push_back(int_key("codec.groups", "group-norm groups", [](Config& c) -> int& { return c.codec.groups; }));
  k.push_back(int_key("codec.steps", "autoencoder pre-training steps",
                      [](Config& c) -> int& { return c.codec_train.steps; }));
  k.push_back(double_key("codec.lr", "autoencoder pre-training learning rate",
                         [](Config& c) -> double& { return c.codec_train.lr; }));
  k.push_back(int_key("codec.batch_size", "autoencoder crops per step",
                      [](Config& c) -> int& { return c.codec_train.batch_size; }));
  k.push_back(int_key("codec.crop", "pixel side of autoencoder training crops (0 = whole image)",
                      [](Config& c) -> int& { return c.codec_train.crop; }));
  k.push_back(double_key("codec.kl_weight", "KL weight during autoencoder pre-training",
                         [](Config& c) -> double& { return c.codec_train.kl_weight; }));
  k.push_back(ints_key("disc.widths", "patch discriminator stride-2 widths",
                       [](Config& c) -> std::vector<int>& { return c.discriminator.widths; }));

  k.push_back(double_key("loss.lambda_perceptual", "stage-2 perceptual weight",
                         [](Config& c) -> double& { return c.loss.lambda_perceptual; }));
  k.push_back(double_key("loss.lambda_adversarial", "stage-2 adversarial weight",
                         [](Config& c) -> double& { return c.loss.lambda_adversarial; }));

  k.push_back(int_key("schedule.T", "diffusion steps", [](Config& c) -> int& { return c.schedule_steps; }));
  k.push_back(double_key("schedule.beta_start", "first variance increment",
                         [](Config& c) -> double& { return c.beta_start; }));
  k.push_back(double_key("schedule.beta_end", "last variance increment",
                         [](Config& c) -> double& { return c.beta_end; }));
  k.push_back({"schedule.kind", "beta interpolation (linear)", [](const Config&) { return std::string("linear"); },
               [](Config& c, const std::string& v) {
                 if (v != "linear") throw ConfigError("config key 'schedule.kind': only 'linear' is supported");
                 c.schedule_kind = ScheduleKind::kLinear;
               }});
  k.push_back(int_key("sample.steps", "DDIM steps at inference", [](Config& c) -> int& { return c.sample_steps; }));

  k.push_back(double_key("offset.lambda", "offset-noise scale (0 disables)",
                         [](Config& c) -> double& { return c.offset_lambda; }));
  k.push_back({"offset.space", "where offset statistics are measured: latent|pixel",
               [](const Config& c) { return std::string(c.offset_space == OffsetSpace::kLatent ? "latent" : "pixel"); },
               [](Config& c, const std::string& v) { c.offset_space = parse_offset_space(v); }});
  k.push_back({"offset.granularity", "channel|scalar (pixel space is always scalar)",
               [](const Config& c) {
                 return std::string(c.offset_granularity == OffsetGranularity::kChannel ? "channel" : "scalar");
               },
               [](Config& c, const std::string& v) { c.offset_granularity = parse_granularity(v); }});

  k.push_back(ints_key("unet.widths", "denoiser width per resolution level",
                       [](Config& c) -> std::vector<int>& { return c.unet.widths; }));
  k.push_back(int_key("unet.res_blocks", "residual blocks per level (each path)",
                      [](Config& c) -> int& { return c.unet.res_blocks; }));
  k.push_back(int_key("unet.attention_from_level", "first level carrying transformer blocks",
                      [](Config& c) -> int& { return c.unet.attention_from_level; }));
  k.push_back(int_key("unet.head_dim", "attention head width", [](Config& c) -> int& { return c.unet.head_dim; }));
  k.push_back(int_key("unet.time_dim", "sinusoidal timestep feature size",
                      [](Config& c) -> int& { return c.unet.time_dim; }));
  k.push_back(int_key("unet.groups", "group-norm groups", [](Config& c) -> int& { return c.unet.groups; }));
  k.push_back(bool_key("unet.use_concat", "concatenate the source latent to the noisy latent",
                       [](Config& c) -> bool& { return c.unet.use_concat; }));
  k.push_back(bool_key("unet.use_cross_attention", "cross-attend to the source embedding",
                       [](Config& c) -> bool& { return c.unet.use_cross_attention; }));

  k.push_back(ints_key("embed.widths", "source embedder stride-2 widths; last = token dimension",
                       [](Config& c) -> std::vector<int>& { return c.embed.widths; }));
  k.push_back(int_key("embed.grid", "token grid side (tokens = grid^2)", [](Config& c) -> int& { return c.embed.grid; }));
  k.push_back(u64_key("embed.seed", "embedder weight seed", [](Config& c) -> std::uint64_t& { return c.embed.seed; }));

  k.push_back(double_key("train.lr", "Adam learning rate for both stages",
                         [](Config& c) -> double& { return c.train.adam.lr; }));
  k.push_back(double_key("train.beta1", "Adam beta1", [](Config& c) -> double& { return c.train.adam.beta1; }));
  k.push_back(double_key("train.beta2", "Adam beta2", [](Config& c) -> double& { return c.train.adam.beta2; }));
  k.push_back(double_key("train.eps", "Adam epsilon", [](Config& c) -> double& { return c.train.adam.eps; }));
  k.push_back(int_key("train.batch_size", "batch size for both stages",
                      [](Config& c) -> int& { return c.train.batch_size; }));
  k.push_back(int_key("train.stage1_steps", "denoiser optimizer steps",
                      [](Config& c) -> int& { return c.train.stage1_steps; }));
  k.push_back(int_key("train.stage2_epochs", "decoder fine-tuning epochs",
                      [](Config& c) -> int& { return c.train.stage2_epochs; }));
  k.push_back(u64_key("train.seed", "global seed for initialization, batching and noise",
                      [](Config& c) -> std::uint64_t& { return c.train.seed; }));
  k.push_back(int_key("train.log_every", "steps between progress lines (0 = silent)",
                      [](Config& c) -> int& { return c.train.log_every; }));
  k.push_back(int_key("train.stage1_crop", "latent side of stage-1 windows (0 = whole latent)",
                      [](Config& c) -> int& { return c.train.stage1_crop; }));
  k.push_back({"stage2.mode", "decoder inputs: short (chain from start_t) | full (chain from pure noise)",
               [](const Config& c) { return stage2_mode_name(c.train.stage2_mode); },
               [](Config& c, const std::string& v) { c.train.stage2_mode = parse_stage2_mode(v); }});
  k.push_back(int_key("stage2.chain_steps", "DDIM steps of the short chain",
                      [](Config& c) -> int& { return c.train.chain_steps; }));
  k.push_back(int_key("stage2.start_t", "noise level the short chain starts from",
                      [](Config& c) -> int& { return c.train.start_t; }));
  k.push_back(int_key("stage2.variants", "decoder inputs prepared per training image",
                      [](Config& c) -> int& { return c.train.stage2_variants; }));

  k.push_back(int_key("classify.side", "classifier input side (reference setting: 512)",
                      [](Config& c) -> int& { return c.classify.side; }));
  k.push_back(ints_key("classify.widths", "backbone widths (stride-2 blocks)",
                       [](Config& c) -> std::vector<int>& { return c.classify.widths; }));
  k.push_back(int_key("classify.epochs", "classifier epochs", [](Config& c) -> int& { return c.classify.epochs; }));
  k.push_back(double_key("classify.lr", "classifier Adam learning rate",
                         [](Config& c) -> double& { return c.classify.lr; }));
  k.push_back(int_key("classify.batch_size", "classifier batch size",
                      [](Config& c) -> int& { return c.classify.batch_size; }));
  k.push_back(u64_key("classify.seed", "classifier initialization and batching seed",
                      [](Config& c) -> std::uint64_t& { return c.classify.seed; }));
  return k;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void set_config_value(Config& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.key == key) {
      k.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string get_config_value(const Config& cfg, const std::string& key) {
  for (const auto& k : config_keys())
    if (k.key == key) return k.get(cfg);
  throw ConfigError("unknown config key '" + key + "'");
}

void TrainConfig::validate() const {
  if (!(adam.lr > 0) || !(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) || !(adam.eps > 0))
    throw ConfigError("train: invalid Adam settings");
  if (batch_size < 1 || stage1_steps < 0 || stage2_epochs < 0 || log_every < 0 || stage1_crop < 0)
    throw ConfigError("train: batch_size must be >= 1 and counts non-negative");
  if (chain_steps < 1 || start_t < 1 || stage2_variants < 1)
    throw ConfigError("stage2: chain_steps, start_t and variants must be >= 1");
}

void Config::validate() const {
  data.validate();
  if (!(train_frac > 0 && train_frac < 1)) throw ConfigError("data.train_frac must lie in (0, 1)");
  if (codec.widths.empty() || codec.latent_channels < 1 || codec.groups < 1)
    throw ConfigError("codec: invalid architecture");
  for (int w : codec.widths)
    if (w < 1) throw ConfigError("codec.widths must be positive");
  const int f = codec.downsample();
  if (data.image_size % f) throw ConfigError("data.image_size must be divisible by the codec factor " + std::to_string(f));
  if (codec_train.steps < 0 || !(codec_train.lr > 0) || codec_train.batch_size < 1 || codec_train.crop < 0 ||
      codec_train.kl_weight < 0)
    throw ConfigError("codec: invalid training settings");
  if (codec_train.crop && (codec_train.crop % f || codec_train.crop > data.image_size))
    throw ConfigError("codec.crop must be a multiple of the codec factor and fit the image");
  loss.validate();
  if (schedule_steps < 1) throw ConfigError("schedule.T must be >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  if (sample_steps < 1 || sample_steps > schedule_steps) throw ConfigError("sample.steps must lie in [1, schedule.T]");
  if (!(offset_lambda >= 0)) throw ConfigError("offset.lambda must be >= 0");
  UNetArch ua = unet;
  ua.context_dim = embed.token_dim();
  ua.latent_channels = codec.latent_channels;
  ua.validate();
  const int latent = data.image_size / f;
  const int down = 1 << (static_cast<int>(unet.widths.size()) - 1);
  if (latent % down) throw ConfigError("latent side must be divisible by the denoiser factor " + std::to_string(down));
  if (train.stage1_crop && (train.stage1_crop % down || train.stage1_crop > latent))
    throw ConfigError("train.stage1_crop must be a multiple of the denoiser factor and fit the latent");
  if (embed.widths.empty() || embed.grid < 1) throw ConfigError("embed: invalid architecture");
  const int emb_side = data.image_size >> static_cast<int>(embed.widths.size());
  if (emb_side < embed.grid || emb_side % embed.grid)
    throw ConfigError("embed: feature side " + std::to_string(emb_side) + " cannot be pooled to grid " +
                      std::to_string(embed.grid));
  train.validate();
  if (train.start_t > schedule_steps) throw ConfigError("stage2.start_t must not exceed schedule.T");
  classify.validate();
}

void apply_config(Config& cfg, const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

Config parse_config(const std::string& text, const std::string& origin) {
  Config cfg;
  apply_config(cfg, text, origin);
  return cfg;
}

std::string read_config_text(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Config load_config(const std::filesystem::path& path) { return parse_config(read_config_text(path), path.string()); }

std::string config_echo(const Config& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.key + " = " + k.get(cfg) + "\n";
  return out;
}

std::string config_reference() {
  const Config defaults;
  std::string out =
      "# ffasynth configuration keys\n\n"
      "One `key = value` per line; `#` starts a comment. Unknown keys are rejected (exit code 2).\n\n"
      "| key | default | meaning |\n|---|---|---|\n";
  for (const auto& k : config_keys()) out += "| `" + k.key + "` | `" + k.get(defaults) + "` | " + k.help + " |\n";
  return out;
}

}  // namespace ffa
