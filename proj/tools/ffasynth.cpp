// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// ffasynth: dataset generation, training, sampling, evaluation and classification.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ffa/config.hpp"
#include "ffa/dualmodal.hpp"
#include "ffa/error.hpp"
#include "ffa/imgdata.hpp"
#include "ffa/metrics.hpp"
#include "ffa/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ffa;

namespace {

// Keys fixed once a bundle exists; overriding them on a checkpoint would not match its tensors.
constexpr const char* kLockedPrefixes[] = {"data.image_size", "codec.widths", "codec.latent_channels",
                                           "codec.groups",    "disc.",        "unet.",
                                           "embed.",          "schedule.",    "offset."};

bool locked(const std::string& key) {
  for (const char* p : kLockedPrefixes)
    if (key.rfind(p, 0) == 0) return true;
  return false;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value configuration file");
  cmd->add_option("--set", c.overrides, "extra key=value override (repeatable)");
  cmd->add_option("--seed", c.seed, "overrides train.seed");
}

void apply_overrides(Config& cfg, const Common& c) {
  if (!c.config_path.empty()) apply_config(cfg, read_config_text(c.config_path), c.config_path);
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
  }
  if (c.seed) cfg.train.seed = *c.seed;
  cfg.validate();
}

Config fresh_config(const Common& c) {
  Config cfg;
  apply_overrides(cfg, c);
  return cfg;
}

// Loads a checkpoint and applies the non-architectural overrides to its stored config.
ModelBundle open_bundle(const std::string& path, const Common& c) {
  ModelBundle b = load_checkpoint(path);
  Config cfg = b.config;
  apply_overrides(cfg, c);
  for (const auto& k : config_keys())
    if (locked(k.key) && k.get(cfg) != k.get(b.config))
      throw ConfigError("'" + k.key + "' is fixed by checkpoint " + path + " (" + k.get(b.config) +
                        "); it cannot be changed to " + k.get(cfg));
  b.config = cfg;
  return b;
}

Split load_split(const Config& cfg, const std::string& data_dir) {
  std::vector<ImagePair> pairs = load_dataset(data_dir, cfg.data);
  apply_color_balance(pairs, cfg.balance);
  return split_stratified(pairs, cfg.train_frac, cfg.data.seed);
}

StageOptions stdout_log() {
  StageOptions opt;
  opt.log = [](const std::string& line) { std::cout << line << std::endl; };
  return opt;
}

Image balanced_source(const Config& cfg, Image img) {
  if (cfg.balance == BalanceTarget::kSource || cfg.balance == BalanceTarget::kBoth) img = color_balance(img).image;
  return img;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

Image read_listed(const fs::path& p) {
  if (!fs::exists(p)) throw MissingDataError("missing image: " + p.string());
  return read_png(p);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ffasynth: source-to-target image synthesis with offset-noise latent diffusion"};
  app.require_subcommand(1);
  app.footer("Configuration keys (see `ffasynth help-config`):\n" + [] {
    std::string s;
    for (const auto& k : config_keys()) s += "  " + k.key + "  " + k.help + "\n";
    return s;
  }() + "\nExit codes: 0 ok, 1 generic error, 2 configuration, 3 stage order, 4 missing data.");

  Common common;
  std::string out, data, ckpt_in, ckpt_out, source, generated, targets, manifest, arms = "all";
  std::optional<int> steps;

  auto* gen = app.add_subcommand("gen-data", "write the procedural paired dataset");
  add_common(gen, common);
  gen->add_option("--out", out, "dataset directory")->required();

  auto* codec = app.add_subcommand("pretrain-codec", "train the autoencoder on both modalities");
  add_common(codec, common);
  codec->add_option("--data", data, "dataset directory")->required();
  codec->add_option("--ckpt-out", ckpt_out, "checkpoint to write")->required();

  auto add_stage = [&](const char* name, const char* help) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, common);
    cmd->add_option("--data", data, "dataset directory")->required();
    cmd->add_option("--ckpt-in", ckpt_in, "checkpoint of the previous stage");
    cmd->add_option("--ckpt-out", ckpt_out, "checkpoint to write")->required();
    return cmd;
  };
  auto* stage1 = add_stage("train-stage1", "train the conditional denoiser (autoencoder frozen)");
  auto* stage2 = add_stage("train-stage2", "fine-tune the decoder on denoiser outputs");

  auto* sample = app.add_subcommand("sample", "generate target-modality images from source images");
  add_common(sample, common);
  sample->add_option("--ckpt", ckpt_in, "trained checkpoint")->required();
  sample->add_option("--source", source, "source PNG or directory of PNGs")->required();
  sample->add_option("--out", out, "output PNG (file source) or directory")->required();
  sample->add_option("--steps", steps, "sampling steps (default sample.steps)");

  auto* eval = app.add_subcommand("evaluate", "per-class image-quality metrics");
  add_common(eval, common);
  eval->add_option("--generated", generated, "directory of generated <id>.png")->required();
  eval->add_option("--targets", targets, "directory of reference <id>.png")->required();
  eval->add_option("--manifest", manifest, "dataset manifest naming ids and labels")->required();
  eval->add_option("--out", out, "report directory")->required();

  auto* classify = app.add_subcommand("classify", "two-branch classifier under the evaluation arms");
  add_common(classify, common);
  classify->add_option("--ckpt", ckpt_in, "trained checkpoint (needed for the synthetic arm)");
  classify->add_option("--data", data, "dataset directory")->required();
  classify->add_option("--arms", arms, "all, or comma list of source_only,source_plus_real,source_plus_synthetic");
  classify->add_option("--out", out, "output directory")->required();
  classify->add_option("--steps", steps, "sampling steps for the synthetic arm (default sample.steps)");

  auto* help_cfg = app.add_subcommand("help-config", "print the configuration reference page");
  help_cfg->add_option("--out", out, "write the page to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorKind::kConfig);
  }

  try {
    if (*gen) {
      const Config cfg = fresh_config(common);
      const auto pairs = generate_dataset(cfg.data);
      write_dataset(pairs, cfg.data, out);
      write_text(fs::path(out) / "config.txt", config_echo(cfg));
      std::cout << "wrote " << pairs.size() << " pairs to " << out << "\n";
    } else if (*codec) {
      const Config cfg = fresh_config(common);
      const Split split = load_split(cfg, data);
      ModelBundle b = make_bundle(cfg);
      pretrain_codec(b, split.train, stdout_log());
      save_checkpoint(b, ckpt_out);
      std::cout << "wrote " << ckpt_out << "\n";
    } else if (*stage1 || *stage2) {
      const char* name = *stage1 ? "train-stage1" : "train-stage2";
      if (ckpt_in.empty())
        throw StageOrderError(std::string(name) + " needs --ckpt-in from the previous stage");
      if (!fs::exists(ckpt_in)) throw MissingDataError("checkpoint not found: " + ckpt_in);
      ModelBundle b = open_bundle(ckpt_in, common);
      if (*stage2 && !b.stage1_done)
        throw StageOrderError("train-stage2 needs a stage-1 checkpoint; " + ckpt_in + " has not completed stage 1");
      const Split split = load_split(b.config, data);
      if (*stage1) {
        train_stage1(b, split.train, stdout_log());
      } else {
        train_stage2(b, split.train, split.test, stdout_log());
      }
      save_checkpoint(b, ckpt_out);
      std::cout << "wrote " << ckpt_out << "\n";
    } else if (*sample) {
      if (!fs::exists(ckpt_in)) throw MissingDataError("checkpoint not found: " + ckpt_in);
      const ModelBundle b = open_bundle(ckpt_in, common);
      const int n_steps = steps.value_or(b.config.sample_steps);
      const std::uint64_t seed = common.seed.value_or(b.config.train.seed);
      if (!fs::exists(source)) throw MissingDataError("source not found: " + source);
      if (fs::is_directory(source)) {
        const auto files = png_files(source);
        if (files.empty()) throw MissingDataError("no PNG files in " + source);
        std::vector<Image> sources;
        for (const auto& f : files) sources.push_back(balanced_source(b.config, read_png(f)));
        const auto images = generate(b, sources, n_steps, seed);
        fs::create_directories(out);
        for (std::size_t i = 0; i < files.size(); ++i) write_png(images[i], fs::path(out) / files[i].filename());
        std::cout << "wrote " << images.size() << " images to " << out << "\n";
      } else {
        const Image img = generate(b, balanced_source(b.config, read_png(source)), n_steps, seed);
        if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
        write_png(img, out);
        std::cout << "wrote " << out << "\n";
      }
    } else if (*eval) {
      Config cfg;
      {
        const fs::path echoed = fs::path(manifest).parent_path() / "config.txt";
        if (common.config_path.empty() && fs::exists(echoed)) cfg = load_config(echoed);
      }
      apply_overrides(cfg, common);
      const auto entries = read_manifest(manifest);
      std::vector<Image> gen_images, tgt_images;
      std::vector<int> labels;
      for (const auto& e : entries) {
        gen_images.push_back(read_listed(fs::path(generated) / (e.id + ".png")));
        tgt_images.push_back(read_listed(fs::path(targets) / (e.id + ".png")));
        labels.push_back(cfg.data.label_of(e.label));
      }
      const FeatureExtractor<float> extractor;
      const MetricReport report = evaluate_pairs(gen_images, tgt_images, labels, cfg.data.class_names, extractor);
      write_report(report, fs::path(out) / "metrics.csv", fs::path(out) / "metrics.txt");
      std::cout << report_table(report);
    } else if (*classify) {
      const auto arm_list = parse_arms(arms);
      const bool synth =
          std::find(arm_list.begin(), arm_list.end(), EvalArm::kSourcePlusSynthetic) != arm_list.end();
      std::vector<ArmResult> results;
      Config cfg;
      if (!ckpt_in.empty()) {
        if (!fs::exists(ckpt_in)) throw MissingDataError("checkpoint not found: " + ckpt_in);
        const ModelBundle b = open_bundle(ckpt_in, common);
        cfg = b.config;
        const Split split = load_split(cfg, data);
        results = run_arms(b, split, arm_list, cfg.classify, cfg.data.num_classes(),
                           steps.value_or(cfg.sample_steps), cfg.train.seed);
      } else {
        if (synth) throw StageOrderError("the source_plus_synthetic arm needs --ckpt with a trained bundle");
        cfg = fresh_config(common);
        const Split split = load_split(cfg, data);
        results = run_arms(ArmData{split.train, split.test, {}, {}}, arm_list, cfg.classify, cfg.data.num_classes());
      }
      write_arm_outputs(results, cfg.data.class_names, out);
      std::cout << arms_csv(results);
    } else if (*help_cfg) {
      if (out.empty())
        std::cout << config_reference();
      else
        write_text(out, config_reference());
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kGeneric);
  }
  return 0;
}
