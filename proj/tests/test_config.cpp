// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <string>

#include "ffa/config.hpp"
#include "ffa/error.hpp"

using namespace ffa;

namespace {

std::string message_of(const std::string& text) {
  try {
    parse_config(text, "run.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults validate") {
    const Config cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.data.n_per_class == std::vector<int>{60, 36, 24});
    CHECK(cfg.train_frac == 0.7);
    CHECK(cfg.sample_steps == 50);
    CHECK(cfg.offset_lambda == 0.1);
    CHECK(cfg.loss.lambda_adversarial == 0.1);
  }

  TEST_CASE("parsing") {
    const Config cfg = parse_config(
        "# comment line\n"
        "data.image_size = 32   # trailing comment\n"
        "  train.seed=99\n"
        "\n"
        "unet.widths = 16,32\n"
        "stage2.mode = full\n"
        "offset.lambda = 0.25\n");
    CHECK(cfg.data.image_size == 32);
    CHECK(cfg.train.seed == 99);
    CHECK(cfg.unet.widths == std::vector<int>{16, 32});
    CHECK(cfg.train.stage2_mode == Stage2Mode::kFull);
    CHECK(cfg.offset_lambda == 0.25);
    // Later lines win.
    CHECK(parse_config("train.seed = 1\ntrain.seed = 2\n").train.seed == 2);
  }

  TEST_CASE("errors name the key and the line") {
    const std::string unknown = message_of("train.seed = 3\ntrain.sed = 4\n");
    CHECK(unknown.find("train.sed") != std::string::npos);
    CHECK(unknown.find("run.cfg:2") != std::string::npos);
    CHECK(message_of("train.seed = abc\n").find("train.seed") != std::string::npos);
    CHECK(message_of("unet.use_concat = maybe\n").find("unet.use_concat") != std::string::npos);
    CHECK(message_of("no equals sign\n").find("run.cfg:1") != std::string::npos);
    CHECK(message_of("codec.widths = \n").find("codec.widths") != std::string::npos);
    Config scratch;
    CHECK_THROWS_AS(set_config_value(scratch, "bogus", "1"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
  }

  TEST_CASE("cross-field validation") {
    Config cfg;
    cfg.data.image_size = 36;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = Config{};
    cfg.train_frac = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = Config{};
    cfg.sample_steps = cfg.schedule_steps + 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = Config{};
    cfg.train.start_t = cfg.schedule_steps + 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  TEST_CASE("echo round trip") {
    Config cfg;
    set_config_value(cfg, "train.lr", "0.000123456789");
    set_config_value(cfg, "data.classes", "A,B");
    set_config_value(cfg, "data.counts", "4,5");
    set_config_value(cfg, "offset.granularity", "scalar");
    const std::string echo = config_echo(cfg);
    const Config back = parse_config(echo);
    CHECK(config_echo(back) == echo);
    CHECK(back.train.adam.lr == cfg.train.adam.lr);
    CHECK(back.data.class_names == std::vector<std::string>{"A", "B"});
    for (const auto& k : config_keys()) CHECK(echo.find(k.key + " = ") != std::string::npos);
  }

  TEST_CASE("doubles print exactly") {
    for (double v : {0.1, 1e-4, 0.02, 1.0 / 3.0, 123456.789, 1e-300}) CHECK(std::stod(format_double(v)) == v);
  }

  TEST_CASE("reference page covers every key") {
    const std::string page = config_reference();
    for (const auto& k : config_keys()) {
      CHECK(page.find("`" + k.key + "`") != std::string::npos);
      CHECK_FALSE(k.help.empty());
      CHECK(get_config_value(Config{}, k.key) == k.get(Config{}));
    }
  }
}
