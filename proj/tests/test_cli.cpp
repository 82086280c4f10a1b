// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ffa/image.hpp"
#include "tiny_config.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "ffa_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "tiny.cfg") << ffa::test::kTinyConfig;
    return d;
  }();
  return dir;
}

// Runs the CLI with `args`, output captured in work_dir()/last.log; returns the exit status.
int run(const std::string& args) {
  const fs::path& d = work_dir();
  const std::string cmd = "cd '" + d.string() + "' && '" FFASYNTH_BIN "' " + args + " > last.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// Dataset plus the three checkpoints, produced once.
void ensure_trained() {
  static const bool done = [] {
    REQUIRE(run("gen-data --config tiny.cfg --out data") == 0);
    REQUIRE(run("pretrain-codec --config tiny.cfg --data data --ckpt-out c0.ckpt") == 0);
    REQUIRE(run("train-stage1 --data data --ckpt-in c0.ckpt --ckpt-out c1.ckpt") == 0);
    REQUIRE(run("train-stage2 --data data --ckpt-in c1.ckpt --ckpt-out c2.ckpt") == 0);
    return true;
  }();
  (void)done;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage and configuration errors exit with 2") {
    CHECK(run("--help") == 0);
    CHECK(slurp(work_dir() / "last.log").find("Exit codes") != std::string::npos);
    CHECK(run("no-such-command") == 2);
    CHECK(run("gen-data") == 2);
    CHECK(run("gen-data --out x --set bogus.key=1") == 2);
    CHECK(slurp(work_dir() / "last.log").find("bogus.key") != std::string::npos);
    CHECK(run("gen-data --out x --set data.image_size=30") == 2);
    CHECK(run("gen-data --out x --config missing.cfg") == 2);
    CHECK(run("help-config --out keys.md") == 0);
    CHECK(slurp(work_dir() / "keys.md").find("`train.seed`") != std::string::npos);
  }

  TEST_CASE("dataset generation is reproducible") {
    REQUIRE(run("gen-data --config tiny.cfg --out d1") == 0);
    REQUIRE(run("gen-data --config tiny.cfg --out d2") == 0);
    CHECK(slurp(work_dir() / "d1/manifest.tsv") == slurp(work_dir() / "d2/manifest.tsv"));
    CHECK(slurp(work_dir() / "d1/source/DR_1.png") == slurp(work_dir() / "d2/source/DR_1.png"));
    CHECK(line_count(work_dir() / "d1/manifest.tsv") == 9);
    CHECK(slurp(work_dir() / "d1/config.txt").find("data.image_size = 32") != std::string::npos);
  }

  TEST_CASE("stage order and missing inputs") {
    ensure_trained();
    CHECK(run("train-stage1 --data data --ckpt-out x.ckpt") == 3);
    CHECK(run("train-stage2 --data data --ckpt-in c0.ckpt --ckpt-out x.ckpt") == 3);
    CHECK(run("sample --ckpt c0.ckpt --source data/source/DR_0.png --out x.png") == 3);
    CHECK(run("classify --config tiny.cfg --data data --arms source_plus_synthetic --out cl") == 3);
    CHECK(run("train-stage1 --data data --ckpt-in nope.ckpt --ckpt-out x.ckpt") == 4);
    CHECK(run("sample --ckpt c2.ckpt --source nowhere.png --out x.png") == 4);
    CHECK(run("train-stage2 --data data --ckpt-in c1.ckpt --ckpt-out x.ckpt --set unet.widths=8,8") == 2);
  }

  TEST_CASE("sampling a file and a directory") {
    ensure_trained();
    REQUIRE(run("sample --ckpt c2.ckpt --source data/source/RVO_2.png --out one/RVO_2.png") == 0);
    REQUIRE(run("sample --ckpt c2.ckpt --source data/source --out gen") == 0);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(work_dir() / "gen")) n += e.path().extension() == ".png";
    CHECK(n == 9);
    const ffa::Image img = ffa::read_png(work_dir() / "gen/RVO_2.png");
    CHECK(img.height == 32);
    CHECK(img.channels == 3);
    REQUIRE(run("sample --ckpt c2.ckpt --source data/source/RVO_2.png --out again.png") == 0);
    CHECK(slurp(work_dir() / "again.png") == slurp(work_dir() / "one/RVO_2.png"));
  }

  TEST_CASE("evaluation report") {
    ensure_trained();
    REQUIRE(run("sample --ckpt c2.ckpt --source data/source --out ev_gen") == 0);
    REQUIRE(run("evaluate --generated ev_gen --targets data/target --manifest data/manifest.tsv --out ev") == 0);
    std::istringstream csv(slurp(work_dir() / "ev/metrics.csv"));
    std::string header;
    std::getline(csv, header);
    CHECK(header == "class,n,fid,kid,perceptual,psnr,ssim,ms_ssim");
    CHECK(line_count(work_dir() / "ev/metrics.csv") == 4);
    CHECK(fs::exists(work_dir() / "ev/metrics.txt"));
    fs::remove(work_dir() / "ev_gen/DR_0.png");
    CHECK(run("evaluate --generated ev_gen --targets data/target --manifest data/manifest.tsv --out ev") == 4);
    CHECK(slurp(work_dir() / "last.log").find("DR_0") != std::string::npos);
  }

  TEST_CASE("classification arms") {
    ensure_trained();
    REQUIRE(run("classify --ckpt c2.ckpt --data data --arms all --out cl --set classify.epochs=1") == 0);
    CHECK(line_count(work_dir() / "cl/arms.csv") == 4);
    for (const char* arm : {"source_only", "source_plus_real", "source_plus_synthetic"}) {
      CHECK(fs::exists(work_dir() / "cl" / (std::string("confusion_") + arm + ".png")));
      CHECK(fs::exists(work_dir() / "cl" / (std::string("confusion_") + arm + ".txt")));
    }
    REQUIRE(run("classify --config tiny.cfg --data data --arms source_only --out cl2") == 0);
    CHECK(line_count(work_dir() / "cl2/arms.csv") == 2);
    CHECK(run("classify --config tiny.cfg --data data --arms everything --out cl3") == 2);
  }
}
