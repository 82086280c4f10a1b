// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gates. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//
//   acceptance [--work DIR] [--only 1,3,8]
//
// Criteria 8-10 run the default desk-scale pipeline twice under DIR (about half an hour on one core).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ffa/error.hpp"
#include "ffa/metrics.hpp"
#include "ffa/pipeline.hpp"
#include "metric_oracles.hpp"
#include "support.hpp"

using namespace ffa;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kExpansionTol = 1e-6;
constexpr double kCompositeMeanTol = 0.004;
constexpr double kCompositeVarTol = 0.01;
constexpr double kInversionTol = 1e-4;
constexpr double kGradRelTol = 1e-3;
constexpr double kOracleTol = 1e-6;
constexpr double kFidClosedFormRel = 0.05;
constexpr double kKidIdentityTol = 5e-3;
constexpr double kOverfitLossMax = 0.05;
constexpr double kSyntheticMargin = 0.02;

// 1-pair overfit sub-run of criterion 8(a).
constexpr int kOverfitSteps = 1500;
constexpr double kOverfitLr = 1e-3;
constexpr int kOverfitEvalDraws = 20;
constexpr std::uint64_t kOverfitEvalSeed = 77;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void progress(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------------------------

Outcome channel_expansion() {
  Rng rng(101);
  using O = Ops<double>;
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto w = test::random_tensor({16, 4, 3, 3}, rng);
    const auto b = test::random_tensor({16}, rng);
    const auto x = test::random_tensor({1, 4, 8, 8}, rng);
    const auto once = O::conv2d(constant(x), constant(w), constant(b), 1, 1).value();
    const auto twice =
        O::conv2d(O::concat1(constant(x), constant(x)), constant(expand_input_projection(w)), constant(b), 1, 1).value();
    for (std::size_t i = 0; i < once.size(); ++i) worst = std::max(worst, std::abs(once[i] - twice[i]));
  }
  return {worst <= kExpansionTol, "max_abs=" + num(worst) + " tol=" + num(kExpansionTol)};
}

Outcome composite_statistics() {
  Rng rng(303);
  OffsetNoiseParams p;
  p.mu = {0.3};
  p.sigma = {0.5};
  p.lambda = 0.1;
  const Shape shape{1000, 1, 1000};
  auto moments = [](const Tensor<double>& t) {
    double s = 0, s2 = 0;
    for (double v : t.vec()) {
      s += v;
      s2 += v * v;
    }
    const double n = static_cast<double>(t.size());
    return std::make_pair(s / n, s2 / n - (s / n) * (s / n));
  };
  const double mean = moments(sample_composite_noise<double>(p, shape, rng)).first;
  p.mu = {0.0};
  const double var = moments(sample_composite_noise<double>(p, shape, rng)).second;
  const double mean_err = std::abs(mean - 0.1 * 0.3), var_err = std::abs(var - (1 + 0.01 * 0.25));
  return {mean_err <= kCompositeMeanTol && var_err <= kCompositeVarTol,
          "mean=" + num(mean) + " (expect 0.03) var=" + num(var) + " (expect 1.0025)"};
}

Outcome ddim_inversion() {
  const auto sched = build_schedule(1000, 1e-4, 0.02);
  Rng rng(404);
  const auto z0 = test::random_tensor({2, 4, 16, 16}, rng, -2, 2);
  const auto eps = normal_tensor<double>(z0.shape(), 1.0, rng);
  const auto ts = ddim_timesteps(1000, 50);
  Tensor<double> z = q_sample(z0, ts.front(), eps, sched);
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) z = ddim_step(z, eps, ts[k], ts[k + 1], sched);
  double worst = 0;
  for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::abs(z[i] - z0[i]));
  return {worst <= kInversionTol, "max_abs=" + num(worst) + " over " + std::to_string(ts.size() - 1) + " steps"};
}

Outcome gradient_checks() {
  Rng rng(505);
  std::ostringstream detail;
  bool ok = true;
  auto record = [&](const char* name, double rel) {
    detail << name << "=" << num(rel) << " ";
    ok = ok && rel <= kGradRelTol;
  };

  UNetArch arch;
  arch.latent_channels = 2;
  arch.widths = {8, 8};
  arch.res_blocks = 1;
  arch.head_dim = 4;
  arch.time_dim = 8;
  arch.context_dim = 6;
  arch.groups = 4;
  const UNet<double> net(arch, 11);
  const auto sched = build_schedule(1000, 1e-4, 0.02);
  const Stage1Batch<double> batch{normal_tensor<double>({2, 2, 8, 8}, 1.0, rng), normal_tensor<double>({2, 2, 8, 8}, 1.0, rng),
                                  normal_tensor<double>({2, 3, 6}, 1.0, rng)};
  const std::vector<int> t{20, 640};
  const auto noise = normal_tensor<double>({2, 2, 8, 8}, 1.0, rng);
  std::vector<Var<double>> leaves;
  for (const auto& [name, v] : net.params()) leaves.push_back(v);
  const auto model = as_predictor(net);
  record("stage1", test::grad_check([&] { return stage1_loss_at(model, batch, sched, t, noise); }, leaves, 1e-5, 6).rel_error);

  const auto target = test::random_tensor({1, 3, 8, 8}, rng, 0, 1);
  auto pred = test::leaf({1, 3, 8, 8}, rng, 0, 1);
  record("reconstruction", test::grad_check([&] { return reconstruction_loss(pred, constant(target)); }, {pred}).rel_error);
  const FeatureExtractor<double> ex;
  record("perceptual", test::grad_check([&] { return perceptual_loss(pred, constant(target), ex); }, {pred}).rel_error);
  const PatchDiscriminator<double> disc(DiscriminatorArch{}, 3, 9);
  const Stage2LossWeights weights;
  record("stage2",
         test::grad_check([&] { return stage2_loss(pred, constant(target), weights, ex, disc); }, {pred}).rel_error);
  return {ok, detail.str() + "tol=" + num(kGradRelTol)};
}

Outcome metric_suite() {
  using namespace ffa::test;
  std::ostringstream d;
  bool ok = true;
  auto check = [&](bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      d << "failed:" << what << " ";
    }
  };
  Rng rng(606);
  const Image a = noise_image(64, 64, 3, rng);
  const FeatureExtractor<float> ex;
  check(psnr(a, a) == kPsnrCap, "psnr-cap");
  check(std::abs(ssim(a, a) - 1.0) < 1e-12, "ssim-identity");
  check(std::abs(ms_ssim(a, a) - 1.0) < 1e-12, "ms-ssim-identity");
  check(perceptual_distance(a, a, ex) == 0.0, "perceptual-identity");

  std::vector<Image> set;
  for (int i = 0; i < 8; ++i) set.push_back(noise_image(64, 64, 3, rng));
  const FeatureSet f = extract_features(set, ex);
  const double fid_self = fid(f, f), kid_self = kid(f, f);
  check(fid_self < 1e-6, "fid-identity");
  // The unbiased estimator is not exactly zero on identical finite sets.
  check(std::abs(kid_self) < kKidIdentityTol, "kid-identity");

  const Image s1 = step_image(16, 16, 0.2f, 0.8f, 7), s2 = step_image(16, 16, 0.3f, 0.6f, 9);
  const double ssim_err = std::abs(ssim(s1, s2) - naive_ssim(s1, s2, 11, 1.5));
  check(ssim_err < kOracleTol, "ssim-oracle");
  const FeatureSet ka = gaussian_features(7, {0, 0}, {1, 0, 0, 1}, rng), kb = gaussian_features(5, {0.5, 0}, {1, 0, 0, 1}, rng);
  const double kid_err = std::abs(kid(ka, kb) - brute_force_kid(ka, kb));
  check(kid_err < kOracleTol, "kid-oracle");
  const std::vector<double> m1{0.0, 0.0}, m2{1.0, -0.5}, c1{1.0, 0.2, 0.2, 0.5}, c2{2.0, -0.4, -0.4, 1.5};
  const double expect = gaussian_frechet_2d(m1, c1, m2, c2);
  const double got = fid(gaussian_features(10000, m1, c1, rng), gaussian_features(10000, m2, c2, rng));
  const double rel = std::abs(got - expect) / expect;
  check(rel < kFidClosedFormRel, "fid-closed-form");
  d << "fid_self=" << num(fid_self) << " kid_self=" << num(kid_self) << " ssim_err=" << num(ssim_err)
    << " kid_err=" << num(kid_err) << " fid_rel=" << num(rel);
  return {ok, d.str()};
}

Outcome split_reproduction() {
  std::vector<ImagePair> samples;
  const std::vector<int> counts{153, 58, 30};
  for (std::size_t c = 0; c < counts.size(); ++c)
    for (int i = 0; i < counts[c]; ++i) {
      ImagePair p;
      p.label = static_cast<int>(c);
      p.id = std::to_string(c) + "_" + std::to_string(i);
      samples.push_back(std::move(p));
    }
  const Split s = split_stratified(samples, 0.7, 1);
  std::vector<int> tr(3, 0), te(3, 0);
  for (const auto& p : s.train) ++tr[static_cast<std::size_t>(p.label)];
  for (const auto& p : s.test) ++te[static_cast<std::size_t>(p.label)];
  const bool ok = tr == std::vector<int>{107, 41, 21} && te == std::vector<int>{46, 17, 9};
  std::ostringstream d;
  for (int c = 0; c < 3; ++c) d << tr[static_cast<std::size_t>(c)] << "/" << te[static_cast<std::size_t>(c)] << " ";
  return {ok, d.str()};
}

// ---------------------------------------------------------------------------------------------

struct PipelineRun {
  std::map<std::string, std::uint64_t> before_stage1, after_stage1, before_stage2, after_stage2;
  double psnr_generated = 0, psnr_source = 0;
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> fid_generated, fid_source;
  std::vector<ArmResult> arms;
  std::vector<int> test_counts;
  double seconds = 0;
};

std::vector<Image> sources_of(const std::vector<ImagePair>& pairs) {
  std::vector<Image> out;
  for (const auto& p : pairs) out.push_back(p.source);
  return out;
}

std::vector<Image> targets_of(const std::vector<ImagePair>& pairs) {
  std::vector<Image> out;
  for (const auto& p : pairs) out.push_back(p.target);
  return out;
}

std::vector<int> labels_of(const std::vector<ImagePair>& pairs) {
  std::vector<int> out;
  for (const auto& p : pairs) out.push_back(p.label);
  return out;
}

// The default configuration end to end, with every artifact written under `dir`.
PipelineRun run_pipeline(const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Config cfg;
  cfg.validate();
  PipelineRun run;
  run.class_names = cfg.data.class_names;

  write_dataset(generate_dataset(cfg.data), cfg.data, dir / "data");
  std::vector<ImagePair> pairs = load_dataset(dir / "data", cfg.data);
  apply_color_balance(pairs, cfg.balance);
  const Split split = split_stratified(pairs, cfg.train_frac, cfg.data.seed);
  progress("dataset: " + std::to_string(split.train.size()) + " train / " + std::to_string(split.test.size()) + " test");

  StageOptions opt;
  opt.log = progress;
  ModelBundle bundle = make_bundle(cfg);
  pretrain_codec(bundle, split.train, opt);
  save_checkpoint(bundle, dir / "codec.ckpt");
  run.before_stage1 = bundle.checksums();
  train_stage1(bundle, split.train, opt);
  run.after_stage1 = bundle.checksums();
  save_checkpoint(bundle, dir / "stage1.ckpt");
  run.before_stage2 = bundle.checksums();
  train_stage2(bundle, split.train, split.test, opt);
  run.after_stage2 = bundle.checksums();
  save_checkpoint(bundle, dir / "stage2.ckpt");

  progress("sampling the test split");
  const auto generated = generate(bundle, sources_of(split.test), cfg.sample_steps, cfg.train.seed);
  fs::create_directories(dir / "generated");
  for (std::size_t i = 0; i < generated.size(); ++i) write_png(generated[i], dir / "generated" / (split.test[i].id + ".png"));

  const FeatureExtractor<float> ex;
  const auto targets = targets_of(split.test);
  const auto labels = labels_of(split.test);
  const MetricReport gen_report = evaluate_pairs(generated, targets, labels, cfg.data.class_names, ex);
  const MetricReport src_report = evaluate_pairs(sources_of(split.test), targets, labels, cfg.data.class_names, ex);
  write_report(gen_report, dir / "metrics_generated.csv", dir / "metrics_generated.txt");
  write_report(src_report, dir / "metrics_source.csv", dir / "metrics_source.txt");
  for (std::size_t i = 0; i < generated.size(); ++i) {
    run.psnr_generated += psnr(generated[i], targets[i]) / static_cast<double>(generated.size());
    run.psnr_source += psnr(split.test[i].source, targets[i]) / static_cast<double>(generated.size());
  }
  for (std::size_t c = 0; c < gen_report.rows.size(); ++c) {
    run.fid_generated.push_back(gen_report.rows[c].fid);
    run.fid_source.push_back(src_report.rows[c].fid);
  }

  progress("classifier arms");
  run.arms = run_arms(bundle, split, parse_arms("all"), cfg.classify, cfg.data.num_classes(), cfg.sample_steps,
                      cfg.train.seed);
  write_arm_outputs(run.arms, cfg.data.class_names, dir / "arms");
  run.test_counts.assign(static_cast<std::size_t>(cfg.data.num_classes()), 0);
  for (const auto& p : split.test) ++run.test_counts[static_cast<std::size_t>(p.label)];
  run.seconds = seconds_since(t0);
  progress("pipeline finished in " + num(run.seconds) + " s");
  return run;
}

// Stage 1 on a single training pair, starting from the run's pre-trained codec.
double overfit_single_pair(const fs::path& dir) {
  ModelBundle bundle = load_checkpoint(dir / "codec.ckpt");
  std::vector<ImagePair> pairs = load_dataset(dir / "data", bundle.config.data);
  apply_color_balance(pairs, bundle.config.balance);
  const std::vector<ImagePair> one{split_stratified(pairs, bundle.config.train_frac, bundle.config.data.seed).train.front()};
  bundle.config.train.stage1_steps = kOverfitSteps;
  bundle.config.train.stage1_crop = 0;
  bundle.config.train.adam.lr = kOverfitLr;
  StageOptions opt;
  opt.log = progress;
  train_stage1(bundle, one, opt);
  return evaluate_stage1_loss(bundle, one, kOverfitEvalDraws, kOverfitEvalSeed);
}

bool unchanged(const std::map<std::string, std::uint64_t>& a, const std::map<std::string, std::uint64_t>& b,
               const std::vector<std::string>& names, std::string& detail) {
  bool ok = true;
  for (const auto& n : names) {
    const bool same = a.at(n) == b.at(n);
    ok = ok && same;
    detail += n + (same ? "=same " : "=CHANGED ");
  }
  return ok;
}

Outcome freeze_discipline(const PipelineRun& r) {
  std::string d = "stage1: ";
  const bool s1 = unchanged(r.before_stage1, r.after_stage1, {"encoder", "decoder", "embedder"}, d);
  d += "stage2: ";
  const bool s2 = unchanged(r.before_stage2, r.after_stage2, {"denoiser", "encoder"}, d);
  return {s1 && s2, d};
}

Outcome smoke_quality(const PipelineRun& r, double overfit_loss) {
  std::ostringstream d;
  const bool a = overfit_loss < kOverfitLossMax;
  const bool b = r.psnr_generated > r.psnr_source;
  bool c = true;
  d << "(a) overfit_loss=" << num(overfit_loss) << " <" << num(kOverfitLossMax) << (a ? " ok" : " FAIL");
  d << "; (b) psnr gen=" << num(r.psnr_generated) << " source=" << num(r.psnr_source) << (b ? " ok" : " FAIL");
  d << "; (c) fid";
  for (std::size_t k = 0; k < r.fid_generated.size(); ++k) {
    const bool has = r.fid_generated[k] && r.fid_source[k];
    const bool better = has && *r.fid_generated[k] < *r.fid_source[k];
    c = c && better;
    d << " " << r.class_names[k] << " gen=" << (has ? num(*r.fid_generated[k]) : "NA")
      << " source=" << (has ? num(*r.fid_source[k]) : "NA") << (better ? " ok" : " FAIL");
  }
  d << "; " << num(r.seconds) << " s";
  return {a && b && c, d.str()};
}

Outcome arm_ordering(const PipelineRun& r) {
  std::map<EvalArm, const ArmResult*> by;
  for (const auto& a : r.arms) by[a.arm] = &a;
  const double only = by.at(EvalArm::kSourceOnly)->eval.acc;
  const double real = by.at(EvalArm::kSourcePlusReal)->eval.acc;
  const double synth = by.at(EvalArm::kSourcePlusSynthetic)->eval.acc;
  bool rows_ok = true;
  for (const auto& a : r.arms)
    for (std::size_t c = 0; c < r.test_counts.size(); ++c) {
      int sum = 0;
      for (int v : a.eval.confusion[c]) sum += v;
      rows_ok = rows_ok && sum == r.test_counts[c];
    }
  const bool ok = real >= only && synth > only - kSyntheticMargin && rows_ok;
  return {ok, "acc source_only=" + num(only) + " source_plus_real=" + num(real) + " source_plus_synthetic=" + num(synth) +
                  (rows_ok ? " confusion rows match test counts" : " confusion rows MISMATCH")};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// Every file under either directory, compared byte for byte.
Outcome identical_trees(const fs::path& a, const fs::path& b) {
  std::set<fs::path> files;
  for (const fs::path& root : {a, b})
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) files.insert(fs::relative(e.path(), root));
  int differ = 0;
  std::string first;
  for (const auto& rel : files) {
    if (!fs::exists(a / rel) || !fs::exists(b / rel) || slurp(a / rel) != slurp(b / rel)) {
      if (!differ) first = rel.string();
      ++differ;
    }
  }
  return {differ == 0 && !files.empty(),
          std::to_string(files.size()) + " files compared, " + std::to_string(differ) + " differ" +
              (differ ? " (first: " + first + ")" : "")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("acceptance gates");
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory for the pipeline runs");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  std::map<int, std::pair<std::string, Outcome>> results;
  auto run_one = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    o.detail += " [" + num(seconds_since(t0)) + " s]";
    results[id] = {name, o};
  };

  run_one(1, "channel-expansion identity", channel_expansion);
  run_one(3, "offset-noise statistics", composite_statistics);
  run_one(4, "ddim oracle inversion", ddim_inversion);
  run_one(5, "gradient checks", gradient_checks);
  run_one(6, "metric identities and oracles", metric_suite);
  run_one(7, "split reproduction", split_reproduction);

  const bool need_pipeline = wanted(2) || wanted(8) || wanted(9) || wanted(10);
  if (need_pipeline) {
    const fs::path root = fs::absolute(work);
    std::optional<PipelineRun> first;
    std::string failure;
    try {
      first = run_pipeline(root / "run1");
    } catch (const std::exception& e) {
      failure = std::string("exception: ") + e.what();
    }
    auto pipeline_one = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
      if (!first) {
        if (wanted(id)) results[id] = {name, {false, failure}};
        return;
      }
      run_one(id, name, fn);
    };
    pipeline_one(2, "freeze discipline", [&] { return freeze_discipline(*first); });
    pipeline_one(8, "end-to-end desk-scale smoke", [&] {
      progress("1-pair overfit sub-run");
      return smoke_quality(*first, overfit_single_pair(root / "run1"));
    });
    pipeline_one(9, "dual-modal validation ordering", [&] { return arm_ordering(*first); });
    pipeline_one(10, "determinism", [&] {
      run_pipeline(root / "run2");
      return identical_trees(root / "run1", root / "run2");
    });
  }

  bool all = true;
  for (const auto& [id, entry] : results) {
    const auto& [name, o] = entry;
    all = all && o.pass;
    std::printf("criterion %2d: %s  %s  %s\n", id, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
  }
  std::fflush(stdout);
  return all ? 0 : 1;
}
