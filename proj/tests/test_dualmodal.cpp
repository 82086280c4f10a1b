// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ffa/dualmodal.hpp"
#include "ffa/error.hpp"
#include "metric_oracles.hpp"

using namespace ffa;

namespace {

// Mann-Whitney form: fraction of (positive, negative) pairs ordered correctly, ties count half.
double pairwise_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) {
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        pairs += 1;
      }
  return wins / pairs;
}

ClassifierConfig toy_config() {
  ClassifierConfig cfg;
  cfg.side = 16;
  cfg.widths = {4, 8};
  cfg.epochs = 40;
  cfg.batch_size = 4;
  cfg.lr = 3e-3;
  return cfg;
}

// Sources share one distribution; only the second modality carries the label.
std::vector<ClassifierSample> toy_samples(int per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ClassifierSample> out;
  for (int label = 0; label < 2; ++label)
    for (int i = 0; i < per_class; ++i) {
      ClassifierSample s;
      s.source = ffa::test::noise_image(16, 16, 3, rng);
      s.second = ffa::test::noise_image(16, 16, 3, rng);
      for (auto& v : s.second.data) v = label == 0 ? 0.5f * v : 0.5f + 0.5f * v;
      s.label = label;
      out.push_back(std::move(s));
    }
  return out;
}

}  // namespace

TEST_SUITE("dualmodal") {
  TEST_CASE("auc limits") {
    CHECK(roc_auc({0.1, 0.2, 0.8, 0.9}, {false, false, true, true}) == 1.0);
    CHECK(roc_auc({0.9, 0.8, 0.2, 0.1}, {false, false, true, true}) == 0.0);
    CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {false, true, false, true}) == 0.5);
    CHECK(std::isnan(roc_auc({0.1, 0.2}, {true, true})));
    Rng rng(1);
    std::uniform_real_distribution<double> u;
    std::vector<double> s(10000);
    std::vector<bool> p(10000);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = u(rng);
      p[i] = u(rng) < 0.3;
    }
    CHECK(std::abs(roc_auc(s, p) - 0.5) < 0.02);
  }

  TEST_CASE("auc agrees with pairwise counting under ties") {
    Rng rng(2);
    std::uniform_int_distribution<int> level(0, 4);
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> s(30);
      std::vector<bool> p(30);
      for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = level(rng) * 0.25;
        p[i] = coin(rng);
      }
      p[0] = true;
      p[1] = false;
      CHECK(roc_auc(s, p) == doctest::Approx(pairwise_auc(s, p)).epsilon(1e-12));
    }
  }

  TEST_CASE("scoring") {
    const std::vector<std::vector<double>> proba{{0.8, 0.1, 0.1}, {0.2, 0.7, 0.1}, {0.6, 0.3, 0.1}, {0.1, 0.2, 0.7}};
    const std::vector<int> labels{0, 1, 1, 2};
    const auto e = score_predictions(proba, labels, 3);
    CHECK(e.acc == doctest::Approx(0.75));
    CHECK(e.confusion[1][0] == 1);
    CHECK(e.confusion[1][1] == 1);
    for (int c = 0; c < 3; ++c) {
      const int row = std::accumulate(e.confusion[static_cast<std::size_t>(c)].begin(), e.confusion[static_cast<std::size_t>(c)].end(), 0);
      CHECK(row == static_cast<int>(std::count(labels.begin(), labels.end(), c)));
    }
    // One-vs-rest macro average of the per-class pairwise AUCs.
    double macro = 0;
    for (int c = 0; c < 3; ++c) {
      std::vector<double> s;
      std::vector<bool> p;
      for (std::size_t i = 0; i < proba.size(); ++i) {
        s.push_back(proba[i][static_cast<std::size_t>(c)]);
        p.push_back(labels[i] == c);
      }
      macro += pairwise_auc(s, p) / 3;
    }
    CHECK(e.auc == doctest::Approx(macro).epsilon(1e-12));
    CHECK(e.auc_skipped.empty());

    const auto missing = score_predictions({{0.6, 0.3, 0.1}, {0.2, 0.7, 0.1}}, {0, 1}, 3);
    CHECK(missing.auc_skipped == std::vector<int>{2});
    CHECK(std::isfinite(missing.auc));
    CHECK_THROWS(score_predictions(proba, {0, 1}, 3));
  }

  TEST_CASE("arm names") {
    CHECK(parse_arms("all").size() == 3);
    CHECK(parse_arms("source_only,source_plus_real") ==
          std::vector<EvalArm>{EvalArm::kSourceOnly, EvalArm::kSourcePlusReal});
    CHECK_THROWS_AS(parse_arms("source_only,source_only"), ConfigError);
    CHECK_THROWS_AS(parse_arm("real"), ConfigError);
    for (EvalArm a : parse_arms("all")) CHECK(parse_arm(arm_name(a)) == a);
  }

  TEST_CASE("classifier shapes and parameters") {
    const ClassifierConfig cfg = toy_config();
    const DualBranchClassifier model(cfg, 3);
    Rng rng(3);
    const auto x = constant(normal_tensor<float>({2, 3, 16, 16}, 1.0, rng));
    CHECK(model(x, x).shape() == Shape{2, 3});
    for (const auto& [name, v] : model.params())
      CHECK((name.rfind("source.", 0) == 0 || name.rfind("second.", 0) == 0 || name.rfind("head", 0) == 0));
    ClassifierConfig bad = cfg;
    bad.widths.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("second modality carries a separable signal") {
    const ClassifierConfig cfg = toy_config();
    const auto train = toy_samples(12, 4), test = toy_samples(8, 5);
    const auto real = train_classifier(train, EvalArm::kSourcePlusReal, cfg, 2);
    CHECK(evaluate_classifier(real.model, train, EvalArm::kSourcePlusReal, cfg).acc >= 0.99);
    const auto held = evaluate_classifier(real.model, test, EvalArm::kSourcePlusReal, cfg);
    CHECK(held.acc >= 0.9);
    CHECK(held.auc >= 0.95);
    CHECK(real.loss_trace.size() == static_cast<std::size_t>(cfg.epochs));
    CHECK(real.loss_trace.back() < real.loss_trace.front());

    const auto blind = train_classifier(train, EvalArm::kSourceOnly, cfg, 2);
    CHECK(evaluate_classifier(blind.model, test, EvalArm::kSourceOnly, cfg).acc < held.acc);

    const auto again = train_classifier(train, EvalArm::kSourcePlusReal, cfg, 2);
    CHECK(again.loss_trace == real.loss_trace);
  }

  TEST_CASE("training needs two classes") {
    auto one = toy_samples(3, 6);
    for (auto& s : one) s.label = 0;
    CHECK_THROWS(train_classifier(one, EvalArm::kSourcePlusReal, toy_config(), 2));
  }

  TEST_CASE("reports") {
    ArmResult r{EvalArm::kSourceOnly, score_predictions({{0.9, 0.1}, {0.4, 0.6}, {0.7, 0.3}}, {0, 1, 1}, 2), {}};
    const std::string csv = arms_csv({r});
    CHECK(csv.rfind("arm,acc,auc\n", 0) == 0);
    CHECK(csv.find("source_only,") != std::string::npos);
    const std::string text = confusion_text(r.eval, {"Normal", "DR"});
    CHECK(text.find("Normal") != std::string::npos);
    const Image heat = confusion_heatmap(r.eval, 4);
    CHECK(heat.height == 8);
    CHECK(heat.width == 8);
    // Row "DR" is split evenly between the two predictions.
    CHECK(heat.at(5, 1, 0) == doctest::Approx(heat.at(5, 5, 0)));
  }
}
