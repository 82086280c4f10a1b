// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Two-branch (source, second-modality) classifier and the three-arm validation protocol.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ffa/imgdata.hpp"
#include "ffa/nn.hpp"

namespace ffa {

struct ModelBundle;

enum class EvalArm { kSourceOnly, kSourcePlusReal, kSourcePlusSynthetic };

std::string arm_name(EvalArm arm);
EvalArm parse_arm(const std::string& s);
/// "all" or a comma-separated list of arm names.
std::vector<EvalArm> parse_arms(const std::string& s);

struct ClassifierConfig {
  int side = 64;  // reference setting 512
  std::vector<int> widths{8, 16, 32, 32};
  int epochs = 30;
  double lr = 1e-3;
  int batch_size = 8;
  std::uint64_t seed = 11;

  void validate() const;
};

struct ClassifierSample {
  Image source;
  Image second;
  int label = 0;
};

class DualBranchClassifier {
 public:
  DualBranchClassifier(const ClassifierConfig& cfg, int num_classes, int image_channels = 3);
  DualBranchClassifier(const DualBranchClassifier&) = delete;
  DualBranchClassifier& operator=(const DualBranchClassifier&) = delete;
  DualBranchClassifier(DualBranchClassifier&&) = default;

  /// [N, C, side, side] each; returns logits [N, K].
  Var<float> operator()(const Var<float>& source, const Var<float>& second) const;
  ParamSet<float>& params() noexcept { return ps_; }
  const ParamSet<float>& params() const noexcept { return ps_; }
  int num_classes() const noexcept { return num_classes_; }
  int feature_dim() const { return widths_.back(); }

 private:
  struct Stage {
    Conv2d<float> conv;
    GroupNorm<float> norm;
  };
  Var<float> branch(const std::vector<Stage>& stages, const Var<float>& x) const;

  ParamSet<float> ps_{"classifier"};
  std::vector<int> widths_;
  std::vector<Stage> source_branch_, second_branch_;
  Linear<float> head_;
  int num_classes_ = 0;
};

struct TrainedClassifier {
  DualBranchClassifier model;
  std::vector<double> loss_trace;  // mean loss per epoch
};

/// source_only zeroes the second-branch input; other arms use `second` as given.
TrainedClassifier train_classifier(const std::vector<ClassifierSample>& train, EvalArm arm, const ClassifierConfig& cfg,
                                   int num_classes);

/// Row-wise class probabilities [N, K].
std::vector<std::vector<double>> predict_proba(const DualBranchClassifier& model,
                                               const std::vector<ClassifierSample>& samples, EvalArm arm,
                                               const ClassifierConfig& cfg);

/// Area under the ROC curve by the trapezoid rule over distinct thresholds (ties share a segment).
/// NaN when either class is absent.
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

struct ClassifierEval {
  double acc = 0;
  double auc = 0;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  std::vector<int> auc_skipped;             // classes absent from the evaluation set
};

ClassifierEval score_predictions(const std::vector<std::vector<double>>& proba, const std::vector<int>& labels,
                                 int num_classes);

ClassifierEval evaluate_classifier(const DualBranchClassifier& model, const std::vector<ClassifierSample>& test,
                                   EvalArm arm, const ClassifierConfig& cfg);

struct ArmResult {
  EvalArm arm;
  ClassifierEval eval;
  std::vector<double> loss_trace;
};

struct ArmData {
  std::vector<ImagePair> train;
  std::vector<ImagePair> test;
  // Generated target-modality images aligned with train / test (needed for the synthetic arm only).
  std::vector<Image> synthetic_train;
  std::vector<Image> synthetic_test;
};

std::vector<ArmResult> run_arms(const ArmData& data, const std::vector<EvalArm>& arms, const ClassifierConfig& cfg,
                                int num_classes);

/// Generates the synthetic images with the bundle when the synthetic arm is requested.
std::vector<ArmResult> run_arms(const ModelBundle& bundle, const Split& split, const std::vector<EvalArm>& arms,
                                const ClassifierConfig& cfg, int num_classes, int steps, std::uint64_t seed);

std::string arms_csv(const std::vector<ArmResult>& results);
std::string confusion_text(const ClassifierEval& eval, const std::vector<std::string>& class_names);
/// Cell brightness proportional to the row-normalized count, `cell` pixels per entry.
Image confusion_heatmap(const ClassifierEval& eval, int cell = 32);

/// arms.csv plus confusion_<arm>.txt / .png per arm.
void write_arm_outputs(const std::vector<ArmResult>& results, const std::vector<std::string>& class_names,
                       const std::filesystem::path& dir);

}  // namespace ffa
