// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/dualmodal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "ffa/pipeline.hpp"

namespace ffa {

std::string arm_name(EvalArm arm) {
  switch (arm) {
    case EvalArm::kSourceOnly:
      return "source_only";
    case EvalArm::kSourcePlusReal:
      return "source_plus_real";
    case EvalArm::kSourcePlusSynthetic:
      return "source_plus_synthetic";
  }
  return "?";
}

EvalArm parse_arm(const std::string& s) {
  for (EvalArm a : {EvalArm::kSourceOnly, EvalArm::kSourcePlusReal, EvalArm::kSourcePlusSynthetic})
    if (s == arm_name(a)) return a;
  throw ConfigError("unknown arm '" + s + "' (expected source_only, source_plus_real or source_plus_synthetic)");
}

std::vector<EvalArm> parse_arms(const std::string& s) {
  if (s == "all") return {EvalArm::kSourceOnly, EvalArm::kSourcePlusReal, EvalArm::kSourcePlusSynthetic};
  std::vector<EvalArm> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const EvalArm a = parse_arm(item);
    if (std::find(out.begin(), out.end(), a) != out.end()) throw ConfigError("arm '" + item + "' listed twice");
    out.push_back(a);
  }
  if (out.empty()) throw ConfigError("no arms selected");
  return out;
}

void ClassifierConfig::validate() const {
  if (side < 8) throw ConfigError("classify.side must be >= 8");
  if (widths.empty()) throw ConfigError("classify.widths must not be empty");
  for (int w : widths)
    if (w < 1) throw ConfigError("classify.widths entries must be positive");
  if ((side >> widths.size()) < 1) throw ConfigError("classify.side is too small for the number of stages");
  if (epochs < 1) throw ConfigError("classify.epochs must be >= 1");
  if (!(lr > 0)) throw ConfigError("classify.lr must be positive");
  if (batch_size < 1) throw ConfigError("classify.batch_size must be >= 1");
}

DualBranchClassifier::DualBranchClassifier(const ClassifierConfig& cfg, int num_classes, int image_channels)
    : widths_(cfg.widths), num_classes_(num_classes) {
  cfg.validate();
  if (num_classes < 2) throw Error("classifier needs at least 2 classes");
  Rng rng(cfg.seed);
  auto build = [&](const std::string& prefix, std::vector<Stage>& stages) {
    int cin = image_channels;
    for (std::size_t i = 0; i < widths_.size(); ++i) {
      const std::string name = prefix + "." + std::to_string(i);
      Stage s;
      s.conv = Conv2d<float>(ps_, name + ".conv", cin, widths_[i], 3, 2, 1, rng);
      s.norm = GroupNorm<float>(ps_, name + ".norm", widths_[i], 4);
      stages.push_back(std::move(s));
      cin = widths_[i];
    }
  };
  build("source", source_branch_);
  build("second", second_branch_);
  head_ = Linear<float>(ps_, "head", 2 * widths_.back(), num_classes, rng);
}

Var<float> DualBranchClassifier::branch(const std::vector<Stage>& stages, const Var<float>& x) const {
  using O = Ops<float>;
  Var<float> h = O::add_scalar(x, -0.5f);
  for (const auto& s : stages) h = O::silu(s.norm(s.conv(h)));
  return O::global_avg_pool(h);
}

Var<float> DualBranchClassifier::operator()(const Var<float>& source, const Var<float>& second) const {
  return head_(Ops<float>::concat1(branch(source_branch_, source), branch(second_branch_, second)));
}

namespace {

Image fit(const Image& img, int side) {
  return img.height == side && img.width == side ? img : resize_bilinear(img, side, side);
}

struct Inputs {
  Tensor<float> source, second;
};

Inputs batch_inputs(const std::vector<ClassifierSample>& samples, const std::vector<int>& idx, EvalArm arm, int side) {
  std::vector<Image> src, sec;
  for (int i : idx) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    src.push_back(fit(s.source, side));
    if (arm == EvalArm::kSourceOnly)
      sec.emplace_back(side, side, s.source.channels, 0.f);
    else
      sec.push_back(fit(s.second, side));
  }
  return {images_to_tensor<float>(src), images_to_tensor<float>(sec)};
}

int image_channels(const std::vector<ClassifierSample>& samples) { return samples.front().source.channels; }

}  // namespace

TrainedClassifier train_classifier(const std::vector<ClassifierSample>& train, EvalArm arm, const ClassifierConfig& cfg,
                                   int num_classes) {
  cfg.validate();
  if (train.empty()) throw MissingDataError("classifier training set is empty");
  std::vector<int> seen(static_cast<std::size_t>(num_classes), 0);
  for (const auto& s : train) {
    if (s.label < 0 || s.label >= num_classes) throw Error("classifier label out of range");
    seen[static_cast<std::size_t>(s.label)] = 1;
  }
  if (std::accumulate(seen.begin(), seen.end(), 0) < 2)
    throw Error("classifier training set holds a single class");

  TrainedClassifier out{DualBranchClassifier(cfg, num_classes, image_channels(train)), {}};
  AdamOptions ao;
  ao.lr = cfg.lr;
  Adam<float> adam({&out.model.params()}, ao);
  Rng rng(cfg.seed ^ 0x5eedc1a5ull);
  const int n = static_cast<int>(train.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int cnt = std::min(cfg.batch_size, n - start);
      const std::vector<int> idx(order.begin() + start, order.begin() + start + cnt);
      const Inputs in = batch_inputs(train, idx, arm, cfg.side);
      std::vector<int> labels;
      for (int i : idx) labels.push_back(train[static_cast<std::size_t>(i)].label);
      adam.zero_grad();
      const Var<float> loss = Ops<float>::cross_entropy(out.model(constant(in.source), constant(in.second)), labels);
      backward(loss);
      adam.step();
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw Error("classifier training diverged at epoch " + std::to_string(epoch + 1));
      total += lv * cnt;
    }
    out.loss_trace.push_back(total / n);
  }
  out.model.params().zero_grad();
  return out;
}

std::vector<std::vector<double>> predict_proba(const DualBranchClassifier& model,
                                               const std::vector<ClassifierSample>& samples, EvalArm arm,
                                               const ClassifierConfig& cfg) {
  NoGradGuard ng;
  std::vector<std::vector<double>> out;
  const int n = static_cast<int>(samples.size());
  const int k = model.num_classes();
  constexpr int kChunk = 16;
  for (int start = 0; start < n; start += kChunk) {
    const int cnt = std::min(kChunk, n - start);
    std::vector<int> idx(static_cast<std::size_t>(cnt));
    std::iota(idx.begin(), idx.end(), start);
    const Inputs in = batch_inputs(samples, idx, arm, cfg.side);
    const Tensor<float> proba = softmax_rows(model(constant(in.source), constant(in.second)).value());
    for (int i = 0; i < cnt; ++i)
      out.emplace_back(proba.data() + static_cast<std::size_t>(i) * k, proba.data() + static_cast<std::size_t>(i + 1) * k);
  }
  return out;
}

double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw Error("roc_auc: size mismatch");
  const double pos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
  const double neg = static_cast<double>(positive.size()) - pos;
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double area = 0, tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    double dtp = 0, dfp = 0;
    std::size_t j = i;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) (positive[order[j]] ? dtp : dfp) += 1;
    area += dfp / neg * (2 * tp + dtp) / (2 * pos);
    tp += dtp;
    fp += dfp;
    i = j;
  }
  return area;
}

ClassifierEval score_predictions(const std::vector<std::vector<double>>& proba, const std::vector<int>& labels,
                                 int num_classes) {
  if (proba.empty()) throw MissingDataError("evaluation set is empty");
  if (proba.size() != labels.size()) throw Error("score_predictions: size mismatch");
  ClassifierEval ev;
  ev.confusion.assign(static_cast<std::size_t>(num_classes), std::vector<int>(static_cast<std::size_t>(num_classes), 0));
  int correct = 0;
  for (std::size_t i = 0; i < proba.size(); ++i) {
    const int pred = static_cast<int>(std::max_element(proba[i].begin(), proba[i].end()) - proba[i].begin());
    ++ev.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(pred)];
    correct += pred == labels[i];
  }
  ev.acc = static_cast<double>(correct) / static_cast<double>(proba.size());
  double sum = 0;
  int used = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<double> s;
    std::vector<bool> pos;
    for (std::size_t i = 0; i < proba.size(); ++i) {
      s.push_back(proba[i][static_cast<std::size_t>(c)]);
      pos.push_back(labels[i] == c);
    }
    const double a = roc_auc(s, pos);
    if (std::isnan(a)) {
      ev.auc_skipped.push_back(c);
    } else {
      sum += a;
      ++used;
    }
  }
  ev.auc = used ? sum / used : std::numeric_limits<double>::quiet_NaN();
  return ev;
}

ClassifierEval evaluate_classifier(const DualBranchClassifier& model, const std::vector<ClassifierSample>& test,
                                   EvalArm arm, const ClassifierConfig& cfg) {
  if (test.empty()) throw MissingDataError("classifier test set is empty");
  std::vector<int> labels;
  for (const auto& s : test) labels.push_back(s.label);
  return score_predictions(predict_proba(model, test, arm, cfg), labels, model.num_classes());
}

namespace {

std::vector<ClassifierSample> samples_for(const std::vector<ImagePair>& pairs, const std::vector<Image>* second) {
  std::vector<ClassifierSample> out;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    out.push_back({pairs[i].source, second ? (*second)[i] : pairs[i].target, pairs[i].label});
  return out;
}

}  // namespace

std::vector<ArmResult> run_arms(const ArmData& data, const std::vector<EvalArm>& arms, const ClassifierConfig& cfg,
                                int num_classes) {
  std::vector<ArmResult> out;
  for (EvalArm arm : arms) {
    const bool synth = arm == EvalArm::kSourcePlusSynthetic;
    if (synth && (data.synthetic_train.size() != data.train.size() || data.synthetic_test.size() != data.test.size()))
      throw MissingDataError("the synthetic arm needs one generated image per train and test pair");
    const auto train = samples_for(data.train, synth ? &data.synthetic_train : nullptr);
    const auto test = samples_for(data.test, synth ? &data.synthetic_test : nullptr);
    TrainedClassifier tc = train_classifier(train, arm, cfg, num_classes);
    out.push_back({arm, evaluate_classifier(tc.model, test, arm, cfg), std::move(tc.loss_trace)});
  }
  return out;
}

std::vector<ArmResult> run_arms(const ModelBundle& bundle, const Split& split, const std::vector<EvalArm>& arms,
                                const ClassifierConfig& cfg, int num_classes, int steps, std::uint64_t seed) {
  ArmData data{split.train, split.test, {}, {}};
  if (std::find(arms.begin(), arms.end(), EvalArm::kSourcePlusSynthetic) != arms.end()) {
    std::vector<Image> sources;
    for (const auto& p : split.train) sources.push_back(p.source);
    for (const auto& p : split.test) sources.push_back(p.source);
    std::vector<Image> gen = generate(bundle, sources, steps, seed);
    data.synthetic_test.assign(gen.begin() + static_cast<std::ptrdiff_t>(split.train.size()), gen.end());
    gen.resize(split.train.size());
    data.synthetic_train = std::move(gen);
  }
  return run_arms(data, arms, cfg, num_classes);
}

std::string arms_csv(const std::vector<ArmResult>& results) {
  std::string out = "arm,acc,auc\n";
  char buf[96];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%s,%.6g,%.6g\n", arm_name(r.arm).c_str(), r.eval.acc, r.eval.auc);
    out += buf;
  }
  return out;
}

std::string confusion_text(const ClassifierEval& eval, const std::vector<std::string>& class_names) {
  const std::size_t k = eval.confusion.size();
  std::vector<std::string> names(k);
  for (std::size_t i = 0; i < k; ++i) names[i] = i < class_names.size() ? class_names[i] : std::to_string(i);
  std::size_t width = 5;
  for (const auto& n : names) width = std::max(width, n.size());
  for (const auto& row : eval.confusion)
    for (int v : row) width = std::max(width, std::to_string(v).size());
  auto pad = [&](const std::string& s) { return std::string(width - s.size(), ' ') + s; };
  std::string out = pad("true") + " |";
  for (const auto& n : names) out += " " + pad(n);
  out += '\n' + std::string(width + 2 + k * (width + 1), '-') + '\n';
  for (std::size_t i = 0; i < k; ++i) {
    out += pad(names[i]) + " |";
    for (int v : eval.confusion[i]) out += " " + pad(std::to_string(v));
    out += '\n';
  }
  return out;
}

Image confusion_heatmap(const ClassifierEval& eval, int cell) {
  const int k = static_cast<int>(eval.confusion.size());
  Image img(k * cell, k * cell, 3);
  for (int i = 0; i < k; ++i) {
    const auto& row = eval.confusion[static_cast<std::size_t>(i)];
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    for (int j = 0; j < k; ++j) {
      const float v = total > 0 ? static_cast<float>(row[static_cast<std::size_t>(j)] / total) : 0.f;
      for (int y = i * cell; y < (i + 1) * cell; ++y)
        for (int x = j * cell; x < (j + 1) * cell; ++x)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
    }
  }
  return img;
}

void write_arm_outputs(const std::vector<ArmResult>& results, const std::vector<std::string>& class_names,
                       const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "arms.csv");
    if (!f) throw Error("cannot write " + (dir / "arms.csv").string());
    f << arms_csv(results);
  }
  for (const auto& r : results) {
    const std::string name = arm_name(r.arm);
    std::ofstream f(dir / ("confusion_" + name + ".txt"));
    if (!f) throw Error("cannot write confusion matrix for " + name);
    f << confusion_text(r.eval, class_names);
    write_png(confusion_heatmap(r.eval), dir / ("confusion_" + name + ".png"));
  }
}

}  // namespace ffa
