// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Procedural paired two-modality dataset and the preprocessing applied to it.
//
// The source modality is a colour rendering of a random vessel tree on a tinted
// fundus-like background. The target modality renders the same tree as bright
// vessels on a dark background plus class-specific lesions: bright leakage blobs for
// class 1 and a dark non-perfused wedge for class 2. Lesions appear only faintly in the
// source image, so the target carries most of the diagnostic signal.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ffa/image.hpp"
#include "ffa/nn.hpp"

namespace ffa {

/// Binary per-pixel mask, row-major.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  bool empty() const noexcept { return bits.empty(); }
  bool operator==(const Mask&) const = default;
};

double mask_iou(const Mask& a, const Mask& b);
double mask_correlation(const Mask& a, const Mask& b);

struct ImagePair {
  Image source;
  Image target;
  int label = 0;
  std::string id;
  // Rendering ground truth; empty when the pair was loaded from disk.
  Mask source_vessels;
  Mask target_vessels;
  Mask lesions;

  bool operator==(const ImagePair&) const = default;
};

struct DatasetSpec {
  std::vector<std::string> class_names{"Normal", "DR", "RVO"};
  std::vector<int> n_per_class{60, 36, 24};
  int image_size = 64;
  std::uint64_t seed = 7;
  double vessel_density = 0.6;
  double lesion_intensity = 1.0;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  int label_of(const std::string& name) const;
  void validate() const;
};

/// Deterministic in (spec.seed, label, index).
ImagePair generate_pair(const DatasetSpec& spec, int label, int index);

/// Every pair of the spec, class by class, in index order.
std::vector<ImagePair> generate_dataset(const DatasetSpec& spec);

struct BalanceResult {
  Image image;
  bool degenerate = false;  // some channel had zero mean and was left untouched
};

/// Gray-world balance: each channel is scaled so its mean equals the mean over all channels.
BalanceResult color_balance(const Image& image);

enum class BalanceTarget { kNone, kSource, kTarget, kBoth };
BalanceTarget parse_balance_target(const std::string& s);
void apply_color_balance(std::vector<ImagePair>& pairs, BalanceTarget which);

/// n registered patches at uniformly drawn offsets shared by both modalities.
std::vector<ImagePair> crop_patches(const ImagePair& pair, int n, int patch_size, Rng& rng);

struct Split {
  std::vector<ImagePair> train;
  std::vector<ImagePair> test;
};

/// Per class: round-half-up(train_frac * count) items to train, the rest to test,
/// after a seeded shuffle within the class.
Split split_stratified(const std::vector<ImagePair>& samples, double train_frac, std::uint64_t seed);

/// Manifest lines: id<TAB>label-name<TAB>source_path<TAB>target_path, paths relative to the manifest.
struct ManifestEntry {
  std::string id;
  std::string label;
  std::string source_path;
  std::string target_path;
};

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Writes source/<id>.png, target/<id>.png and manifest.tsv under dir.
void write_dataset(const std::vector<ImagePair>& pairs, const DatasetSpec& spec, const std::filesystem::path& dir);
/// Loads a dataset directory written by write_dataset (or any directory with a manifest.tsv).
std::vector<ImagePair> load_dataset(const std::filesystem::path& dir, const DatasetSpec& spec);

}  // namespace ffa
