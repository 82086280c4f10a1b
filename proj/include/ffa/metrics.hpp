// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Image-quality metrics. FID, KID and the perceptual distance run on the frozen seeded
// extractor, so their absolute values only compare within this project.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ffa/codec.hpp"
#include "ffa/image.hpp"

namespace ffa {

inline constexpr double kPsnrCap = 100.0;

double psnr(const Image& a, const Image& b, double peak = 1.0);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 1.0;
};

/// Row-major single-channel plane.
struct Plane {
  int height = 0;
  int width = 0;
  std::vector<double> v;
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * width + x]; }
};

Plane luma_plane(const Image& img);
/// 2x2 mean pool; odd trailing rows / columns are dropped.
Plane downsample2(const Plane& p);

struct SsimTerms {
  double ssim = 0;  // mean of luminance * contrast-structure over valid windows
  double cs = 0;    // mean of contrast-structure alone
};
/// Valid (fully inside) Gaussian windows only. Throws if the plane is smaller than the window.
SsimTerms ssim_terms(const Plane& a, const Plane& b, const SsimOptions& opt = {});

/// Luma SSIM.
double ssim(const Image& a, const Image& b, const SsimOptions& opt = {});

inline const std::vector<double>& default_ms_ssim_weights() {
  static const std::vector<double> w{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  return w;
}

/// Product of per-scale contrast-structure terms (clamped at 0) and full SSIM at the coarsest
/// scale, each raised to its weight. The window shrinks to the plane side at scales smaller
/// than it; the coarsest scale must be at least 4 pixels on each side.
double ms_ssim(const Image& a, const Image& b, const std::vector<double>& weights = default_ms_ssim_weights(),
               const SsimOptions& opt = {});

/// The default weights, truncated to the scales `img` supports and renormalized to sum 1.
std::vector<double> ms_ssim_weights_for(const Image& img);

/// N feature vectors of dimension d, row-major.
struct FeatureSet {
  int n = 0;
  int d = 0;
  std::vector<double> data;
  std::string provenance;

  FeatureSet() = default;
  FeatureSet(int n_, int d_) : n(n_), d(d_), data(static_cast<std::size_t>(n_) * d_, 0.0) {}
  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * d + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * d + j]; }
};

double fid(const FeatureSet& a, const FeatureSet& b);

/// Unbiased polynomial-kernel MMD^2, averaged over disjoint consecutive blocks of at most `block` rows.
double kid(const FeatureSet& a, const FeatureSet& b, int block = 1000);

FeatureSet extract_features(const std::vector<Image>& images, const FeatureExtractor<float>& extractor);

double perceptual_distance(const Image& a, const Image& b, const FeatureExtractor<float>& extractor);

struct MetricRow {
  std::string class_name;
  int n = 0;
  std::optional<double> fid;
  std::optional<double> kid;
  double perceptual = 0;
  double psnr = 0;
  double ssim = 0;
  double ms_ssim = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;  // one per label present, in label order
};

MetricReport evaluate_pairs(const std::vector<Image>& generated, const std::vector<Image>& targets,
                            const std::vector<int>& labels, const std::vector<std::string>& class_names,
                            const FeatureExtractor<float>& extractor);

std::string report_csv(const MetricReport& report);
std::string report_table(const MetricReport& report);
void write_report(const MetricReport& report, const std::filesystem::path& csv_path,
                  const std::filesystem::path& table_path);

}  // namespace ffa
