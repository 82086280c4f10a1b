// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace ffa {

double psnr(const Image& a, const Image& b, double peak) {
  if (!a.same_shape(b)) throw Error("psnr: image shapes differ");
  if (!(peak > 0)) throw Error("psnr: peak must be positive");
  if (a.data.empty()) throw Error("psnr: empty images");
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

Plane luma_plane(const Image& img) {
  const Image g = to_gray(img);
  Plane p{g.height, g.width, std::vector<double>(g.data.begin(), g.data.end())};
  return p;
}

Plane downsample2(const Plane& p) {
  Plane out{p.height / 2, p.width / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.height) * out.width);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      out.v[static_cast<std::size_t>(y) * out.width + x] =
          0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y, 2 * x + 1) + p.at(2 * y + 1, 2 * x) + p.at(2 * y + 1, 2 * x + 1));
  return out;
}

namespace {

std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const double c = 0.5 * (size - 1);
  double sum = 0;
  for (int i = 0; i < size; ++i) {
    g[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= sum;
  return g;
}

// Valid-region separable filtering.
Plane filter_valid(const Plane& p, const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  const int oh = p.height - k + 1, ow = p.width - k + 1;
  Plane rows{p.height, ow, std::vector<double>(static_cast<std::size_t>(p.height) * ow, 0.0)};
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += g[static_cast<std::size_t>(i)] * p.at(y, x + i);
      rows.v[static_cast<std::size_t>(y) * ow + x] = s;
    }
  Plane out{oh, ow, std::vector<double>(static_cast<std::size_t>(oh) * ow, 0.0)};
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += g[static_cast<std::size_t>(i)] * rows.at(y + i, x);
      out.v[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

}  // namespace

SsimTerms ssim_terms(const Plane& a, const Plane& b, const SsimOptions& opt) {
  if (a.height != b.height || a.width != b.width) throw Error("ssim: image shapes differ");
  if (opt.window < 1 || a.height < opt.window || a.width < opt.window)
    throw Error("ssim: image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                " is smaller than the " + std::to_string(opt.window) + "-pixel window");
  const auto g = gaussian_taps(opt.window, opt.sigma);
  const Plane ma = filter_valid(a, g), mb = filter_valid(b, g);
  const Plane saa = filter_valid(product(a, a), g), sbb = filter_valid(product(b, b), g);
  const Plane sab = filter_valid(product(a, b), g);
  const double c1 = (opt.k1 * opt.peak) * (opt.k1 * opt.peak);
  const double c2 = (opt.k2 * opt.peak) * (opt.k2 * opt.peak);
  double s_sum = 0, cs_sum = 0;
  for (std::size_t i = 0; i < ma.v.size(); ++i) {
    const double mua = ma.v[i], mub = mb.v[i];
    const double va = saa.v[i] - mua * mua, vb = sbb.v[i] - mub * mub, cov = sab.v[i] - mua * mub;
    const double cs = (2 * cov + c2) / (va + vb + c2);
    const double l = (2 * mua * mub + c1) / (mua * mua + mub * mub + c1);
    s_sum += l * cs;
    cs_sum += cs;
  }
  const double n = static_cast<double>(ma.v.size());
  return {s_sum / n, cs_sum / n};
}

double ssim(const Image& a, const Image& b, const SsimOptions& opt) {
  if (!a.same_shape(b)) throw Error("ssim: image shapes differ");
  return ssim_terms(luma_plane(a), luma_plane(b), opt).ssim;
}

double ms_ssim(const Image& a, const Image& b, const std::vector<double>& weights, const SsimOptions& opt) {
  if (!a.same_shape(b)) throw Error("ms_ssim: image shapes differ");
  if (weights.empty()) throw Error("ms_ssim: no scale weights");
  const int scales = static_cast<int>(weights.size());
  const int coarse = std::min(a.height, a.width) >> (scales - 1);
  if (coarse < 4)
    throw Error("ms_ssim: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " image is too small for " +
                std::to_string(scales) + " scales");
  Plane pa = luma_plane(a), pb = luma_plane(b);
  double out = 1.0;
  for (int s = 0; s < scales; ++s) {
    SsimOptions o = opt;
    o.window = std::min({opt.window, pa.height, pa.width});
    const SsimTerms t = ssim_terms(pa, pb, o);
    const double w = weights[static_cast<std::size_t>(s)];
    if (s + 1 == scales) {
      out *= std::pow(std::max(0.0, t.ssim), w);
    } else {
      out *= std::pow(std::max(0.0, t.cs), w);
      pa = downsample2(pa);
      pb = downsample2(pb);
    }
  }
  return out;
}

namespace {

using Mat = Eigen::MatrixXd;

Mat as_matrix(const FeatureSet& f) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(f.data.data(), f.n, f.d);
}

void check_pair(const FeatureSet& a, const FeatureSet& b, const char* what) {
  if (a.n < 2 || b.n < 2) throw Error(std::string(what) + ": need at least 2 samples per set");
  if (a.d != b.d || a.d < 1) throw Error(std::string(what) + ": feature dimensions differ");
}

}  // namespace

double fid(const FeatureSet& a, const FeatureSet& b) {
  check_pair(a, b, "fid");
  const Mat xa = as_matrix(a), xb = as_matrix(b);
  const Eigen::VectorXd ma = xa.colwise().mean(), mb = xb.colwise().mean();
  const Mat ca = (xa.rowwise() - ma.transpose()).transpose() * (xa.rowwise() - ma.transpose()) / (a.n - 1.0);
  const Mat cb = (xb.rowwise() - mb.transpose()).transpose() * (xb.rowwise() - mb.transpose()) / (b.n - 1.0);

  // Tr((Ca Cb)^1/2) = Tr((Ca^1/2 Cb Ca^1/2)^1/2); the inner product is symmetric PSD.
  Eigen::SelfAdjointEigenSolver<Mat> ea(ca);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Mat sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  Mat inner = sqrt_a * cb * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> ei(inner, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd lam = ei.eigenvalues();
  const double scale = std::max(1.0, lam.cwiseAbs().maxCoeff());
  double tr_sqrt = 0;
  for (int i = 0; i < lam.size(); ++i) {
    if (lam[i] < -1e-8 * scale)
      throw Error("fid: covariance product has a negative eigenvalue " + std::to_string(lam[i]));
    tr_sqrt += std::sqrt(std::max(0.0, lam[i]));
  }
  const double val = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, val);
}

double kid(const FeatureSet& a, const FeatureSet& b, int block) {
  check_pair(a, b, "kid");
  if (block < 2) throw Error("kid: block size must be >= 2");
  const Mat xa = as_matrix(a), xb = as_matrix(b);
  const double inv_d = 1.0 / a.d;
  auto kernel = [inv_d](const Mat& x, const Mat& y) -> Mat {
    return (((x * y.transpose()) * inv_d).array() + 1.0).cube().matrix();
  };
  auto mmd = [&](int oa, int na, int ob, int nb) {
    const Mat ra = xa.middleRows(oa, na), rb = xb.middleRows(ob, nb);
    const Mat kaa = kernel(ra, ra), kbb = kernel(rb, rb), kab = kernel(ra, rb);
    const double saa = (kaa.sum() - kaa.trace()) / (static_cast<double>(na) * (na - 1));
    const double sbb = (kbb.sum() - kbb.trace()) / (static_cast<double>(nb) * (nb - 1));
    return saa + sbb - 2.0 * kab.mean();
  };
  const int m = std::min(a.n, b.n);
  if (m <= block) return mmd(0, a.n, 0, b.n);
  const int blocks = m / block;
  double total = 0;
  for (int k = 0; k < blocks; ++k) total += mmd(k * block, block, k * block, block);
  return total / blocks;
}

FeatureSet extract_features(const std::vector<Image>& images, const FeatureExtractor<float>& extractor) {
  if (images.empty()) throw Error("extract_features: no images");
  FeatureSet out(static_cast<int>(images.size()), extractor.pooled_dim());
  out.provenance = "frozen-extractor/pooled";
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t cnt = std::min(kChunk, images.size() - start);
    const auto f = extractor.pooled(images_to_tensor<float>(std::span<const Image>(images.data() + start, cnt)));
    for (std::size_t i = 0; i < cnt; ++i)
      for (int j = 0; j < out.d; ++j) out.at(static_cast<int>(start + i), j) = f[i * out.d + j];
  }
  return out;
}

double perceptual_distance(const Image& a, const Image& b, const FeatureExtractor<float>& extractor) {
  if (!a.same_shape(b)) throw Error("perceptual_distance: image shapes differ");
  NoGradGuard ng;
  const auto ta = constant(images_to_tensor<float>(std::span<const Image>(&a, 1)));
  const auto tb = constant(images_to_tensor<float>(std::span<const Image>(&b, 1)));
  return std::max(0.0, static_cast<double>(perceptual_loss(ta, tb, extractor).item()));
}

std::vector<double> ms_ssim_weights_for(const Image& img) {
  const auto& full = default_ms_ssim_weights();
  std::size_t scales = full.size();
  while (scales > 1 && (std::min(img.height, img.width) >> (scales - 1)) < 4) --scales;
  if (scales == full.size()) return full;
  std::vector<double> w(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(scales));
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= total;
  return w;
}

MetricReport evaluate_pairs(const std::vector<Image>& generated, const std::vector<Image>& targets,
                            const std::vector<int>& labels, const std::vector<std::string>& class_names,
                            const FeatureExtractor<float>& extractor) {
  if (generated.size() != targets.size() || generated.size() != labels.size())
    throw Error("evaluate_pairs: generated, targets and labels must have equal lengths");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  MetricReport report;
  for (const auto& [label, idx] : by_class) {
    MetricRow row;
    row.class_name = label >= 0 && label < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(label)]
                                                                                : std::to_string(label);
    row.n = static_cast<int>(idx.size());
    std::vector<Image> g, t;
    for (std::size_t i : idx) {
      row.psnr += psnr(generated[i], targets[i]);
      row.ssim += ssim(generated[i], targets[i]);
      row.ms_ssim += ms_ssim(generated[i], targets[i], ms_ssim_weights_for(generated[i]));
      row.perceptual += perceptual_distance(generated[i], targets[i], extractor);
      g.push_back(generated[i]);
      t.push_back(targets[i]);
    }
    row.psnr /= row.n;
    row.ssim /= row.n;
    row.ms_ssim /= row.n;
    row.perceptual /= row.n;
    if (row.n >= 2) {
      const FeatureSet fg = extract_features(g, extractor), ft = extract_features(t, extractor);
      row.fid = fid(fg, ft);
      row.kid = kid(fg, ft);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

}  // namespace

std::string report_csv(const MetricReport& report) {
  std::ostringstream os;
  os << "class,n,fid,kid,perceptual,psnr,ssim,ms_ssim\n";
  for (const auto& r : report.rows)
    os << r.class_name << ',' << r.n << ',' << fmt(r.fid) << ',' << fmt(r.kid) << ',' << fmt(r.perceptual) << ','
       << fmt(r.psnr) << ',' << fmt(r.ssim) << ',' << fmt(r.ms_ssim) << '\n';
  return os.str();
}

std::string report_table(const MetricReport& report) {
  const std::vector<std::string> head{"class", "n", "FID", "KID", "perceptual", "PSNR", "SSIM", "MS-SSIM"};
  std::vector<std::vector<std::string>> cells{head};
  for (const auto& r : report.rows)
    cells.push_back({r.class_name, std::to_string(r.n), fmt(r.fid), fmt(r.kid), fmt(r.perceptual), fmt(r.psnr),
                     fmt(r.ssim), fmt(r.ms_ssim)});
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : cells)
    for (std::size_t j = 0; j < row.size(); ++j) width[j] = std::max(width[j], row[j].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) os << "  ";
      os << row[j] << std::string(width[j] - row[j].size(), ' ');
    }
    os << '\n';
  }
  return os.str();
}

void write_report(const MetricReport& report, const std::filesystem::path& csv_path,
                  const std::filesystem::path& table_path) {
  for (const auto& [path, text] : {std::pair{csv_path, report_csv(report)}, std::pair{table_path, report_table(report)}}) {
    if (path.empty()) continue;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
  }
}

}  // namespace ffa
