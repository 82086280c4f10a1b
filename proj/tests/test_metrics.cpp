// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ffa/metrics.hpp"
#include "metric_oracles.hpp"

using namespace ffa;
using namespace ffa::test;

TEST_SUITE("metrics") {
  TEST_CASE("psnr") {
    Rng rng(1);
    const Image a = noise_image(16, 16, 3, rng);
    CHECK(psnr(a, a) == kPsnrCap);
    Image b(4, 4, 1, 0.5f), c(4, 4, 1, 0.6f);
    CHECK(psnr(b, c) == doctest::Approx(20.0).epsilon(1e-5));
    const Image d = noise_image(16, 16, 3, rng);
    CHECK(psnr(a, d) == psnr(d, a));
    CHECK_THROWS(psnr(a, Image(16, 15, 3)));
  }

  TEST_CASE("ssim identity and disagreement") {
    Rng rng(2);
    const Image a = noise_image(24, 24, 3, rng);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    Image inv = a;
    for (auto& v : inv.data) v = 1.f - v;
    CHECK(ssim(a, inv) < 1.0);
    CHECK(ssim(a, inv) == doctest::Approx(ssim(inv, a)).epsilon(1e-12));
    CHECK_THROWS(ssim(Image(8, 8, 1), Image(8, 8, 1)));
  }

  TEST_CASE("ssim matches the direct window formula") {
    const Image a = step_image(16, 16, 0.2f, 0.8f, 7), b = step_image(16, 16, 0.3f, 0.6f, 9);
    CHECK(std::abs(ssim(a, b) - naive_ssim(a, b, 11, 1.5)) < 1e-6);
    Rng rng(3);
    const Image c = noise_image(16, 16, 1, rng), d = noise_image(16, 16, 1, rng);
    CHECK(std::abs(ssim(c, d) - naive_ssim(c, d, 11, 1.5)) < 1e-6);
    SsimOptions small;
    small.window = 5;
    CHECK(std::abs(ssim(c, d, small) - naive_ssim(c, d, 5, 1.5)) < 1e-6);
  }

  TEST_CASE("ms-ssim") {
    Rng rng(4);
    const Image a = noise_image(64, 64, 3, rng);
    CHECK(ms_ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    const Image b = noise_image(64, 64, 3, rng);
    CHECK(ms_ssim(a, b, {1.0}) == doctest::Approx(ssim(a, b)).epsilon(1e-12));
    for (int i = 0; i < 20; ++i) {
      const Image x = noise_image(64, 64, 3, rng);
      Image y = x;
      std::uniform_real_distribution<float> u(-0.3f, 0.3f);
      for (auto& v : y.data) v = std::clamp(v + u(rng), 0.f, 1.f);
      CHECK(ms_ssim(x, y) <= 1.0 + 1e-12);
    }
    CHECK_THROWS(ms_ssim(Image(32, 32, 1), Image(32, 32, 1)));
  }

  TEST_CASE("ms-ssim weights follow the image size") {
    CHECK(ms_ssim_weights_for(Image(64, 64, 3)) == default_ms_ssim_weights());
    const auto w = ms_ssim_weights_for(Image(32, 40, 3));
    REQUIRE(w.size() == 4);
    const double head = 0.0448 + 0.2856 + 0.3001 + 0.2363;
    CHECK(w[0] == doctest::Approx(0.0448 / head));
    CHECK(w[3] == doctest::Approx(0.2363 / head));
    CHECK(ms_ssim_weights_for(Image(8, 8, 1)).size() == 2);
    CHECK(ms_ssim_weights_for(Image(4, 4, 1)) == std::vector<double>{1.0});
  }

  TEST_CASE("fid") {
    Rng rng(5);
    const FeatureSet a = gaussian_features(500, {0, 0}, {1, 0, 0, 1}, rng);
    CHECK(std::abs(fid(a, a)) < 1e-6);
    const FeatureSet b = gaussian_features(500, {1, 0}, {2, 0.3, 0.3, 0.5}, rng);
    CHECK(fid(a, b) == doctest::Approx(fid(b, a)).epsilon(1e-9));
    CHECK(fid(a, b) >= 0);
    CHECK_THROWS(fid(FeatureSet(1, 2), a));
    CHECK_THROWS(fid(FeatureSet(5, 3), a));
  }

  TEST_CASE("fid converges to the closed-form Gaussian distance") {
    Rng rng(6);
    const std::vector<double> m1{0.0, 0.0}, m2{1.0, -0.5};
    const std::vector<double> s1{1.0, 0.2, 0.2, 0.5}, s2{2.0, -0.4, -0.4, 1.5};
    const FeatureSet a = gaussian_features(10000, m1, s1, rng), b = gaussian_features(10000, m2, s2, rng);
    const double expect = gaussian_frechet_2d(m1, s1, m2, s2);
    CHECK(std::abs(fid(a, b) - expect) / expect < 0.05);
  }

  TEST_CASE("kid matches brute force enumeration") {
    FeatureSet a(2, 1), b(2, 1);
    a.at(0, 0) = 0.5;
    a.at(1, 0) = -1.0;
    b.at(0, 0) = 2.0;
    b.at(1, 0) = 0.25;
    // k(x, y) = (x y + 1)^3 in d = 1.
    auto k = [](double x, double y) { return std::pow(x * y + 1, 3); };
    const double by_hand = (k(0.5, -1.0) + k(-1.0, 0.5)) / 2 + (k(2.0, 0.25) + k(0.25, 2.0)) / 2 -
                           2 * (k(0.5, 2.0) + k(0.5, 0.25) + k(-1.0, 2.0) + k(-1.0, 0.25)) / 4;
    CHECK(std::abs(kid(a, b) - by_hand) < 1e-12);

    Rng rng(7);
    const FeatureSet c = gaussian_features(7, {0, 0}, {1, 0, 0, 1}, rng), d = gaussian_features(5, {0.5, 0}, {1, 0, 0, 1}, rng);
    CHECK(std::abs(kid(c, d) - brute_force_kid(c, d)) < 1e-6);
    CHECK(kid(c, d) == doctest::Approx(kid(d, c)).epsilon(1e-12));
  }

  TEST_CASE("kid of one distribution centres on zero") {
    Rng rng(8);
    std::vector<double> est;
    for (int r = 0; r < 20; ++r)
      est.push_back(kid(gaussian_features(200, {0, 0}, {1, 0, 0, 1}, rng), gaussian_features(200, {0, 0}, {1, 0, 0, 1}, rng)));
    const double mean = std::accumulate(est.begin(), est.end(), 0.0) / est.size();
    double var = 0;
    for (double e : est) var += (e - mean) * (e - mean);
    const double sd = std::sqrt(var / (est.size() - 1));
    const double fresh =
        kid(gaussian_features(200, {0, 0}, {1, 0, 0, 1}, rng), gaussian_features(200, {0, 0}, {1, 0, 0, 1}, rng));
    CHECK(std::abs(fresh) <= 3 * sd);
    CHECK(std::abs(mean) <= 3 * sd / std::sqrt(20.0));
  }

  TEST_CASE("kid block averaging") {
    Rng rng(9);
    const FeatureSet a = gaussian_features(40, {0, 0}, {1, 0, 0, 1}, rng), b = gaussian_features(40, {1, 0}, {1, 0, 0, 1}, rng);
    // Blocks of 20 average the two disjoint halves.
    auto rows = [](const FeatureSet& f, int start, int n) {
      FeatureSet out(n, f.d);
      std::copy_n(f.data.begin() + start * f.d, n * f.d, out.data.begin());
      return out;
    };
    const double halves = (brute_force_kid(rows(a, 0, 20), rows(b, 0, 20)) + brute_force_kid(rows(a, 20, 20), rows(b, 20, 20))) / 2;
    CHECK(std::abs(kid(a, b, 20) - halves) < 1e-9);
  }

  TEST_CASE("perceptual distance") {
    const FeatureExtractor<float> ex;
    Rng rng(10);
    const Image a = noise_image(32, 32, 3, rng);
    CHECK(perceptual_distance(a, a, ex) == 0.0);
    std::vector<double> mean_by_level;
    for (float level : {0.05f, 0.1f, 0.2f, 0.4f}) {
      double total = 0;
      for (int seed = 0; seed < 20; ++seed) {
        Rng r(static_cast<std::uint64_t>(seed));
        std::uniform_real_distribution<float> u(-level, level);
        Image b = a;
        for (auto& v : b.data) v = std::clamp(v + u(r), 0.f, 1.f);
        const double dist = perceptual_distance(a, b, ex);
        CHECK(dist >= 0);
        total += dist;
      }
      mean_by_level.push_back(total / 20);
    }
    for (std::size_t i = 0; i + 1 < mean_by_level.size(); ++i) CHECK(mean_by_level[i] < mean_by_level[i + 1]);
  }

  TEST_CASE("report aggregation") {
    const FeatureExtractor<float> ex;
    Rng rng(11);
    std::vector<Image> imgs;
    for (int i = 0; i < 5; ++i) imgs.push_back(noise_image(64, 64, 3, rng));
    const std::vector<int> labels{0, 0, 2, 2, 1};
    const auto rep = evaluate_pairs(imgs, imgs, labels, {"Normal", "DR", "RVO"}, ex);
    REQUIRE(rep.rows.size() == 3);
    CHECK(rep.rows[0].class_name == "Normal");
    CHECK(rep.rows[1].n == 1);
    CHECK_FALSE(rep.rows[1].fid.has_value());
    std::vector<std::vector<Image>> by_class(3);
    for (std::size_t i = 0; i < imgs.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(imgs[i]);
    for (std::size_t c = 0; c < rep.rows.size(); ++c) {
      const MetricRow& row = rep.rows[c];
      const auto& members = by_class[c];
      CHECK(row.psnr == kPsnrCap);
      CHECK(row.ssim == doctest::Approx(1.0));
      CHECK(row.ms_ssim == doctest::Approx(1.0));
      CHECK(row.perceptual == 0.0);
      if (row.fid) {
        CHECK(*row.fid < 1e-6);
        // The unbiased estimate of identical sets is not zero; compare against enumeration instead.
        const FeatureSet f = extract_features(members, ex);
        CHECK(std::abs(*row.kid - brute_force_kid(f, f)) < 1e-9);
      }
    }
    const auto single = evaluate_pairs({imgs[0], imgs[1]}, {imgs[0], imgs[1]}, {0, 0}, {"Normal", "DR", "RVO"}, ex);
    CHECK(single.rows.size() == 1);
    const std::string csv = report_csv(rep);
    CHECK(csv.substr(0, csv.find('\n')) == "class,n,fid,kid,perceptual,psnr,ssim,ms_ssim");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK_THROWS(evaluate_pairs(imgs, imgs, {0, 1}, {"Normal", "DR", "RVO"}, ex));
  }
}
