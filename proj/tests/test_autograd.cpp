// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "support.hpp"

using namespace ffa;
using ffa::test::grad_check;
using ffa::test::leaf;
using O = Ops<double>;

namespace {

constexpr double kGradTol = 1e-6;

// Weighted sum reduces any output to a scalar while keeping every element's gradient distinct.
Var<double> probe(const Var<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return O::sum(O::mul(y, Var<double>(ffa::test::random_tensor(y.shape(), rng))));
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("elementwise ops") {
    Rng rng(1);
    auto a = leaf({2, 3, 4}, rng), b = leaf({2, 3, 4}, rng);
    CHECK(grad_check([&] { return probe(O::add(a, b)); }, {a, b}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::sub(a, b)); }, {a, b}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::mul(a, b)); }, {a, b}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::scale(a, 0.7)); }, {a}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::silu(a)); }, {a}).rel_error < kGradTol);
    CHECK(grad_check([&] { return O::mse(a, b); }, {a, b}).rel_error < kGradTol);
    CHECK(grad_check([&] { return O::l1(a, b); }, {a, b}).rel_error < kGradTol);
    CHECK(grad_check([&] { return O::mean(a); }, {a}).rel_error < kGradTol);
  }

  TEST_CASE("convolution and linear layers") {
    Rng rng(2);
    auto x = leaf({2, 3, 5, 5}, rng), w = leaf({4, 3, 3, 3}, rng), b = leaf({4}, rng);
    CHECK(grad_check([&] { return probe(O::conv2d(x, w, b, 1, 1)); }, {x, w, b}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::conv2d(x, w, b, 2, 1)); }, {x, w, b}).rel_error < kGradTol);
    auto t = leaf({2, 3, 5}, rng), lw = leaf({4, 5}, rng), lb = leaf({4}, rng);
    CHECK(grad_check([&] { return probe(O::linear(t, lw, lb)); }, {t, lw, lb}).rel_error < kGradTol);
  }

  TEST_CASE("normalization") {
    Rng rng(3);
    auto x = leaf({2, 4, 3, 3}, rng), g = leaf({4}, rng), b = leaf({4}, rng);
    CHECK(grad_check([&] { return probe(O::group_norm(x, g, b, 2, 1e-5)); }, {x, g, b}).rel_error < 1e-5);
    auto t = leaf({2, 3, 6}, rng), lg = leaf({6}, rng), lb = leaf({6}, rng);
    CHECK(grad_check([&] { return probe(O::layer_norm(t, lg, lb, 1e-5)); }, {t, lg, lb}).rel_error < 1e-5);
  }

  TEST_CASE("attention") {
    Rng rng(4);
    auto q = leaf({2, 3, 8}, rng), k = leaf({2, 5, 8}, rng), v = leaf({2, 5, 8}, rng);
    CHECK(grad_check([&] { return probe(O::attention(q, k, v, 2)); }, {q, k, v}).rel_error < kGradTol);
  }

  TEST_CASE("resampling and layout") {
    Rng rng(5);
    auto x = leaf({2, 3, 4, 4}, rng), y = leaf({2, 2, 4, 4}, rng);
    CHECK(grad_check([&] { return probe(O::avg_pool(x, 2)); }, {x}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::upsample_nearest(x, 2)); }, {x}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::global_avg_pool(x)); }, {x}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::concat1(x, y)); }, {x, y}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::slice1(x, 1, 2)); }, {x}).rel_error < kGradTol);
    CHECK(grad_check([&] { return probe(O::from_tokens(O::to_tokens(x), 4, 4)); }, {x}).rel_error < kGradTol);
  }

  TEST_CASE("losses") {
    Rng rng(6);
    auto logits = leaf({4, 3}, rng), mu = leaf({2, 3, 2, 2}, rng), logvar = leaf({2, 3, 2, 2}, rng);
    const std::vector<int> labels{0, 2, 1, 2};
    CHECK(grad_check([&] { return O::cross_entropy(logits, labels); }, {logits}).rel_error < kGradTol);
    CHECK(grad_check([&] { return O::gaussian_kl(mu, logvar); }, {mu, logvar}).rel_error < kGradTol);
  }

  TEST_CASE("cross entropy value") {
    // -log softmax at the label, averaged.
    const Var<double> logits(Tensor<double>({1, 2}, AlignedVector<double>{0.0, std::log(3.0)}));
    CHECK(O::cross_entropy(logits, {1}).item() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  }

  TEST_CASE("no-grad guard skips recording") {
    Rng rng(7);
    auto a = leaf({3}, rng);
    Var<double> y;
    {
      NoGradGuard ng;
      y = O::silu(a);
    }
    CHECK_FALSE(y.requires_grad());
    CHECK(O::silu(a).requires_grad());
  }

  TEST_CASE("gradients accumulate over shared subgraphs") {
    Rng rng(8);
    auto a = leaf({4}, rng);
    backward(O::sum(O::add(a, a)));
    for (double g : a.grad().vec()) CHECK(g == 2.0);
  }
}
