// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "ffa/codec.hpp"
#include "ffa/image.hpp"
#include "support.hpp"

using namespace ffa;
using O = Ops<double>;

namespace {

constexpr double kLossGradTol = 1e-3;

// Stand-in with a fixed score map so the hinge terms can be checked in closed form.
Var<double> constant_scores(const Var<double>& x, double v) {
  return constant(Tensor<double>({x.dim(0), 1, 2, 2}, v));
}

Image random_image(int side, Rng& rng) {
  Image img(side, side, 3);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (auto& v : img.data) v = u(rng);
  return img;
}

}  // namespace

TEST_SUITE("codec") {
  TEST_CASE("shapes and determinism") {
    const Codec<float> codec(CodecArch{}, 1);
    Rng rng(2);
    const auto x = images_to_tensor<float>(std::vector<Image>{random_image(64, rng), random_image(64, rng)});
    const auto z = codec.encode(x);
    CHECK(z.shape() == Shape{2, 4, 16, 16});
    CHECK(codec.encode(x).vec() == z.vec());
    const auto y = codec.decode(z);
    CHECK(y.shape() == x.shape());
    CHECK(codec.decode(z).vec() == y.vec());
    for (float v : y.vec()) {
      CHECK(v >= 0.f);
      CHECK(v <= 1.f);
    }
    CHECK_THROWS(codec.encode(images_to_tensor<float>(std::vector<Image>{random_image(30, rng)})));
    CHECK_THROWS(codec.decode(Tensor<float>({1, 3, 16, 16})));
  }

  TEST_CASE("reconstruction loss") {
    Rng rng(3);
    const auto t = ffa::test::random_tensor({1, 3, 4, 4}, rng, 0, 1);
    CHECK(reconstruction_loss(constant(t), constant(t)).item() == 0.0);
    auto shifted = t;
    for (auto& v : shifted.vec()) v += 0.1;
    CHECK(reconstruction_loss(constant(shifted), constant(t)).item() == doctest::Approx(0.1).epsilon(1e-12));
    auto pred = ffa::test::leaf({1, 3, 4, 4}, rng, 0, 1);
    CHECK(ffa::test::grad_check([&] { return reconstruction_loss(pred, constant(t)); }, {pred}).rel_error < 1e-4);
    CHECK_THROWS(reconstruction_loss(constant(t), constant(Tensor<double>({1, 3, 4, 5}))));
  }

  TEST_CASE("perceptual loss") {
    const FeatureExtractor<double> ex;
    Rng rng(4);
    const auto t = ffa::test::random_tensor({1, 3, 8, 8}, rng, 0, 1);
    CHECK(perceptual_loss(constant(t), constant(t), ex).item() == 0.0);
    auto pred = ffa::test::leaf({1, 3, 8, 8}, rng, 0, 1);
    CHECK(perceptual_loss(pred, constant(t), ex).item() > 0);
    CHECK(ffa::test::grad_check([&] { return perceptual_loss(pred, constant(t), ex); }, {pred}).rel_error < kLossGradTol);
    CHECK(ex.params().trainable() == false);
  }

  TEST_CASE("hinge terms") {
    const DiscriminatorArch arch;
    const PatchDiscriminator<double> disc(arch, 3, 5);
    Rng rng(6);
    const auto x = constant(ffa::test::random_tensor({2, 3, 8, 8}, rng, 0, 1));
    const auto zero = constant_scores(x, 0.0);
    // Closed forms of the hinge objectives on fixed score maps.
    auto d_term = [](const Var<double>& real, const Var<double>& fake) {
      return O::add(O::mean(O::relu(O::add_scalar(O::scale(real, -1), 1))), O::mean(O::relu(O::add_scalar(fake, 1))));
    };
    CHECK(d_term(zero, zero).item() == 2.0);
    CHECK(d_term(constant_scores(x, 1.5), constant_scores(x, -1.2)).item() == 0.0);

    const auto terms = adversarial_losses(x, x, disc);
    const double score = O::mean(disc(x)).item();
    CHECK(terms.generator.item() == doctest::Approx(-score));
    CHECK(std::isfinite(terms.discriminator.item()));
    CHECK(terms.discriminator.item() >= 0);
  }

  TEST_CASE("generator term follows the discriminator scores") {
    PatchDiscriminator<double> disc(DiscriminatorArch{}, 3, 7);
    Rng rng(8);
    const auto x = constant(ffa::test::random_tensor({1, 3, 8, 8}, rng, 0, 1));
    const double before = adversarial_losses(x, x, disc).generator.item();
    // Raising the head bias raises every score by the same amount.
    for (auto& [name, v] : disc.params())
      if (name.find("head.bias") != std::string::npos)
        for (auto& b : v.mutable_value().vec()) b += 0.5;
    CHECK(adversarial_losses(x, x, disc).generator.item() == doctest::Approx(before - 0.5));
  }

  TEST_CASE("stage-2 objective") {
    const FeatureExtractor<double> ex;
    const PatchDiscriminator<double> disc(DiscriminatorArch{}, 3, 9);
    Rng rng(10);
    const auto t = ffa::test::random_tensor({1, 3, 8, 8}, rng, 0, 1);
    auto pred = ffa::test::leaf({1, 3, 8, 8}, rng, 0, 1);
    const Stage2LossWeights none{0.0, 0.0};
    CHECK(stage2_loss(pred, constant(t), none, ex, disc).item() ==
          doctest::Approx(reconstruction_loss(pred, constant(t)).item()));
    const Stage2LossWeights no_adv{1.0, 0.0};
    CHECK(stage2_loss(constant(t), constant(t), no_adv, ex, disc).item() == 0.0);
    const Stage2LossWeights defaults;
    CHECK(defaults.lambda_perceptual == 1.0);
    CHECK(defaults.lambda_adversarial == 0.1);
    CHECK(std::isfinite(stage2_loss(pred, constant(t), defaults, ex, disc).item()));
    CHECK(ffa::test::grad_check([&] { return stage2_loss(pred, constant(t), defaults, ex, disc); }, {pred}).rel_error <
          kLossGradTol);
    CHECK_THROWS_AS((Stage2LossWeights{-1.0, 0.1}.validate()), ConfigError);
  }

  TEST_CASE("decoder gradients reach the decoder parameters only") {
    CodecArch arch;
    arch.widths = {8, 8};
    arch.latent_channels = 2;
    arch.groups = 4;
    Codec<double> codec(arch, 11);
    codec.encoder_params().set_trainable(false);
    Rng rng(12);
    const auto x = ffa::test::random_tensor({1, 3, 8, 8}, rng, 0, 1);
    const auto z = codec.encode(x);
    std::vector<Var<double>> leaves;
    for (const auto& [name, v] : codec.decoder_params()) leaves.push_back(v);
    const auto gc = ffa::test::grad_check(
        [&] { return reconstruction_loss(codec.decode_raw(constant(z)), constant(x)); }, leaves, 1e-6, 8);
    CHECK(gc.rel_error < kLossGradTol);
    for (const auto& [name, v] : codec.encoder_params()) CHECK_FALSE(v.has_grad());
  }
}
