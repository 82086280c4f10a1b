// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ffa {

namespace {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

enum SeedTag : std::uint64_t {
  kCodecInit = 1,
  kDenoiserInit,
  kDiscInit,
  kCodecTrain,
  kStage1Train,
  kStage2Disc,
  kStage2Inputs,
  kStage2Train,
  kStage2Heldout,
};

UNetArch resolved_unet(const Config& cfg) {
  UNetArch a = cfg.unet;
  a.latent_channels = cfg.codec.latent_channels;
  a.context_dim = cfg.embed.token_dim();
  return a;
}

void emit(const StageOptions& opt, const std::string& line) {
  if (opt.log) opt.log(line);
}

std::string fixed(double v, int digits = 5) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

constexpr std::size_t kChunk = 16;

Tensor<float> stack_images(const std::vector<Image>& images) {
  return images_to_tensor<float>(std::span<const Image>(images.data(), images.size()));
}

// Rows [start, start + count) of a tensor along dimension 0.
Tensor<float> rows(const Tensor<float>& t, int start, int count) {
  Shape s = t.shape();
  const std::size_t inner = t.size() / static_cast<std::size_t>(s[0]);
  s[0] = count;
  Tensor<float> out(s);
  std::copy_n(t.data() + static_cast<std::size_t>(start) * inner, static_cast<std::size_t>(count) * inner, out.data());
  return out;
}

Tensor<float> gather_rows(const Tensor<float>& t, const std::vector<int>& idx) {
  Shape s = t.shape();
  const std::size_t inner = t.size() / static_cast<std::size_t>(s[0]);
  s[0] = static_cast<int>(idx.size());
  Tensor<float> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.data() + static_cast<std::size_t>(idx[i]) * inner, inner, out.data() + i * inner);
  return out;
}

Tensor<float> concat_rows(const std::vector<Tensor<float>>& parts) {
  Shape s = parts.front().shape();
  s[0] = 0;
  for (const auto& p : parts) s[0] += p.dim(0);
  Tensor<float> out(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.vec().begin(), p.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  return out;
}

Tensor<float> scaled(Tensor<float> t, double s) {
  const float f = static_cast<float>(s);
  for (auto& v : t.vec()) v *= f;
  return t;
}

Tensor<float> encode_images(const Codec<float>& codec, const std::vector<Image>& images) {
  std::vector<Tensor<float>> parts;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t cnt = std::min(kChunk, images.size() - start);
    parts.push_back(codec.encode(images_to_tensor<float>(std::span<const Image>(images.data() + start, cnt))));
  }
  return concat_rows(parts);
}

Tensor<float> embed_images(const SourceEmbedder<float>& embedder, const std::vector<Image>& images) {
  std::vector<Tensor<float>> parts;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t cnt = std::min(kChunk, images.size() - start);
    parts.push_back(embedder.embed(images_to_tensor<float>(std::span<const Image>(images.data() + start, cnt))));
  }
  return concat_rows(parts);
}

std::vector<Image> decode_latents(const Codec<float>& codec, const Tensor<float>& latents) {
  std::vector<Image> out;
  const int n = latents.dim(0);
  for (int start = 0; start < n; start += static_cast<int>(kChunk)) {
    const int cnt = std::min(static_cast<int>(kChunk), n - start);
    const Tensor<float> img = codec.decode(rows(latents, start, cnt));
    for (int i = 0; i < cnt; ++i) out.push_back(tensor_to_image(img, i));
  }
  return out;
}

// Deterministic DDIM chain over the given decreasing timesteps, batched in chunks.
Tensor<float> run_chain(const ModelBundle& b, const Tensor<float>& z_start, const Tensor<float>& z_source,
                        const Tensor<float>& context, const std::vector<int>& ts) {
  NoGradGuard ng;
  const int n = z_start.dim(0);
  std::vector<Tensor<float>> parts;
  for (int start = 0; start < n; start += static_cast<int>(kChunk)) {
    const int cnt = std::min(static_cast<int>(kChunk), n - start);
    Tensor<float> z = rows(z_start, start, cnt);
    const auto src = constant(rows(z_source, start, cnt));
    const auto ctx = constant(rows(context, start, cnt));
    for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
      const std::vector<int> t(static_cast<std::size_t>(cnt), ts[k]);
      const Tensor<float> eps = (*b.denoiser)(constant(z), src, t, ctx).value();
      z = ddim_step(z, eps, ts[k], ts[k + 1], b.schedule);
    }
    parts.push_back(std::move(z));
  }
  return concat_rows(parts);
}

// Random latent windows of side `crop` (the whole latent when crop is 0).
Stage1Batch<float> window_batch(const EncodedPairs& e, const std::vector<int>& idx, int crop, Rng& rng) {
  const int dz = e.target_latents.dim(1), h = e.target_latents.dim(2), w = e.target_latents.dim(3);
  Stage1Batch<float> batch;
  batch.context = gather_rows(e.context, idx);
  if (crop == 0 || (crop == h && crop == w)) {
    batch.target_latents = gather_rows(e.target_latents, idx);
    batch.source_latents = gather_rows(e.source_latents, idx);
    return batch;
  }
  const int n = static_cast<int>(idx.size());
  batch.target_latents = Tensor<float>({n, dz, crop, crop});
  batch.source_latents = Tensor<float>({n, dz, crop, crop});
  std::uniform_int_distribution<int> dy(0, h - crop), dx(0, w - crop);
  for (int i = 0; i < n; ++i) {
    const int oy = dy(rng), ox = dx(rng);
    for (int c = 0; c < dz; ++c)
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x) {
          const std::size_t src = ((static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * dz + c) * h + oy + y) * w + ox + x;
          const std::size_t dst = ((static_cast<std::size_t>(i) * dz + c) * crop + y) * crop + x;
          batch.target_latents[dst] = e.target_latents[src];
          batch.source_latents[dst] = e.source_latents[src];
        }
  }
  return batch;
}

void check_frozen(const ModelBundle& b, const std::map<std::string, std::uint64_t>& before, const char* stage) {
  const auto now = b.checksums();
  for (const auto& [name, sum] : before)
    if (now.at(name) != sum)
      throw FrozenMutationError(std::string(stage) + ": frozen parameter set '" + name + "' changed during training");
}

std::map<std::string, std::uint64_t> subset(const std::map<std::string, std::uint64_t>& all,
                                            std::initializer_list<const char*> names) {
  std::map<std::string, std::uint64_t> out;
  for (const char* n : names) out[n] = all.at(n);
  return out;
}

void require_finite(double v, const char* stage, int step) {
  if (!std::isfinite(v))
    throw Error(std::string(stage) + " diverged: non-finite loss at step " + std::to_string(step));
}

}  // namespace

std::vector<ParamSet<float>*> ModelBundle::sets() {
  return {&codec->encoder_params(), &codec->decoder_params(), &denoiser->params(), &embedder->params(),
          &discriminator->params()};
}

std::vector<const ParamSet<float>*> ModelBundle::sets() const {
  return {&codec->encoder_params(), &codec->decoder_params(), &denoiser->params(), &embedder->params(),
          &discriminator->params()};
}

ParamSet<float>& ModelBundle::set(const std::string& name) {
  for (auto* s : sets())
    if (s->name() == name) return *s;
  throw Error("no parameter set named '" + name + "'");
}

std::map<std::string, std::uint64_t> ModelBundle::checksums() const {
  std::map<std::string, std::uint64_t> out;
  for (const auto* s : sets()) out[s->name()] = s->checksum();
  return out;
}

ModelBundle make_bundle(const Config& cfg) {
  cfg.validate();
  ModelBundle b;
  b.config = cfg;
  const std::uint64_t seed = cfg.train.seed;
  b.codec = std::make_unique<Codec<float>>(cfg.codec, derive_seed(seed, kCodecInit));
  b.denoiser = std::make_unique<UNet<float>>(resolved_unet(cfg), derive_seed(seed, kDenoiserInit));
  b.embedder = std::make_unique<SourceEmbedder<float>>(cfg.embed, cfg.codec.image_channels);
  b.discriminator =
      std::make_unique<PatchDiscriminator<float>>(cfg.discriminator, cfg.codec.image_channels, derive_seed(seed, kDiscInit));
  b.schedule = build_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end, cfg.schedule_kind);
  b.offset.mu.assign(static_cast<std::size_t>(cfg.codec.latent_channels), 0.0);
  b.offset.sigma.assign(static_cast<std::size_t>(cfg.codec.latent_channels), 0.0);
  b.offset.lambda = cfg.offset_lambda;
  return b;
}

EncodedPairs encode_pairs(const ModelBundle& bundle, const std::vector<ImagePair>& pairs) {
  if (pairs.empty()) throw Error("encode_pairs: no pairs");
  std::vector<Image> src, tgt;
  for (const auto& p : pairs) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  EncodedPairs e;
  e.source_latents = scaled(encode_images(*bundle.codec, src), bundle.latent_scale);
  e.target_latents = scaled(encode_images(*bundle.codec, tgt), bundle.latent_scale);
  e.context = embed_images(*bundle.embedder, src);
  return e;
}

OffsetNoiseParams measure_offset(const ModelBundle& bundle, const std::vector<Image>& targets) {
  if (targets.empty()) throw Error("offset statistics: no class-0 target images in the training split");
  const Config& cfg = bundle.config;
  OffsetNoiseParams p;
  if (cfg.offset_space == OffsetSpace::kLatent) {
    p = estimate_offset_stats(targets, *bundle.codec, bundle.latent_scale, cfg.offset_granularity);
  } else {
    double s = 0, s2 = 0, n = 0;
    for (const auto& img : targets) {
      const Image g = to_gray(img);
      for (float v : g.data) {
        s += v;
        s2 += static_cast<double>(v) * v;
        n += 1;
      }
    }
    const double m = s / n;
    p.mu.assign(static_cast<std::size_t>(cfg.codec.latent_channels), m);
    p.sigma.assign(static_cast<std::size_t>(cfg.codec.latent_channels), std::sqrt(std::max(0.0, s2 / n - m * m)));
  }
  p.lambda = cfg.offset_lambda;
  p.validate();
  return p;
}

void pretrain_codec(ModelBundle& bundle, const std::vector<ImagePair>& train, const StageOptions& opt) {
  if (train.empty()) throw MissingDataError("pretrain_codec: empty training set");
  const Config& cfg = bundle.config;
  const auto& ct = cfg.codec_train;
  auto& codec = *bundle.codec;
  codec.encoder_params().set_trainable(true);
  codec.decoder_params().set_trainable(true);

  std::vector<Image> pool;
  for (const auto& p : train) {
    pool.push_back(p.source);
    pool.push_back(p.target);
  }
  const int side = cfg.data.image_size;
  const int crop = ct.crop == 0 ? side : ct.crop;
  AdamOptions ao = cfg.train.adam;
  ao.lr = ct.lr;
  Adam<float> adam({&codec.encoder_params(), &codec.decoder_params()}, ao);
  Rng rng(derive_seed(cfg.train.seed, kCodecTrain));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(pool.size()) - 1);
  std::uniform_int_distribution<int> off(0, side - crop);
  using O = Ops<float>;

  bundle.codec_trace.clear();
  for (int step = 0; step < ct.steps; ++step) {
    std::vector<Image> batch;
    for (int i = 0; i < ct.batch_size; ++i) {
      const Image& src = pool[static_cast<std::size_t>(pick(rng))];
      const int oy = off(rng), ox = off(rng);
      Image c(crop, crop, src.channels);
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x)
          for (int ch = 0; ch < src.channels; ++ch) c.at(y, x, ch) = src.at(oy + y, ox + x, ch);
      batch.push_back(std::move(c));
    }
    const auto x = constant(stack_images(batch));
    adam.zero_grad();
    const auto post = codec.encode_posterior(x);
    Var<float> loss = O::l1(codec.decode_raw(post.mean), x);
    if (ct.kl_weight > 0)
      loss = O::add(loss, O::scale(O::gaussian_kl(post.mean, post.logvar), static_cast<float>(ct.kl_weight)));
    backward(loss);
    adam.step();
    const double lv = loss.item();
    require_finite(lv, "codec pre-training", step);
    bundle.codec_trace.push_back(lv);
    if (opt.after_step) opt.after_step(bundle, step);
    if (cfg.train.log_every && (step + 1) % cfg.train.log_every == 0)
      emit(opt, "codec step " + std::to_string(step + 1) + "/" + std::to_string(ct.steps) + " loss " + fixed(lv));
  }
  codec.encoder_params().zero_grad();
  codec.decoder_params().zero_grad();

  // Unit-variance latents for the diffusion stages.
  std::vector<Image> all;
  for (const auto& p : train) {
    all.push_back(p.source);
    all.push_back(p.target);
  }
  const Tensor<float> z = encode_images(codec, all);
  double s = 0, s2 = 0;
  for (float v : z.vec()) {
    s += v;
    s2 += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(z.size());
  const double sd = std::sqrt(std::max(0.0, s2 / n - (s / n) * (s / n)));
  bundle.latent_scale = sd > 1e-12 ? 1.0 / sd : 1.0;

  std::vector<Image> normal_targets;
  for (const auto& p : train)
    if (p.label == 0) normal_targets.push_back(p.target);
  bundle.offset = measure_offset(bundle, normal_targets);
  bundle.codec_trained = true;
  bundle.stage1_done = false;
  bundle.stage2_done = false;
  emit(opt, "codec done: latent_scale " + fixed(bundle.latent_scale));
}

void train_stage1(ModelBundle& bundle, const std::vector<ImagePair>& train, const StageOptions& opt) {
  if (!bundle.codec_trained)
    throw StageOrderError("stage 1 needs a pre-trained autoencoder; run pretrain-codec first");
  if (train.empty()) throw MissingDataError("train_stage1: empty training set");
  const Config& cfg = bundle.config;
  const auto& tc = cfg.train;

  const auto frozen = subset(bundle.checksums(), {"encoder", "decoder", "embedder", "discriminator"});
  bundle.codec->encoder_params().set_trainable(false);
  bundle.codec->decoder_params().set_trainable(false);
  bundle.embedder->params().set_trainable(false);
  bundle.discriminator->params().set_trainable(false);
  bundle.denoiser->params().set_trainable(true);

  const EncodedPairs enc = encode_pairs(bundle, train);
  Adam<float> adam({&bundle.denoiser->params()}, tc.adam);
  Rng rng(derive_seed(tc.seed, kStage1Train));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(train.size()) - 1);
  const auto predictor = as_predictor(*bundle.denoiser);

  bundle.stage1_trace.clear();
  for (int step = 0; step < tc.stage1_steps; ++step) {
    std::vector<int> idx(static_cast<std::size_t>(tc.batch_size));
    for (auto& i : idx) i = pick(rng);
    const Stage1Batch<float> batch = window_batch(enc, idx, tc.stage1_crop, rng);
    adam.zero_grad();
    const Var<float> loss = stage1_loss(predictor, batch, bundle.schedule, bundle.offset, rng);
    backward(loss);
    adam.step();
    const double lv = loss.item();
    require_finite(lv, "stage 1", step);
    bundle.stage1_trace.push_back(lv);
    if (opt.after_step) opt.after_step(bundle, step);
    if (tc.log_every && (step + 1) % tc.log_every == 0) {
      const int from = std::max(0, step + 1 - tc.log_every);
      const double avg =
          std::accumulate(bundle.stage1_trace.begin() + from, bundle.stage1_trace.end(), 0.0) / (step + 1 - from);
      emit(opt, "stage1 step " + std::to_string(step + 1) + "/" + std::to_string(tc.stage1_steps) + " loss " +
                    fixed(avg));
    }
  }
  bundle.denoiser->params().zero_grad();
  check_frozen(bundle, frozen, "stage 1");
  bundle.stage1_done = true;
  bundle.stage2_done = false;
}

namespace {

// Decoder inputs (unscaled latents) for stage 2.
Tensor<float> stage2_inputs(const ModelBundle& b, const EncodedPairs& enc, Rng& rng) {
  const auto& tc = b.config.train;
  const Shape shape = enc.target_latents.shape();
  Tensor<float> z;
  std::vector<int> ts;
  if (tc.stage2_mode == Stage2Mode::kShort) {
    const Tensor<float> noise = sample_composite_noise<float>(b.offset, shape, rng);
    z = q_sample(enc.target_latents, tc.start_t, noise, b.schedule);
    ts = ddim_timesteps(tc.start_t, tc.chain_steps);
  } else {
    z = sample_composite_noise<float>(b.offset, shape, rng);
    ts = ddim_timesteps(b.schedule.steps, b.config.sample_steps);
  }
  return scaled(run_chain(b, z, enc.source_latents, enc.context, ts), 1.0 / b.latent_scale);
}

double mean_recon(const ModelBundle& b, const Tensor<float>& latents, const Tensor<float>& targets) {
  NoGradGuard ng;
  double total = 0;
  const int n = latents.dim(0);
  for (int start = 0; start < n; start += static_cast<int>(kChunk)) {
    const int cnt = std::min(static_cast<int>(kChunk), n - start);
    const auto pred = b.codec->decode(constant(rows(latents, start, cnt)));
    total += reconstruction_loss(pred, constant(rows(targets, start, cnt))).item() * cnt;
  }
  return total / n;
}

}  // namespace

void train_stage2(ModelBundle& bundle, const std::vector<ImagePair>& train, const std::vector<ImagePair>& heldout,
                  const StageOptions& opt) {
  if (!bundle.stage1_done) throw StageOrderError("stage 2 needs a stage-1 bundle; run train-stage1 first");
  if (train.empty()) throw MissingDataError("train_stage2: empty training set");
  const Config& cfg = bundle.config;
  const auto& tc = cfg.train;

  bundle.discriminator = std::make_unique<PatchDiscriminator<float>>(cfg.discriminator, cfg.codec.image_channels,
                                                                      derive_seed(tc.seed, kStage2Disc));
  const auto frozen = subset(bundle.checksums(), {"encoder", "denoiser", "embedder"});
  bundle.codec->encoder_params().set_trainable(false);
  bundle.denoiser->params().set_trainable(false);
  bundle.embedder->params().set_trainable(false);
  bundle.codec->decoder_params().set_trainable(true);

  const EncodedPairs enc = encode_pairs(bundle, train);
  Rng input_rng(derive_seed(tc.seed, kStage2Inputs));
  std::vector<Tensor<float>> variants;
  for (int v = 0; v < tc.stage2_variants; ++v) variants.push_back(stage2_inputs(bundle, enc, input_rng));
  std::vector<Image> target_images;
  for (const auto& p : train) target_images.push_back(p.target);
  const Tensor<float> targets = stack_images(target_images);

  Tensor<float> held_latents, held_targets;
  if (!heldout.empty()) {
    Rng hr(derive_seed(tc.seed, kStage2Heldout));
    held_latents = stage2_inputs(bundle, encode_pairs(bundle, heldout), hr);
    std::vector<Image> ht;
    for (const auto& p : heldout) ht.push_back(p.target);
    held_targets = stack_images(ht);
  }

  const FeatureExtractor<float> extractor;
  auto& disc = *bundle.discriminator;
  Adam<float> dec_opt({&bundle.codec->decoder_params()}, tc.adam);
  Adam<float> disc_opt({&disc.params()}, tc.adam);
  Rng rng(derive_seed(tc.seed, kStage2Train));
  std::uniform_int_distribution<int> pick_variant(0, tc.stage2_variants - 1);

  bundle.stage2_trace.clear();
  bundle.stage2_heldout_recon.clear();
  if (!heldout.empty()) bundle.stage2_heldout_recon.push_back(mean_recon(bundle, held_latents, held_targets));

  const int n = static_cast<int>(train.size());
  int step = 0;
  for (int epoch = 0; epoch < tc.stage2_epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    int batches = 0;
    for (int start = 0; start < n; start += tc.batch_size) {
      const int cnt = std::min(tc.batch_size, n - start);
      const std::vector<int> idx(order.begin() + start, order.begin() + start + cnt);
      Tensor<float> lat = gather_rows(variants.front(), idx);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& src = variants[static_cast<std::size_t>(pick_variant(rng))];
        const std::size_t inner = lat.size() / idx.size();
        std::copy_n(src.data() + static_cast<std::size_t>(idx[i]) * inner, inner, lat.data() + i * inner);
      }
      const auto tgt = constant(gather_rows(targets, idx));

      disc.params().set_trainable(false);
      dec_opt.zero_grad();
      const Var<float> pred = bundle.codec->decode_raw(constant(lat));
      const Var<float> loss = stage2_loss(pred, tgt, cfg.loss, extractor, disc);
      backward(loss);
      dec_opt.step();

      disc.params().set_trainable(true);
      disc_opt.zero_grad();
      const auto terms = adversarial_losses(constant(pred.value()), tgt, disc);
      backward(terms.discriminator);
      disc_opt.step();

      const double lv = loss.item();
      require_finite(lv, "stage 2", step);
      require_finite(terms.discriminator.item(), "stage 2 discriminator", step);
      epoch_loss += lv;
      ++batches;
      if (opt.after_step) opt.after_step(bundle, step);
      ++step;
    }
    bundle.stage2_trace.push_back(epoch_loss / batches);
    std::string line = "stage2 epoch " + std::to_string(epoch + 1) + "/" + std::to_string(tc.stage2_epochs) +
                       " loss " + fixed(bundle.stage2_trace.back());
    if (!heldout.empty()) {
      bundle.stage2_heldout_recon.push_back(mean_recon(bundle, held_latents, held_targets));
      line += " heldout_l1 " + fixed(bundle.stage2_heldout_recon.back());
    }
    if (tc.log_every) emit(opt, line);
  }
  bundle.codec->decoder_params().zero_grad();
  disc.params().zero_grad();
  check_frozen(bundle, frozen, "stage 2");
  bundle.stage2_done = true;
}

double evaluate_stage1_loss(const ModelBundle& bundle, const std::vector<ImagePair>& pairs, int draws,
                            std::uint64_t seed) {
  if (draws < 1) throw Error("evaluate_stage1_loss: draws must be >= 1");
  NoGradGuard ng;
  const EncodedPairs enc = encode_pairs(bundle, pairs);
  const auto predictor = as_predictor(*bundle.denoiser);
  const int bs = bundle.config.train.batch_size;
  std::uniform_int_distribution<int> pick(0, static_cast<int>(pairs.size()) - 1);
  double total = 0;
  for (int d = 0; d < draws; ++d) {
    Rng rng(seed + static_cast<std::uint64_t>(d));
    std::vector<int> idx(static_cast<std::size_t>(bs));
    for (auto& i : idx) i = pick(rng);
    const auto batch = window_batch(enc, idx, bundle.config.train.stage1_crop, rng);
    total += stage1_loss(predictor, batch, bundle.schedule, bundle.offset, rng).item();
  }
  return total / draws;
}

std::vector<Image> generate(const ModelBundle& bundle, const std::vector<Image>& sources, int steps,
                            std::uint64_t seed) {
  if (!bundle.stage1_done) throw StageOrderError("generate needs a trained denoiser; run train-stage1 first");
  if (sources.empty()) return {};
  if (steps < 1 || steps > bundle.schedule.steps)
    throw ConfigError("sampling steps must lie in [1, " + std::to_string(bundle.schedule.steps) + "]");
  for (const auto& s : sources)
    if (!s.same_shape(sources.front())) throw Error("generate: all source images must share one size");
  const Tensor<float> z_src = scaled(encode_images(*bundle.codec, sources), bundle.latent_scale);
  const Tensor<float> ctx = embed_images(*bundle.embedder, sources);
  Shape one = z_src.shape();
  one[0] = 1;
  std::vector<Tensor<float>> init;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    Rng rng(seed + i);
    init.push_back(sample_composite_noise<float>(bundle.offset, one, rng));
  }
  const Tensor<float> z0 =
      run_chain(bundle, concat_rows(init), z_src, ctx, ddim_timesteps(bundle.schedule.steps, steps));
  return decode_latents(*bundle.codec, scaled(z0, 1.0 / bundle.latent_scale));
}

Image generate(const ModelBundle& bundle, const Image& source, int steps, std::uint64_t seed) {
  return generate(bundle, std::vector<Image>{source}, steps, seed).front();
}

// ---------------------------------------------------------------------------------------------
// Checkpoint container: magic, u32 version, u64 metadata length, metadata text, float32 blobs.

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'F', 'F', 'A', 'C', 'K', 'P', 'T', '\0'};

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s.empty() ? "-" : s;
}

std::vector<double> split_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  if (s == "-") return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double v = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size())
      throw Error("checkpoint: malformed number '" + item + "' in " + what);
    out.push_back(v);
  }
  return out;
}

std::string shape_csv(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  std::ostringstream meta;
  meta << "format ffasynth-checkpoint\n";
  meta << "meta latent_scale " << format_double(bundle.latent_scale) << '\n';
  meta << "meta codec_trained " << bundle.codec_trained << '\n';
  meta << "meta stage1_done " << bundle.stage1_done << '\n';
  meta << "meta stage2_done " << bundle.stage2_done << '\n';
  meta << "meta offset.mu " << join_doubles(bundle.offset.mu) << '\n';
  meta << "meta offset.sigma " << join_doubles(bundle.offset.sigma) << '\n';
  meta << "meta offset.lambda " << format_double(bundle.offset.lambda) << '\n';
  meta << "meta schedule " << bundle.schedule.steps << ' ' << format_double(bundle.schedule.beta_start) << ' '
       << format_double(bundle.schedule.beta_end) << " linear\n";
  meta << "meta trace.codec " << join_doubles(bundle.codec_trace) << '\n';
  meta << "meta trace.stage1 " << join_doubles(bundle.stage1_trace) << '\n';
  meta << "meta trace.stage2 " << join_doubles(bundle.stage2_trace) << '\n';
  meta << "meta trace.stage2_heldout " << join_doubles(bundle.stage2_heldout_recon) << '\n';
  for (const auto& k : config_keys()) meta << "config " << k.key << '=' << k.get(bundle.config) << '\n';
  std::uint64_t offset = 0;
  for (const auto* set : bundle.sets())
    for (const auto& [name, v] : *set) {
      const std::uint64_t len = v.size() * sizeof(float);
      meta << "tensor " << set->name() << '/' << name << " f32 " << shape_csv(v.shape()) << ' ' << offset << ' ' << len
           << '\n';
      offset += len;
    }
  meta << "end\n";
  const std::string text = meta.str();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write checkpoint " + tmp.string());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t meta_len = text.size();
    f.write(kMagic, sizeof kMagic);
    f.write(reinterpret_cast<const char*>(&version), sizeof version);
    f.write(reinterpret_cast<const char*>(&meta_len), sizeof meta_len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* set : bundle.sets())
      for (const auto& [name, v] : *set)
        f.write(reinterpret_cast<const char*>(v.value().data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!f) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingDataError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string() + ": ";
  constexpr std::size_t header = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < header) throw Error(where + "truncated header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw Error(where + "bad magic bytes at offset 0");
  std::uint32_t version = 0;
  std::uint64_t meta_len = 0;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  std::memcpy(&meta_len, bytes.data() + sizeof kMagic + sizeof version, sizeof meta_len);
  if (version != kCheckpointVersion)
    throw Error(where + "unsupported format version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  if (meta_len > bytes.size() - header)
    throw Error(where + "metadata length " + std::to_string(meta_len) + " at offset " +
                std::to_string(sizeof kMagic + sizeof version) + " exceeds file size " + std::to_string(bytes.size()));
  const std::string text = bytes.substr(header, meta_len);
  const std::size_t data_start = header + meta_len;
  const std::uint64_t data_size = bytes.size() - data_start;

  struct Entry {
    std::string set, name;
    Shape shape;
    std::uint64_t offset = 0, length = 0;
  };
  std::vector<Entry> tensors;
  std::map<std::string, std::string> metas;
  Config cfg;
  bool ended = false, formatted = false;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string loc = where + "metadata line " + std::to_string(lineno) + ": ";
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ffasynth-checkpoint") throw Error(loc + "unknown format '" + fmt + "'");
      formatted = true;
    } else if (kind == "meta") {
      std::string key, rest;
      ls >> key;
      std::getline(ls, rest);
      metas[key] = rest.empty() ? rest : rest.substr(1);
    } else if (kind == "config") {
      std::string rest;
      std::getline(ls, rest);
      rest = rest.empty() ? rest : rest.substr(1);
      const auto eq = rest.find('=');
      if (eq == std::string::npos) throw Error(loc + "malformed config echo");
      try {
        set_config_value(cfg, rest.substr(0, eq), rest.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw Error(loc + e.what());
      }
    } else if (kind == "tensor") {
      Entry e;
      std::string full, type, shape;
      ls >> full >> type >> shape >> e.offset >> e.length;
      if (!ls || type != "f32") throw Error(loc + "malformed tensor entry");
      const auto slash = full.find('/');
      if (slash == std::string::npos) throw Error(loc + "tensor name lacks a set prefix");
      e.set = full.substr(0, slash);
      e.name = full.substr(slash + 1);
      for (const double d : split_doubles(shape, "shape")) e.shape.push_back(static_cast<int>(d));
      if (e.length != numel(e.shape) * sizeof(float)) throw Error(loc + "tensor byte length does not match its shape");
      if (e.offset > data_size || e.length > data_size - e.offset)
        throw Error(where + "tensor " + full + " at data offset " + std::to_string(e.offset) + " (+" +
                    std::to_string(e.length) + " bytes) exceeds the " + std::to_string(data_size) +
                    "-byte data section; file truncated?");
      tensors.push_back(std::move(e));
    } else if (kind == "end") {
      ended = true;
      break;
    } else if (!kind.empty()) {
      throw Error(loc + "unknown record '" + kind + "'");
    }
  }
  if (!formatted || !ended) throw Error(where + "incomplete metadata block");

  ModelBundle b = make_bundle(cfg);
  auto need = [&](const std::string& key) -> const std::string& {
    const auto it = metas.find(key);
    if (it == metas.end()) throw Error(where + "missing metadata '" + key + "'");
    return it->second;
  };
  b.latent_scale = split_doubles(need("latent_scale"), "latent_scale").at(0);
  b.codec_trained = need("codec_trained") == "1";
  b.stage1_done = need("stage1_done") == "1";
  b.stage2_done = need("stage2_done") == "1";
  b.offset.mu = split_doubles(need("offset.mu"), "offset.mu");
  b.offset.sigma = split_doubles(need("offset.sigma"), "offset.sigma");
  b.offset.lambda = split_doubles(need("offset.lambda"), "offset.lambda").at(0);
  b.offset.validate();
  b.codec_trace = split_doubles(need("trace.codec"), "trace.codec");
  b.stage1_trace = split_doubles(need("trace.stage1"), "trace.stage1");
  b.stage2_trace = split_doubles(need("trace.stage2"), "trace.stage2");
  b.stage2_heldout_recon = split_doubles(need("trace.stage2_heldout"), "trace.stage2_heldout");

  std::size_t expected = 0;
  for (const auto* s : b.sets()) expected += s->size();
  if (tensors.size() != expected)
    throw Error(where + "lists " + std::to_string(tensors.size()) + " tensors, the configured model has " +
                std::to_string(expected));
  std::uint64_t covered = 0;
  for (const auto& e : tensors) {
    auto& set = b.set(e.set);
    if (!set.contains(e.name)) throw Error(where + "unknown tensor " + e.set + "/" + e.name);
    auto& v = set.at(e.name);
    if (v.shape() != e.shape)
      throw Error(where + "tensor " + e.set + "/" + e.name + " has shape " + shape_str(e.shape) + ", model expects " +
                  shape_str(v.shape()));
    std::memcpy(v.mutable_value().data(), bytes.data() + data_start + e.offset, e.length);
    covered += e.length;
  }
  if (covered != data_size)
    throw Error(where + "data section holds " + std::to_string(data_size) + " bytes, tensors cover " +
                std::to_string(covered));
  return b;
}

}  // namespace ffa
