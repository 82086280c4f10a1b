// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace ffa::test {

// Small enough that every stage finishes in well under a second.
inline constexpr const char* kTinyConfig =
    "data.image_size = 32\n"
    "data.counts = 3,3,3\n"
    "codec.widths = 8,8,8\n"
    "codec.groups = 4\n"
    "codec.crop = 16\n"
    "codec.steps = 4\n"
    "codec.batch_size = 2\n"
    "disc.widths = 8,8\n"
    "unet.widths = 16,16\n"
    "unet.res_blocks = 1\n"
    "unet.head_dim = 8\n"
    "unet.time_dim = 16\n"
    "unet.groups = 4\n"
    "embed.widths = 8,16\n"
    "train.batch_size = 2\n"
    "train.stage1_crop = 4\n"
    "train.stage1_steps = 4\n"
    "train.stage2_epochs = 1\n"
    "train.log_every = 2\n"
    "stage2.variants = 1\n"
    "stage2.chain_steps = 2\n"
    "sample.steps = 2\n"
    "classify.side = 32\n"
    "classify.widths = 4,8\n"
    "classify.epochs = 2\n";

}  // namespace ffa::test
