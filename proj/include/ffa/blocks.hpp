// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "ffa/nn.hpp"

namespace ffa {

/// GN -> SiLU -> conv -> (+ time projection) -> GN -> SiLU -> conv, plus a 1x1 skip when widths differ.
template <typename T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2, skip;
  Linear<T> time_proj;
  bool has_skip = false;
  bool has_time = false;

  ResBlock() = default;
  ResBlock(ParamSet<T>& ps, const std::string& name, int cin, int cout, int time_dim, int groups, Rng& rng)
      : norm1(ps, name + ".norm1", cin, groups),
        norm2(ps, name + ".norm2", cout, groups),
        conv1(ps, name + ".conv1", cin, cout, 3, 1, 1, rng),
        conv2(ps, name + ".conv2", cout, cout, 3, 1, 1, rng),
        has_skip(cin != cout),
        has_time(time_dim > 0) {
    if (has_skip) skip = Conv2d<T>(ps, name + ".skip", cin, cout, 1, 1, 0, rng);
    if (has_time) time_proj = Linear<T>(ps, name + ".time_proj", time_dim, cout, rng);
  }

  /// time_act: SiLU-activated time embedding [N, time_dim]; ignored when the block has none.
  Var<T> operator()(const Var<T>& x, const Var<T>& time_act = {}) const {
    using O = Ops<T>;
    Var<T> h = conv1(O::silu(norm1(x)));
    if (has_time) h = O::add_channel_bias(h, time_proj(time_act));
    h = conv2(O::silu(norm2(h)));
    return O::add(has_skip ? skip(x) : x, h);
  }
};

}  // namespace ffa
