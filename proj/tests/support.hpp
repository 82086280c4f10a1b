// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ffa/autograd.hpp"
#include "ffa/nn.hpp"

namespace ffa::test {

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

inline Var<double> leaf(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Var<double>(random_tensor(s, rng, lo, hi), true);
}

struct GradCheck {
  double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double numeric_norm = 0;
};

/// Central differences of `loss` with respect to the elements of `leaves`; `max_per_leaf` > 0
/// checks an evenly strided subset of each leaf.
inline GradCheck grad_check(const std::function<Var<double>()>& loss, std::vector<Var<double>> leaves,
                            double h = 1e-5, std::size_t max_per_leaf = 0) {
  for (auto& l : leaves) l.zero_grad();
  backward(loss());
  double diff = 0, na = 0, nn = 0;
  for (auto& l : leaves) {
    const Tensor<double> analytic = l.has_grad() ? l.grad() : Tensor<double>(l.shape());
    const std::size_t stride = max_per_leaf ? std::max<std::size_t>(1, l.size() / max_per_leaf) : 1;
    for (std::size_t i = 0; i < l.size(); i += stride) {
      const double keep = l.value()[i];
      l.mutable_value()[i] = keep + h;
      const double up = loss().item();
      l.mutable_value()[i] = keep - h;
      const double down = loss().item();
      l.mutable_value()[i] = keep;
      const double num = (up - down) / (2 * h);
      diff += (analytic[i] - num) * (analytic[i] - num);
      na += analytic[i] * analytic[i];
      nn += num * num;
    }
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
  return {std::sqrt(diff) / denom, std::sqrt(nn)};
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace ffa::test
