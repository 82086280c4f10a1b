// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ffa/autograd.hpp"

namespace ffa {

using Rng = std::mt19937_64;

/// Named, ordered collection of parameter tensors sharing nodes with the layers that use them.
template <typename T>
class ParamSet {
 public:
  explicit ParamSet(std::string name = {}) : name_(std::move(name)) {}
  // Copies would alias the layers' parameter nodes.
  ParamSet(const ParamSet&) = delete;
  ParamSet& operator=(const ParamSet&) = delete;
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  const std::string& name() const noexcept { return name_; }

  Var<T> add(const std::string& key, Tensor<T> init) {
    for (const auto& [k, _] : params_)
      if (k == key) throw Error("duplicate parameter '" + key + "' in set '" + name_ + "'");
    Var<T> v(std::move(init), trainable_);
    params_.emplace_back(key, v);
    return v;
  }

  bool contains(const std::string& key) const {
    for (const auto& [k, _] : params_)
      if (k == key) return true;
    return false;
  }

  const Var<T>& at(const std::string& key) const {
    for (const auto& [k, v] : params_)
      if (k == key) return v;
    throw Error("no parameter '" + key + "' in set '" + name_ + "'");
  }
  Var<T>& at(const std::string& key) {
    return const_cast<Var<T>&>(static_cast<const ParamSet&>(*this).at(key));
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const noexcept { return params_.size(); }

  bool trainable() const noexcept { return trainable_; }
  /// Toggles gradient recording for every tensor in the set.
  void set_trainable(bool on) {
    trainable_ = on;
    for (auto& [_, v] : params_) {
      v.set_requires_grad(on);
      if (!on) v.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.size();
    return n;
  }

  /// Byte checksum over names, shapes and values.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [k, v] : params_) {
      h = fnv1a(k.data(), k.size(), h);
      h = fnv1a(v.shape().data(), v.shape().size() * sizeof(int), h);
      h = ffa::checksum(v.value(), h);
    }
    return h;
  }

  /// Copies values by name from another set with identical layout (possibly other scalar type).
  template <typename U>
  void copy_values_from(const ParamSet<U>& other) {
    for (auto& [k, v] : params_) {
      const auto& src = other.at(k).value();
      if (src.shape() != v.shape())
        throw Error("parameter '" + k + "' shape " + shape_str(src.shape()) + " vs " + shape_str(v.shape()));
      for (std::size_t i = 0; i < src.size(); ++i) v.mutable_value()[i] = static_cast<T>(src[i]);
    }
  }

 private:
  std::string name_;
  std::vector<std::pair<std::string, Var<T>>> params_;
  bool trainable_ = true;
};

/// Uniform(-bound, bound) init drawn in double so float and double models initialize identically.
template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(stddev * dist(rng));
  return t;
}

template <typename T>
struct Conv2d {
  Var<T> w, b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  /// `init_scale` multiplies the default fan-in bound; 0 gives a zero-initialized layer.
  Conv2d(ParamSet<T>& ps, const std::string& name, int cin, int cout, int k, int stride_, int pad_, Rng& rng,
         double init_scale = 1.0)
      : stride(stride_), pad(pad_) {
    const double bound = init_scale / std::sqrt(static_cast<double>(cin * k * k));
    w = ps.add(name + ".weight", uniform_tensor<T>({cout, cin, k, k}, bound, rng));
    b = ps.add(name + ".bias", init_scale == 0.0 ? Tensor<T>({cout}) : uniform_tensor<T>({cout}, bound, rng));
  }
  Var<T> operator()(const Var<T>& x) const { return Ops<T>::conv2d(x, w, b, stride, pad); }
  int in_channels() const { return w.dim(1); }
  int out_channels() const { return w.dim(0); }
};

template <typename T>
struct Linear {
  Var<T> w, b;

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true,
         double init_scale = 1.0) {
    const double bound = init_scale / std::sqrt(static_cast<double>(in));
    w = ps.add(name + ".weight", uniform_tensor<T>({out, in}, bound, rng));
    if (bias) b = ps.add(name + ".bias", init_scale == 0.0 ? Tensor<T>({out}) : uniform_tensor<T>({out}, bound, rng));
  }
  Var<T> operator()(const Var<T>& x) const { return Ops<T>::linear(x, w, b); }
};

template <typename T>
struct GroupNorm {
  Var<T> gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamSet<T>& ps, const std::string& name, int channels, int groups_) : groups(groups_) {
    while (channels % groups) --groups;
    gamma = ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return Ops<T>::group_norm(x, gamma, beta, groups, T(1e-5)); }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, int channels) {
    gamma = ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return Ops<T>::layer_norm(x, gamma, beta, T(1e-5)); }
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed list of parameter sets. Only sets passed here are ever updated.
template <typename T>
class Adam {
 public:
  Adam(std::vector<ParamSet<T>*> sets, AdamOptions opt) : opt_(opt) {
    for (auto* s : sets)
      for (auto& [_, v] : *s) {
        params_.push_back(v);
        m_.emplace_back(v.size(), 0.0);
        v_.emplace_back(v.size(), 0.0);
      }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& var = params_[p];
      if (!var.has_grad()) continue;
      const auto& g = var.grad();
      auto& val = var.mutable_value();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double gi = g[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        val[i] = static_cast<T>(val[i] - opt_.lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& v : params_) v.zero_grad();
  }

  long steps() const noexcept { return t_; }

 private:
  AdamOptions opt_;
  std::vector<Var<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace ffa
