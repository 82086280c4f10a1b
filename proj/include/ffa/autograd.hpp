// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

// Tape-free reverse-mode differentiation. Every operation returns a Var whose node
// remembers its inputs and a closure that propagates the output gradient back to them.
// Graphs are only recorded when at least one input requires a gradient and gradient
// recording has not been disabled with NoGradGuard.

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ffa/tensor.hpp"

namespace ffa {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  /// Scalar value of a one-element Var.
  T item() const { return node_->value[0]; }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool enabled();

 private:
  bool previous_;
};

/// Accumulates d(root)/d(leaf) into every reachable node that requires a gradient.
/// root must hold exactly one element.
template <typename T>
void backward(const Var<T>& root);

/// Differentiable operations. Shapes follow NCHW for images, [N, L, C] for tokens.
template <typename T>
struct Ops {
  using V = Var<T>;

  static V add(const V& a, const V& b);
  static V sub(const V& a, const V& b);
  static V mul(const V& a, const V& b);
  static V scale(const V& a, T s);
  static V add_scalar(const V& a, T s);

  static V silu(const V& a);
  static V relu(const V& a);
  static V clamp(const V& a, T lo, T hi);

  /// w: [O, C, k, k]; b: [O] or undefined.
  static V conv2d(const V& x, const V& w, const V& b, int stride, int pad);
  /// x: [..., in]; w: [out, in]; b: [out] or undefined.
  static V linear(const V& x, const V& w, const V& b);
  static V group_norm(const V& x, const V& gamma, const V& beta, int groups, T eps);
  /// Normalizes over the last dimension. gamma/beta may be undefined.
  static V layer_norm(const V& x, const V& gamma, const V& beta, T eps);
  /// Unit L2 norm across channels at every spatial position.
  static V channel_normalize(const V& x, T eps);

  /// x: [N, C, H, W]; b: [N, C] broadcast over space.
  static V add_channel_bias(const V& x, const V& b);
  /// Concatenate / slice along dimension 1 (channels for NCHW, features for [N, C]).
  static V concat1(const V& a, const V& b);
  static V slice1(const V& x, int start, int count);
  static V reshape(const V& x, Shape shape);

  static V avg_pool(const V& x, int factor);
  static V upsample_nearest(const V& x, int factor);
  static V global_avg_pool(const V& x);
  static V to_tokens(const V& x);
  static V from_tokens(const V& x, int h, int w);

  /// Multi-head scaled dot-product attention. q: [B, N, C], k/v: [B, M, C].
  static V attention(const V& q, const V& k, const V& v, int heads);

  static V mean(const V& x);
  static V sum(const V& x);
  static V mse(const V& a, const V& b);
  static V l1(const V& a, const V& b);
  /// mean over elements of 0.5 * (mu^2 + exp(logvar) - 1 - logvar).
  static V gaussian_kl(const V& mu, const V& logvar);
  /// Mean softmax cross-entropy. logits: [N, K].
  static V cross_entropy(const V& logits, const std::vector<int>& labels);
};

extern template struct Ops<float>;
extern template struct Ops<double>;

/// Row-wise softmax of a [N, K] tensor; not differentiable.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

/// Builds a constant (non-differentiable) Var.
template <typename T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

}  // namespace ffa
