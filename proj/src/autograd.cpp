// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ffa {

namespace {

thread_local bool g_no_grad = false;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (!g_no_grad) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in && in->requires_grad);
    if (any) {
      n->requires_grad = true;
      n->inputs = std::move(inputs);
      n->backward = std::move(fn);
    }
  }
  return Var<T>(std::move(n));
}

template <typename T>
bool wants(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

template <typename T>
void accumulate(const NodePtr<T>& n, const Tensor<T>& g) {
  if (!wants(n)) return;
  auto& buf = n->grad_buffer();
  T* d = buf.data();
  const T* s = g.data();
  for (std::size_t i = 0; i < buf.size(); ++i) d[i] += s[i];
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw Error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const Shape& s, int r, const char* op) {
  if (static_cast<int>(s.size()) != r)
    throw Error(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

template <typename T>
T silu_f(T x) {
  return x / (T(1) + std::exp(-x));
}

// cols: row-major [C*k*k, N*Ho*Wo]
template <typename T>
void im2col(const T* x, int n_batch, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* cols) {
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  const std::size_t p_total = hw_out * n_batch;
  for (int n = 0; n < n_batch; ++n) {
    for (int ci = 0; ci < c; ++ci) {
      const T* src = x + (static_cast<std::size_t>(n) * c + ci) * h * w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t row = (static_cast<std::size_t>(ci) * k + ky) * k + kx;
          T* dst = cols + row * p_total + n * hw_out;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            T* drow = dst + static_cast<std::size_t>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(drow, drow + wo, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int n_batch, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* dx) {
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  const std::size_t p_total = hw_out * n_batch;
  for (int n = 0; n < n_batch; ++n) {
    for (int ci = 0; ci < c; ++ci) {
      T* dst = dx + (static_cast<std::size_t>(n) * c + ci) * h * w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t row = (static_cast<std::size_t>(ci) * k + ky) * k + kx;
          const T* src = cols + row * p_total + n * hw_out;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            const T* srow = src + static_cast<std::size_t>(oy) * wo;
            T* drow = dst + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::enabled() { return g_no_grad; }

template <typename T>
void backward(const Var<T>& root) {
  if (!root.defined()) throw Error("backward: undefined root");
  if (root.size() != 1) throw Error("backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node<T>* child = node->inputs[idx++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax_rows");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<std::size_t>(i) * k;
    T* o = out.data() + static_cast<std::size_t>(i) * k;
    T mx = *std::max_element(row, row + k);
    double s = 0;
    for (int j = 0; j < k; ++j) {
      o[j] = std::exp(row[j] - mx);
      s += o[j];
    }
    for (int j = 0; j < k; ++j) o[j] = static_cast<T>(o[j] / s);
  }
  return out;
}

// ---- elementwise -------------------------------------------------------------------------

template <typename T>
Var<T> Ops<T>::add(const V& a, const V& b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    accumulate(self.inputs[0], self.grad);
    accumulate(self.inputs[1], self.grad);
  });
}

template <typename T>
Var<T> Ops<T>::sub(const V& a, const V& b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    accumulate(self.inputs[0], self.grad);
    if (wants(self.inputs[1])) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> Ops<T>::mul(const V& a, const V& b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (wants(self.inputs[0])) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants(self.inputs[1])) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> Ops<T>::scale(const V& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make_op<T>(std::move(out), {a.ptr()}, [s](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Var<T> Ops<T>::add_scalar(const V& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v += s;
  return make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) { accumulate(self.inputs[0], self.grad); });
}

template <typename T>
Var<T> Ops<T>::silu(const V& a) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = silu_f(x[i]);
  return make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T sg = T(1) / (T(1) + std::exp(-xv[i]));
      g[i] += self.grad[i] * sg * (T(1) + xv[i] * (T(1) - sg));
    }
  });
}

template <typename T>
Var<T> Ops<T>::relu(const V& a) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> Ops<T>::clamp(const V& a, T lo, T hi) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  return make_op<T>(std::move(out), {a.ptr()}, [lo, hi](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) g[i] += self.grad[i];
  });
}

// ---- convolution / linear ----------------------------------------------------------------

template <typename T>
Var<T> Ops<T>::conv2d(const V& x, const V& w, const V& b, int stride, int pad) {
  require_rank(x.shape(), 4, "conv2d(x)");
  require_rank(w.shape(), 4, "conv2d(w)");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k)
    throw Error("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (b.defined() && (b.shape() != Shape{o})) throw Error("conv2d: bias shape " + shape_str(b.shape()));
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw Error("conv2d: input too small " + shape_str(x.shape()));
  const int kk = c * k * k;
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  const std::size_t p_total = hw_out * n;

  auto cols = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(kk) * p_total);
  im2col(x.value().data(), n, c, h, wd, k, stride, pad, ho, wo, cols->data());

  RowMat<T> out_all(o, static_cast<Eigen::Index>(p_total));
  CMapMat<T> wm(w.value().data(), o, kk);
  CMapMat<T> cm(cols->data(), kk, static_cast<Eigen::Index>(p_total));
  out_all.noalias() = wm * cm;

  Tensor<T> out({n, o, ho, wo});
  for (int ni = 0; ni < n; ++ni)
    for (int oi = 0; oi < o; ++oi) {
      const T* src = out_all.data() + static_cast<std::size_t>(oi) * p_total + ni * hw_out;
      T* dst = out.data() + (static_cast<std::size_t>(ni) * o + oi) * hw_out;
      const T bias = b.defined() ? b.value()[oi] : T(0);
      for (std::size_t i = 0; i < hw_out; ++i) dst[i] = src[i] + bias;
    }

  std::vector<NodePtr<T>> inputs{x.ptr(), w.ptr()};
  if (b.defined()) inputs.push_back(b.ptr());
  const bool has_bias = b.defined();
  return make_op<T>(std::move(out), std::move(inputs),
                    [=](Node<T>& self) {
                      RowMat<T> dy(o, static_cast<Eigen::Index>(p_total));
                      for (int ni = 0; ni < n; ++ni)
                        for (int oi = 0; oi < o; ++oi) {
                          const T* src = self.grad.data() + (static_cast<std::size_t>(ni) * o + oi) * hw_out;
                          std::copy(src, src + hw_out, dy.data() + static_cast<std::size_t>(oi) * p_total + ni * hw_out);
                        }
                      const auto& xin = self.inputs[0];
                      const auto& win = self.inputs[1];
                      CMapMat<T> cm2(cols->data(), kk, static_cast<Eigen::Index>(p_total));
                      if (wants(win)) {
                        MapMat<T> gw(win->grad_buffer().data(), o, kk);
                        gw.noalias() += dy * cm2.transpose();
                      }
                      if (has_bias && wants(self.inputs[2])) {
                        auto& gb = self.inputs[2]->grad_buffer();
                        for (int oi = 0; oi < o; ++oi) gb[oi] += dy.row(oi).sum();
                      }
                      if (wants(xin)) {
                        CMapMat<T> wm2(win->value.data(), o, kk);
                        RowMat<T> dcols(kk, static_cast<Eigen::Index>(p_total));
                        dcols.noalias() = wm2.transpose() * dy;
                        col2im(dcols.data(), n, c, h, wd, k, stride, pad, ho, wo, xin->grad_buffer().data());
                      }
                    });
}

template <typename T>
Var<T> Ops<T>::linear(const V& x, const V& w, const V& b) {
  require_rank(w.shape(), 2, "linear(w)");
  const int in = w.dim(1), outd = w.dim(0);
  if (x.shape().back() != in)
    throw Error("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (b.defined() && b.shape() != Shape{outd}) throw Error("linear: bias shape " + shape_str(b.shape()));
  const Eigen::Index m = static_cast<Eigen::Index>(x.size() / in);
  Shape oshape = x.shape();
  oshape.back() = outd;
  Tensor<T> out(oshape);
  CMapMat<T> xm(x.value().data(), m, in);
  CMapMat<T> wm(w.value().data(), outd, in);
  MapMat<T> om(out.data(), m, outd);
  om.noalias() = xm * wm.transpose();
  if (b.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.value().data(), outd);
    om.rowwise() += bv;
  }
  std::vector<NodePtr<T>> inputs{x.ptr(), w.ptr()};
  if (b.defined()) inputs.push_back(b.ptr());
  const bool has_bias = b.defined();
  return make_op<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    CMapMat<T> dy(self.grad.data(), m, outd);
    const auto& xin = self.inputs[0];
    const auto& win = self.inputs[1];
    if (wants(xin)) {
      MapMat<T> gx(xin->grad_buffer().data(), m, in);
      CMapMat<T> wm2(win->value.data(), outd, in);
      gx.noalias() += dy * wm2;
    }
    if (wants(win)) {
      MapMat<T> gw(win->grad_buffer().data(), outd, in);
      CMapMat<T> xm2(xin->value.data(), m, in);
      gw.noalias() += dy.transpose() * xm2;
    }
    if (has_bias && wants(self.inputs[2])) {
      auto& gb = self.inputs[2]->grad_buffer();
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gbv(gb.data(), outd);
      gbv += dy.colwise().sum();
    }
  });
}

// ---- normalization -----------------------------------------------------------------------

namespace {

// Normalizes `groups` contiguous segments per batch item; per-element affine index is
// `(element / inner) % channels`.
template <typename T>
struct NormCache {
  AlignedVector<T> xhat;
  AlignedVector<T> rstd;
};

}  // namespace

template <typename T>
Var<T> Ops<T>::group_norm(const V& x, const V& gamma, const V& beta, int groups, T eps) {
  require_rank(x.shape(), 4, "group_norm");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (groups <= 0 || c % groups != 0) throw Error("group_norm: channels not divisible by groups");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw Error("group_norm: affine shape mismatch");
  const int cg = c / groups;
  const std::size_t seg = static_cast<std::size_t>(cg) * hw;
  auto cache = std::make_shared<NormCache<T>>();
  cache->xhat.resize(x.size());
  cache->rstd.resize(static_cast<std::size_t>(n) * groups);
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  for (int ni = 0; ni < n; ++ni)
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(ni) * groups + g) * seg;
      double s = 0, s2 = 0;
      for (std::size_t i = 0; i < seg; ++i) s += xv[base + i];
      const double mu = s / seg;
      for (std::size_t i = 0; i < seg; ++i) {
        const double d = xv[base + i] - mu;
        s2 += d * d;
      }
      const double rstd = 1.0 / std::sqrt(s2 / seg + eps);
      cache->rstd[static_cast<std::size_t>(ni) * groups + g] = static_cast<T>(rstd);
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = g * cg + cc;
        const T ga = gamma.value()[ch], be = beta.value()[ch];
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t idx = base + cc * hw + i;
          const T xh = static_cast<T>((xv[idx] - mu) * rstd);
          cache->xhat[idx] = xh;
          out[idx] = xh * ga + be;
        }
      }
    }
  return make_op<T>(std::move(out), {x.ptr(), gamma.ptr(), beta.ptr()}, [=](Node<T>& self) {
    const auto& gam = self.inputs[1]->value;
    const bool gx = wants(self.inputs[0]);
    Tensor<T>* dga = wants(self.inputs[1]) ? &self.inputs[1]->grad_buffer() : nullptr;
    Tensor<T>* dbe = wants(self.inputs[2]) ? &self.inputs[2]->grad_buffer() : nullptr;
    T* dx = gx ? self.inputs[0]->grad_buffer().data() : nullptr;
    const T* dy = self.grad.data();
    for (int ni = 0; ni < n; ++ni)
      for (int g = 0; g < groups; ++g) {
        const std::size_t base = (static_cast<std::size_t>(ni) * groups + g) * seg;
        double sum_d = 0, sum_dx = 0;
        for (int cc = 0; cc < cg; ++cc) {
          const int ch = g * cg + cc;
          double sg = 0, sb = 0;
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = base + cc * hw + i;
            const double d = static_cast<double>(dy[idx]) * gam[ch];
            sum_d += d;
            sum_dx += d * cache->xhat[idx];
            sg += static_cast<double>(dy[idx]) * cache->xhat[idx];
            sb += dy[idx];
          }
          if (dga) (*dga)[ch] += static_cast<T>(sg);
          if (dbe) (*dbe)[ch] += static_cast<T>(sb);
        }
        if (!gx) continue;
        const double md = sum_d / seg, mdx = sum_dx / seg;
        const double rstd = cache->rstd[static_cast<std::size_t>(ni) * groups + g];
        for (int cc = 0; cc < cg; ++cc) {
          const int ch = g * cg + cc;
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = base + cc * hw + i;
            const double d = static_cast<double>(dy[idx]) * gam[ch];
            dx[idx] += static_cast<T>(rstd * (d - md - cache->xhat[idx] * mdx));
          }
        }
      }
  });
}

template <typename T>
Var<T> Ops<T>::layer_norm(const V& x, const V& gamma, const V& beta, T eps) {
  const int c = x.shape().back();
  const std::size_t rows = x.size() / c;
  const bool affine = gamma.defined();
  if (affine && (gamma.shape() != Shape{c} || !beta.defined() || beta.shape() != Shape{c}))
    throw Error("layer_norm: affine shape mismatch");
  auto cache = std::make_shared<NormCache<T>>();
  cache->xhat.resize(x.size());
  cache->rstd.resize(rows);
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * c;
    double s = 0, s2 = 0;
    for (int i = 0; i < c; ++i) s += row[i];
    const double mu = s / c;
    for (int i = 0; i < c; ++i) s2 += (row[i] - mu) * (row[i] - mu);
    const double rstd = 1.0 / std::sqrt(s2 / c + eps);
    cache->rstd[r] = static_cast<T>(rstd);
    for (int i = 0; i < c; ++i) {
      const T xh = static_cast<T>((row[i] - mu) * rstd);
      cache->xhat[r * c + i] = xh;
      out[r * c + i] = affine ? xh * gamma.value()[i] + beta.value()[i] : xh;
    }
  }
  std::vector<NodePtr<T>> inputs{x.ptr()};
  if (affine) {
    inputs.push_back(gamma.ptr());
    inputs.push_back(beta.ptr());
  }
  return make_op<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const T* dy = self.grad.data();
    const T* gam = affine ? self.inputs[1]->value.data() : nullptr;
    Tensor<T>* dga = affine && wants(self.inputs[1]) ? &self.inputs[1]->grad_buffer() : nullptr;
    Tensor<T>* dbe = affine && wants(self.inputs[2]) ? &self.inputs[2]->grad_buffer() : nullptr;
    const bool gx = wants(self.inputs[0]);
    T* dx = gx ? self.inputs[0]->grad_buffer().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      double sum_d = 0, sum_dx = 0;
      for (int i = 0; i < c; ++i) {
        const std::size_t idx = r * c + i;
        const double d = static_cast<double>(dy[idx]) * (gam ? gam[i] : T(1));
        sum_d += d;
        sum_dx += d * cache->xhat[idx];
        if (dga) (*dga)[i] += dy[idx] * cache->xhat[idx];
        if (dbe) (*dbe)[i] += dy[idx];
      }
      if (!gx) continue;
      const double md = sum_d / c, mdx = sum_dx / c;
      for (int i = 0; i < c; ++i) {
        const std::size_t idx = r * c + i;
        const double d = static_cast<double>(dy[idx]) * (gam ? gam[i] : T(1));
        dx[idx] += static_cast<T>(cache->rstd[r] * (d - md - cache->xhat[idx] * mdx));
      }
    }
  });
}

template <typename T>
Var<T> Ops<T>::channel_normalize(const V& x, T eps) {
  require_rank(x.shape(), 4, "channel_normalize");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  auto inv = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(n) * hw);
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  for (int ni = 0; ni < n; ++ni)
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0;
      for (int ci = 0; ci < c; ++ci) {
        const T v = xv[(static_cast<std::size_t>(ni) * c + ci) * hw + p];
        s += static_cast<double>(v) * v;
      }
      const T r = static_cast<T>(1.0 / std::sqrt(s + eps));
      (*inv)[ni * hw + p] = r;
      for (int ci = 0; ci < c; ++ci) {
        const std::size_t idx = (static_cast<std::size_t>(ni) * c + ci) * hw + p;
        out[idx] = xv[idx] * r;
      }
    }
  return make_op<T>(std::move(out), {x.ptr()}, [=](Node<T>& self) {
    const T* y = self.value.data();
    const T* dy = self.grad.data();
    T* dx = self.inputs[0]->grad_buffer().data();
    for (int ni = 0; ni < n; ++ni)
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0;
        for (int ci = 0; ci < c; ++ci) {
          const std::size_t idx = (static_cast<std::size_t>(ni) * c + ci) * hw + p;
          dot += static_cast<double>(dy[idx]) * y[idx];
        }
        const T r = (*inv)[ni * hw + p];
        for (int ci = 0; ci < c; ++ci) {
          const std::size_t idx = (static_cast<std::size_t>(ni) * c + ci) * hw + p;
          dx[idx] += static_cast<T>(r * (dy[idx] - y[idx] * dot));
        }
      }
  });
}

// ---- shape manipulation ------------------------------------------------------------------

template <typename T>
Var<T> Ops<T>::add_channel_bias(const V& x, const V& b) {
  require_rank(x.shape(), 4, "add_channel_bias");
  const int n = x.dim(0), c = x.dim(1);
  if (b.shape() != Shape{n, c}) throw Error("add_channel_bias: bias " + shape_str(b.shape()));
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out = x.value();
  for (int i = 0; i < n * c; ++i) {
    const T bv = b.value()[i];
    for (std::size_t p = 0; p < hw; ++p) out[i * hw + p] += bv;
  }
  return make_op<T>(std::move(out), {x.ptr(), b.ptr()}, [=](Node<T>& self) {
    accumulate(self.inputs[0], self.grad);
    if (wants(self.inputs[1])) {
      auto& gb = self.inputs[1]->grad_buffer();
      for (int i = 0; i < n * c; ++i) {
        double s = 0;
        for (std::size_t p = 0; p < hw; ++p) s += self.grad[i * hw + p];
        gb[i] += static_cast<T>(s);
      }
    }
  });
}

template <typename T>
Var<T> Ops<T>::concat1(const V& a, const V& b) {
  if (a.shape().size() < 2 || a.shape().size() != b.shape().size() || a.dim(0) != b.dim(0))
    throw Error("concat1: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  for (std::size_t i = 2; i < a.shape().size(); ++i)
    if (a.shape()[i] != b.shape()[i])
      throw Error("concat1: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int n = a.dim(0);
  const std::size_t la = a.size() / n, lb = b.size() / n;
  Shape s = a.shape();
  s[1] += b.dim(1);
  Tensor<T> out(s);
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * la, la, out.data() + i * (la + lb));
    std::copy_n(b.value().data() + i * lb, lb, out.data() + i * (la + lb) + la);
  }
  return make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [=](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      if (!wants(self.inputs[k])) continue;
      auto& g = self.inputs[k]->grad_buffer();
      const std::size_t len = k == 0 ? la : lb, off = k == 0 ? 0 : la;
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len; ++j) g[i * len + j] += self.grad[i * (la + lb) + off + j];
    }
  });
}

template <typename T>
Var<T> Ops<T>::slice1(const V& x, int start, int count) {
  if (x.shape().size() < 2 || start < 0 || count <= 0 || start + count > x.dim(1))
    throw Error("slice1: bad range on " + shape_str(x.shape()));
  const int n = x.dim(0);
  const std::size_t inner = x.size() / (static_cast<std::size_t>(n) * x.dim(1));
  const std::size_t full = x.size() / n, part = inner * count, off = inner * start;
  Shape s = x.shape();
  s[1] = count;
  Tensor<T> out(s);
  for (int i = 0; i < n; ++i) std::copy_n(x.value().data() + i * full + off, part, out.data() + i * part);
  return make_op<T>(std::move(out), {x.ptr()}, [=](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int i = 0; i < n; ++i)
      for (std::size_t j = 0; j < part; ++j) g[i * full + off + j] += self.grad[i * part + j];
  });
}

template <typename T>
Var<T> Ops<T>::reshape(const V& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {x.ptr()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> Ops<T>::avg_pool(const V& x, int f) {
  require_rank(x.shape(), 4, "avg_pool");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (f <= 0 || h % f || w % f) throw Error("avg_pool: factor does not divide " + shape_str(x.shape()));
  const int ho = h / f, wo = w / f;
  const T inv = T(1) / T(f * f);
  Tensor<T> out({n, c, ho, wo});
  const T* xv = x.value().data();
  for (int nc = 0; nc < n * c; ++nc)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T s = 0;
        for (int dy = 0; dy < f; ++dy)
          for (int dx = 0; dx < f; ++dx)
            s += xv[(static_cast<std::size_t>(nc) * h + oy * f + dy) * w + ox * f + dx];
        out[(static_cast<std::size_t>(nc) * ho + oy) * wo + ox] = s * inv;
      }
  return make_op<T>(std::move(out), {x.ptr()}, [=](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int nc = 0; nc < n * c; ++nc)
      for (int iy = 0; iy < h; ++iy)
        for (int ix = 0; ix < w; ++ix)
          g[(static_cast<std::size_t>(nc) * h + iy) * w + ix] +=
              self.grad[(static_cast<std::size_t>(nc) * ho + iy / f) * wo + ix / f] * inv;
  });
}

template <typename T>
Var<T> Ops<T>::upsample_nearest(const V& x, int f) {
  require_rank(x.shape(), 4, "upsample_nearest");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * f, wo = w * f;
  Tensor<T> out({n, c, ho, wo});
  const T* xv = x.value().data();
  for (int nc = 0; nc < n * c; ++nc)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        out[(static_cast<std::size_t>(nc) * ho + oy) * wo + ox] =
            xv[(static_cast<std::size_t>(nc) * h + oy / f) * w + ox / f];
  return make_op<T>(std::move(out), {x.ptr()}, [=](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int nc = 0; nc < n * c; ++nc)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
          g[(static_cast<std::size_t>(nc) * h + oy / f) * w + ox / f] +=
              self.grad[(static_cast<std::size_t>(nc) * ho + oy) * wo + ox];
  });
}

template <typename T>
Var<T> Ops<T>::global_avg_pool(const V& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out({n, c});
  for (int i = 0; i < n * c; ++i) {
    double s = 0;
    for (std::size_t p = 0; p < hw; ++p) s += x.value()[i * hw + p];
    out[i] = static_cast<T>(s / hw);
  }
  return make_op<T>(std::move(out), {x.ptr()}, [=](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int i = 0; i < n * c; ++i) {
      const T gi = self.grad[i] / static_cast<T>(hw);
      for (std::size_t p = 0; p < hw; ++p) g[i * hw + p] += gi;
    }
  });
}

template <typename T>
Var<T> Ops<T>::to_tokens(const V& x) {
  require_rank(x.shape(), 4, "to_tokens");
  const int n = x.dim(0), c = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, hw, c});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < hw; ++p)
        out[(static_cast<std::size_t>(ni) * hw + p) * c + ci] = x.value()[(static_cast<std::size_t>(ni) * c + ci) * hw + p];
  return make_op<T>(std::move(out), {x.ptr()}, [=](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci)
        for (int p = 0; p < hw; ++p)
          g[(static_cast<std::size_t>(ni) * c + ci) * hw + p] += self.grad[(static_cast<std::size_t>(ni) * hw + p) * c + ci];
  });
}

template <typename T>
Var<T> Ops<T>::from_tokens(const V& x, int h, int w) {
  require_rank(x.shape(), 3, "from_tokens");
  const int n = x.dim(0), hw = x.dim(1), c = x.dim(2);
  if (hw != h * w) throw Error("from_tokens: token count does not match spatial size");
  Tensor<T> out({n, c, h, w});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < hw; ++p)
        out[(static_cast<std::size_t>(ni) * c + ci) * hw + p] = x.value()[(static_cast<std::size_t>(ni) * hw + p) * c + ci];
  return make_op<T>(std::move(out), {x.ptr()}, [=](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci)
        for (int p = 0; p < hw; ++p)
          g[(static_cast<std::size_t>(ni) * hw + p) * c + ci] += self.grad[(static_cast<std::size_t>(ni) * c + ci) * hw + p];
  });
}

// ---- attention ---------------------------------------------------------------------------

template <typename T>
Var<T> Ops<T>::attention(const V& q, const V& k, const V& v, int heads) {
  require_rank(q.shape(), 3, "attention(q)");
  require_rank(k.shape(), 3, "attention(k)");
  require_same(k.shape(), v.shape(), "attention(k, v)");
  const int b = q.dim(0), nq = q.dim(1), c = q.dim(2), nk = k.dim(1);
  if (k.dim(0) != b || k.dim(2) != c) throw Error("attention: q/k mismatch");
  if (heads <= 0 || c % heads) throw Error("attention: width not divisible by heads");
  const int dh = c / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  auto probs = std::make_shared<std::vector<RowMat<T>>>(static_cast<std::size_t>(b) * heads);
  Tensor<T> out({b, nq, c});
  const T* qv = q.value().data();
  const T* kv = k.value().data();
  const T* vv = v.value().data();
  using Stride = Eigen::OuterStride<>;
  for (int bi = 0; bi < b; ++bi)
    for (int hi = 0; hi < heads; ++hi) {
      Eigen::Map<const RowMat<T>, 0, Stride> qh(qv + static_cast<std::size_t>(bi) * nq * c + hi * dh, nq, dh, Stride(c));
      Eigen::Map<const RowMat<T>, 0, Stride> kh(kv + static_cast<std::size_t>(bi) * nk * c + hi * dh, nk, dh, Stride(c));
      Eigen::Map<const RowMat<T>, 0, Stride> vh(vv + static_cast<std::size_t>(bi) * nk * c + hi * dh, nk, dh, Stride(c));
      RowMat<T> s = (qh * kh.transpose()) * sc;
      for (int r = 0; r < nq; ++r) {
        const T mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      Eigen::Map<RowMat<T>, 0, Stride> oh(out.data() + static_cast<std::size_t>(bi) * nq * c + hi * dh, nq, dh, Stride(c));
      oh.noalias() = s * vh;
      (*probs)[static_cast<std::size_t>(bi) * heads + hi] = std::move(s);
    }

  return make_op<T>(std::move(out), {q.ptr(), k.ptr(), v.ptr()}, [=](Node<T>& self) {
    const T* qv2 = self.inputs[0]->value.data();
    const T* kv2 = self.inputs[1]->value.data();
    const T* vv2 = self.inputs[2]->value.data();
    T* gq = wants(self.inputs[0]) ? self.inputs[0]->grad_buffer().data() : nullptr;
    T* gk = wants(self.inputs[1]) ? self.inputs[1]->grad_buffer().data() : nullptr;
    T* gv = wants(self.inputs[2]) ? self.inputs[2]->grad_buffer().data() : nullptr;
    for (int bi = 0; bi < b; ++bi)
      for (int hi = 0; hi < heads; ++hi) {
        const RowMat<T>& p = (*probs)[static_cast<std::size_t>(bi) * heads + hi];
        const std::size_t qo = static_cast<std::size_t>(bi) * nq * c + hi * dh;
        const std::size_t ko = static_cast<std::size_t>(bi) * nk * c + hi * dh;
        Eigen::Map<const RowMat<T>, 0, Stride> dout(self.grad.data() + qo, nq, dh, Stride(c));
        Eigen::Map<const RowMat<T>, 0, Stride> qh(qv2 + qo, nq, dh, Stride(c));
        Eigen::Map<const RowMat<T>, 0, Stride> kh(kv2 + ko, nk, dh, Stride(c));
        Eigen::Map<const RowMat<T>, 0, Stride> vh(vv2 + ko, nk, dh, Stride(c));
        if (gv) {
          Eigen::Map<RowMat<T>, 0, Stride> gvh(gv + ko, nk, dh, Stride(c));
          gvh.noalias() += p.transpose() * dout;
        }
        RowMat<T> dp = dout * vh.transpose();
        RowMat<T> ds = p.cwiseProduct(dp);
        for (int r = 0; r < nq; ++r) {
          const T rs = ds.row(r).sum();
          ds.row(r) -= p.row(r) * rs;
        }
        ds *= sc;
        if (gq) {
          Eigen::Map<RowMat<T>, 0, Stride> gqh(gq + qo, nq, dh, Stride(c));
          gqh.noalias() += ds * kh;
        }
        if (gk) {
          Eigen::Map<RowMat<T>, 0, Stride> gkh(gk + ko, nk, dh, Stride(c));
          gkh.noalias() += ds.transpose() * qh;
        }
      }
  });
}

// ---- reductions / losses -----------------------------------------------------------------

template <typename T>
Var<T> Ops<T>::mean(const V& x) {
  double s = 0;
  for (T v : x.value().vec()) s += v;
  const std::size_t n = x.size();
  Tensor<T> out({1}, static_cast<T>(s / n));
  return make_op<T>(std::move(out), {x.ptr()}, [n](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T gi = self.grad[0] / static_cast<T>(n);
    for (auto& v : g.vec()) v += gi;
  });
}

template <typename T>
Var<T> Ops<T>::sum(const V& x) {
  double s = 0;
  for (T v : x.value().vec()) s += v;
  Tensor<T> out({1}, static_cast<T>(s));
  return make_op<T>(std::move(out), {x.ptr()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g.vec()) v += self.grad[0];
  });
}

template <typename T>
Var<T> Ops<T>::mse(const V& a, const V& b) {
  require_same(a.shape(), b.shape(), "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.value()[i]) - b.value()[i];
    s += d * d;
  }
  const std::size_t n = a.size();
  Tensor<T> out({1}, static_cast<T>(s / n));
  return make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [n](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const T k = T(2) * self.grad[0] / static_cast<T>(n);
    Tensor<T>* ga = wants(self.inputs[0]) ? &self.inputs[0]->grad_buffer() : nullptr;
    Tensor<T>* gb = wants(self.inputs[1]) ? &self.inputs[1]->grad_buffer() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const T d = (av[i] - bv[i]) * k;
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

template <typename T>
Var<T> Ops<T>::l1(const V& a, const V& b) {
  require_same(a.shape(), b.shape(), "l1");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a.value()[i]) - b.value()[i]);
  const std::size_t n = a.size();
  Tensor<T> out({1}, static_cast<T>(s / n));
  return make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [n](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const T k = self.grad[0] / static_cast<T>(n);
    Tensor<T>* ga = wants(self.inputs[0]) ? &self.inputs[0]->grad_buffer() : nullptr;
    Tensor<T>* gb = wants(self.inputs[1]) ? &self.inputs[1]->grad_buffer() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const T d = av[i] > bv[i] ? k : (av[i] < bv[i] ? -k : T(0));
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

template <typename T>
Var<T> Ops<T>::gaussian_kl(const V& mu, const V& logvar) {
  require_same(mu.shape(), logvar.shape(), "gaussian_kl");
  double s = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu.value()[i], lv = logvar.value()[i];
    s += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
  }
  const std::size_t n = mu.size();
  Tensor<T> out({1}, static_cast<T>(s / n));
  return make_op<T>(std::move(out), {mu.ptr(), logvar.ptr()}, [n](Node<T>& self) {
    const T k = self.grad[0] / static_cast<T>(n);
    if (wants(self.inputs[0])) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += k * self.inputs[0]->value[i];
    }
    if (wants(self.inputs[1])) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += k * T(0.5) * (std::exp(self.inputs[1]->value[i]) - T(1));
    }
  });
}

template <typename T>
Var<T> Ops<T>::cross_entropy(const V& logits, const std::vector<int>& labels) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw Error("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= k) throw Error("cross_entropy: label out of range");
  auto probs = std::make_shared<Tensor<T>>(softmax_rows(logits.value()));
  double s = 0;
  for (int i = 0; i < n; ++i) s -= std::log(std::max<double>((*probs)[static_cast<std::size_t>(i) * k + labels[i]], 1e-30));
  Tensor<T> out({1}, static_cast<T>(s / n));
  return make_op<T>(std::move(out), {logits.ptr()}, [=](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T sc = self.grad[0] / static_cast<T>(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * k + j;
        g[idx] += sc * ((*probs)[idx] - (j == labels[i] ? T(1) : T(0)));
      }
  });
}

template struct Ops<float>;
template struct Ops<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template Tensor<float> softmax_rows<float>(const Tensor<float>&);
template Tensor<double> softmax_rows<double>(const Tensor<double>&);

}  // namespace ffa
