#pragma once

// Tape-free reverse-mode differentiation over dense tensors. Each op result
// keeps shared ownership of its inputs plus a closure that pushes its output
// gradient into them; backward() walks the graph in reverse topological order.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "apn/blas.hpp"
#include "apn/tensor.hpp"

namespace apn::ad {

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_ref() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_ref(); }
  bool has_grad() const { return node_->grad.shape() == node_->value.shape() && !node_->grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value[0]; }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Wraps an op result; records parents and the backward closure only when a
/// parent needs a gradient and recording is enabled.
template <class T, class F>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, F&& backward) {
  Var<T> out(std::move(value), false);
  if (!detail::grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto* n = out.node();
  n->requires_grad = true;
  for (auto& p : parents) n->parents.push_back(p.ptr());
  n->backward = std::forward<F>(backward);
  return out;
}

template <class T>
void backward(const Var<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_ref().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& a, Fwd f, Deriv d) {
  Tensor<T> y(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_op<T>(std::move(y), {a}, [pa = a.node(), d](Node<T>& self) {
    auto& gx = pa->grad_ref();
    const auto& x = pa->value;
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += self.grad[i] * d(x[i], self.value[i]);
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> abs(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::abs(x); }, [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

/// y = scale * x + shift
template <class T>
Var<T> affine(const Var<T>& a, T scale, T shift = T(0)) {
  return unary(a, [=](T x) { return scale * x + shift; }, [=](T, T) { return scale; });
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DomainError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> y = a.value();
  y += b.value();
  return make_op<T>(std::move(y), {a, b}, [pa = a.node(), pb = b.node()](Node<T>& self) {
    if (pa->requires_grad) pa->grad_ref() += self.grad;
    if (pb->requires_grad) pb->grad_ref() += self.grad;
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_op<T>(std::move(y), {a, b}, [pa = a.node(), pb = b.node()](Node<T>& self) {
    if (pa->requires_grad) pa->grad_ref() += self.grad;
    if (pb->requires_grad) {
      auto& g = pb->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_op<T>(std::move(y), {a, b}, [pa = a.node(), pb = b.node()](Node<T>& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().values()) s += v;
  return make_op<T>(Tensor<T>({1}, s), {a}, [pa = a.node()](Node<T>& self) {
    auto& g = pa->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return affine(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> y = a.value();
  y.reshape(std::move(shape));
  return make_op<T>(std::move(y), {a}, [pa = a.node()](Node<T>& self) {
    auto& g = pa->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Rows [begin, end) of the leading axis.
template <class T>
Var<T> slice0(const Var<T>& a, std::size_t begin, std::size_t end) {
  const std::size_t inner = a.size() / a.dim(0);
  Shape s = a.shape();
  s[0] = end - begin;
  Tensor<T> y(s);
  std::copy_n(a.value().data() + begin * inner, y.size(), y.data());
  return make_op<T>(std::move(y), {a}, [pa = a.node(), off = begin * inner](Node<T>& self) {
    auto& g = pa->grad_ref();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  const Shape& s0 = parts.at(0).shape();
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> chunk;
  for (const auto& p : parts) {
    if (p.shape().size() != s0.size()) throw DomainError("concat: rank mismatch");
    chunk.push_back(p.dim(axis) * inner);
    total += p.dim(axis);
  }
  Shape s = s0;
  s[axis] = total;
  Tensor<T> y(s);
  const std::size_t row = total * inner;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(parts[k].value().data() + o * chunk[k], chunk[k], y.data() + o * row + off);
    off += chunk[k];
  }
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op<T>(std::move(y), parts, [nodes, chunk, outer, row](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k]->requires_grad) {
        auto& g = nodes[k]->grad_ref();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunk[k]; ++i) g[o * chunk[k] + i] += self.grad[o * row + off + i];
      }
      off += chunk[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix products

/// For each g: C_g = op(A_g) op(B_g); A is (G, n, k) or (G, k, n) when transposed.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
  if (a.value().rank() != 3 || b.value().rank() != 3 || a.dim(0) != b.dim(0))
    throw DomainError("bmm: expected (G,*,*) operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int G = static_cast<int>(a.dim(0));
  const int ar = static_cast<int>(a.dim(1)), ac = static_cast<int>(a.dim(2));
  const int br = static_cast<int>(b.dim(1)), bc = static_cast<int>(b.dim(2));
  const int n = ta ? ac : ar, k = ta ? ar : ac;
  const int kb = tb ? bc : br, m = tb ? br : bc;
  if (k != kb) throw DomainError("bmm: inner dimensions differ");
  Tensor<T> y({std::size_t(G), std::size_t(n), std::size_t(m)});
  for (int g = 0; g < G; ++g)
    blas::gemm(ta, tb, n, m, k, T(1), a.value().data() + g * ar * ac, ac, b.value().data() + g * br * bc, bc, T(0),
               y.data() + g * n * m, m);
  return make_op<T>(std::move(y), {a, b}, [=, pa = a.node(), pb = b.node()](Node<T>& self) {
    const T* dc = self.grad.data();
    if (pa->requires_grad) {
      T* da = pa->grad_ref().data();
      for (int g = 0; g < G; ++g) {
        const T* B = pb->value.data() + g * br * bc;
        if (!ta)
          blas::gemm(false, !tb, n, k, m, T(1), dc + g * n * m, m, B, bc, T(1), da + g * ar * ac, ac);
        else
          blas::gemm(tb, true, k, n, m, T(1), B, bc, dc + g * n * m, m, T(1), da + g * ar * ac, ac);
      }
    }
    if (pb->requires_grad) {
      T* db = pb->grad_ref().data();
      for (int g = 0; g < G; ++g) {
        const T* A = pa->value.data() + g * ar * ac;
        if (!tb)
          blas::gemm(!ta, false, k, m, n, T(1), A, ac, dc + g * n * m, m, T(1), db + g * br * bc, bc);
        else
          blas::gemm(true, ta, m, k, n, T(1), dc + g * n * m, m, A, ac, T(1), db + g * br * bc, bc);
      }
    }
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
  auto r = bmm(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)}), ta, tb);
  return reshape(r, {r.dim(1), r.dim(2)});
}

/// x (n, in) -> x W^T + bias, with W (out, in).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const int n = static_cast<int>(x.dim(0)), in = static_cast<int>(x.dim(1)), out = static_cast<int>(w.dim(0));
  if (static_cast<int>(w.dim(1)) != in)
    throw DomainError("linear: input width " + std::to_string(in) + " vs weight " + shape_str(w.shape()));
  Tensor<T> y({std::size_t(n), std::size_t(out)});
  for (int i = 0; i < n; ++i) std::copy_n(bias.value().data(), out, y.data() + i * out);
  blas::gemm(false, true, n, out, in, T(1), x.value().data(), in, w.value().data(), in, T(1), y.data(), out);
  return make_op<T>(std::move(y), {x, w, bias},
                    [=, px = x.node(), pw = w.node(), pb = bias.node()](Node<T>& self) {
                      const T* dy = self.grad.data();
                      if (px->requires_grad)
                        blas::gemm(false, false, n, in, out, T(1), dy, out, pw->value.data(), in, T(1),
                                   px->grad_ref().data(), in);
                      if (pw->requires_grad)
                        blas::gemm(true, false, out, in, n, T(1), dy, out, px->value.data(), in, T(1),
                                   pw->grad_ref().data(), in);
                      if (pb->requires_grad) {
                        auto& g = pb->grad_ref();
                        for (int i = 0; i < n; ++i)
                          for (int j = 0; j < out; ++j) g[j] += dy[i * out + j];
                      }
                    });
}

// ---------------------------------------------------------------------------
// Attention helpers and losses

/// Softmax over the last axis.
template <class T>
Var<T> softmax(const Var<T>& a) {
  const std::size_t cols = a.shape().back(), rows = a.size() / cols;
  Tensor<T> y(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.value().data() + r * cols;
    T* o = y.data() + r * cols;
    T mx = *std::max_element(x, x + cols), z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return make_op<T>(std::move(y), {a}, [pa = a.node(), rows, cols](Node<T>& self) {
    auto& gx = pa->grad_ref();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yv = self.value.data() + r * cols;
      const T* g = self.grad.data() + r * cols;
      T dot = T(0);
      for (std::size_t c = 0; c < cols; ++c) dot += g[c] * yv[c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += yv[c] * (g[c] - dot);
    }
  });
}

/// (B, K, C) -> (B*h, K, C/h)
template <class T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const std::size_t B = x.dim(0), K = x.dim(1), C = x.dim(2), d = C / heads;
  if (d * heads != C) throw DomainError("split_heads: width not divisible by head count");
  Tensor<T> y({B * heads, K, d});
  auto index = [=](std::size_t b, std::size_t h, std::size_t k, std::size_t j) {
    return std::pair{((b * heads + h) * K + k) * d + j, (b * K + k) * C + h * d + j};
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < d; ++j) {
          auto [o, i] = index(b, h, k, j);
          y[o] = x.value()[i];
        }
  return make_op<T>(std::move(y), {x}, [=, px = x.node()](Node<T>& self) {
    auto& g = px->grad_ref();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t j = 0; j < d; ++j) {
            auto [o, i] = index(b, h, k, j);
            g[i] += self.grad[o];
          }
  });
}

/// (B*h, K, d) -> (B, K, h*d)
template <class T>
Var<T> merge_heads(const Var<T>& x, std::size_t heads) {
  const std::size_t B = x.dim(0) / heads, K = x.dim(1), d = x.dim(2), C = d * heads;
  Tensor<T> y({B, K, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t k = 0; k < K; ++k)
        std::copy_n(x.value().data() + ((b * heads + h) * K + k) * d, d, y.data() + (b * K + k) * C + h * d);
  return make_op<T>(std::move(y), {x}, [=, px = x.node()](Node<T>& self) {
    auto& g = px->grad_ref();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t j = 0; j < d; ++j)
            g[((b * heads + h) * K + k) * d + j] += self.grad[(b * K + k) * C + h * d + j];
  });
}

/// Mean negative log-likelihood of integer labels under softmax(logits); logits (B, classes).
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const std::size_t B = logits.dim(0), n = logits.dim(1);
  if (labels.size() != B) throw DomainError("cross_entropy: label count mismatch");
  Tensor<T> prob({B, n});
  T loss = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    const T* x = logits.value().data() + b * n;
    T mx = *std::max_element(x, x + n), z = T(0);
    for (std::size_t c = 0; c < n; ++c) z += (prob[b * n + c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < n; ++c) prob[b * n + c] /= z;
    loss += -(x[labels[b]] - mx - std::log(z));
  }
  loss /= static_cast<T>(B);
  return make_op<T>(Tensor<T>({1}, loss), {logits}, [=, pl = logits.node()](Node<T>& self) {
    auto& g = pl->grad_ref();
    const T s = self.grad[0] / static_cast<T>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < n; ++c)
        g[b * n + c] += s * (prob[b * n + c] - (static_cast<int>(c) == labels[b] ? T(1) : T(0)));
  });
}

/// out[b] = sum_k w[b,k] v[b,k] / (sum_k w[b,k] + delta); v (B,K,C), w (B,K).
template <class T>
Var<T> weighted_average(const Var<T>& v, const Var<T>& w, T delta) {
  const std::size_t B = v.dim(0), K = v.dim(1), C = v.dim(2);
  if (w.shape() != Shape{B, K}) throw DomainError("weighted_average: weight shape " + shape_str(w.shape()));
  Tensor<T> y({B, C});
  std::vector<T> z(B);
  for (std::size_t b = 0; b < B; ++b) {
    T s = delta;
    for (std::size_t k = 0; k < K; ++k) s += w.value()[b * K + k];
    z[b] = s;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t c = 0; c < C; ++c) y[b * C + c] += w.value()[b * K + k] * v.value()[(b * K + k) * C + c];
    for (std::size_t c = 0; c < C; ++c) y[b * C + c] /= s;
  }
  return make_op<T>(std::move(y), {v, w}, [=, pv = v.node(), pw = w.node()](Node<T>& self) {
    for (std::size_t b = 0; b < B; ++b) {
      const T* g = self.grad.data() + b * C;
      if (pv->requires_grad) {
        auto& gv = pv->grad_ref();
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t c = 0; c < C; ++c) gv[(b * K + k) * C + c] += g[c] * pw->value[b * K + k] / z[b];
      }
      if (pw->requires_grad) {
        auto& gw = pw->grad_ref();
        for (std::size_t k = 0; k < K; ++k) {
          T acc = T(0);
          for (std::size_t c = 0; c < C; ++c)
            acc += g[c] * (pv->value[(b * K + k) * C + c] - self.value[b * C + c]);
          gw[b * K + k] += acc / z[b];
        }
      }
    }
  });
}

/// (B, K, C) -> (B, C), plain mean over K.
template <class T>
Var<T> mean_over_proposals(const Var<T>& v) {
  const std::size_t B = v.dim(0), K = v.dim(1), C = v.dim(2);
  Tensor<T> y({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t c = 0; c < C; ++c) y[b * C + c] += v.value()[(b * K + k) * C + c] / static_cast<T>(K);
  return make_op<T>(std::move(y), {v}, [=, pv = v.node()](Node<T>& self) {
    auto& g = pv->grad_ref();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c) g[(b * K + k) * C + c] += self.grad[b * C + c] / static_cast<T>(K);
  });
}

}  // namespace apn::ad
