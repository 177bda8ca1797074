#pragma once

// Convolution, normalization and pooling ops plus the small parameterized
// modules (linear, conv, batchnorm, residual block, conv backbone, multi-head
// self-attention) the network is assembled from.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "apn/autograd.hpp"

namespace apn::nn {

using ad::Var;
using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Convolution via im2col + GEMM

struct ConvGeometry {
  std::size_t kh = 3, kw = 3, stride = 1, pad_h = 1, pad_w = 1;

  std::size_t out_h(std::size_t h) const { return (h + 2 * pad_h - kh) / stride + 1; }
  std::size_t out_w(std::size_t w) const { return (w + 2 * pad_w - kw) / stride + 1; }
};

namespace detail {

// Writes one item's patches into rows (ci,ki,kj) of `col`, starting at column `off` with row stride `ld`.
template <class T>
void im2col(const T* x, std::size_t ci_n, std::size_t h, std::size_t w, const ConvGeometry& g, std::size_t ho,
            std::size_t wo, T* col, std::size_t ld, std::size_t off) {
  for (std::size_t ci = 0; ci < ci_n; ++ci)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((ci * g.kh + ki) * g.kw + kj) * ld + off;
        const T* src = x + ci * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = long(oy * g.stride + ki) - long(g.pad_h);
          T* row = dst + oy * wo;
          if (iy < 0 || iy >= long(h)) {
            std::fill(row, row + wo, T(0));
            continue;
          }
          const T* srow = src + iy * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = long(ox * g.stride + kj) - long(g.pad_w);
            row[ox] = (ix >= 0 && ix < long(w)) ? srow[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* col, std::size_t ci_n, std::size_t h, std::size_t w, const ConvGeometry& g, std::size_t ho,
            std::size_t wo, T* x, std::size_t ld, std::size_t off) {
  for (std::size_t ci = 0; ci < ci_n; ++ci)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((ci * g.kh + ki) * g.kw + kj) * ld + off;
        T* dst = x + ci * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = long(oy * g.stride + ki) - long(g.pad_h);
          if (iy < 0 || iy >= long(h)) continue;
          const T* row = src + oy * wo;
          T* drow = dst + iy * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = long(ox * g.stride + kj) - long(g.pad_w);
            if (ix >= 0 && ix < long(w)) drow[ix] += row[ox];
          }
        }
      }
}

}  // namespace detail

/// x (B, Ci, H, W), weight (Co, Ci, kh, kw), optional bias (Co) -> (B, Co, Ho, Wo).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& g) {
  if (x.value().rank() != 4 || weight.value().rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != g.kh ||
      weight.dim(3) != g.kw)
    throw DomainError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                      shape_str(weight.shape()));
  const std::size_t B = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3), co = weight.dim(0);
  if (h + 2 * g.pad_h < g.kh || w + 2 * g.pad_w < g.kw) throw DomainError("conv2d: kernel larger than input");
  const std::size_t ho = g.out_h(h), wo = g.out_w(w), P = ho * wo, CK = ci * g.kh * g.kw;
  const std::size_t chunk = std::max<std::size_t>(1, (std::size_t{1} << 21) / std::max<std::size_t>(1, CK * P));
  const bool has_bias = static_cast<bool>(bias);

  Tensor<T> y({B, co, ho, wo});
  std::vector<T> col, out;
  for (std::size_t b0 = 0; b0 < B; b0 += chunk) {
    const std::size_t nb = std::min(chunk, B - b0), ld = nb * P;
    col.resize(CK * ld);
    out.resize(co * ld);
    for (std::size_t i = 0; i < nb; ++i)
      detail::im2col(x.value().data() + (b0 + i) * ci * h * w, ci, h, w, g, ho, wo, col.data(), ld, i * P);
    blas::gemm(false, false, int(co), int(ld), int(CK), T(1), weight.value().data(), int(CK), col.data(), int(ld),
               T(0), out.data(), int(ld));
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t c = 0; c < co; ++c) {
        const T bv = has_bias ? bias.value()[c] : T(0);
        const T* src = out.data() + c * ld + i * P;
        T* dst = y.data() + ((b0 + i) * co + c) * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + bv;
      }
  }

  std::vector<Var<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return ad::make_op<T>(std::move(y), parents,
                    [=, px = x.node(), pw = weight.node(), pb = has_bias ? bias.node() : nullptr](ad::Node<T>& self) {
                      std::vector<T> col, dout, dcol;
                      T* dw = pw->requires_grad ? pw->grad_ref().data() : nullptr;
                      T* dx = px->requires_grad ? px->grad_ref().data() : nullptr;
                      T* db = (pb && pb->requires_grad) ? pb->grad_ref().data() : nullptr;
                      for (std::size_t b0 = 0; b0 < B; b0 += chunk) {
                        const std::size_t nb = std::min(chunk, B - b0), ld = nb * P;
                        dout.resize(co * ld);
                        for (std::size_t i = 0; i < nb; ++i)
                          for (std::size_t c = 0; c < co; ++c)
                            std::copy_n(self.grad.data() + ((b0 + i) * co + c) * P, P, dout.data() + c * ld + i * P);
                        if (db)
                          for (std::size_t c = 0; c < co; ++c)
                            for (std::size_t j = 0; j < ld; ++j) db[c] += dout[c * ld + j];
                        if (dw) {
                          col.resize(CK * ld);
                          for (std::size_t i = 0; i < nb; ++i)
                            detail::im2col(px->value.data() + (b0 + i) * ci * h * w, ci, h, w, g, ho, wo,
                                           col.data(), ld, i * P);
                          blas::gemm(false, true, int(co), int(CK), int(ld), T(1), dout.data(), int(ld), col.data(),
                                     int(ld), T(1), dw, int(CK));
                        }
                        if (dx) {
                          dcol.resize(CK * ld);
                          blas::gemm(true, false, int(CK), int(ld), int(co), T(1), pw->value.data(), int(CK),
                                     dout.data(), int(ld), T(0), dcol.data(), int(ld));
                          for (std::size_t i = 0; i < nb; ++i)
                            detail::col2im(dcol.data(), ci, h, w, g, ho, wo, dx + (b0 + i) * ci * h * w, ld, i * P);
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Train: batch statistics, running stats updated. BatchOnly: batch statistics,
/// running stats untouched. Eval: running statistics.
enum class NormMode { Train, BatchOnly, Eval };

/// x (B, C, ...) normalized per channel C.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, NormMode mode, T momentum = T(0.1), T eps = T(1e-5)) {
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.size() / (B * C), n = B * S;
  std::vector<T> mean(C), inv_std(C);
  if (mode == NormMode::Eval) {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0, s2 = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.value().data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      const double m = s / double(n);
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.value().data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s2 += (p[i] - m) * (p[i] - m);
      }
      const double var = s2 / double(n);
      mean[c] = T(m);
      inv_std[c] = T(1.0 / std::sqrt(var + double(eps)));
      if (mode == NormMode::Train) {
        const double unbiased = n > 1 ? s2 / double(n - 1) : var;
        running_mean[c] = T((1 - double(momentum)) * running_mean[c] + double(momentum) * m);
        running_var[c] = T((1 - double(momentum)) * running_var[c] + double(momentum) * unbiased);
      }
    }
  }
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t o = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T xh = (x.value()[o + i] - mean[c]) * inv_std[c];
        xhat[o + i] = xh;
        y[o + i] = gamma.value()[c] * xh + beta.value()[c];
      }
    }
  const bool batch_stats = mode != NormMode::Eval;
  return ad::make_op<T>(std::move(y), {x, gamma, beta},
                    [=, xhat = std::move(xhat), px = x.node(), pg = gamma.node(), pb = beta.node()](ad::Node<T>& self) {
                      std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t o = (b * C + c) * S;
                          for (std::size_t i = 0; i < S; ++i) {
                            sum_dy[c] += self.grad[o + i];
                            sum_dy_xhat[c] += self.grad[o + i] * xhat[o + i];
                          }
                        }
                      if (pg->requires_grad)
                        for (std::size_t c = 0; c < C; ++c) pg->grad_ref()[c] += sum_dy_xhat[c];
                      if (pb->requires_grad)
                        for (std::size_t c = 0; c < C; ++c) pb->grad_ref()[c] += sum_dy[c];
                      if (!px->requires_grad) return;
                      auto& gx = px->grad_ref();
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t o = (b * C + c) * S;
                          const T k = pg->value[c] * inv_std[c];
                          for (std::size_t i = 0; i < S; ++i) {
                            if (batch_stats)
                              gx[o + i] += k * (self.grad[o + i] - sum_dy[c] / T(n) -
                                                xhat[o + i] * sum_dy_xhat[c] / T(n));
                            else
                              gx[o + i] += k * self.grad[o + i];
                          }
                        }
                    });
}

/// (B, C, H, W) -> (B, C)
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.size() / (B * C);
  Tensor<T> y({B, C});
  for (std::size_t i = 0; i < B * C; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < S; ++j) s += x.value()[i * S + j];
    y[i] = s / T(S);
  }
  return ad::make_op<T>(std::move(y), {x}, [=, px = x.node()](ad::Node<T>& self) {
    auto& g = px->grad_ref();
    for (std::size_t i = 0; i < B * C; ++i)
      for (std::size_t j = 0; j < S; ++j) g[i * S + j] += self.grad[i] / T(S);
  });
}

// ---------------------------------------------------------------------------
// Modules

template <class T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <class T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

/// Flat registry of a module tree's parameters (trainable) and buffers (running stats).
template <class T>
struct ParamList {
  std::vector<NamedParam<T>> params;
  std::vector<NamedBuffer<T>> buffers;

  void append(const ParamList& o) {
    params.insert(params.end(), o.params.begin(), o.params.end());
    buffers.insert(buffers.end(), o.buffers.begin(), o.buffers.end());
  }
};

template <class T>
Var<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = T(dist(rng));
  return Var<T>(std::move(t), true);
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight_(uniform_param<T>({out, in}, 1.0 / std::sqrt(double(in)), rng)),
        bias_(uniform_param<T>({out}, 1.0 / std::sqrt(double(in)), rng)) {}

  Var<T> operator()(const Var<T>& x) const { return ad::linear(x, weight_, bias_); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.params.push_back({prefix + ".weight", weight_});
    out.params.push_back({prefix + ".bias", bias_});
  }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }
  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }

 private:
  Var<T> weight_, bias_;
};

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, ConvGeometry g, bool bias, Rng& rng) : geom_(g) {
    const double fan_in = double(in * g.kh * g.kw);
    weight_ = uniform_param<T>({out, in, g.kh, g.kw}, std::sqrt(6.0 / fan_in), rng);
    if (bias) bias_ = Var<T>(Tensor<T>({out}), true);
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight_, bias_, geom_); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.params.push_back({prefix + ".weight", weight_});
    if (bias_) out.params.push_back({prefix + ".bias", bias_});
  }
  const ConvGeometry& geometry() const { return geom_; }

 private:
  ConvGeometry geom_;
  Var<T> weight_, bias_;
};

template <class T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma_(Tensor<T>({channels}, T(1)), true),
        beta_(Tensor<T>({channels}), true),
        running_mean_({channels}, T(0)),
        running_var_({channels}, T(1)) {}

  Var<T> operator()(const Var<T>& x, NormMode mode) {
    return batch_norm(x, gamma_, beta_, running_mean_, running_var_, mode);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.params.push_back({prefix + ".gamma", gamma_});
    out.params.push_back({prefix + ".beta", beta_});
    out.buffers.push_back({prefix + ".running_mean", &running_mean_});
    out.buffers.push_back({prefix + ".running_var", &running_var_});
  }

 private:
  Var<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
};

/// relu(x + bn(conv(relu(bn(conv(x))))))
template <class T>
class ResidualBlock {
 public:
  ResidualBlock(std::size_t channels, Rng& rng)
      : conv1_(channels, channels, {}, false, rng), conv2_(channels, channels, {}, false, rng), bn1_(channels),
        bn2_(channels) {}

  Var<T> operator()(const Var<T>& x, NormMode mode) {
    auto h = ad::relu(bn1_(conv1_(x), mode));
    return ad::relu(ad::add(x, bn2_(conv2_(h), mode)));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    conv1_.collect(prefix + ".conv1", out);
    bn1_.collect(prefix + ".bn1", out);
    conv2_.collect(prefix + ".conv2", out);
    bn2_.collect(prefix + ".bn2", out);
  }

 private:
  Conv2d<T> conv1_, conv2_;
  BatchNorm<T> bn1_, bn2_;
};

/// Strided conv-BN-ReLU stages, global average pooling, linear projection to
/// the embedding width.
template <class T>
class ConvBackbone {
 public:
  ConvBackbone(std::size_t in_channels, const std::vector<std::size_t>& stages, std::size_t embed, Rng& rng) {
    std::size_t prev = in_channels;
    for (std::size_t c : stages) {
      convs_.emplace_back(prev, c, ConvGeometry{3, 3, 2, 1, 1}, false, rng);
      norms_.emplace_back(c);
      prev = c;
    }
    head_ = Linear<T>(prev, embed, rng);
  }

  /// x (B, C_in, H, W) -> (B, embed). `final_stage` receives the last stage's activations.
  Var<T> operator()(const Var<T>& x, NormMode mode, Var<T>* final_stage = nullptr) {
    Var<T> h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) h = ad::relu(norms_[i](convs_[i](h), mode));
    if (final_stage) *final_stage = h;
    return head_(global_avg_pool(h));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect(prefix + ".stage" + std::to_string(i) + ".conv", out);
      norms_[i].collect(prefix + ".stage" + std::to_string(i) + ".bn", out);
    }
    head_.collect(prefix + ".head", out);
  }
  std::size_t embed_dim() const { return head_.out_features(); }

 private:
  std::vector<Conv2d<T>> convs_;
  std::vector<BatchNorm<T>> norms_;
  Linear<T> head_;
};

/// Standard scaled dot-product multi-head self-attention with q = k = v = input,
/// no positional encoding.
template <class T>
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention(std::size_t width, std::size_t heads, Rng& rng)
      : heads_(heads), q_(width, width, rng), k_(width, width, rng), v_(width, width, rng), o_(width, width, rng) {
    if (heads == 0 || width % heads != 0)
      throw DomainError("attention width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                        " heads");
  }

  /// x (B, K, C) -> (B, K, C)
  Var<T> operator()(const Var<T>& x) const {
    const std::size_t B = x.dim(0), K = x.dim(1), C = x.dim(2);
    auto flat = ad::reshape(x, {B * K, C});
    auto proj = [&](const Linear<T>& l) { return ad::split_heads(ad::reshape(l(flat), {B, K, C}), heads_); };
    auto q = proj(q_), k = proj(k_), v = proj(v_);
    const T scale = T(1) / std::sqrt(T(C / heads_));
    auto att = ad::softmax(ad::affine(ad::bmm(q, k, false, true), scale));
    auto ctx = ad::merge_heads(ad::bmm(att, v), heads_);
    return ad::reshape(o_(ad::reshape(ctx, {B * K, C})), {B, K, C});
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    q_.collect(prefix + ".q", out);
    k_.collect(prefix + ".k", out);
    v_.collect(prefix + ".v", out);
    o_.collect(prefix + ".out", out);
  }
  std::size_t heads() const { return heads_; }

 private:
  std::size_t heads_;
  Linear<T> q_, k_, v_, o_;
};

}  // namespace apn::nn
