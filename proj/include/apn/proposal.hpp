#pragma once

// Suspicious frequency-band proposals: a small residual conv network over each
// amplitude/phase map, One-sided Feature Pooling along each axis, a sigmoid
// head anchored to equal-division priors, self-attention confidence scoring
// and the confidence-weighted aggregation of band features.

#include <memory>

#include "apn/layers.hpp"
#include "apn/proposal_set.hpp"
#include "apn/separation.hpp"

namespace apn {

using ad::Var;
using nn::NormMode;

template <class T>
struct FeaturePair {
  Var<T> related;    // (B, C)
  Var<T> irrelated;  // (B, C)
};

inline constexpr double kAggregationDelta = 1e-8;

struct ProposalNetConfig {
  std::size_t proposals = 5;
  std::size_t channels = 32;
  std::size_t residual_blocks = 3;
  std::size_t ofp_channels = 8;
  bool shared = true;
};

/// start = clamp(prior_i + raw_start - 0.5, 0, 1), likewise for the end.
/// raw (..., K, 2) with K = dim(-2).
template <class T>
Var<T> anchor_to_priors(const Var<T>& raw) {
  const std::size_t K = raw.dim(raw.value().rank() - 2);
  Tensor<T> y(raw.shape());
  std::vector<char> active(raw.size());
  for (std::size_t j = 0; j < raw.size(); ++j) {
    const std::size_t i = (j / 2) % K;
    const double v = proposal_prior(i, K) + double(raw.value()[j]) - 0.5;
    active[j] = v > 0.0 && v < 1.0;
    y[j] = T(std::clamp(v, 0.0, 1.0));
  }
  return ad::make_op<T>(std::move(y), {raw}, [active, pr = raw.node()](ad::Node<T>& self) {
    auto& g = pr->grad_ref();
    for (std::size_t j = 0; j < g.size(); ++j)
      if (active[j]) g[j] += self.grad[j];
  });
}

/// Network for one group of spectral maps: batchnorm, stem conv, residual
/// blocks, then per-axis OFP convolutions with fully connected sigmoid heads.
template <class T>
class ProposalSubnet {
 public:
  ProposalSubnet(const ProposalNetConfig& cfg, std::size_t M, std::size_t N, nn::Rng& rng)
      : rows_(M / 2 + 1), cols_(N), K_(cfg.proposals), input_norm_(1),
        stem_(1, cfg.channels, {}, false, rng),
        ofp_u_(cfg.channels, cfg.ofp_channels, {3, N, 1, 1, 0}, true, rng),
        ofp_v_(cfg.channels, cfg.ofp_channels, {M / 2 + 1, 3, 1, 0, 1}, true, rng),
        head_u_(cfg.ofp_channels * rows_, 2 * K_, rng),
        head_v_(cfg.ofp_channels * cols_, 2 * K_, rng) {
    for (std::size_t r = 0; r < cfg.residual_blocks; ++r) blocks_.emplace_back(cfg.channels, rng);
  }

  /// maps (n, 1, rows, N) -> (n, channels, rows, N)
  Var<T> feature_map(const Var<T>& maps, NormMode mode) {
    auto h = ad::relu(stem_(input_norm_(maps, mode)));
    for (auto& b : blocks_) h = b(h, mode);
    return h;
  }

  /// Axis U: kernel (3 x N), padding (1 x 0), sequence length rows.
  /// Axis V: kernel (rows x 3), padding (0 x 1), sequence length N.
  /// Returns (n, ofp_channels, length).
  Var<T> ofp_pool(const Var<T>& fmap, Axis axis) const {
    auto y = axis == Axis::U ? ofp_u_(fmap) : ofp_v_(fmap);
    const std::size_t n = y.dim(0), c = y.dim(1);
    return ad::reshape(y, {n, c, y.size() / (n * c)});
  }

  /// maps (n, 1, rows, N) -> raw sigmoid outputs (n, 2 axes, K, 2).
  Var<T> raw_proposals(const Var<T>& maps, NormMode mode) {
    auto fmap = feature_map(maps, mode);
    const std::size_t n = maps.dim(0);
    auto head = [&](Axis axis, const nn::Linear<T>& fc) {
      auto seq = ofp_pool(fmap, axis);
      return ad::reshape(ad::sigmoid(fc(ad::reshape(seq, {n, seq.size() / n}))), {n, 1, K_, 2});
    };
    return ad::concat<T>({head(Axis::U, head_u_), head(Axis::V, head_v_)}, 1);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    input_norm_.collect(prefix + ".input_norm", out);
    stem_.collect(prefix + ".stem", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    ofp_u_.collect(prefix + ".ofp_u", out);
    ofp_v_.collect(prefix + ".ofp_v", out);
    head_u_.collect(prefix + ".head_u", out);
    head_v_.collect(prefix + ".head_v", out);
  }

 private:
  std::size_t rows_, cols_, K_;
  nn::BatchNorm<T> input_norm_;
  nn::Conv2d<T> stem_;
  std::vector<nn::ResidualBlock<T>> blocks_;
  nn::Conv2d<T> ofp_u_, ofp_v_;
  nn::Linear<T> head_u_, head_v_;
};

/// Network input for map (b, c, part): log(1 + A) for amplitude, P for phase.
template <class T>
Tensor<T> proposal_inputs(const SpectraBatch<T>& s, std::size_t b, std::size_t c, Part part) {
  const auto& hp = s.at(b, c);
  Tensor<T> t({1, 1, hp.rows(), hp.cols()});
  for (std::size_t j = 0; j < hp.size(); ++j)
    t[j] = part == Part::Amplitude ? T(std::log1p(double(hp.amplitude[j]))) : hp.phase[j];
  return t;
}

template <class T>
class ProposalNetwork {
 public:
  ProposalNetwork(const ProposalNetConfig& cfg, std::size_t M, std::size_t N, nn::Rng& rng) : cfg_(cfg) {
    if (cfg.proposals == 0) throw ConfigError("proposal count K must be at least 1");
    const std::size_t groups = cfg.shared ? 1 : kColorChannels * kParts;
    for (std::size_t g = 0; g < groups; ++g) subnets_.push_back(std::make_unique<ProposalSubnet<T>>(cfg, M, N, rng));
  }

  std::size_t proposals() const { return cfg_.proposals; }
  ProposalSubnet<T>& subnet(std::size_t g = 0) { return *subnets_.at(g); }

  /// Proposal tensor (B, 3, 2, 2, K, 2) in [0, 1].
  Var<T> predict(const SpectraBatch<T>& spectra, NormMode mode) {
    const std::size_t B = spectra.batch, K = cfg_.proposals, rows = spectra.M / 2 + 1, N = spectra.N;
    const std::size_t groups = kColorChannels * kParts;
    Var<T> raw;
    if (cfg_.shared) {
      Tensor<T> maps({B * groups, 1, rows, N});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t g = 0; g < groups; ++g) {
          auto t = proposal_inputs(spectra, b, g / kParts, Part(g % kParts));
          std::copy_n(t.data(), t.size(), maps.data() + (b * groups + g) * rows * N);
        }
      raw = subnets_[0]->raw_proposals(Var<T>(std::move(maps)), mode);
      raw = ad::reshape(raw, {B, groups, kAxes, K, 2});
    } else {
      std::vector<Var<T>> parts;
      for (std::size_t g = 0; g < groups; ++g) {
        Tensor<T> maps({B, 1, rows, N});
        for (std::size_t b = 0; b < B; ++b) {
          auto t = proposal_inputs(spectra, b, g / kParts, Part(g % kParts));
          std::copy_n(t.data(), t.size(), maps.data() + b * rows * N);
        }
        parts.push_back(ad::reshape(subnets_[g]->raw_proposals(Var<T>(std::move(maps)), mode), {B, 1, kAxes, K, 2}));
      }
      raw = ad::concat(parts, 1);
    }
    return anchor_to_priors(ad::reshape(raw, {B, kColorChannels, kParts, kAxes, K, 2}));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    for (std::size_t g = 0; g < subnets_.size(); ++g)
      subnets_[g]->collect(prefix + (cfg_.shared ? std::string(".shared") : ".group" + std::to_string(g)), out);
  }

 private:
  ProposalNetConfig cfg_;
  std::vector<std::unique_ptr<ProposalSubnet<T>>> subnets_;
};

/// Copies one image's bands out of a proposal tensor (B, 3, 2, 2, K, 2).
template <class T>
ProposalSet proposal_set_at(const Tensor<T>& proposals, std::size_t b) {
  ProposalSet p(proposals.dim(4));
  const std::size_t n = p.values.size();
  for (std::size_t j = 0; j < n; ++j) p.values[j] = double(proposals[b * n + j]);
  return p;
}

/// Multi-head self-attention over the K related band vectors followed by three
/// fully connected layers and a sigmoid: one confidence per proposal.
template <class T>
class ConfidenceScorer {
 public:
  ConfidenceScorer(std::size_t width, std::size_t heads, nn::Rng& rng)
      : attention_(width, heads, rng), fc1_(width, std::max<std::size_t>(1, width / 2), rng),
        fc2_(std::max<std::size_t>(1, width / 2), std::max<std::size_t>(1, width / 4), rng),
        fc3_(std::max<std::size_t>(1, width / 4), 1, rng) {}

  /// related (B, K, C) -> scores (B, K)
  Var<T> operator()(const Var<T>& related) const {
    const std::size_t B = related.dim(0), K = related.dim(1), C = related.dim(2);
    auto h = ad::reshape(attention_(related), {B * K, C});
    h = ad::relu(fc1_(h));
    h = ad::relu(fc2_(h));
    return ad::reshape(ad::sigmoid(fc3_(h)), {B, K});
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    attention_.collect(prefix + ".attention", out);
    fc1_.collect(prefix + ".fc1", out);
    fc2_.collect(prefix + ".fc2", out);
    fc3_.collect(prefix + ".fc3", out);
  }

 private:
  nn::MultiHeadSelfAttention<T> attention_;
  nn::Linear<T> fc1_, fc2_, fc3_;
};

/// f_f^r = sum_i s_i v_i^r / (sum_i s_i + delta); f_f^ir = mean_i v_i^ir.
template <class T>
FeaturePair<T> aggregate_frequency_features(const Var<T>& related, const Var<T>& irrelated, const Var<T>& scores) {
  return {ad::weighted_average(related, scores, T(kAggregationDelta)), ad::mean_over_proposals(irrelated)};
}

}  // namespace apn
