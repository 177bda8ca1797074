#pragma once

// The full network: frequency branch (proposals -> band separation -> two
// backbones -> confidence-weighted aggregation), spatial branch (backbone ->
// orthogonal decomposition), branch averaging and the linear classifier.

#include "apn/config.hpp"
#include "apn/mi.hpp"
#include "apn/spatial.hpp"

namespace apn {

template <class T>
struct ApnOutput {
  Var<T> proposals;  // (B, 3, 2, 2, K, 2)
  Var<T> scores;     // (B, K)
  FeaturePair<T> frequency;
  FeaturePair<T> spatial;
  FeaturePair<T> fused;
  Var<T> logits;       // (B, 2), class 1 = generated
  Var<T> final_stage;  // spatial backbone's last activations
};

/// P(fake) = softmax(logits)[1], per row.
template <class T>
std::vector<double> fake_probability(const Tensor<T>& logits) {
  std::vector<double> p(logits.dim(0));
  for (std::size_t b = 0; b < p.size(); ++b) {
    const double l0 = logits[2 * b], l1 = logits[2 * b + 1];
    p[b] = 1.0 / (1.0 + std::exp(l0 - l1));
  }
  return p;
}

inline void require_conv4(const std::string& name, const char* which) {
  if (name != "conv4")
    throw ConfigError(std::string(which) + " '" + name +
                      "' is a full-scale reference name with no implementation here; use \"conv4\"");
}

template <class T>
class Apn {
 public:
  Apn(const TrainConfig& cfg, nn::Rng& rng)
      : cfg_(cfg),
        proposals_(ProposalNetConfig{cfg.K, cfg.proposal_channels, cfg.residual_blocks, cfg.ofp_channels,
                                     cfg.share_proposal_net},
                   cfg.crop_size, cfg.crop_size, rng),
        related_backbone_(kColorChannels, cfg.backbone_stages, cfg.C, rng),
        irrelated_backbone_(kColorChannels, cfg.backbone_stages, cfg.C, rng),
        scorer_(cfg.C, cfg.attention_heads, rng),
        spatial_backbone_(kColorChannels, cfg.backbone_stages, cfg.C, rng),
        bases_(cfg.C, cfg.m_r),
        classifier_(cfg.C, 2, rng) {
    require_conv4(cfg.spatial_backbone, "spatial_backbone");
    require_conv4(cfg.frequency_backbone, "frequency_backbone");
  }

  const TrainConfig& config() const { return cfg_; }
  ProposalNetwork<T>& proposal_network() { return proposals_; }
  const BasisPair<T>& bases() const { return bases_; }

  /// images (B, 3, S, S) in [0, 1].
  ApnOutput<T> forward(const Tensor<T>& images, NormMode mode, spectral::MaskMode mask) {
    const std::size_t B = images.dim(0), K = cfg_.K, C = cfg_.C;
    ApnOutput<T> out;
    auto spectra = compute_spectra(images);
    out.proposals = proposals_.predict(*spectra, mode);
    auto bands = separate_bands(spectra, out.proposals, mask, cfg_.soft_mask_sharpness);
    const std::size_t S = images.dim(2), S2 = images.dim(3);
    auto related = ad::reshape(ad::slice0(bands, 0, 1), {B * K, kColorChannels, S, S2});
    auto irrelated = ad::reshape(ad::slice0(bands, 1, 2), {B * K, kColorChannels, S, S2});
    auto v_r = ad::reshape(related_backbone_(related, mode), {B, K, C});
    auto v_ir = ad::reshape(irrelated_backbone_(irrelated, mode), {B, K, C});
    out.scores = scorer_(v_r);
    out.frequency = aggregate_frequency_features(v_r, v_ir, out.scores);

    auto f_s = spatial_backbone_(Var<T>(images), mode, &out.final_stage);
    out.spatial = orthogonal_decompose(f_s, bases_);
    out.fused = average_branch_features(out.frequency, out.spatial);
    out.logits = classifier_(out.fused.related);
    return out;
  }

  /// Every trainable tensor except the bases, and the bases separately.
  nn::ParamList<T> parameters() {
    nn::ParamList<T> p;
    proposals_.collect("proposal", p);
    related_backbone_.collect("freq_related", p);
    irrelated_backbone_.collect("freq_irrelated", p);
    scorer_.collect("scorer", p);
    spatial_backbone_.collect("spatial", p);
    classifier_.collect("classifier", p);
    return p;
  }
  nn::ParamList<T> basis_parameters() const {
    nn::ParamList<T> p;
    bases_.collect("bases", p);
    return p;
  }
  /// Parameters (bases last) and running-stat buffers, in a fixed order.
  nn::ParamList<T> state() {
    auto p = parameters();
    p.append(basis_parameters());
    return p;
  }

 private:
  TrainConfig cfg_;
  ProposalNetwork<T> proposals_;
  nn::ConvBackbone<T> related_backbone_, irrelated_backbone_;
  ConfidenceScorer<T> scorer_;
  nn::ConvBackbone<T> spatial_backbone_;
  BasisPair<T> bases_;
  nn::Linear<T> classifier_;
};

}  // namespace apn
