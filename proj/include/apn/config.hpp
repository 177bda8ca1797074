#pragma once

// Training configuration: JSON round trip with strict key checking, and the
// named presets (full-scale GenImage / DiffusionForensics, desk scale).

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "apn/errors.hpp"

namespace apn {

struct TrainConfig {
  // model
  std::size_t K = 5;
  std::size_t C = 64;
  std::size_t m_r = 32;
  std::size_t m_ir = 32;
  std::size_t attention_heads = 8;
  std::size_t proposal_channels = 32;
  std::size_t residual_blocks = 3;
  std::size_t ofp_channels = 8;
  bool share_proposal_net = true;
  std::vector<std::size_t> backbone_stages{8, 16, 32, 64};
  std::string spatial_backbone = "conv4";
  std::string frequency_backbone = "conv4";
  double soft_mask_sharpness = 50.0;

  // losses
  double epsilon = 0.01;
  double weight_ce = 1.0, weight_band = 1.0, weight_basis = 1.0, weight_align = 1.0, weight_mi = 1.0;

  // optimisation
  std::string optimizer = "adam";
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double lr_apn = 1e-4;
  double lr_bases = 1e-7;
  double lr_q = 1e-4;
  double decay_factor = 0.1;
  std::size_t decay_steps_apn = 20000;
  std::size_t decay_steps_q = 60000;
  std::size_t q_steps_per_apn_step = 3;
  std::size_t batch_size = 32;
  std::size_t q_batch_size = 32;
  std::size_t epochs = 1;
  std::size_t max_iterations = 0;  // 0: run `epochs` passes over the training set

  // data
  std::size_t crop_size = 224;
  std::string train_manifest;
  std::string eval_manifest;

  // run
  std::string output_dir = "run";
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::string& path);

  static TrainConfig full_scale_genimage();
  static TrainConfig full_scale_df();
  static TrainConfig desk();
};

#define APN_CONFIG_FIELDS(X)                                                                                          \
  X(K) X(C) X(m_r) X(m_ir) X(attention_heads) X(proposal_channels) X(residual_blocks) X(ofp_channels)                \
  X(share_proposal_net) X(backbone_stages) X(spatial_backbone) X(frequency_backbone) X(soft_mask_sharpness)          \
  X(epsilon) X(weight_ce) X(weight_band) X(weight_basis) X(weight_align) X(weight_mi) X(optimizer) X(beta1) X(beta2) \
  X(adam_eps) X(lr_apn) X(lr_bases) X(lr_q) X(decay_factor) X(decay_steps_apn) X(decay_steps_q)                      \
  X(q_steps_per_apn_step) X(batch_size) X(q_batch_size) X(epochs) X(max_iterations) X(crop_size) X(train_manifest)  \
  X(eval_manifest) X(output_dir) X(checkpoint_every) X(seed)

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
#define APN_KEY(f) keys.push_back(#f);
  APN_CONFIG_FIELDS(APN_KEY)
#undef APN_KEY
  return keys;
}

inline nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
#define APN_PUT(f) j[#f] = f;
  APN_CONFIG_FIELDS(APN_PUT)
#undef APN_PUT
  return j;
}

inline TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto keys = config_keys();
  const std::set<std::string> valid(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!valid.count(k)) {
      std::string list;
      for (const auto& key : keys) list += (list.empty() ? "" : ", ") + key;
      throw ConfigError("unknown config key '" + k + "'; valid keys: " + list);
    }
  TrainConfig c;
  try {
#define APN_GET(f) \
  if (j.contains(#f)) j.at(#f).get_to(c.f);
    APN_CONFIG_FIELDS(APN_GET)
#undef APN_GET
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (!j.contains("m_r") && !j.contains("m_ir") && j.contains("C")) c.m_r = c.m_ir = c.C / 2;
  c.validate();
  return c;
}

inline void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(K >= 1, "K must be >= 1");
  need(m_r >= 1 && m_ir >= 1 && m_r + m_ir == C, "need m_r >= 1, m_ir >= 1 and m_r + m_ir = C");
  need(attention_heads >= 1 && C % attention_heads == 0, "C must be divisible by attention_heads");
  need(epsilon > 0, "epsilon must be > 0");
  need(lr_apn > 0 && lr_bases > 0 && lr_q > 0, "learning rates must be > 0");
  need(decay_factor > 0 && decay_steps_apn > 0 && decay_steps_q > 0, "decay schedule must be positive");
  need(q_steps_per_apn_step >= 1, "q_steps_per_apn_step must be >= 1");
  need(batch_size >= 1 && q_batch_size >= 1, "batch sizes must be >= 1");
  need(crop_size >= 2, "crop_size must be >= 2");
  need(soft_mask_sharpness > 0, "soft_mask_sharpness must be > 0");
  need(optimizer == "adam", "optimizer must be \"adam\"");
  need(!backbone_stages.empty(), "backbone_stages must be non-empty");
  need(proposal_channels >= 1 && ofp_channels >= 1, "proposal widths must be >= 1");
  need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0, "bad Adam moments");
}

inline TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  auto c = from_json(j);
  if (const char* s = std::getenv("APN_SEED")) {
    char* end = nullptr;
    const auto v = std::strtoull(s, &end, 10);
    if (!*s || *end) throw ConfigError(std::string("APN_SEED is not an unsigned integer: ") + s);
    c.seed = v;
  }
  return c;
}

/// Full-scale constants: C = 256 split 128/128, 8 attention heads, Adam at 1e-4
/// (bases 1e-7), decay 0.1 every 20k (APN) / 60k (q) iterations, three q steps
/// per APN step, 224 crops, epsilon 0.01. GenImage uses K = 15 over 10 epochs.
inline TrainConfig TrainConfig::full_scale_genimage() {
  TrainConfig c;
  c.K = 15;
  c.C = 256;
  c.m_r = c.m_ir = 128;
  c.attention_heads = 8;
  c.lr_apn = 1e-4;
  c.lr_bases = 1e-7;
  c.lr_q = 1e-4;
  c.decay_factor = 0.1;
  c.decay_steps_apn = 20000;
  c.decay_steps_q = 60000;
  c.q_steps_per_apn_step = 3;
  c.epsilon = 0.01;
  c.crop_size = 224;
  c.batch_size = 32;
  c.q_batch_size = 32;
  c.epochs = 10;
  c.share_proposal_net = false;
  c.spatial_backbone = "swin_tiny";
  c.frequency_backbone = "resnet18";
  return c;
}

/// DiffusionForensics: K = 5 over 40 epochs, otherwise as GenImage.
inline TrainConfig TrainConfig::full_scale_df() {
  auto c = full_scale_genimage();
  c.K = 5;
  c.epochs = 40;
  return c;
}

/// Desk scale: 64x64 synthetic images cropped to 56, small conv backbones.
inline TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.K = 5;
  c.C = 64;
  c.m_r = c.m_ir = 32;
  c.attention_heads = 8;
  c.proposal_channels = 8;
  c.residual_blocks = 1;
  c.ofp_channels = 4;
  c.backbone_stages = {8, 16, 32, 64};
  c.crop_size = 56;
  c.batch_size = 16;
  c.q_batch_size = 8;
  c.weight_mi = 0.01;
  c.lr_apn = 1e-3;
  c.lr_bases = 1e-7;
  c.lr_q = 1e-3;
  return c;
}

}  // namespace apn
