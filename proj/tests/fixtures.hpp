#pragma once

// Miniature configs and in-memory synthetic datasets for trainer-level tests.

#include <cstring>

#include "apn/apn.hpp"

namespace apntest {

inline apn::TrainConfig tiny_config(std::uint64_t seed = 1) {
  auto c = apn::TrainConfig::desk();
  c.K = 2;
  c.C = 8;
  c.m_r = c.m_ir = 4;
  c.attention_heads = 2;
  c.proposal_channels = 2;
  c.residual_blocks = 1;
  c.ofp_channels = 2;
  c.backbone_stages = {2, 4};
  c.crop_size = 12;
  c.batch_size = 4;
  c.q_batch_size = 4;
  c.seed = seed;
  return c;
}

/// Band-sine pairs decoded straight to memory (no files), labels alternating real/fake.
inline apn::data::Dataset synthetic_dataset(apn::data::SyntheticSpec s, std::size_t first = 0) {
  apn::data::Dataset d;
  for (std::size_t i = first; i < first + s.count; ++i) {
    auto p = apn::data::synthesize_pair(s, i);
    d.images.push_back(apn::data::clip_to_float(p.real));
    d.manifest.records.push_back({"", apn::data::Real, s.domain});
    d.images.push_back(apn::data::clip_to_float(p.fake));
    d.manifest.records.push_back({"", apn::data::Fake, s.domain});
  }
  return d;
}

inline apn::data::Dataset tiny_dataset(std::size_t pairs = 8, std::uint64_t seed = 3) {
  apn::data::SyntheticSpec s;
  s.M = s.N = 16;
  s.count = pairs;
  s.seed = seed;
  return synthetic_dataset(s);
}

/// FNV-1a over the raw bytes of every tensor in the list.
template <class T>
std::uint64_t hash_params(const apn::nn::ParamList<T>& p) {
  std::uint64_t h = 1469598103934665603ull;
  auto eat = [&](const apn::Tensor<T>& t) {
    const auto* b = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  for (const auto& np : p.params) eat(np.var.value());
  for (const auto& nb : p.buffers) eat(*nb.tensor);
  return h;
}

}  // namespace apntest
