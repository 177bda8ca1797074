#pragma once

// Learnable orthogonal decomposition of the spatial feature vector. The two
// basis sets are ordinary parameters; orthogonality is encouraged only by the
// basis loss, never enforced.

#include "apn/layers.hpp"
#include "apn/proposal.hpp"

namespace apn {

template <class T>
class BasisPair {
 public:
  BasisPair() = default;

  /// omega_r = [I, Z] (m_r x C), omega_ir = [Z, I] (m_ir x C).
  BasisPair(std::size_t width, std::size_t related_count) {
    if (related_count < 1 || related_count >= width)
      throw ConfigError("basis split requires 1 <= m_r < C (got m_r=" + std::to_string(related_count) +
                        ", C=" + std::to_string(width) + ")");
    const std::size_t mir = width - related_count;
    Tensor<T> r({related_count, width}), ir({mir, width});
    for (std::size_t j = 0; j < related_count; ++j) r[j * width + j] = T(1);
    for (std::size_t k = 0; k < mir; ++k) ir[k * width + related_count + k] = T(1);
    related_ = Var<T>(std::move(r), true);
    irrelated_ = Var<T>(std::move(ir), true);
  }

  BasisPair(Tensor<T> related, Tensor<T> irrelated)
      : related_(std::move(related), true), irrelated_(std::move(irrelated), true) {
    if (related_.dim(1) != irrelated_.dim(1)) throw DomainError("basis sets must share the feature width");
  }

  const Var<T>& related() const { return related_; }
  const Var<T>& irrelated() const { return irrelated_; }
  std::size_t width() const { return related_.dim(1); }
  std::size_t related_count() const { return related_.dim(0); }
  std::size_t irrelated_count() const { return irrelated_.dim(0); }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    out.params.push_back({prefix + ".omega_r", related_});
    out.params.push_back({prefix + ".omega_ir", irrelated_});
  }

 private:
  Var<T> related_, irrelated_;
};

/// f^r = sum_j (w_j . f) w_j over omega_r; f^ir likewise over omega_ir. f (B, C).
template <class T>
FeaturePair<T> orthogonal_decompose(const Var<T>& f, const BasisPair<T>& bases) {
  if (f.dim(1) != bases.width())
    throw DomainError("orthogonal_decompose: feature width " + std::to_string(f.dim(1)) + " vs basis width " +
                      std::to_string(bases.width()));
  auto project = [&](const Var<T>& omega) { return ad::matmul(ad::matmul(f, omega, false, true), omega); };
  return {project(bases.related()), project(bases.irrelated())};
}

/// (1 / (m_r m_ir)) sum_ij |w_i^r . w_j^ir|
template <class T>
Var<T> basis_orthogonality_loss(const BasisPair<T>& bases) {
  return ad::mean(ad::abs(ad::matmul(bases.related(), bases.irrelated(), false, true)));
}

}  // namespace apn
