#pragma once

// Adam with per-group learning rates and a step-decay schedule.

#include <cmath>

#include "apn/layers.hpp"

namespace apn {

/// base * factor^floor(iteration / decay_steps)
inline double step_decay(double base, double factor, std::size_t decay_steps, std::size_t iteration) {
  return base * std::pow(factor, double(iteration / decay_steps));
}

template <class T>
class Adam {
 public:
  struct Group {
    std::vector<nn::NamedParam<T>> params;
    double lr = 1e-3;
  };

  Adam(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& g : groups_)
      for (auto& p : g.params) {
        m_.emplace_back(p.var.shape());
        v_.emplace_back(p.var.shape());
      }
  }

  std::vector<Group>& groups() { return groups_; }
  std::size_t steps() const { return t_; }

  void set_lr(std::size_t group, double lr) { groups_.at(group).lr = lr; }
  double lr(std::size_t group) const { return groups_.at(group).lr; }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.var.zero_grad();
  }

  /// Parameters without a gradient this step are left untouched (moments included).
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_)), c2 = 1.0 - std::pow(beta2_, double(t_));
    std::size_t slot = 0;
    for (auto& g : groups_) {
      const T step_size = T(g.lr / c1);
      const T inv_c2 = T(1.0 / std::sqrt(c2));
      for (auto& p : g.params) {
        auto& m = m_[slot];
        auto& v = v_[slot];
        ++slot;
        if (!p.var.has_grad()) continue;
        const auto& gr = p.var.grad();
        auto& w = p.var.mutable_value();
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = T(beta1_) * m[i] + T(1 - beta1_) * gr[i];
          v[i] = T(beta2_) * v[i] + T(1 - beta2_) * gr[i] * gr[i];
          w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_c2 + T(eps_));
        }
      }
    }
  }

  /// Moment buffers in parameter order, for checkpointing.
  std::vector<Tensor<T>*> state() {
    std::vector<Tensor<T>*> s;
    for (std::size_t i = 0; i < m_.size(); ++i) {
      s.push_back(&m_[i]);
      s.push_back(&v_[i]);
    }
    return s;
  }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  std::vector<Group> groups_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace apn
