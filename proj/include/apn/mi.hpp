#pragma once

// Mutual-information machinery: averaging the frequency and spatial branch
// features, the alignment loss between branches, a diagonal Gaussian
// variational approximation q(f^r | f^ir) and the sampled CLUB upper bound.

#include <numbers>

#include "apn/layers.hpp"
#include "apn/proposal.hpp"

namespace apn {

inline constexpr double kLogVarBound = 8.0;

template <class T>
Var<T> detach(const Var<T>& v) {
  return Var<T>(v.value());
}

/// q(f^r | f^ir) = N(mu(f^ir), diag(exp(logvar(f^ir)))). Each head is a two-layer
/// MLP; logvar is squashed to (-8, 8) by 8 tanh(x / 8).
template <class T>
class GaussianVariational {
 public:
  GaussianVariational(std::size_t width, nn::Rng& rng)
      : mean1_(width, 2 * width, rng), mean2_(2 * width, width, rng), logvar1_(width, 2 * width, rng),
        logvar2_(2 * width, width, rng) {}

  std::pair<Var<T>, Var<T>> operator()(const Var<T>& irrelated) const { return forward(irrelated, false); }

  /// Same density with the parameters copied out as constants: gradients reach
  /// the input only.
  std::pair<Var<T>, Var<T>> frozen(const Var<T>& irrelated) const { return forward(irrelated, true); }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    mean1_.collect(prefix + ".mean1", out);
    mean2_.collect(prefix + ".mean2", out);
    logvar1_.collect(prefix + ".logvar1", out);
    logvar2_.collect(prefix + ".logvar2", out);
  }

  nn::ParamList<T> parameters() const {
    nn::ParamList<T> p;
    collect("estimator", p);
    return p;
  }

 private:
  std::pair<Var<T>, Var<T>> forward(const Var<T>& x, bool constant) const {
    auto apply = [constant](const nn::Linear<T>& l, const Var<T>& in) {
      return constant ? ad::linear(in, detach(l.weight()), detach(l.bias())) : l(in);
    };
    auto mu = apply(mean2_, ad::relu(apply(mean1_, x)));
    auto raw = apply(logvar2_, ad::relu(apply(logvar1_, x)));
    auto logvar = ad::affine(ad::tanh(ad::affine(raw, T(1 / kLogVarBound))), T(kLogVarBound));
    return {mu, logvar};
  }

  nn::Linear<T> mean1_, mean2_, logvar1_, logvar2_;
};

/// f^r = (f_f^r + f_s^r) / 2, f^ir = (f_f^ir + f_s^ir) / 2.
template <class T>
FeaturePair<T> average_branch_features(const FeaturePair<T>& freq, const FeaturePair<T>& spatial) {
  return {ad::affine(ad::add(freq.related, spatial.related), T(0.5)),
          ad::affine(ad::add(freq.irrelated, spatial.irrelated), T(0.5))};
}

/// sum ||f_f^r - f_s^r||^2 / (C D) + sum ||f_f^ir - f_s^ir||^2 / (C D)
template <class T>
Var<T> align_loss(const FeaturePair<T>& freq, const FeaturePair<T>& spatial) {
  return ad::add(ad::mean(ad::square(ad::sub(freq.related, spatial.related))),
                 ad::mean(ad::square(ad::sub(freq.irrelated, spatial.irrelated))));
}

namespace detail {

template <class T>
void require_gaussian_shapes(const Var<T>& r, const Var<T>& mu, const Var<T>& logvar, const char* op) {
  if (r.value().rank() != 2 || mu.shape() != r.shape() || logvar.shape() != r.shape())
    throw DomainError(std::string(op) + ": expected matching (D, C) tensors, got " + shape_str(r.shape()) + ", " +
                      shape_str(mu.shape()) + ", " + shape_str(logvar.shape()));
}

}  // namespace detail

/// Sampled CLUB bound with all D x D pairs, the positive pair included in the
/// negative average:
///   (1/D) sum_i [ log q(r_i | ir_i) - (1/D) sum_j log q(r_j | ir_i) ].
/// The log-normaliser cancels within each i, leaving per dimension d
///   (Var_d + (rbar_d - mu_id)^2 - (r_id - mu_id)^2) / (2 sigma_id^2),
/// so the cost is O(D C).
template <class T>
Var<T> club_bound(const Var<T>& r, const Var<T>& mu, const Var<T>& logvar) {
  detail::require_gaussian_shapes(r, mu, logvar, "club_bound");
  const std::size_t D = r.dim(0), C = r.dim(1);
  const auto& R = r.value();
  const auto& Mu = mu.value();
  const auto& Lv = logvar.value();
  std::vector<double> mean(C), var(C);
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t d = 0; d < C; ++d) mean[d] += R[i * C + d];
  for (auto& m : mean) m /= double(D);
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t d = 0; d < C; ++d) var[d] += (R[i * C + d] - mean[d]) * (R[i * C + d] - mean[d]);
  for (auto& v : var) v /= double(D);
  double total = 0;
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t d = 0; d < C; ++d) {
      const std::size_t j = i * C + d;
      const double w = 0.5 * std::exp(-double(Lv[j]));
      const double a = mean[d] - Mu[j], e = R[j] - Mu[j];
      total += (var[d] + a * a - e * e) * w;
    }
  total /= double(D);
  return ad::make_op<T>(
      Tensor<T>({1}, T(total)), {r, mu, logvar},
      [=, pr = r.node(), pm = mu.node(), pl = logvar.node()](ad::Node<T>& self) {
        const double g = self.grad[0];
        const auto& R = pr->value;
        const auto& Mu = pm->value;
        const auto& Lv = pl->value;
        std::vector<double> wsum(C), wmu(C);
        for (std::size_t i = 0; i < D; ++i)
          for (std::size_t d = 0; d < C; ++d) {
            const std::size_t j = i * C + d;
            const double w = 0.5 * std::exp(-double(Lv[j]));
            wsum[d] += w;
            wmu[d] += w * Mu[j];
          }
        for (std::size_t i = 0; i < D; ++i)
          for (std::size_t d = 0; d < C; ++d) {
            const std::size_t j = i * C + d;
            const double w = 0.5 * std::exp(-double(Lv[j]));
            const double a = mean[d] - Mu[j], e = R[j] - Mu[j];
            if (pm->requires_grad) pm->grad_ref()[j] += T(g * 2.0 * w * (R[j] - mean[d]) / double(D));
            if (pl->requires_grad) pl->grad_ref()[j] += T(-g * (var[d] + a * a - e * e) * w / double(D));
            if (pr->requires_grad)
              pr->grad_ref()[j] +=
                  T(g * (2.0 * (R[j] * wsum[d] - wmu[d]) / double(D * D) - 2.0 * e * w / double(D)));
          }
      });
}

/// (1/D) sum_i -log q(r_i | ir_i) for a diagonal Gaussian.
template <class T>
Var<T> gaussian_nll(const Var<T>& r, const Var<T>& mu, const Var<T>& logvar) {
  detail::require_gaussian_shapes(r, mu, logvar, "gaussian_nll");
  const std::size_t D = r.dim(0), n = r.size();
  const double half_log_2pi = 0.5 * std::log(2 * std::numbers::pi);
  double total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double e = r.value()[j] - mu.value()[j], lv = logvar.value()[j];
    total += e * e * 0.5 * std::exp(-lv) + half_log_2pi + 0.5 * lv;
  }
  total /= double(D);
  return ad::make_op<T>(Tensor<T>({1}, T(total)), {r, mu, logvar},
                        [=, pr = r.node(), pm = mu.node(), pl = logvar.node()](ad::Node<T>& self) {
                          const double g = self.grad[0] / double(D);
                          for (std::size_t j = 0; j < n; ++j) {
                            const double e = pr->value[j] - pm->value[j], iv = std::exp(-double(pl->value[j]));
                            if (pr->requires_grad) pr->grad_ref()[j] += T(g * e * iv);
                            if (pm->requires_grad) pm->grad_ref()[j] += T(-g * e * iv);
                            if (pl->requires_grad) pl->grad_ref()[j] += T(g * 0.5 * (1.0 - e * e * iv));
                          }
                        });
}

/// L_mi: gradients reach the features only; the estimator is held fixed.
template <class T>
Var<T> club_upper_bound_loss(const FeaturePair<T>& f, const GaussianVariational<T>& q) {
  auto [mu, logvar] = q.frozen(f.irrelated);
  return club_bound(f.related, mu, logvar);
}

/// L_q: trains the estimator only; features are detached.
template <class T>
Var<T> estimator_nll_loss(const FeaturePair<T>& f, const GaussianVariational<T>& q) {
  auto [mu, logvar] = q(detach(f.irrelated));
  return gaussian_nll(detach(f.related), mu, logvar);
}

}  // namespace apn
