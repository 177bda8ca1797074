#pragma once

// Loss assembly, the alternating APN / estimator schedule and the training
// loop with its metrics log.

#include <cstdio>
#include <fstream>

#include "apn/data.hpp"
#include "apn/model.hpp"
#include "apn/optim.hpp"

namespace apn {

/// (1/B) sum over every (c, part, axis, i) of max(start - end + epsilon, 0);
/// proposals (B, 3, 2, 2, K, 2).
template <class T>
Var<T> band_validity_loss(const Var<T>& proposals, double epsilon) {
  if (epsilon <= 0) throw DomainError("band_validity_loss: epsilon must be > 0");
  const std::size_t B = proposals.dim(0), n = proposals.size() / 2;
  const auto& p = proposals.value();
  std::vector<char> active(n);
  double total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double h = double(p[2 * j]) - double(p[2 * j + 1]) + epsilon;
    active[j] = h > 0;
    if (h > 0) total += h;
  }
  return ad::make_op<T>(Tensor<T>({1}, T(total / double(B))), {proposals},
                        [=, pp = proposals.node()](ad::Node<T>& self) {
                          auto& g = pp->grad_ref();
                          const T s = self.grad[0] / T(B);
                          for (std::size_t j = 0; j < n; ++j)
                            if (active[j]) {
                              g[2 * j] += s;
                              g[2 * j + 1] -= s;
                            }
                        });
}

struct LossBreakdown {
  double ce = 0, band = 0, basis = 0, align = 0, mi = 0;
  double total = 0;  // weighted sum of the five terms

  /// Each term times its config weight, so the five terms sum to `total`.
  LossBreakdown weighted(const TrainConfig& c) const {
    return {c.weight_ce * ce, c.weight_band * band, c.weight_basis * basis, c.weight_align * align, c.weight_mi * mi,
            total};
  }
};

template <class T>
struct ApnLoss {
  Var<T> total;
  LossBreakdown terms;
};

/// L_APN = w_ce L_ce + w_band L_band + w_basis L_basis + w_align L_align + w_mi L_mi.
template <class T>
ApnLoss<T> total_apn_loss(const ApnOutput<T>& out, const std::vector<int>& labels, const BasisPair<T>& bases,
                          const GaussianVariational<T>& estimator, const TrainConfig& cfg) {
  auto ce = ad::cross_entropy(out.logits, labels);
  auto band = band_validity_loss(out.proposals, cfg.epsilon);
  auto basis = basis_orthogonality_loss(bases);
  auto align = align_loss(out.frequency, out.spatial);
  auto mi = club_upper_bound_loss(out.fused, estimator);
  ApnLoss<T> l;
  l.terms = {ce.item(), band.item(), basis.item(), align.item(), mi.item(), 0};
  l.total = ad::add(ad::add(ad::add(ad::add(ad::affine(ce, T(cfg.weight_ce)), ad::affine(band, T(cfg.weight_band))),
                                    ad::affine(basis, T(cfg.weight_basis))),
                            ad::affine(align, T(cfg.weight_align))),
                    ad::affine(mi, T(cfg.weight_mi)));
  l.terms.total = l.total.item();
  return l;
}

struct StepRecord {
  std::size_t iteration = 0;  // 1-based APN iteration just completed
  LossBreakdown loss;         // weighted contributions
  double loss_q = 0;  // mean over this step's estimator updates
  double lr_apn = 0, lr_q = 0;
};

inline constexpr char kMetricsHeader[] = "iter,loss_total,loss_ce,loss_band,loss_basis,loss_align,loss_mi,loss_q,lr_apn,lr_q";

inline std::string metrics_row(const StepRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.iteration, r.loss.total,
                r.loss.ce, r.loss.band, r.loss.basis, r.loss.align, r.loss.mi, r.loss_q, r.lr_apn, r.lr_q);
  return buf;
}

enum Stream : std::uint64_t { kApnStream = 1, kEstimatorStream = 2, kInitStream = 3 };

/// Parameters, estimator, both optimizers and both counters. Everything random
/// after construction is a function of (seed, stream, counter).
template <class T>
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : cfg_((cfg.validate(), cfg)),
        init_rng_(data::counter_rng({cfg.seed, kInitStream})),
        model_(cfg_, init_rng_),
        estimator_(cfg_.C, init_rng_),
        opt_apn_({{model_.parameters().params, cfg_.lr_apn}, {model_.basis_parameters().params, cfg_.lr_bases}},
                 cfg_.beta1, cfg_.beta2, cfg_.adam_eps),
        opt_q_({{estimator_.parameters().params, cfg_.lr_q}}, cfg_.beta1, cfg_.beta2, cfg_.adam_eps) {}

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return cfg_; }
  Apn<T>& model() { return model_; }
  GaussianVariational<T>& estimator() { return estimator_; }
  Adam<T>& apn_optimizer() { return opt_apn_; }
  Adam<T>& estimator_optimizer() { return opt_q_; }
  std::size_t apn_iterations() const { return iter_apn_; }
  std::size_t estimator_iterations() const { return iter_q_; }
  void set_counters(std::size_t apn, std::size_t q) {
    iter_apn_ = apn;
    iter_q_ = q;
  }

  double lr_apn(std::size_t it) const { return step_decay(cfg_.lr_apn, cfg_.decay_factor, cfg_.decay_steps_apn, it); }
  double lr_bases(std::size_t it) const {
    return step_decay(cfg_.lr_bases, cfg_.decay_factor, cfg_.decay_steps_apn, it);
  }
  double lr_q(std::size_t it) const { return step_decay(cfg_.lr_q, cfg_.decay_factor, cfg_.decay_steps_q, it); }

  /// One APN update with the estimator frozen.
  LossBreakdown apn_step(const data::Batch<T>& batch) {
    opt_apn_.set_lr(0, lr_apn(iter_apn_));
    opt_apn_.set_lr(1, lr_bases(iter_apn_));
    opt_apn_.zero_grad();
    auto out = model_.forward(batch.images, NormMode::Train, spectral::MaskMode::Soft);
    auto loss = total_apn_loss(out, batch.labels, model_.bases(), estimator_, cfg_);
    ad::backward(loss.total);
    opt_apn_.step();
    ++iter_apn_;
    return loss.terms;
  }

  /// One estimator update on features from the frozen APN. Batch statistics
  /// normalise the forward pass; running statistics are left untouched.
  double estimator_step(const data::Batch<T>& batch) {
    opt_q_.set_lr(0, lr_q(iter_q_));
    FeaturePair<T> f;
    {
      ad::NoGradGuard frozen;
      f = model_.forward(batch.images, NormMode::BatchOnly, spectral::MaskMode::Soft).fused;
    }
    opt_q_.zero_grad();
    auto l = estimator_nll_loss(f, estimator_);
    ad::backward(l);
    opt_q_.step();
    ++iter_q_;
    return l.item();
  }

  /// APN step on `apn_batch`, then one estimator step per q batch.
  StepRecord alternating_step(const data::Batch<T>& apn_batch, const std::vector<data::Batch<T>>& q_batches) {
    if (q_batches.size() != cfg_.q_steps_per_apn_step)
      throw DomainError("alternating_step: expected " + std::to_string(cfg_.q_steps_per_apn_step) + " q batches");
    StepRecord r;
    r.lr_apn = lr_apn(iter_apn_);
    r.loss = apn_step(apn_batch).weighted(cfg_);
    r.iteration = iter_apn_;
    r.lr_q = lr_q(iter_q_);
    for (const auto& b : q_batches) r.loss_q += estimator_step(b);
    r.loss_q /= double(q_batches.size());
    return r;
  }

  /// Draws the next batches from the two independent streams and steps.
  StepRecord step(const data::Dataset& train) {
    data::Sampler apn(train.size(), cfg_.seed, kApnStream), q(train.size(), cfg_.seed, kEstimatorStream);
    auto b = data::make_batch<T>(train, apn.batch(iter_apn_, cfg_.batch_size), data::CropMode::Train,
                                 cfg_.crop_size, cfg_.seed, kApnStream, iter_apn_);
    std::vector<data::Batch<T>> qb;
    for (std::size_t k = 0; k < cfg_.q_steps_per_apn_step; ++k) {
      const std::size_t it = iter_q_ + k;
      qb.push_back(data::make_batch<T>(train, q.batch(it, cfg_.q_batch_size), data::CropMode::Train, cfg_.crop_size,
                                       cfg_.seed, kEstimatorStream, it));
    }
    return alternating_step(b, qb);
  }

  /// Iteration budget: max_iterations if set, else epochs over the training set.
  std::size_t planned_iterations(std::size_t train_size) const {
    if (cfg_.max_iterations) return cfg_.max_iterations;
    return std::max<std::size_t>(1, cfg_.epochs * ((train_size + cfg_.batch_size - 1) / cfg_.batch_size));
  }

 private:
  TrainConfig cfg_;
  nn::Rng init_rng_;
  Apn<T> model_;
  GaussianVariational<T> estimator_;
  Adam<T> opt_apn_, opt_q_;
  std::size_t iter_apn_ = 0, iter_q_ = 0;
};

/// Appends rows to a metrics CSV, writing the header when the file is new or empty.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw DataError("cannot open metrics log '" + path + "'");
    if (fresh) out_ << kMetricsHeader << "\n";
  }
  void append(const StepRecord& r) { out_ << metrics_row(r) << "\n" << std::flush; }

 private:
  std::ofstream out_;
};

}  // namespace apn
