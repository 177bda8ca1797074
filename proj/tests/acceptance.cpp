// Acceptance criteria 1-7. `acceptance <n>` runs criterion n; no argument runs
// all of them. Each criterion prints exactly one line starting PASS or FAIL and
// the process exits nonzero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>

#include "apn/apn.hpp"
#include "fixtures.hpp"
#include "mi_calibration.hpp"
#include "test_support.hpp"

using namespace apntest;
using namespace apn::spectral;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

void time_limit(Outcome& o, clk::time_point t0, double limit) {
  const double s = seconds_since(t0);
  o.detail << " runtime=" << s << "s (limit " << limit << "s)";
  o.require(s < limit, "runtime");
}

// ---------------------------------------------------------------------------
// 1. Spectral kernels

Outcome spectral_suite() {
  Outcome o;
  const auto t0 = clk::now();
  std::mt19937_64 rng(1001);
  std::uniform_real_distribution<double> U(0, 1);
  double worst_round = 0, worst_real = 0, worst_parseval = 0;
  bool complementary = true;
  for (auto [M, N] : {std::pair<std::size_t, std::size_t>{8, 8}, {17, 9}, {64, 64}}) {
    for (int trial = 0; trial < 200; ++trial) {
      ImageTensor<double> img(3, M, N);
      img.data = random_image(img.data.size(), rng);

      const auto s = forward_dft_half<double>(img.channel(0), M, N);
      const auto back = reassemble_idft(s);
      double mx = 0, err = 0;
      for (std::size_t i = 0; i < back.size(); ++i) {
        mx = std::max(mx, std::abs(img.data[i]));
        err = std::max(err, std::abs(back[i] - img.data[i]));
      }
      worst_round = std::max(worst_round, err / mx);

      const Band bu{U(rng), U(rng)}, bv{U(rng), U(rng)};
      const auto hard = build_cross_mask<double>(bu, bv, M, N, MaskMode::Hard);
      auto [r, ir] = separate_components(s, hard);
      for (std::size_t i = 0; i < s.size(); ++i)
        complementary &= r.amplitude[i] + ir.amplitude[i] == s.amplitude[i] && r.phase[i] + ir.phase[i] == s.phase[i];

      const auto soft_a = build_cross_mask<double>({U(rng), U(rng)}, {U(rng), U(rng)}, M, N, MaskMode::Soft);
      const auto soft_p = build_cross_mask<double>({U(rng), U(rng)}, {U(rng), U(rng)}, M, N, MaskMode::Soft);
      auto [sr, sir] = separate_components(s, soft_a, soft_p);
      for (const auto* part : {&sr, &sir}) {
        double residual = 0;
        reassemble_idft(*part, &residual);
        worst_real = std::max(worst_real, residual);
      }

      ProposalSet p(1);
      for (std::size_t c = 0; c < 3; ++c)
        for (Part part : {Part::Amplitude, Part::Phase}) {
          p.set(c, part, Axis::U, 0, bu);
          p.set(c, part, Axis::V, 0, bv);
        }
      auto [ri, iri] = separate_image(img, p, 0);
      const double e = energy<double>(img.data);
      worst_parseval =
          std::max(worst_parseval, std::abs(energy<double>(ri.data) + energy<double>(iri.data) - e) / e);
    }
  }
  o.detail << "round_trip_rel=" << worst_round << " realness=" << worst_real << " parseval_rel=" << worst_parseval
           << " complementary=" << complementary;
  o.require(worst_round <= 1e-5, "round trip");
  o.require(complementary, "mask complementarity");
  o.require(worst_real <= 1e-6, "realness");
  o.require(worst_parseval <= 1e-4, "Parseval split");
  time_limit(o, t0, 30);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Orthogonal decomposition

Outcome decomposition_suite() {
  Outcome o;
  const auto t0 = clk::now();
  bool split_exact = true;
  for (std::size_t C : {4, 16, 64, 256}) {
    const std::size_t m_r = C / 2;
    BasisPair<double> b(C, m_r);
    Tensor<double> f({1, C});
    for (std::size_t i = 0; i < C; ++i) f[i] = double(i + 1);
    auto out = orthogonal_decompose(Var<double>(f), b);
    for (std::size_t i = 0; i < C; ++i)
      split_exact &= out.related.value()[i] == (i < m_r ? f[i] : 0.0) && out.irrelated.value()[i] == (i < m_r ? 0.0 : f[i]);
    o.require(basis_orthogonality_loss(b).item() == 0.0, "L_basis at init");
  }

  std::mt19937_64 g(1002);
  double worst_recon = 0, worst_dot = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = 2 + std::size_t(trial) % 15, m_r = 1 + std::size_t(trial) % (C - 1);
    auto q = random_tensor({C, C}, g);
    for (std::size_t i = 0; i < C; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0;
        for (std::size_t k = 0; k < C; ++k) dot += q[i * C + k] * q[j * C + k];
        for (std::size_t k = 0; k < C; ++k) q[i * C + k] -= dot * q[j * C + k];
      }
      double n = 0;
      for (std::size_t k = 0; k < C; ++k) n += q[i * C + k] * q[i * C + k];
      for (std::size_t k = 0; k < C; ++k) q[i * C + k] /= std::sqrt(n);
    }
    Tensor<double> r({m_r, C}), ir({C - m_r, C});
    std::copy_n(q.data(), m_r * C, r.data());
    std::copy_n(q.data() + m_r * C, (C - m_r) * C, ir.data());
    BasisPair<double> b(r, ir);
    auto f = random_tensor({1, C}, g, -3, 3);
    auto out = orthogonal_decompose(Var<double>(f), b);
    double dot = 0;
    for (std::size_t k = 0; k < C; ++k) {
      worst_recon = std::max(worst_recon, std::abs(out.related.value()[k] + out.irrelated.value()[k] - f[k]));
      dot += out.related.value()[k] * out.irrelated.value()[k];
    }
    worst_dot = std::max(worst_dot, std::abs(dot));
  }

  const double s = 1 / std::sqrt(2.0);
  BasisPair<double> hand(Tensor<double>({1, 2}, std::vector<double>{s, s}), Tensor<double>({1, 2}, std::vector<double>{s, -s}));
  auto h = orthogonal_decompose(Var<double>(Tensor<double>({1, 2}, std::vector<double>{3, 1})), hand);
  const double hand_err = std::max({std::abs(h.related.value()[0] - 2), std::abs(h.related.value()[1] - 2),
                                    std::abs(h.irrelated.value()[0] - 1), std::abs(h.irrelated.value()[1] + 1)});

  o.detail << "split_exact=" << split_exact << " recon=" << worst_recon << " dot=" << worst_dot
           << " hand_example_err=" << hand_err;
  o.require(split_exact, "coordinate split");
  o.require(worst_recon <= 1e-6, "reconstruction");
  o.require(worst_dot <= 1e-6, "orthogonality");
  o.require(hand_err <= 1e-12, "hand example");
  time_limit(o, t0, 5);
  return o;
}

// ---------------------------------------------------------------------------
// 3. MI calibration

Outcome mi_calibration() {
  Outcome o;
  const auto t0 = clk::now();
  const double indep = calibrate_club(0.0, 2001), corr = calibrate_club(0.8, 2002), truth = analytic_gaussian_mi(0.8);
  o.detail << "rho=0: " << indep << " rho=0.8: " << corr << " (true MI " << truth << ")";
  o.require(std::abs(indep) <= 0.05, "independent estimate within 0.05 of 0");
  o.require(corr >= truth - 0.1, "correlated estimate >= true MI - 0.1");
  time_limit(o, t0, 120);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Gradient checks

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = clk::now();
  std::map<std::string, double> err;
  std::mt19937_64 g(3001);

  {
    const std::size_t B = 2, K = 2, M = 6, N = 5;
    Tensor<double> images({B, 3, M, N});
    for (auto& v : images.values()) v = std::uniform_real_distribution<double>(0, 1)(g);
    auto spectra = compute_spectra(images);
    Var<double> props(random_tensor({B, 3, 2, 2, K, 2}, g, 0.1, 0.9), true);
    auto w = random_tensor({2, B * K, 3, M, N}, g);
    err["soft_mask"] = gradient_check(
        [&] { return ad::sum(ad::mul(separate_bands(spectra, props, MaskMode::Soft, kDefaultSharpness), Var<double>(w))); },
        {props});
  }
  {
    nn::Rng rng(3002);
    ProposalSubnet<double> net({2, 3, 1, 2, true}, 6, 5, rng);
    nn::ParamList<double> p;
    net.collect("ofp", p);
    Var<double> fmap(random_tensor({2, 3, 4, 5}, g), true);
    std::vector<Var<double>> leaves{fmap};
    for (auto& np : p.params) leaves.push_back(np.var);
    double e = 0;
    for (Axis a : {Axis::U, Axis::V})
      e = std::max(e, gradient_check([&] { return ad::sum(ad::square(net.ofp_pool(fmap, a))); }, leaves));
    err["ofp"] = e;
  }
  {
    BasisPair<double> b(random_tensor({2, 4}, g), random_tensor({2, 4}, g));
    Var<double> f(random_tensor({3, 4}, g), true);
    auto w = random_tensor({3, 4}, g);
    err["decomposition"] = gradient_check(
        [&] {
          auto d = orthogonal_decompose(f, b);
          return ad::sum(ad::mul(ad::add(d.related, ad::square(d.irrelated)), Var<double>(w)));
        },
        {f, b.related(), b.irrelated()});
  }
  {
    auto cfg = tiny_config();
    cfg.crop_size = 8;
    cfg.backbone_stages = {2};
    nn::Rng rng(3003);
    Apn<double> model(cfg, rng);
    GaussianVariational<double> q(cfg.C, rng);
    data::SyntheticSpec s;
    s.M = s.N = 16;
    s.count = 2;
    auto d = synthetic_dataset(s);
    auto b = data::make_batch<double>(d, {0, 1, 2, 3}, data::CropMode::Infer, cfg.crop_size);
    auto params = model.state();
    std::vector<Var<double>> leaves;
    for (auto& p : params.params) leaves.push_back(p.var);
    const char* names[] = {"L_ce", "L_band", "L_basis", "L_align", "L_mi"};
    for (int which = 0; which < 5; ++which)
      err[names[which]] = gradient_check(
          [&] {
            auto out = model.forward(b.images, NormMode::BatchOnly, MaskMode::Soft);
            switch (which) {
              case 0: return ad::cross_entropy(out.logits, b.labels);
              case 1: return band_validity_loss(out.proposals, cfg.epsilon);
              case 2: return basis_orthogonality_loss(model.bases());
              case 3: return align_loss(out.frequency, out.spatial);
              default: return club_upper_bound_loss(out.fused, q);
            }
          },
          leaves, 1e-6, 12);
  }
  for (const auto& [name, e] : err) {
    o.detail << name << "=" << e << " ";
    o.require(e <= 1e-4, name);
  }
  time_limit(o, t0, 60);
  return o;
}

// ---------------------------------------------------------------------------
// 5. Alternating trainer contract

Outcome trainer_contract() {
  Outcome o;
  const auto t0 = clk::now();
  auto cfg = tiny_config(5001);
  cfg.decay_steps_apn = 10;
  cfg.decay_steps_q = 10;
  auto d = tiny_dataset(8, 5001);
  Trainer<float> t(cfg);
  data::Sampler apn_s(d.size(), cfg.seed, kApnStream), q_s(d.size(), cfg.seed, kEstimatorStream);
  std::size_t freeze_violations = 0, lr_mismatches = 0;
  for (std::size_t it = 0; it < 50; ++it) {
    const auto est0 = hash_params(t.estimator().parameters());
    auto b = data::make_batch<float>(d, apn_s.batch(it, cfg.batch_size), data::CropMode::Train, cfg.crop_size,
                                     cfg.seed, kApnStream, it);
    const double lr_now = t.lr_apn(t.apn_iterations());
    const double expect_lr = cfg.lr_apn * std::pow(0.1, double(it / 10));
    lr_mismatches += std::abs(lr_now - expect_lr) > 1e-12 * expect_lr;
    lr_mismatches += std::abs(t.lr_bases(t.apn_iterations()) - cfg.lr_bases * std::pow(0.1, double(it / 10))) >
                     1e-12 * cfg.lr_bases;
    t.apn_step(b);
    lr_mismatches += t.apn_optimizer().lr(0) != lr_now;
    freeze_violations += hash_params(t.estimator().parameters()) != est0;
    const auto apn1 = hash_params(t.model().state());
    for (std::size_t k = 0; k < cfg.q_steps_per_apn_step; ++k) {
      const auto qi = t.estimator_iterations();
      const double lr_q = cfg.lr_q * std::pow(0.1, double(qi / 10));
      t.estimator_step(data::make_batch<float>(d, q_s.batch(qi, cfg.q_batch_size), data::CropMode::Train,
                                               cfg.crop_size, cfg.seed, kEstimatorStream, qi));
      lr_mismatches += std::abs(t.estimator_optimizer().lr(0) - lr_q) > 1e-12 * lr_q;
      freeze_violations += hash_params(t.model().state()) != apn1;
    }
  }

  // Resume: 5 steps, checkpoint, 5 more; versus 10 uninterrupted.
  const auto dir = fs::temp_directory_path() / "apn_acceptance_resume";
  fs::remove_all(dir);
  Trainer<float> straight(cfg);
  std::vector<std::string> rows;
  for (int i = 0; i < 10; ++i) {
    if (i == 5) save_checkpoint(straight, dir.string());
    rows.push_back(metrics_row(straight.step(d)));
  }
  Trainer<float> resumed(checkpoint_config(dir.string()));
  load_checkpoint(resumed, dir.string());
  bool rows_equal = true;
  for (int i = 5; i < 10; ++i) rows_equal &= metrics_row(resumed.step(d)) == rows[std::size_t(i)];
  const bool params_equal = hash_params(resumed.model().state()) == hash_params(straight.model().state()) &&
                            hash_params(resumed.estimator().parameters()) == hash_params(straight.estimator().parameters());

  o.detail << "freeze_violations=" << freeze_violations << " lr_mismatches=" << lr_mismatches
           << " resume_rows_equal=" << rows_equal << " resume_params_equal=" << params_equal;
  o.require(freeze_violations == 0, "freeze contract");
  o.require(lr_mismatches == 0, "lr decay");
  o.require(rows_equal && params_equal, "bit-exact resume");
  time_limit(o, t0, 120);
  return o;
}

// ---------------------------------------------------------------------------
// 6. End-to-end synthetic benchmark

constexpr std::size_t kE2eIterations = 400;
const std::vector<std::size_t> kNaiveStages{16, 32, 64, 128};

std::size_t parameter_count(const nn::ParamList<float>& p) {
  std::size_t n = 0;
  for (const auto& np : p.params) n += np.var.size();
  return n;
}

struct SeedResult {
  double in_domain = 0, shifted = 0, naive_shifted = 0, naive_in = 0, train_seconds = 0;
};

SeedResult run_seed(std::uint64_t seed, std::size_t& apn_params, std::size_t& naive_params) {
  data::SyntheticSpec spec;
  spec.count = 2000;
  spec.seed = seed;
  const auto train = synthetic_dataset(spec, 0);
  spec.count = 500;
  const auto held_out = synthetic_dataset(spec, 1000000);
  spec.u_lo = 0.8;
  spec.u_hi = 0.9;
  spec.v_lo = 0.4;
  spec.v_hi = 0.5;
  const auto shifted = synthetic_dataset(spec, 2000000);

  SeedResult r;
  auto cfg = TrainConfig::desk();
  cfg.seed = seed;
  cfg.max_iterations = kE2eIterations;
  const auto t0 = clk::now();
  Trainer<float> t(cfg);
  while (t.apn_iterations() < t.planned_iterations(train.size())) t.step(train);
  r.train_seconds = seconds_since(t0);
  r.in_domain = evaluate(t.model(), held_out).overall.accuracy();
  r.shifted = evaluate(t.model(), shifted).overall.accuracy();
  apn_params = parameter_count(t.model().state());

  nn::Rng rng(seed);
  NaiveClassifier<float> naive(kNaiveStages, cfg.C, rng);
  naive_params = parameter_count(naive.parameters());
  Adam<float> opt({{naive.parameters().params, cfg.lr_apn}}, cfg.beta1, cfg.beta2, cfg.adam_eps);
  data::Sampler sampler(train.size(), seed, kApnStream);
  for (std::size_t it = 0; it < kE2eIterations; ++it) {
    auto b = data::make_batch<float>(train, sampler.batch(it, cfg.batch_size), data::CropMode::Train, cfg.crop_size,
                                     seed, kApnStream, it);
    opt.zero_grad();
    ad::backward(ad::cross_entropy(naive(b.images, NormMode::Train), b.labels));
    opt.step();
  }
  r.naive_in = make_report(held_out.manifest, predict(naive, held_out, cfg.crop_size)).overall.accuracy();
  r.naive_shifted = make_report(shifted.manifest, predict(naive, shifted, cfg.crop_size)).overall.accuracy();
  return r;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome end_to_end() {
  Outcome o;
  std::vector<double> in, sh, naive, secs;
  std::size_t apn_params = 0, naive_params = 0;
  for (std::uint64_t seed : {11, 12, 13}) {
    const auto r = run_seed(seed, apn_params, naive_params);
    std::fprintf(stderr,
                 "seed %llu: apn in-domain %.1f%% shifted %.1f%% (train %.0fs); naive in-domain %.1f%% shifted %.1f%%\n",
                 static_cast<unsigned long long>(seed), r.in_domain, r.shifted, r.train_seconds, r.naive_in,
                 r.naive_shifted);
    in.push_back(r.in_domain);
    sh.push_back(r.shifted);
    naive.push_back(r.naive_shifted);
    secs.push_back(r.train_seconds);
  }
  const double m_in = median3(in), m_sh = median3(sh), m_naive = median3(naive),
               worst_secs = *std::max_element(secs.begin(), secs.end());
  o.detail << "median over 3 seeds: apn held-out=" << m_in << "% apn shifted=" << m_sh
           << "% naive shifted=" << m_naive << "% max train time=" << worst_secs << "s params apn=" << apn_params
           << " naive=" << naive_params;
  o.require(m_in >= 95, "apn held-out >= 95%");
  o.require(worst_secs <= 900, "training within 15 minutes");
  o.require(m_sh >= 70, "apn shifted >= 70%");
  o.require(m_naive <= 60, "naive shifted <= 60%");
  return o;
}

// ---------------------------------------------------------------------------
// 7. Band loss values and config fidelity

Outcome band_and_config() {
  Outcome o;
  Tensor<double> p({1, 3, 2, 2, 2, 2});
  for (std::size_t j = 0; j < p.size(); j += 2) {
    p[j] = 0.1;
    p[j + 1] = 0.6;
  }
  const double wide = band_validity_loss(Var<double>(p), 0.01).item();
  p[10] = p[11] = 0.3;
  const double one_collapsed = band_validity_loss(Var<double>(p), 0.01).item();
  p[12] = 0.5;
  p[13] = 0.25;  // width -0.25: contributes 0.25 + 0.01
  const double two = band_validity_loss(Var<double>(p), 0.01).item();
  Tensor<double> pb({2, 3, 2, 2, 1, 2}, 0.5);
  const double batch = band_validity_loss(Var<double>(pb), 0.01).item();  // 12 collapsed per image
  o.detail << "band: wide=" << wide << " one_collapsed=" << one_collapsed << " two=" << two << " batch=" << batch;
  o.require(wide == 0.0, "wide bands");
  o.require(std::abs(one_collapsed - 0.01) < 1e-15, "one collapsed band");
  o.require(std::abs(two - 0.27) < 1e-12, "two violations");
  o.require(std::abs(batch - 0.12) < 1e-12, "batch average");
  o.require(TrainConfig{}.epsilon == 0.01, "default epsilon");

  const nlohmann::json expected_genimage = {
      {"C", 256},          {"m_r", 128},           {"m_ir", 128},       {"K", 15},
      {"attention_heads", 8}, {"lr_apn", 1e-4},    {"lr_bases", 1e-7},  {"lr_q", 1e-4},
      {"decay_factor", 0.1}, {"decay_steps_apn", 20000}, {"decay_steps_q", 60000},
      {"q_steps_per_apn_step", 3}, {"crop_size", 224}, {"epsilon", 0.01}, {"batch_size", 32},
      {"q_batch_size", 32}, {"epochs", 10},        {"optimizer", "adam"}};
  std::size_t mismatches = 0;
  const auto g = TrainConfig::full_scale_genimage().to_json(), df = TrainConfig::full_scale_df().to_json();
  for (const auto& [k, v] : expected_genimage.items()) {
    if (g.at(k) != v) {
      ++mismatches;
      o.detail << " genimage." << k << "=" << g.at(k).dump();
    }
    const auto want_df = k == "K" ? nlohmann::json(5) : k == "epochs" ? nlohmann::json(40) : v;
    if (df.at(k) != want_df) {
      ++mismatches;
      o.detail << " df." << k << "=" << df.at(k).dump();
    }
  }
  // The default config (used when a file omits keys) carries the same schedule constants.
  const auto def = TrainConfig{}.to_json();
  for (const char* k : {"lr_apn", "lr_bases", "lr_q", "decay_factor", "decay_steps_apn", "decay_steps_q",
                        "q_steps_per_apn_step", "crop_size", "epsilon"})
    if (def.at(k) != expected_genimage.at(k)) {
      ++mismatches;
      o.detail << " default." << k << "=" << def.at(k).dump();
    }
  o.detail << " config_mismatches=" << mismatches;
  o.require(mismatches == 0, "config snapshot");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"spectral kernel suite", spectral_suite},
      {"decomposition suite", decomposition_suite},
      {"MI calibration", mi_calibration},
      {"gradient checks", gradient_suite},
      {"alternating-trainer contract", trainer_contract},
      {"end-to-end synthetic benchmark", end_to_end},
      {"band loss and config fidelity", band_and_config}};
  std::vector<std::size_t> which;
  if (argc > 1) {
    const int n = std::atoi(argv[1]);
    if (n < 1 || n > int(criteria.size())) {
      std::fprintf(stderr, "usage: acceptance [1-%zu]\n", criteria.size());
      return 2;
    }
    which.push_back(std::size_t(n - 1));
  } else {
    for (std::size_t i = 0; i < criteria.size(); ++i) which.push_back(i);
  }
  bool all = true;
  for (std::size_t i : which) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    std::printf("%s criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.str().c_str());
    std::fflush(stdout);
    all &= o.pass;
  }
  return all ? 0 : 1;
}
