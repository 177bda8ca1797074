#pragma once

// Inference, accuracy reports, the diagnostic bundle (proposal frequency
// curves, their correlations, gradient-weighted activation maps, feature
// dumps) and the naive raw-pixel baseline classifier.

#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"

#include "apn/data.hpp"
#include "apn/model.hpp"
#include "apn/optim.hpp"

namespace apn {

inline constexpr double kDecisionThreshold = 0.5;
inline constexpr std::size_t kCurveBins = 100;
inline constexpr std::size_t kEvalBatch = 32;

/// p > threshold is fake; ties are real.
inline int decide(double p_fake, double threshold = kDecisionThreshold) { return p_fake > threshold ? data::Fake : data::Real; }

/// Center-crop inference with running statistics and hard masks.
template <class T>
std::vector<double> predict(Apn<T>& model, const data::Dataset& d) {
  ad::NoGradGuard ng;
  std::vector<double> p;
  for (std::size_t s = 0; s < d.size(); s += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t k = s; k < std::min(d.size(), s + kEvalBatch); ++k) idx.push_back(k);
    auto b = data::make_batch<T>(d, idx, data::CropMode::Infer, model.config().crop_size);
    auto q = fake_probability(model.forward(b.images, NormMode::Eval, spectral::MaskMode::Hard).logits.value());
    p.insert(p.end(), q.begin(), q.end());
  }
  return p;
}

struct DomainStats {
  std::size_t count = 0, correct = 0;
  std::array<std::size_t, 2> per_class{};
  double accuracy() const { return count ? 100.0 * double(correct) / double(count) : 0.0; }
};

struct EvalReport {
  double threshold = kDecisionThreshold;
  DomainStats overall;
  std::map<std::string, DomainStats> domains;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    auto stats = [](const DomainStats& s) {
      return nlohmann::json{{"accuracy", s.accuracy()},
                            {"count", s.count},
                            {"correct", s.correct},
                            {"real", s.per_class[0]},
                            {"fake", s.per_class[1]}};
    };
    nlohmann::json j{{"threshold", threshold}, {"overall", stats(overall)}, {"domains", nlohmann::json::object()}};
    for (const auto& [name, s] : domains) j["domains"][name] = stats(s);
    return j;
  }

  std::string to_csv() const {
    std::string out = "domain,count,real,fake,correct,accuracy\n";
    char buf[256];
    auto row = [&](const std::string& name, const DomainStats& s) {
      std::snprintf(buf, sizeof buf, ",%zu,%zu,%zu,%zu,%.6f\n", s.count, s.per_class[0], s.per_class[1], s.correct,
                    s.accuracy());
      out += name + buf;
    };
    for (const auto& [name, s] : domains) row(name, s);
    row("overall", overall);
    return out;
  }
};

inline EvalReport make_report(const data::DatasetManifest& m, const std::vector<double>& p_fake,
                              double threshold = kDecisionThreshold) {
  if (m.records.empty()) throw DataError("cannot evaluate an empty manifest");
  if (p_fake.size() != m.records.size()) throw DomainError("make_report: prediction count mismatch");
  EvalReport r;
  r.threshold = threshold;
  for (std::size_t i = 0; i < p_fake.size(); ++i) {
    const auto& rec = m.records[i];
    const bool ok = decide(p_fake[i], threshold) == rec.label;
    for (auto* s : {&r.overall, &r.domains[rec.domain]}) {
      ++s->count;
      ++s->per_class[std::size_t(rec.label)];
      s->correct += ok;
    }
  }
  for (auto it = r.domains.begin(); it != r.domains.end();)
    if (it->second.count == 0) {
      r.warnings.push_back("domain '" + it->first + "' has no samples; omitted");
      it = r.domains.erase(it);
    } else {
      ++it;
    }
  return r;
}

template <class T>
EvalReport evaluate(Apn<T>& model, const data::Dataset& d) {
  return make_report(d.manifest, predict(model, d));
}

inline void write_report(const EvalReport& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(std::filesystem::path(dir) / "report.json") << r.to_json().dump(2) << "\n";
  std::ofstream(std::filesystem::path(dir) / "report.csv") << r.to_csv();
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Adds score-weighted coverage of proposal `i` for one image to a K x bins
/// curve. Each (channel, part, axis) band contributes to the bins whose centers
/// it covers.
inline void accumulate_curve(std::vector<double>& curve, const ProposalSet& p, const std::vector<double>& scores,
                             std::size_t bins = kCurveBins) {
  for (std::size_t i = 0; i < p.K; ++i)
    for (std::size_t c = 0; c < kColorChannels; ++c)
      for (Part part : {Part::Amplitude, Part::Phase})
        for (Axis axis : {Axis::U, Axis::V}) {
          const Band b = p.band(c, part, axis, i);
          for (std::size_t k = 0; k < bins; ++k)
            if (b.contains((double(k) + 0.5) / double(bins))) curve[i * bins + k] += scores[i];
        }
}

/// Scales to unit sum; an all-zero curve becomes uniform.
inline void normalize_curve(std::vector<double>& curve) {
  double s = 0;
  for (double v : curve) s += v;
  for (auto& v : curve) v = s > 0 ? v / s : 1.0 / double(curve.size());
}

/// Pearson correlation; zero-variance pairs give 0 off the diagonal. Diagonal is 1.
inline std::vector<std::vector<double>> correlation_matrix(const std::vector<std::vector<double>>& curves) {
  const std::size_t n = curves.size();
  std::vector<std::vector<double>> r(n, std::vector<double>(n, 0.0));
  auto centered = [](const std::vector<double>& x) {
    double m = 0;
    for (double v : x) m += v;
    m /= double(x.size());
    std::vector<double> c(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) c[i] = x[i] - m;
    return c;
  };
  std::vector<std::vector<double>> c;
  for (const auto& x : curves) c.push_back(centered(x));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a; b < n; ++b) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t i = 0; i < c[a].size(); ++i) {
        ab += c[a][i] * c[b][i];
        aa += c[a][i] * c[a][i];
        bb += c[b][i] * c[b][i];
      }
      const double v = a == b ? 1.0 : (aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0);
      r[a][b] = r[b][a] = v;
    }
  return r;
}

/// Gradient-weighted final-stage activation map for the fake-class logit:
/// relu(sum_k mean(dlogit/dA_k) A_k), nearest-upsampled to the input size and
/// scaled to [0, 1]. A zero map stays zero.
template <class T>
spectral::ImageTensor<float> activation_map(Apn<T>& model, const Tensor<T>& image) {
  auto out = model.forward(image, NormMode::Eval, spectral::MaskMode::Hard);
  const auto& A = out.final_stage;
  Tensor<T> seed({1, 2});
  seed[1] = T(1);
  auto fake_logit = ad::sum(ad::mul(out.logits, Var<T>(seed)));
  ad::backward(fake_logit);
  const std::size_t Ck = A.dim(1), h = A.dim(2), w = A.dim(3), S = image.dim(2), S2 = image.dim(3);
  const Tensor<T> g = A.has_grad() ? A.grad() : Tensor<T>(A.shape());
  std::vector<double> cam(h * w, 0.0);
  for (std::size_t k = 0; k < Ck; ++k) {
    double alpha = 0;
    for (std::size_t j = 0; j < h * w; ++j) alpha += g[k * h * w + j];
    alpha /= double(h * w);
    for (std::size_t j = 0; j < h * w; ++j) cam[j] += alpha * A.value()[k * h * w + j];
  }
  double mx = 0;
  for (auto& v : cam) mx = std::max(mx, v = std::max(v, 0.0));
  spectral::ImageTensor<float> map(1, S, S2);
  for (std::size_t x = 0; x < S; ++x)
    for (std::size_t y = 0; y < S2; ++y) {
      const double v = cam[(x * h / S) * w + (y * w / S2)];
      map.at(0, x, y) = float(mx > 0 ? v / mx : 0.0);
    }
  return map;
}

struct DiagnosticBundle {
  std::vector<std::string> domains;
  std::vector<std::vector<double>> curves;  // per domain, K * kCurveBins
  std::vector<std::vector<double>> correlation;
};

/// Writes curves.json, correlation.json, heatmaps/ (PNG + float32 raw + index.json)
/// and features.jsonl into out_dir.
template <class T>
DiagnosticBundle diagnose(Apn<T>& model, const data::Dataset& d, const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (d.size() == 0) throw DataError("cannot diagnose an empty manifest");
  fs::create_directories(fs::path(out_dir) / "heatmaps");
  const std::size_t K = model.config().K, S = model.config().crop_size;
  std::map<std::string, std::vector<double>> curves;
  std::ofstream features(fs::path(out_dir) / "features.jsonl");
  nlohmann::json heat_index = nlohmann::json::array();

  for (std::size_t s = 0; s < d.size(); s += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t k = s; k < std::min(d.size(), s + kEvalBatch); ++k) idx.push_back(k);
    auto b = data::make_batch<T>(d, idx, data::CropMode::Infer, S);
    ApnOutput<T> out;
    {
      ad::NoGradGuard ng;
      out = model.forward(b.images, NormMode::Eval, spectral::MaskMode::Hard);
    }
    const std::size_t C = out.fused.related.dim(1);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& rec = d.manifest.records[idx[k]];
      auto& curve = curves[rec.domain];
      curve.resize(K * kCurveBins, 0.0);
      std::vector<double> scores(K);
      for (std::size_t i = 0; i < K; ++i) scores[i] = out.scores.value()[k * K + i];
      accumulate_curve(curve, proposal_set_at(out.proposals.value(), k), scores);
      std::vector<double> fr(C), fir(C);
      for (std::size_t c = 0; c < C; ++c) {
        fr[c] = out.fused.related.value()[k * C + c];
        fir[c] = out.fused.irrelated.value()[k * C + c];
      }
      features << nlohmann::json{{"path", rec.path}, {"label", rec.label}, {"domain", rec.domain},
                                 {"f_r", fr}, {"f_ir", fir}}
                      .dump()
               << "\n";
    }
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Tensor<T> one({1, 3, S, S});
      std::copy_n(b.images.data() + k * 3 * S * S, 3 * S * S, one.data());
      const auto map = activation_map(model, one);
      char name[32];
      std::snprintf(name, sizeof name, "%06zu", idx[k]);
      data::write_png((fs::path(out_dir) / "heatmaps" / (std::string(name) + ".png")).string(), map);
      std::ofstream raw(fs::path(out_dir) / "heatmaps" / (std::string(name) + ".f32"), std::ios::binary);
      raw.write(reinterpret_cast<const char*>(map.data.data()), std::streamsize(map.data.size() * sizeof(float)));
      heat_index.push_back({{"index", idx[k]}, {"path", d.manifest.records[idx[k]].path},
                            {"png", std::string(name) + ".png"}, {"raw", std::string(name) + ".f32"},
                            {"shape", {S, S}}, {"dtype", "float32"}});
    }
  }

  DiagnosticBundle bundle;
  nlohmann::json cj{{"bins", kCurveBins}, {"proposals", K}, {"domains", nlohmann::json::object()}};
  for (auto& [name, c] : curves) {
    normalize_curve(c);
    bundle.domains.push_back(name);
    bundle.curves.push_back(c);
    cj["domains"][name] = c;
  }
  bundle.correlation = correlation_matrix(bundle.curves);
  std::ofstream(fs::path(out_dir) / "curves.json") << cj.dump() << "\n";
  std::ofstream(fs::path(out_dir) / "correlation.json")
      << nlohmann::json{{"domains", bundle.domains}, {"matrix", bundle.correlation}}.dump() << "\n";
  std::ofstream(fs::path(out_dir) / "heatmaps" / "index.json") << heat_index.dump(1) << "\n";
  return bundle;
}

// ---------------------------------------------------------------------------
// Naive baseline

/// Raw-pixel classifier: conv backbone straight on the image, linear head.
template <class T>
class NaiveClassifier {
 public:
  NaiveClassifier(const std::vector<std::size_t>& stages, std::size_t width, nn::Rng& rng)
      : backbone_(kColorChannels, stages, width, rng), head_(width, 2, rng) {}

  Var<T> operator()(const Tensor<T>& images, NormMode mode) { return head_(backbone_(Var<T>(images), mode)); }

  nn::ParamList<T> parameters() {
    nn::ParamList<T> p;
    backbone_.collect("backbone", p);
    head_.collect("head", p);
    return p;
  }

 private:
  nn::ConvBackbone<T> backbone_;
  nn::Linear<T> head_;
};

template <class T>
std::vector<double> predict(NaiveClassifier<T>& model, const data::Dataset& d, std::size_t crop) {
  ad::NoGradGuard ng;
  std::vector<double> p;
  for (std::size_t s = 0; s < d.size(); s += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t k = s; k < std::min(d.size(), s + kEvalBatch); ++k) idx.push_back(k);
    auto b = data::make_batch<T>(d, idx, data::CropMode::Infer, crop);
    auto q = fake_probability(model(b.images, NormMode::Eval).value());
    p.insert(p.end(), q.begin(), q.end());
  }
  return p;
}

}  // namespace apn
