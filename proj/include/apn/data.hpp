#pragma once

// Dataset plumbing: 8-bit PNG IO, JSONL manifests, the synthetic real/fake
// generator with band-limited artifacts, crops, and the counter-based
// sampler that fixes batch order from (seed, stream, iteration) alone.

#include <png.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "json.hpp"

#include "apn/errors.hpp"
#include "apn/spectral.hpp"
#include "apn/tensor.hpp"

namespace apn::data {

namespace fs = std::filesystem;
using spectral::ImageTensor;

// ---------------------------------------------------------------------------
// Counter-based randomness

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Engine seeded by hashing a tuple of counters; equal tuples give equal streams.
inline std::mt19937_64 counter_rng(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = 0x243f6a8885a308d3ull;
  for (auto k : keys) h = splitmix64(h ^ splitmix64(k));
  return std::mt19937_64(h);
}

// ---------------------------------------------------------------------------
// PNG

/// 8-bit RGB (gray and alpha inputs are converted), values scaled to [0, 1].
/// Rows of the file are the first image axis.
inline ImageTensor<float> read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw LoadError("cannot read PNG '" + path + "': " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw LoadError("cannot decode PNG '" + path + "': " + img.message);
  }
  ImageTensor<float> out(3, img.height, img.width);
  for (std::size_t x = 0; x < out.M; ++x)
    for (std::size_t y = 0; y < out.N; ++y)
      for (std::size_t c = 0; c < 3; ++c) out.at(c, x, y) = float(buf[(x * out.N + y) * 3 + c]) / 255.0f;
  return out;
}

inline std::uint8_t quantize(double v) { return std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Writes a 1- or 3-channel image in [0, 1] as 8-bit PNG.
template <class T>
void write_png(const std::string& path, const ImageTensor<T>& image) {
  if (image.channels != 1 && image.channels != 3) throw DomainError("write_png: need 1 or 3 channels");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(image.N);
  img.height = png_uint_32(image.M);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(image.channels * image.M * image.N);
  for (std::size_t x = 0; x < image.M; ++x)
    for (std::size_t y = 0; y < image.N; ++y)
      for (std::size_t c = 0; c < image.channels; ++c)
        buf[(x * image.N + y) * image.channels + c] = quantize(double(image.at(c, x, y)));
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("cannot write PNG '" + path + "': " + img.message);
}

// ---------------------------------------------------------------------------
// Manifest

enum Label : int { Real = 0, Fake = 1 };

struct Record {
  std::string path;
  int label = Real;
  std::string domain;
};

struct DatasetManifest {
  std::vector<Record> records;
  std::vector<std::string> warnings;

  std::map<std::string, std::size_t> domain_histogram() const {
    std::map<std::string, std::size_t> h;
    for (const auto& r : records) ++h[r.domain];
    return h;
  }
  std::array<std::size_t, 2> label_counts() const {
    std::array<std::size_t, 2> n{};
    for (const auto& r : records) ++n[std::size_t(r.label)];
    return n;
  }
};

inline int parse_label(const nlohmann::json& v, std::size_t line) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "real") return Real;
    if (s == "fake") return Fake;
  } else if (v.is_number_integer()) {
    const auto i = v.get<long>();
    if (i == 0 || i == 1) return int(i);
  }
  throw ParseError(line, "label must be \"real\", \"fake\", 0 or 1");
}

/// One JSON object per line with path, label and optional domain. Relative
/// paths resolve against the manifest's directory; blank lines are skipped.
inline DatasetManifest load_manifest(const std::string& path, bool check_paths = true) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest '" + path + "'");
  const fs::path base = fs::path(path).parent_path();
  DatasetManifest m;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line, "record must be a JSON object");
    for (const char* key : {"path", "label"})
      if (!j.contains(key)) throw ParseError(line, std::string("missing \"") + key + "\"");
    if (!j["path"].is_string()) throw ParseError(line, "\"path\" must be a string");
    Record r;
    fs::path p = j["path"].get<std::string>();
    r.path = (p.is_relative() ? base / p : p).string();
    r.label = parse_label(j["label"], line);
    r.domain = j.contains("domain") && j["domain"].is_string() ? j["domain"].get<std::string>() : "default";
    if (check_paths && !fs::exists(r.path)) throw LoadError("manifest line " + std::to_string(line) + ": missing image '" + r.path + "'");
    m.records.push_back(std::move(r));
  }
  if (m.records.empty()) m.warnings.push_back("manifest '" + path + "' is empty");
  return m;
}

/// Paths are written relative to the manifest's directory when they lie below it.
inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path + "'");
  const fs::path base = fs::absolute(fs::path(path)).parent_path();
  for (const auto& r : m.records) {
    auto rel = fs::absolute(r.path).lexically_relative(base);
    const bool inside = !rel.empty() && *rel.begin() != "..";
    out << nlohmann::json{{"path", inside ? rel.string() : r.path},
                          {"label", r.label == Fake ? "fake" : "real"},
                          {"domain", r.domain}}
               .dump()
        << "\n";
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

enum class ArtifactKind { BandSine, Checkerboard, NotchBoost };

inline ArtifactKind parse_artifact(const std::string& s) {
  if (s == "band_sine") return ArtifactKind::BandSine;
  if (s == "checkerboard") return ArtifactKind::Checkerboard;
  if (s == "notch_boost") return ArtifactKind::NotchBoost;
  throw ConfigError("artifact_kind must be band_sine, checkerboard or notch_boost (got '" + s + "')");
}

inline std::string artifact_name(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::BandSine: return "band_sine";
    case ArtifactKind::Checkerboard: return "checkerboard";
    case ArtifactKind::NotchBoost: return "notch_boost";
  }
  return "?";
}

struct SyntheticSpec {
  std::size_t M = 64, N = 64;
  ArtifactKind kind = ArtifactKind::BandSine;
  double u_lo = 0.6, u_hi = 0.7, v_lo = 0.6, v_hi = 0.7;
  double alpha = 0.1;
  double texture_exponent = 1.5;
  std::size_t sinusoids = 3;
  std::size_t count = 100;  // per class
  std::uint64_t seed = 0;
  std::string domain = "synthetic";

  Band band_u() const { return {u_lo, u_hi}; }
  Band band_v() const { return {v_lo, v_hi}; }

  /// Integer half-plane bins inside the band on each axis.
  std::vector<std::size_t> u_bins() const {
    std::vector<std::size_t> b;
    for (std::size_t u = 0; u <= M / 2; ++u)
      if (band_u().contains(spectral::u_position(u, M))) b.push_back(u);
    return b;
  }
  std::vector<std::size_t> v_bins() const {
    std::vector<std::size_t> b;
    for (std::size_t v = 0; v < N; ++v)
      if (band_v().contains(spectral::v_position(v, N))) b.push_back(v);
    return b;
  }

  void validate() const {
    if (M < 4 || N < 4) throw ConfigError("synthetic image_size must be at least 4x4");
    for (double x : {u_lo, u_hi, v_lo, v_hi})
      if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("synthetic band edges must lie in [0, 1]");
    if (!(alpha >= 0.0)) throw ConfigError("synthetic alpha must be >= 0");
    if (count == 0) throw ConfigError("synthetic count must be >= 1");
    if (kind != ArtifactKind::Checkerboard && (u_bins().empty() || v_bins().empty()))
      throw ConfigError("synthetic band selects no frequency bins");
    if (kind == ArtifactKind::BandSine && sinusoids == 0) throw ConfigError("sinusoids must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"image_size", {M, N}},
            {"artifact_kind", artifact_name(kind)},
            {"band", {u_lo, u_hi, v_lo, v_hi}},
            {"alpha", alpha},
            {"texture_exponent", texture_exponent},
            {"sinusoids", sinusoids},
            {"count", count},
            {"seed", seed},
            {"domain", domain}};
  }

  static SyntheticSpec from_json(const nlohmann::json& j) {
    static const std::set<std::string> keys{"image_size", "artifact_kind", "band",  "alpha", "texture_exponent",
                                            "sinusoids",  "count",         "seed", "domain"};
    if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
    for (const auto& [k, v] : j.items())
      if (!keys.count(k))
        throw ConfigError("unknown synthetic spec key '" + k +
                          "'; valid keys: image_size, artifact_kind, band, alpha, texture_exponent, sinusoids, "
                          "count, seed, domain");
    SyntheticSpec s;
    try {
      if (j.contains("image_size")) {
        const auto& v = j["image_size"];
        if (v.is_array() && v.size() == 2) {
          s.M = v[0].get<std::size_t>();
          s.N = v[1].get<std::size_t>();
        } else {
          s.M = s.N = v.get<std::size_t>();
        }
      }
      if (j.contains("artifact_kind")) s.kind = parse_artifact(j["artifact_kind"].get<std::string>());
      if (j.contains("band")) {
        const auto& b = j["band"];
        if (!b.is_array() || b.size() != 4) throw ConfigError("band must be [u_lo, u_hi, v_lo, v_hi]");
        s.u_lo = b[0].get<double>();
        s.u_hi = b[1].get<double>();
        s.v_lo = b[2].get<double>();
        s.v_hi = b[3].get<double>();
      }
      if (j.contains("alpha")) s.alpha = j["alpha"].get<double>();
      if (j.contains("texture_exponent")) s.texture_exponent = j["texture_exponent"].get<double>();
      if (j.contains("sinusoids")) s.sinusoids = j["sinusoids"].get<std::size_t>();
      if (j.contains("count")) s.count = j["count"].get<std::size_t>();
      if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
      if (j.contains("domain")) s.domain = j["domain"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad synthetic spec value: ") + e.what());
    }
    s.validate();
    return s;
  }
};

/// Colored noise: white Gaussian noise shaped by 1 / f^exponent, a shared
/// luminance field mixed with per-channel fields, rescaled to mean 0.5 and
/// standard deviation 0.12.
inline ImageTensor<double> colored_noise(std::size_t M, std::size_t N, double exponent, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  auto field = [&] {
    std::vector<std::complex<double>> f(M * N);
    for (auto& z : f) z = g(rng);
    fft::dft2d(f.data(), M, N, false);
    for (std::size_t u = 0; u < M; ++u)
      for (std::size_t v = 0; v < N; ++v) {
        const double fu = double(std::min(u, M - u)) / double(M), fv = double(std::min(v, N - v)) / double(N);
        const double r = std::hypot(fu, fv);
        f[u * N + v] *= r == 0.0 ? 0.0 : std::pow(r, -exponent);
      }
    fft::dft2d(f.data(), M, N, true);
    std::vector<double> out(M * N);
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < out.size(); ++i) mean += (out[i] = f[i].real());
    mean /= double(out.size());
    for (auto& x : out) sq += (x - mean) * (x - mean);
    const double sd = std::sqrt(sq / double(out.size()));
    for (auto& x : out) x = sd > 0 ? (x - mean) / sd : 0.0;
    return out;
  };
  const auto shared = field();
  ImageTensor<double> img(3, M, N);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto own = field();
    for (std::size_t i = 0; i < M * N; ++i) img.data[c * M * N + i] = 0.5 + 0.12 * (0.8 * shared[i] + 0.6 * own[i]);
  }
  return img;
}

/// Additive artifact for band_sine / checkerboard; for notch_boost the fake is
/// produced by spectral scaling and this returns the realized difference.
inline ImageTensor<double> apply_artifact(const SyntheticSpec& s, const ImageTensor<double>& real, std::mt19937_64& rng) {
  ImageTensor<double> fake = real;
  const std::size_t M = s.M, N = s.N;
  switch (s.kind) {
    case ArtifactKind::BandSine: {
      const auto ub = s.u_bins(), vb = s.v_bins();
      std::uniform_int_distribution<std::size_t> pu(0, ub.size() - 1), pv(0, vb.size() - 1);
      std::uniform_real_distribution<double> ph(0, 2 * std::numbers::pi);
      for (std::size_t k = 0; k < s.sinusoids; ++k) {
        const double fu = double(ub[pu(rng)]) / double(M), fv = double(vb[pv(rng)]) / double(N);
        const double phase = ph(rng);
        for (std::size_t x = 0; x < M; ++x)
          for (std::size_t y = 0; y < N; ++y) {
            const double a = s.alpha * std::cos(2 * std::numbers::pi * (fu * double(x) + fv * double(y)) + phase);
            for (std::size_t c = 0; c < 3; ++c) fake.at(c, x, y) += a;
          }
      }
      break;
    }
    case ArtifactKind::Checkerboard:
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t x = 0; x < M; ++x)
          for (std::size_t y = 0; y < N; ++y) fake.at(c, x, y) += ((x + y) % 2 ? -s.alpha : s.alpha);
      break;
    case ArtifactKind::NotchBoost:
      for (std::size_t c = 0; c < 3; ++c) {
        auto hp = spectral::forward_dft_half<double>(real.channel(c), M, N);
        for (std::size_t u : s.u_bins())
          for (std::size_t v : s.v_bins()) hp.amplitude[u * N + v] *= 1.0 + s.alpha;
        auto back = spectral::reassemble_idft(hp);
        std::copy(back.begin(), back.end(), fake.channel(c).begin());
      }
      break;
  }
  return fake;
}

struct SyntheticPair {
  ImageTensor<double> real, fake;  // unclipped
};

/// Pair i of the set, independent of every other index.
inline SyntheticPair synthesize_pair(const SyntheticSpec& s, std::size_t i) {
  auto tex = counter_rng({s.seed, 0x7e47, i});
  auto art = counter_rng({s.seed, 0xa271, i});
  SyntheticPair p;
  p.real = colored_noise(s.M, s.N, s.texture_exponent, tex);
  p.fake = apply_artifact(s, p.real, art);
  return p;
}

inline ImageTensor<float> clip_to_float(const ImageTensor<double>& img) {
  ImageTensor<float> out(img.channels, img.M, img.N);
  for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = float(quantize(img.data[i])) / 255.0f;
  return out;
}

/// Writes real_%06zu.png / fake_%06zu.png and manifest.jsonl into out_dir.
inline DatasetManifest generate_synthetic(const SyntheticSpec& s, const std::string& out_dir) {
  s.validate();
  fs::create_directories(out_dir);
  DatasetManifest m;
  for (std::size_t i = 0; i < s.count; ++i) {
    auto pair = synthesize_pair(s, i);
    char name[32];
    for (int label : {Real, Fake}) {
      std::snprintf(name, sizeof name, "%s_%06zu.png", label == Fake ? "fake" : "real", i);
      const auto path = (fs::path(out_dir) / name).string();
      auto img = label == Fake ? pair.fake : pair.real;
      for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
      write_png(path, img);
      m.records.push_back({path, label, s.domain});
    }
  }
  write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), m);
  return m;
}

// ---------------------------------------------------------------------------
// Crops and batches

enum class CropMode { Train, Infer };

inline std::size_t center_offset(std::size_t dim, std::size_t crop) { return (dim - crop) / 2; }

template <class T>
ImageTensor<T> crop_at(const ImageTensor<T>& img, std::size_t size, std::size_t ox, std::size_t oy) {
  if (img.M < size || img.N < size)
    throw DataError("image " + std::to_string(img.M) + "x" + std::to_string(img.N) + " is smaller than crop " +
                    std::to_string(size));
  if (ox + size > img.M || oy + size > img.N) throw DomainError("crop window out of bounds");
  ImageTensor<T> out(img.channels, size, size);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t x = 0; x < size; ++x)
      std::copy_n(&img.data[(c * img.M + ox + x) * img.N + oy], size, &out.data[(c * size + x) * size]);
  return out;
}

/// Train: uniform offsets from the engine; infer: center crop.
template <class T>
ImageTensor<T> crop_pipeline(const ImageTensor<T>& img, CropMode mode, std::size_t size, std::mt19937_64& rng) {
  if (img.M < size || img.N < size)
    throw DataError("image " + std::to_string(img.M) + "x" + std::to_string(img.N) + " is smaller than crop " +
                    std::to_string(size));
  if (mode == CropMode::Infer) return crop_at(img, size, center_offset(img.M, size), center_offset(img.N, size));
  std::uniform_int_distribution<std::size_t> dx(0, img.M - size), dy(0, img.N - size);
  const std::size_t ox = dx(rng), oy = dy(rng);
  return crop_at(img, size, ox, oy);
}

/// Images decoded once and held in memory.
struct Dataset {
  DatasetManifest manifest;
  std::vector<ImageTensor<float>> images;

  std::size_t size() const { return images.size(); }

  static Dataset load(const DatasetManifest& m) {
    Dataset d{m, {}};
    d.images.reserve(m.records.size());
    for (const auto& r : m.records) d.images.push_back(read_png(r.path));
    return d;
  }
};

template <class T>
struct Batch {
  Tensor<T> images;  // (B, 3, S, S)
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/// Epoch-wise shuffles: sample n of stream `stream` is perm_e[n mod size] with
/// perm_e seeded by (seed, stream, e = n / size).
class Sampler {
 public:
  Sampler(std::size_t size, std::uint64_t seed, std::uint64_t stream) : size_(size), seed_(seed), stream_(stream) {
    if (size == 0) throw DataError("cannot sample from an empty dataset");
  }

  std::size_t index(std::uint64_t n) const {
    const std::uint64_t epoch = n / size_;
    if (epoch != cached_epoch_) {
      perm_.resize(size_);
      std::iota(perm_.begin(), perm_.end(), std::size_t(0));
      auto rng = counter_rng({seed_, stream_, epoch});
      std::shuffle(perm_.begin(), perm_.end(), rng);
      cached_epoch_ = epoch;
    }
    return perm_[n % size_];
  }

  /// Sample indices for batch `iteration`.
  std::vector<std::size_t> batch(std::uint64_t iteration, std::size_t batch_size) const {
    std::vector<std::size_t> out(batch_size);
    for (std::size_t k = 0; k < batch_size; ++k) out[k] = index(iteration * batch_size + k);
    return out;
  }

 private:
  std::size_t size_;
  std::uint64_t seed_, stream_;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t(0);
  mutable std::vector<std::size_t> perm_;
};

/// Crop offsets for train batches are drawn from (seed, stream, iteration).
template <class T>
Batch<T> make_batch(const Dataset& d, const std::vector<std::size_t>& indices, CropMode mode, std::size_t crop,
                    std::uint64_t seed = 0, std::uint64_t stream = 0, std::uint64_t iteration = 0) {
  const std::size_t B = indices.size(), plane = crop * crop;
  Batch<T> b{Tensor<T>({B, 3, crop, crop}), {}, indices};
  auto rng = counter_rng({seed, stream, iteration, 0xc409});
  for (std::size_t k = 0; k < B; ++k) {
    const auto img = crop_pipeline(d.images.at(indices[k]), mode, crop, rng);
    for (std::size_t j = 0; j < 3 * plane; ++j) b.images[k * 3 * plane + j] = T(img.data[j]);
    b.labels.push_back(d.manifest.records[indices[k]].label);
  }
  return b;
}

}  // namespace apn::data
