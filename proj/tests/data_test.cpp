#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "apn/data.hpp"
#include "test_support.hpp"

using namespace apntest;
using namespace apn::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("apn_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

/// Energy of the brute-force DFT over half-plane bins whose normalized
/// position lies in the band, summed over channels.
double band_energy(const ImageTensor<double>& img, const SyntheticSpec& s) {
  double e = 0;
  for (std::size_t c = 0; c < img.channels; ++c) {
    std::vector<double> plane(img.data.begin() + long(c * img.M * img.N), img.data.begin() + long((c + 1) * img.M * img.N));
    const auto F = brute_force_dft(plane, img.M, img.N);
    for (std::size_t u = 0; u <= img.M / 2; ++u)
      for (std::size_t v = 0; v < img.N; ++v) {
        const double pu = double(u) / double(img.M / 2), pv = double(v) / double(img.N - 1);
        if (pu >= s.u_lo && pu <= s.u_hi && pv >= s.v_lo && pv <= s.v_hi) e += std::norm(F[u * img.N + v]);
      }
  }
  return e;
}

}  // namespace

TEST(Synthetic, ZeroAlphaFakeEqualsReal) {
  for (auto kind : {ArtifactKind::BandSine, ArtifactKind::Checkerboard, ArtifactKind::NotchBoost}) {
    SyntheticSpec s;
    s.M = s.N = 16;
    s.alpha = 0;
    s.kind = kind;
    for (std::size_t i = 0; i < 3; ++i) {
      auto p = synthesize_pair(s, i);
      auto a = clip_to_float(p.real), b = clip_to_float(p.fake);
      EXPECT_EQ(a.data, b.data) << artifact_name(kind);
    }
  }
}

TEST(Synthetic, BandSineRaisesInBandEnergyFivefold) {
  SyntheticSpec s;
  s.M = s.N = 32;
  double real = 0, fake = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    auto p = synthesize_pair(s, i);
    real += band_energy(p.real, s);
    fake += band_energy(p.fake, s);
  }
  EXPECT_GE(fake, 5.0 * real);
}

TEST(Synthetic, BandEnergyThresholdSeparatesClasses) {
  SyntheticSpec s;
  s.M = s.N = 32;
  std::vector<double> real, fake;
  for (std::size_t i = 0; i < 50; ++i) {
    auto p = synthesize_pair(s, i);
    real.push_back(band_energy(p.real, s));
    fake.push_back(band_energy(p.fake, s));
  }
  // Best single threshold over all observed values.
  std::size_t best = 0;
  for (double t : real) {
    std::size_t ok = 0;
    for (double r : real) ok += r <= t;
    for (double f : fake) ok += f > t;
    best = std::max(best, ok);
  }
  EXPECT_GE(double(best) / 100.0, 0.99);
}

TEST(Synthetic, BandSineDifferenceIsBandLimited) {
  SyntheticSpec s;
  s.M = s.N = 16;
  s.u_lo = 0.5;
  s.u_hi = 0.75;
  s.v_lo = 0.2;
  s.v_hi = 0.4;
  auto p = synthesize_pair(s, 3);
  ImageTensor<double> diff(3, 16, 16);
  for (std::size_t j = 0; j < diff.data.size(); ++j) diff.data[j] = p.fake.data[j] - p.real.data[j];
  double total = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> plane(diff.data.begin() + long(c * 256), diff.data.begin() + long((c + 1) * 256));
    for (const auto& z : brute_force_dft(plane, 16, 16)) total += std::norm(z);
  }
  // Half-plane bins hold half the energy of a real signal (the conjugates hold the rest).
  EXPECT_NEAR(band_energy(diff, s), total / 2, 1e-9 * total);
  EXPECT_GT(total, 0.0);
}

TEST(Synthetic, CheckerboardDifferenceAlternates) {
  SyntheticSpec s;
  s.M = s.N = 8;
  s.kind = ArtifactKind::Checkerboard;
  s.alpha = 0.05;
  auto p = synthesize_pair(s, 0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t y = 0; y < 8; ++y)
        EXPECT_NEAR(p.fake.at(c, x, y) - p.real.at(c, x, y), (x + y) % 2 ? -0.05 : 0.05, 1e-12);
}

TEST(Synthetic, NotchBoostScalesBandAmplitude) {
  SyntheticSpec s;
  s.M = s.N = 16;
  s.kind = ArtifactKind::NotchBoost;
  s.alpha = 0.5;
  auto p = synthesize_pair(s, 1);
  EXPECT_NEAR(band_energy(p.fake, s), 2.25 * band_energy(p.real, s), 1e-6 * band_energy(p.real, s));
}

TEST(Synthetic, GenerationIsByteIdentical) {
  SyntheticSpec s;
  s.M = s.N = 16;
  s.count = 3;
  s.seed = 99;
  auto a = scratch("gen_a"), b = scratch("gen_b");
  generate_synthetic(s, a.string());
  generate_synthetic(s, b.string());
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path().filename();
  }
  EXPECT_EQ(files, 7u);
  s.seed = 100;
  auto c = scratch("gen_c");
  generate_synthetic(s, c.string());
  EXPECT_NE(slurp(a / "fake_000000.png"), slurp(c / "fake_000000.png"));
}

TEST(Synthetic, PngRoundTripMatchesQuantized) {
  SyntheticSpec s;
  s.M = 12;
  s.N = 10;
  s.count = 1;
  auto dir = scratch("png");
  auto m = generate_synthetic(s, dir.string());
  auto p = synthesize_pair(s, 0);
  auto loaded = read_png(m.records[1].path);
  ASSERT_EQ(loaded.M, 12u);
  ASSERT_EQ(loaded.N, 10u);
  EXPECT_EQ(loaded.data, clip_to_float(p.fake).data);
}

TEST(Synthetic, SpecValidation) {
  SyntheticSpec s;
  s.u_lo = 0.61;
  s.u_hi = 0.62;
  s.M = s.N = 8;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(SyntheticSpec::from_json({{"alpha", -1}}), ConfigError);
  EXPECT_THROW(SyntheticSpec::from_json({{"colour", 1}}), ConfigError);
  EXPECT_THROW(SyntheticSpec::from_json({{"band", {1.2, 1.3, 0, 1}}}), ConfigError);
  auto t = SyntheticSpec::from_json({{"image_size", 32}, {"artifact_kind", "notch_boost"}, {"band", {0.1, 0.3, 0.2, 0.4}}});
  EXPECT_EQ(t.M, 32u);
  EXPECT_EQ(t.kind, ArtifactKind::NotchBoost);
  EXPECT_EQ(SyntheticSpec::from_json(t.to_json()).to_json(), t.to_json());
}

TEST(Crop, CenterOffsetOf226At224) {
  EXPECT_EQ(center_offset(226, 224), 1u);
  ImageTensor<float> img(1, 226, 226);
  for (std::size_t j = 0; j < img.data.size(); ++j) img.data[j] = float(j);
  std::mt19937_64 rng(0);
  auto c = crop_pipeline(img, CropMode::Infer, 224, rng);
  EXPECT_EQ(c.at(0, 0, 0), img.at(0, 1, 1));
  EXPECT_EQ(c.at(0, 223, 223), img.at(0, 224, 224));
}

TEST(Crop, InferAtExactSizeIsIdentity) {
  ImageTensor<float> img(3, 9, 9);
  for (std::size_t j = 0; j < img.data.size(); ++j) img.data[j] = float(j) * 0.5f;
  std::mt19937_64 rng(0);
  EXPECT_EQ(crop_pipeline(img, CropMode::Infer, 9, rng).data, img.data);
}

TEST(Crop, TrainDrawsStayInBounds) {
  ImageTensor<float> img(1, 20, 17);
  for (std::size_t x = 0; x < 20; ++x)
    for (std::size_t y = 0; y < 17; ++y) img.at(0, x, y) = float(x * 100 + y);
  std::mt19937_64 rng(5);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (int k = 0; k < 10000; ++k) {
    auto c = crop_pipeline(img, CropMode::Train, 8, rng);
    const auto ox = std::size_t(c.at(0, 0, 0)) / 100, oy = std::size_t(c.at(0, 0, 0)) % 100;
    ASSERT_LE(ox + 8, 20u);
    ASSERT_LE(oy + 8, 17u);
    seen.insert({ox, oy});
  }
  EXPECT_EQ(seen.size(), 13u * 10u);
}

TEST(Crop, SmallerThanCropIsDataError) {
  ImageTensor<float> img(3, 10, 12);
  std::mt19937_64 rng(0);
  EXPECT_THROW(crop_pipeline(img, CropMode::Infer, 11, rng), DataError);
  EXPECT_THROW(crop_pipeline(img, CropMode::Train, 11, rng), DataError);
}

TEST(Crop, BatchesReproducibleFromCounters) {
  Dataset d;
  for (int i = 0; i < 6; ++i) {
    ImageTensor<float> img(3, 12, 12);
    for (auto& v : img.data) v = float(i) + float(&v - img.data.data()) * 1e-3f;
    d.images.push_back(img);
    d.manifest.records.push_back({"", i % 2, "x"});
  }
  Sampler s(d.size(), 3, 1);
  auto a = make_batch<float>(d, s.batch(4, 4), CropMode::Train, 8, 3, 1, 4);
  auto b = make_batch<float>(d, Sampler(d.size(), 3, 1).batch(4, 4), CropMode::Train, 8, 3, 1, 4);
  EXPECT_EQ(a.images.storage(), b.images.storage());
  EXPECT_EQ(a.labels, b.labels);
  auto c = make_batch<float>(d, s.batch(4, 4), CropMode::Train, 8, 3, 1, 5);
  EXPECT_NE(a.images.storage(), c.images.storage());
}

TEST(Sampler, EachEpochIsAPermutation) {
  Sampler s(7, 11, 2);
  for (std::uint64_t e = 0; e < 3; ++e) {
    std::vector<std::size_t> idx;
    for (std::uint64_t n = e * 7; n < (e + 1) * 7; ++n) idx.push_back(s.index(n));
    std::sort(idx.begin(), idx.end());
    for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(idx[k], k);
  }
  Sampler other(7, 11, 3);
  std::vector<std::size_t> x, y;
  for (std::uint64_t n = 0; n < 14; ++n) {
    x.push_back(s.index(n));
    y.push_back(other.index(n));
  }
  EXPECT_NE(x, y);
}

TEST(Manifest, EmptyFileWarns) {
  auto dir = scratch("empty");
  write_text(dir / "m.jsonl", "");
  auto m = load_manifest((dir / "m.jsonl").string());
  EXPECT_TRUE(m.records.empty());
  EXPECT_EQ(m.warnings.size(), 1u);
}

TEST(Manifest, MissingLabelNamesLine) {
  auto dir = scratch("nolabel");
  write_text(dir / "m.jsonl", "{\"path\": \"a.png\", \"label\": \"real\"}\n{\"path\": \"b.png\"}\n");
  try {
    load_manifest((dir / "m.jsonl").string(), false);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Manifest, MalformedJsonAndMissingFile) {
  auto dir = scratch("bad");
  write_text(dir / "m.jsonl", "{\"path\": \"a.png\", \"label\": 0}\n{oops\n");
  EXPECT_THROW(load_manifest((dir / "m.jsonl").string(), false), ParseError);
  EXPECT_THROW(load_manifest((dir / "absent.jsonl").string()), LoadError);
  write_text(dir / "n.jsonl", "{\"path\": \"nowhere.png\", \"label\": 1}\n");
  EXPECT_THROW(load_manifest((dir / "n.jsonl").string()), LoadError);
  write_text(dir / "l.jsonl", "{\"path\": \"a.png\", \"label\": \"maybe\"}\n");
  EXPECT_THROW(load_manifest((dir / "l.jsonl").string(), false), ParseError);
}

TEST(Manifest, DomainHistogram) {
  auto dir = scratch("hist");
  write_text(dir / "m.jsonl",
             "{\"path\": \"a.png\", \"label\": \"real\", \"domain\": \"d1\"}\n"
             "{\"path\": \"b.png\", \"label\": \"fake\", \"domain\": \"d1\"}\n"
             "\n"
             "{\"path\": \"c.png\", \"label\": 1, \"domain\": \"d2\"}\n");
  auto m = load_manifest((dir / "m.jsonl").string(), false);
  const std::map<std::string, std::size_t> want{{"d1", 2}, {"d2", 1}};
  EXPECT_EQ(m.domain_histogram(), want);
  EXPECT_EQ(m.label_counts()[0], 1u);
  EXPECT_EQ(m.label_counts()[1], 2u);
  EXPECT_EQ(fs::path(m.records[0].path), dir / "a.png");
}

TEST(Manifest, WriteThenLoadRoundTrip) {
  SyntheticSpec s;
  s.M = s.N = 16;
  s.count = 2;
  s.domain = "gen_x";
  auto dir = scratch("roundtrip");
  auto m = generate_synthetic(s, dir.string());
  auto back = load_manifest((dir / "manifest.jsonl").string());
  ASSERT_EQ(back.records.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(fs::canonical(back.records[i].path), fs::canonical(m.records[i].path));
    EXPECT_EQ(back.records[i].label, m.records[i].label);
    EXPECT_EQ(back.records[i].domain, "gen_x");
  }
}
