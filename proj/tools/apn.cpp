// apn: train, evaluate, diagnose and synthesize data from the command line.
//
//   apn train    --config <file> [--resume <checkpoint>]
//   apn eval     --checkpoint <dir> --manifest <file> --out <dir>
//   apn diagnose --checkpoint <dir> --manifest <file> --out <dir>
//   apn synth    --spec <file> --out <dir>
//
// Failures print one line "apn: error: <kind>: <reason>" to stderr and exit nonzero.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "apn/apn.hpp"

namespace fs = std::filesystem;
using namespace apn;

namespace {

enum Exit : int { kOk = 0, kOther = 1, kUsage = 2, kConfig = 3, kLoad = 4, kData = 5 };

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const char* kind, const std::string& what, int code) {
  std::fprintf(stderr, "apn: error: %s: %s\n", kind, one_line(what).c_str());
  return code;
}

std::string checkpoint_name(std::size_t it) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%06zu", it);
  return buf;
}

data::Dataset load_dataset(const std::string& manifest) {
  auto m = data::load_manifest(manifest);
  for (const auto& w : m.warnings) std::fprintf(stderr, "apn: warning: %s\n", w.c_str());
  for (const auto& [domain, n] : m.domain_histogram()) std::fprintf(stderr, "apn: %s: %zu images\n", domain.c_str(), n);
  return data::Dataset::load(m);
}

int cmd_train(const std::string& config_path, const std::string& resume) {
  auto cfg = TrainConfig::load(config_path);
  if (cfg.train_manifest.empty()) throw ConfigError("train_manifest is not set");
  const auto train = load_dataset(cfg.train_manifest);
  const auto counts = train.manifest.label_counts();
  if (counts[0] == 0 || counts[1] == 0) throw DataError("training manifest needs at least one real and one fake image");

  Trainer<float> t(cfg);
  if (!resume.empty()) load_checkpoint(t, resume);
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  std::ofstream(out / "config.json") << cfg.to_json().dump(2) << "\n";
  MetricsLog log((out / "metrics.csv").string());

  const std::size_t total = t.planned_iterations(train.size());
  while (t.apn_iterations() < total) {
    const auto r = t.step(train);
    log.append(r);
    if (cfg.checkpoint_every && r.iteration % cfg.checkpoint_every == 0 && r.iteration < total)
      save_checkpoint(t, (out / "checkpoints" / checkpoint_name(r.iteration)).string());
  }
  save_checkpoint(t, (out / "checkpoint").string());
  std::printf("trained %zu iterations; checkpoint %s\n", t.apn_iterations(), (out / "checkpoint").c_str());

  if (!cfg.eval_manifest.empty()) {
    const auto report = evaluate(t.model(), load_dataset(cfg.eval_manifest));
    write_report(report, (out / "eval").string());
    std::printf("eval accuracy %.2f%%\n", report.overall.accuracy());
  }
  return kOk;
}

std::unique_ptr<Trainer<float>> restore(const std::string& checkpoint) {
  auto t = std::make_unique<Trainer<float>>(checkpoint_config(checkpoint));
  load_checkpoint(*t, checkpoint);
  return t;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& out) {
  auto t = restore(checkpoint);
  const auto report = evaluate(t->model(), load_dataset(manifest));
  for (const auto& w : report.warnings) std::fprintf(stderr, "apn: warning: %s\n", w.c_str());
  write_report(report, out);
  for (const auto& [domain, s] : report.domains) std::printf("%s %.2f%%\n", domain.c_str(), s.accuracy());
  std::printf("overall %.2f%%\n", report.overall.accuracy());
  return kOk;
}

int cmd_diagnose(const std::string& checkpoint, const std::string& manifest, const std::string& out) {
  auto t = restore(checkpoint);
  const auto bundle = diagnose(t->model(), load_dataset(manifest), out);
  std::printf("wrote diagnostics for %zu domains to %s\n", bundle.domains.size(), out.c_str());
  return kOk;
}

int cmd_synth(const std::string& spec_path, const std::string& out) {
  std::ifstream in(spec_path);
  if (!in) throw ConfigError("cannot open synthetic spec '" + spec_path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("synthetic spec '" + spec_path + "' is not valid JSON: " + e.what());
  }
  const auto spec = data::SyntheticSpec::from_json(j);
  const auto m = data::generate_synthetic(spec, out);
  std::printf("wrote %zu images and %s\n", m.records.size(), (fs::path(out) / "manifest.jsonl").c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Artifact purification network: training, evaluation and diagnostics"};
  app.require_subcommand(1);

  std::string config, resume, checkpoint, manifest, out, spec;
  auto* train = app.add_subcommand("train", "run the alternating training loop");
  train->add_option("--config", config, "JSON training config")->required();
  train->add_option("--resume", resume, "checkpoint directory to continue from");

  auto* eval = app.add_subcommand("eval", "per-domain accuracy of a checkpoint");
  auto* diag = app.add_subcommand("diagnose", "proposal curves, correlations, heatmaps and feature dumps");
  for (auto* sub : {eval, diag}) {
    sub->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    sub->add_option("--manifest", manifest, "JSONL manifest")->required();
    sub->add_option("--out", out, "output directory")->required();
  }

  auto* synth = app.add_subcommand("synth", "generate a synthetic real/fake set");
  synth->add_option("--spec", spec, "JSON synthetic spec")->required();
  synth->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kUsage);
  }

  try {
    if (*train) return cmd_train(config, resume);
    if (*eval) return cmd_eval(checkpoint, manifest, out);
    if (*diag) return cmd_diagnose(checkpoint, manifest, out);
    return cmd_synth(spec, out);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), kConfig);
  } catch (const ParseError& e) {
    return fail("parse", e.what(), kLoad);
  } catch (const LoadError& e) {
    return fail("load", e.what(), kLoad);
  } catch (const DataError& e) {
    return fail("data", e.what(), kData);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kOther);
  }
}
