#pragma once

// Checkpoint directory: manifest.json (format version, config echo, counters,
// tensor table) plus little-endian float32 blobs, one per namespace:
// apn.bin, estimator.bin, optim_apn.bin, optim_q.bin.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "apn/training.hpp"

namespace apn {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

inline constexpr int kCheckpointFormat = 1;

namespace detail {

struct BlobEntry {
  std::string name;
  Tensor<float>* tensor;
};

inline std::vector<BlobEntry> apn_entries(Trainer<float>& t) {
  std::vector<BlobEntry> e;
  auto s = t.model().state();
  for (auto& p : s.params) e.push_back({p.name, &p.var.mutable_value()});
  for (auto& b : s.buffers) e.push_back({b.name, b.tensor});
  return e;
}

inline std::vector<BlobEntry> estimator_entries(Trainer<float>& t) {
  std::vector<BlobEntry> e;
  auto s = t.estimator().parameters();
  for (auto& p : s.params) e.push_back({p.name, &p.var.mutable_value()});
  return e;
}

inline std::vector<BlobEntry> optimizer_entries(Adam<float>& opt, const std::string& prefix) {
  std::vector<BlobEntry> e;
  auto st = opt.state();
  std::size_t k = 0;
  for (auto& g : opt.groups())
    for (auto& p : g.params) {
      e.push_back({prefix + "." + p.name + ".m", st[k++]});
      e.push_back({prefix + "." + p.name + ".v", st[k++]});
    }
  return e;
}

}  // namespace detail

inline void save_checkpoint(Trainer<float>& t, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  auto write_blob = [&](const std::string& file, const std::vector<detail::BlobEntry>& entries) {
    std::ofstream out(fs::path(dir) / file, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint blob '" + (fs::path(dir) / file).string() + "'");
    std::size_t offset = 0;
    for (const auto& e : entries) {
      const auto bytes = e.tensor->size() * sizeof(float);
      out.write(reinterpret_cast<const char*>(e.tensor->data()), std::streamsize(bytes));
      tensors.push_back({{"name", e.name}, {"file", file}, {"offset", offset}, {"shape", e.tensor->shape()},
                         {"dtype", "float32"}});
      offset += bytes;
    }
    if (!out) throw DataError("short write to checkpoint blob '" + file + "'");
  };
  write_blob("apn.bin", detail::apn_entries(t));
  write_blob("estimator.bin", detail::estimator_entries(t));
  write_blob("optim_apn.bin", detail::optimizer_entries(t.apn_optimizer(), "optim_apn"));
  write_blob("optim_q.bin", detail::optimizer_entries(t.estimator_optimizer(), "optim_q"));
  const auto& c = t.config();
  nlohmann::json m{{"format_version", kCheckpointFormat},
                   {"config", c.to_json()},
                   {"dims", {{"C", c.C}, {"K", c.K}, {"m_r", c.m_r}, {"m_ir", c.m_ir}}},
                   {"counters",
                    {{"apn_iterations", t.apn_iterations()},
                     {"estimator_iterations", t.estimator_iterations()},
                     {"optim_apn_steps", t.apn_optimizer().steps()},
                     {"optim_q_steps", t.estimator_optimizer().steps()}}},
                   {"seed", c.seed},
                   {"tensors", tensors}};
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint manifest in '" + dir + "'");
  out << m.dump(2) << "\n";
}

inline nlohmann::json read_checkpoint_manifest(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "manifest.json";
  std::ifstream in(path);
  if (!in) throw LoadError("checkpoint manifest missing: '" + path.string() + "'");
  try {
    auto m = nlohmann::json::parse(in);
    if (m.value("format_version", -1) != kCheckpointFormat)
      throw LoadError("checkpoint '" + dir + "': unsupported format_version " + m.value("format_version", nlohmann::json()).dump());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint manifest '" + path.string() + "' is corrupt: " + e.what());
  }
}

/// Config stored in a checkpoint (APN_SEED and other overrides are not applied).
inline TrainConfig checkpoint_config(const std::string& dir) {
  try {
    return TrainConfig::from_json(read_checkpoint_manifest(dir).at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint '" + dir + "': bad config echo: " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError("checkpoint '" + dir + "': bad config echo: " + e.what());
  }
}

/// Restores parameters, running statistics, estimator, optimizer moments and
/// counters into `t`, which must have been built from a compatible config.
inline void load_checkpoint(Trainer<float>& t, const std::string& dir) {
  namespace fs = std::filesystem;
  const auto m = read_checkpoint_manifest(dir);
  const auto& c = t.config();
  try {
    const auto& d = m.at("dims");
    const std::pair<const char*, std::size_t> expect[] = {{"C", c.C}, {"K", c.K}, {"m_r", c.m_r}, {"m_ir", c.m_ir}};
    for (const auto& [key, want] : expect)
      if (d.at(key).get<std::size_t>() != want)
        throw LoadError("checkpoint '" + dir + "': recorded " + key + "=" + d.at(key).dump() + " but config has " +
                        std::to_string(want));

    std::map<std::string, nlohmann::json> table;
    for (const auto& e : m.at("tensors")) table[e.at("name").get<std::string>()] = e;
    std::map<std::string, std::vector<char>> blobs;
    auto blob = [&](const std::string& file) -> const std::vector<char>& {
      auto it = blobs.find(file);
      if (it != blobs.end()) return it->second;
      std::ifstream in(fs::path(dir) / file, std::ios::binary);
      if (!in) throw LoadError("checkpoint '" + dir + "': missing blob '" + file + "'");
      std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      return blobs.emplace(file, std::move(bytes)).first->second;
    };
    auto restore = [&](const std::vector<detail::BlobEntry>& entries) {
      for (const auto& e : entries) {
        auto it = table.find(e.name);
        if (it == table.end()) throw LoadError("checkpoint '" + dir + "': tensor '" + e.name + "' not in manifest");
        const auto& j = it->second;
        if (j.at("dtype") != "float32") throw LoadError("checkpoint '" + dir + "': tensor '" + e.name + "' not float32");
        const auto shape = j.at("shape").get<Shape>();
        if (shape != e.tensor->shape())
          throw LoadError("checkpoint '" + dir + "': tensor '" + e.name + "' has shape " + shape_str(shape) +
                          ", model expects " + shape_str(e.tensor->shape()));
        const auto& bytes = blob(j.at("file").get<std::string>());
        const auto offset = j.at("offset").get<std::size_t>(), n = e.tensor->size() * sizeof(float);
        if (offset + n > bytes.size())
          throw LoadError("checkpoint '" + dir + "': blob '" + j.at("file").get<std::string>() +
                          "' truncated at tensor '" + e.name + "'");
        std::memcpy(e.tensor->data(), bytes.data() + offset, n);
      }
    };
    restore(detail::apn_entries(t));
    restore(detail::estimator_entries(t));
    restore(detail::optimizer_entries(t.apn_optimizer(), "optim_apn"));
    restore(detail::optimizer_entries(t.estimator_optimizer(), "optim_q"));
    const auto& k = m.at("counters");
    t.set_counters(k.at("apn_iterations").get<std::size_t>(), k.at("estimator_iterations").get<std::size_t>());
    t.apn_optimizer().set_steps(k.at("optim_apn_steps").get<std::size_t>());
    t.estimator_optimizer().set_steps(k.at("optim_q_steps").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint manifest in '" + dir + "' is incomplete: " + e.what());
  }
}

}  // namespace apn
