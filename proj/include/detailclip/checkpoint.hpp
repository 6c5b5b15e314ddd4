#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "detailclip/autograd.hpp"
#include "detailclip/config.hpp"

namespace detailclip {

inline constexpr int kCheckpointFormatVersion = 1;

struct ArrayDescriptor {
  std::string name;
  std::string file;
  std::string dtype = "float32";
  std::string byte_order = "little";
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

struct CheckpointManifest {
  int format_version = kCheckpointFormatVersion;
  long step = 0;
  std::string config_hash;
  std::map<std::string, long> counters;
  std::vector<ArrayDescriptor> arrays;
};

/// Everything a checkpoint directory holds.
struct CheckpointData {
  TrainConfig config;
  CheckpointManifest manifest;
  ParamStore<float> arrays;
};

struct LoadOptions {
  /// When set, every array must exist in `expected` with the same shape.
  const ParamStore<float>* expected = nullptr;
  /// When set, the stored config hash must match unless overridden.
  std::optional<TrainConfig> expected_config;
  bool allow_config_mismatch = false;
};

namespace detail {

inline void write_f32_le(const std::filesystem::path& path, const Mat<float>& m) {
  std::vector<unsigned char> bytes(static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(m.data()[i]);
    for (int b = 0; b < 4; ++b) bytes[static_cast<std::size_t>(i) * 4 + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Mat<float> read_f32_le(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols,
                              const std::string& name) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot read " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != static_cast<std::size_t>(rows * cols) * 4) {
    throw ShapeMismatch("array " + name + " holds " + std::to_string(size) + " bytes, manifest says " +
                        shape_str(rows, cols) + " float32");
  }
  in.seekg(0);
  std::vector<unsigned char> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  Mat<float> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[static_cast<std::size_t>(i) * 4 + b]) << (8 * b);
    m.data()[i] = std::bit_cast<float>(u);
  }
  return m;
}

}  // namespace detail

/// Writes `dir/manifest.json`, `dir/config.ini` and one raw little-endian
/// float32 file per array.
inline CheckpointManifest save_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg, long step,
                                          const ParamStore<float>& arrays,
                                          const std::map<std::string, long>& counters = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "arrays", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  CheckpointManifest manifest;
  manifest.step = step;
  manifest.config_hash = config_hash(cfg);
  manifest.counters = counters;
  nlohmann::json arrays_json = nlohmann::json::array();
  int index = 0;
  for (const auto& name : arrays.names()) {
    const auto& m = arrays.value(name);
    if (!m.allFinite()) throw RangeError("array " + name + " has non-finite values");
    char file[32];
    std::snprintf(file, sizeof file, "arrays/%05d.bin", index++);
    detail::write_f32_le(dir / file, m);
    ArrayDescriptor d{name, file, "float32", "little", m.rows(), m.cols()};
    arrays_json.push_back({{"name", d.name},
                           {"file", d.file},
                           {"dtype", d.dtype},
                           {"byte_order", d.byte_order},
                           {"shape", {d.rows, d.cols}}});
    manifest.arrays.push_back(std::move(d));
  }
  const nlohmann::json j = {{"format_version", manifest.format_version},
                            {"step", manifest.step},
                            {"config_hash", manifest.config_hash},
                            {"counters", manifest.counters},
                            {"arrays", arrays_json}};
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << j.dump(2) << '\n';
  }
  std::ofstream cfg_out(dir / "config.ini");
  if (!cfg_out) throw IoError("cannot write config in " + dir.string());
  cfg_out << to_config_text(cfg);
  return manifest;
}

inline CheckpointData load_checkpoint(const std::filesystem::path& dir, const LoadOptions& opts = {}) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }

  CheckpointData data;
  auto& man = data.manifest;
  man.format_version = j.value("format_version", 0);
  if (man.format_version != kCheckpointFormatVersion) {
    throw VersionError("checkpoint format_version " + std::to_string(man.format_version) + ", reader supports " +
                       std::to_string(kCheckpointFormatVersion));
  }
  man.step = j.at("step").get<long>();
  man.config_hash = j.at("config_hash").get<std::string>();
  man.counters = j.value("counters", std::map<std::string, long>{});
  data.config = load_config_file((dir / "config.ini").string());

  for (const auto& a : j.at("arrays")) {
    ArrayDescriptor d;
    d.name = a.at("name").get<std::string>();
    d.file = a.at("file").get<std::string>();
    d.dtype = a.at("dtype").get<std::string>();
    d.byte_order = a.at("byte_order").get<std::string>();
    d.rows = a.at("shape").at(0).get<Eigen::Index>();
    d.cols = a.at("shape").at(1).get<Eigen::Index>();
    if (d.dtype != "float32" || d.byte_order != "little") {
      throw VersionError("array " + d.name + " has unsupported encoding " + d.dtype + "/" + d.byte_order);
    }
    if (opts.expected != nullptr) {
      if (!opts.expected->contains(d.name)) throw ShapeMismatch("unexpected array " + d.name);
      const auto& e = opts.expected->value(d.name);
      if (e.rows() != d.rows || e.cols() != d.cols) {
        throw ShapeMismatch("array " + d.name + " is " + shape_str(d.rows, d.cols) + ", model expects " +
                            shape_str(e.rows(), e.cols()));
      }
    }
    data.arrays.add(d.name, detail::read_f32_le(dir / d.file, d.rows, d.cols, d.name));
    man.arrays.push_back(std::move(d));
  }
  if (opts.expected != nullptr) {
    for (const auto& name : opts.expected->names()) {
      if (!data.arrays.contains(name)) throw ShapeMismatch("checkpoint lacks array " + name);
    }
  }
  if (opts.expected_config && !opts.allow_config_mismatch && config_hash(*opts.expected_config) != man.config_hash) {
    throw ConfigMismatch("checkpoint config hash " + man.config_hash + " differs from " +
                         config_hash(*opts.expected_config));
  }
  return data;
}

}  // namespace detailclip
