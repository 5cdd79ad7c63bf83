#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fvi/numcore/error.hpp"
#include "fvi/vi/felbo.hpp"
#include "fvi/vi/mlp.hpp"

namespace fvi::vi {

/// Network, observation model and bookkeeping restored from disk.
struct Checkpoint {
  StochasticMlp mlp;
  ObsModel obs;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
};

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_le(std::ofstream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_le(const unsigned char* b) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

/// Writes <dir>/checkpoint.json and <dir>/params.bin. params.bin holds every
/// parameter group in registry order as little-endian float64; the
/// observation model lives in the manifest.
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["version"] = kCheckpointVersion;
  m["sizes"] = ck.mlp.sizes;
  m["activation"] = activation_name(ck.mlp.activation);
  m["parameters"] = ck.mlp.parameter_names();
  m["obs"] = {{"trainable", ck.obs.trainable}, {"value", ck.obs.value}, {"raw", ck.obs.raw}};
  m["config"] = ck.config;
  m["seed"] = ck.seed;
  m["iteration"] = ck.iteration;
  std::ofstream mf(dir / "checkpoint.json");
  mf << m.dump(2) << '\n';
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  for (const auto& l : ck.mlp.layers)
    for (const auto* g : {&l.w_mu, &l.w_rho, &l.b_mu, &l.b_rho})
      for (double v : *g) detail::put_le(bin, v);
  if (!bin || !mf) throw std::runtime_error("save_checkpoint: write failed in " + dir.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "checkpoint.json");
  if (!mf) throw std::runtime_error("load_checkpoint: cannot open " + (dir / "checkpoint.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint manifest: ") + e.what());
  }
  Checkpoint ck;
  try {
    if (m.at("version").get<int>() != kCheckpointVersion) throw SchemaError("checkpoint: unsupported version");
    const auto sizes = m.at("sizes").get<std::vector<std::size_t>>();
    Rng dummy(0);
    ck.mlp = init_mlp(sizes, parse_activation(m.at("activation").get<std::string>()), dummy);
    const auto& o = m.at("obs");
    ck.obs = ObsModel{o.at("trainable").get<bool>(), o.at("value").get<double>(), o.at("raw").get<double>()};
    ck.config = m.value("config", nlohmann::json::object());
    ck.seed = m.at("seed").get<std::uint64_t>();
    ck.iteration = m.at("iteration").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint manifest: ") + e.what());
  }
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (bytes.size() != 16 * ck.mlp.weight_count())
    throw SchemaError("checkpoint: params.bin has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(16 * ck.mlp.weight_count()));
  std::size_t pos = 0;
  for (auto g : ck.mlp.parameter_groups())
    for (double& v : g) {
      v = detail::get_le(bytes.data() + pos);
      pos += 8;
    }
  return ck;
}

}  // namespace fvi::vi
