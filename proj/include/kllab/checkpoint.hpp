#pragma once

// Checkpoints are directories holding `params.bin` (raw little-endian float32
// in layout order) and `manifest.json` (model config, step, seed, RNG state,
// parameter hash).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "kllab/dataset.hpp"
#include "kllab/model.hpp"
#include "kllab/rng.hpp"

namespace kllab {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little endian");

struct CheckpointMeta {
  long step = 0;
  std::uint64_t seed = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline std::uint64_t params_hash(std::span<const float> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(params.data());
  for (std::size_t i = 0; i < params.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void save_checkpoint(const Model<float>& model, const std::filesystem::path& dir,
                            const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);
  const auto bin = dir / "params.bin";
  {
    std::ofstream os(bin, std::ios::binary);
    if (!os) throw IoError("cannot open for writing", bin);
    os.write(reinterpret_cast<const char*>(model.params().data()),
             static_cast<std::streamsize>(model.params().size_bytes()));
    if (!os) throw IoError("write failed", bin);
  }
  nlohmann::json j = {{"format", "kllab-checkpoint-v1"},
                      {"dtype", "float32"},
                      {"num_params", model.num_params()},
                      {"params_hash", hex64(params_hash(model.params()))},
                      {"config", model.config().to_json()},
                      {"step", meta.step},
                      {"seed", meta.seed},
                      {"rng_state", meta.rng_state},
                      {"extra", meta.extra}};
  const auto mpath = dir / "manifest.json";
  std::ofstream ms(mpath);
  if (!ms) throw IoError("cannot open for writing", mpath);
  ms << j.dump(2) << '\n';
}

struct LoadedCheckpoint {
  Model<float> model;
  CheckpointMeta meta;
  std::string hash;
};

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream ms(mpath);
  if (!ms) throw IoError("cannot open checkpoint manifest", mpath);
  return nlohmann::json::parse(ms);
}

// When `expected` is given its architecture must match the stored one.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir,
                                        const ModelConfig* expected = nullptr) {
  const auto j = read_checkpoint_manifest(dir);
  const ModelConfig stored = ModelConfig::from_json(j.at("config"));
  if (expected && !expected->same_architecture(stored))
    throw CheckpointMismatch("checkpoint config mismatch at " + dir.string() +
                             "\n  expected: " + expected->describe() +
                             "\n  stored:   " + stored.describe());
  Model<float> model(stored);
  const auto bin = dir / "params.bin";
  std::ifstream is(bin, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot open checkpoint parameters", bin);
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes != model.params().size_bytes())
    throw CheckpointMismatch("parameter blob has " + std::to_string(bytes) + " bytes, config " +
                             stored.describe() + " needs " +
                             std::to_string(model.params().size_bytes()));
  is.seekg(0);
  is.read(reinterpret_cast<char*>(model.params().data()), static_cast<std::streamsize>(bytes));
  if (!is) throw IoError("read failed", bin);
  CheckpointMeta meta;
  meta.step = j.value("step", 0L);
  meta.seed = j.value("seed", std::uint64_t{0});
  meta.rng_state = j.value("rng_state", std::string{});
  meta.extra = j.value("extra", nlohmann::json::object());
  std::string hash = hex64(params_hash(model.params()));
  if (j.contains("params_hash") && j["params_hash"].get<std::string>() != hash)
    throw CheckpointMismatch("parameter hash mismatch at " + dir.string());
  return {std::move(model), std::move(meta), std::move(hash)};
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig& expected) {
  return load_checkpoint(dir, &expected);
}

}  // namespace kllab
