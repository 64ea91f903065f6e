#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "moelab/model.hpp"
#include "moelab/optim.hpp"

namespace moelab {

struct Checkpoint {
  ModelConfig config;
  ParameterSet params;
  std::uint64_t step = 0;
  std::optional<OptimizerState> optimizer;
};

// Binary layout, all integers little-endian:
//   magic "MOELABCK" | u32 version | u64 len, config JSON bytes | u64 step
//   u64 tensor count, then per tensor:
//     u64 len, name bytes | u32 rank | u64 dims[rank] | f64 values[numel]
//   u8 has_optimizer; if 1:
//     AdamW hyperparameters as 5 x f64 | u64 optimizer step
//     per tensor: u8 present; if 1, f64 m[numel] then f64 v[numel]
std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline Checkpoint make_checkpoint(const MoeLm& model, std::uint64_t step = 0) {
  return Checkpoint{model.config(), model.params(), step, std::nullopt};
}

}  // namespace moelab
