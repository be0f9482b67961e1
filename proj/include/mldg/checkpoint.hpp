#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "mldg/model.hpp"
#include "mldg/optim.hpp"
#include "mldg/param_store.hpp"

namespace mldg {

struct CheckpointMeta {
  EncoderConfig config;
  ModelOptions options;
  std::string method;  // "erm" or "mldg"
  std::uint64_t seed = 0;
  int epoch = 0;
  std::uint64_t config_hash = 0;
};

struct Checkpoint {
  CheckpointMeta meta;
  ParamStore params;
  std::optional<AdamW> optimizer;
};

// Binary layout, little-endian:
//   "MLDGCKPT" | u32 version | u64 config_hash | u64 seed
//   u32 len | metadata JSON (model config, options, method, epoch)
//   u64 count | count x { u32 len | name | u8 trainable | u32 ndim |
//                         ndim x u64 dim | float64 payload }
//   u8 has_optimizer | [f64 beta1 beta2 eps weight_decay | u64 step |
//                       u64 count | count x { u32 len | name | u32 ndim |
//                       ndim x u64 dim | f64 m payload | f64 v payload }]
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Model model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace mldg
