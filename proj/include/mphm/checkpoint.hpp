#pragma once

#include <cstdint>
#include <filesystem>

#include <torch/torch.h>

#include "mphm/model.hpp"

namespace mphm {

struct TrainState {
  int64_t step = 0;
  uint64_t seed = 0;
  double lr = 0.0;
};

/// Binary layout, little-endian:
///   "MPHMCKPT" | u32 version | u64 config hash | str config text
///   | i64 step | u64 seed | f64 lr
///   | u32 count | count x (str name | tensor)               parameters and buffers
///   | u8 has_optimizer | count x (i64 step | tensor | tensor) Adam moments
///   | u64 FNV-1a of everything before it
/// str = u32 length + bytes; tensor = u8 dtype | u32 ndim | i64 dims | raw data.
inline constexpr uint32_t kCheckpointVersion = 1;

/// Writes to a sibling temp file then renames, so `path` is never partial.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     torch::nn::Module& model, const TrainState& state,
                     torch::optim::Adam* optimizer = nullptr);

/// Verifies the whole file before touching `model` or `optimizer`.
/// CheckpointError on corruption; ConfigMismatchError naming the differing
/// fields when the stored config differs from `cfg`.
TrainState load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                           torch::nn::Module& model, torch::optim::Adam* optimizer = nullptr);

/// The model config stored in a checkpoint (integrity-checked).
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace mphm
