// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nncomp/mask.hpp"
#include "nncomp/model.hpp"

namespace nncomp {

/// Compression metadata carried next to the weights.
struct CheckpointMeta {
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  std::string recipe_digest;
  /// Quantization settings and per-site parameters, free-form.
  nlohmann::json quant;
  /// Initial weights for lottery-ticket rewinding.
  std::optional<NamedTensors> lth_initial;

  bool operator==(const CheckpointMeta& other) const;
};

struct Checkpoint {
  Model model;
  MaskSet masks;
  CheckpointMeta meta;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Container layout (all integers little-endian):
///   "DCKP" | u32 version | u64 header length | UTF-8 JSON header |
///   zero padding to a 64-byte boundary | tensor blobs, each 64-byte aligned.
/// Blob offsets in the header are relative to the start of the blob section.
std::vector<std::uint8_t> encode_checkpoint(const Model& model, const MaskSet& masks,
                                            const CheckpointMeta& meta);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const MaskSet& masks, const CheckpointMeta& meta,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nncomp
