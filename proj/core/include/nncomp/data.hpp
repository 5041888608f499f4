// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "nncomp/tensor.hpp"

namespace nncomp {

struct Dataset {
  Tensor inputs;  // N x ...
  std::vector<std::int32_t> labels;
  int num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  /// Throws ContractError unless labels lie in [0, num_classes) and agree
  /// with the input batch extent.
  void validate() const;
};

// ---- IDX ------------------------------------------------------------------

enum class IdxType : std::uint8_t { U8 = 0x08, F32 = 0x0D };

struct IdxArray {
  IdxType type = IdxType::U8;
  Shape shape;
  /// Decoded values; unsigned bytes are rescaled to [0, 1].
  std::vector<double> values;
  /// Raw payload for U8 arrays (labels are read from here).
  std::vector<std::uint8_t> raw_u8;
};

/// Decodes an IDX buffer: 00 00 <dtype> <ndim>, big-endian u32 extents,
/// big-endian payload.
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_idx_u8(const Shape& shape, std::span<const std::uint8_t> payload);
std::vector<std::uint8_t> encode_idx_f32(const Shape& shape, std::span<const float> payload);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Image IDX (N x H x W) plus label IDX (N) -> dataset with N x 1 x H x W inputs.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         int num_classes = 10);

// ---- synthetic ------------------------------------------------------------

/// 2-D Gaussian clusters, one per class, std `spread`. For up to four classes
/// the centers are (1,1), (-1,1), (-1,-1), (1,-1) in class order; more classes
/// are spaced on the circle of radius sqrt(2). Samples are class-blocked.
Dataset gen_blobs(std::size_t n_per_class, int num_classes, double spread, std::uint64_t seed);

std::vector<std::pair<double, double>> blob_centers(int num_classes);

// ---- sampling -------------------------------------------------------------

enum class SamplerKind { Sequential, Shuffled, Partial };

struct SamplerSpec {
  SamplerKind kind = SamplerKind::Sequential;
  double fraction = 1.0;  // Partial only, in (0, 1]
  std::uint64_t seed = 0;
};

/// Indices visited in `epoch`, each exactly once. Shuffled order is a pure
/// function of (seed, epoch); the partial subset is fixed by the seed and
/// reshuffled every epoch.
std::vector<std::size_t> epoch_indices(std::size_t n, const SamplerSpec& sampler, std::size_t epoch);

struct Batch {
  Tensor x;
  std::vector<std::int32_t> y;
  std::vector<std::size_t> indices;
};

Batch gather(const Dataset& ds, std::span<const std::size_t> indices);

/// Single-consumer stream over one epoch's minibatches; the last one may be short.
class MinibatchStream {
 public:
  MinibatchStream(const Dataset& ds, std::size_t batch_size, const SamplerSpec& sampler,
                  std::size_t epoch);

  std::optional<Batch> next();
  std::size_t batch_count() const noexcept;

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace nncomp
