// SPDX-License-Identifier: Apache-2.0
#include "nncomp/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "nncomp/error.hpp"
#include "nncomp/rng.hpp"

namespace nncomp {

void Dataset::validate() const {
  if (!inputs.defined() || inputs.dim() == 0 || inputs.size(0) != labels.size()) {
    throw ContractError("dataset: input batch extent does not match label count " +
                        std::to_string(labels.size()));
  }
  for (auto l : labels) {
    if (l < 0 || l >= num_classes) {
      throw ContractError("dataset: label " + std::to_string(l) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
  }
}

namespace {

std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::vector<std::uint8_t> idx_header(IdxType type, const Shape& shape) {
  if (shape.empty() || shape.size() > 255) throw ContractError("idx: rank must be in [1, 255]");
  std::vector<std::uint8_t> out{0, 0, static_cast<std::uint8_t>(type),
                                static_cast<std::uint8_t>(shape.size())};
  for (auto e : shape) put_be32(out, static_cast<std::uint32_t>(e));
  return out;
}

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0) {
    throw FormatError(FormatError::Kind::BadMagic, "idx: header must start with two zero bytes");
  }
  IdxArray arr;
  std::size_t elem_size = 0;
  switch (bytes[2]) {
    case 0x08:
      arr.type = IdxType::U8;
      elem_size = 1;
      break;
    case 0x0D:
      arr.type = IdxType::F32;
      elem_size = 4;
      break;
    default:
      throw FormatError(FormatError::Kind::UnsupportedDtype,
                        "idx: unsupported dtype code " + std::to_string(bytes[2]));
  }
  const std::size_t ndim = bytes[3];
  if (ndim == 0) throw FormatError(FormatError::Kind::HeaderInconsistent, "idx: zero dimensions");
  if (bytes.size() < 4 + 4 * ndim) {
    throw FormatError(FormatError::Kind::Truncated, "idx: header truncated");
  }
  for (std::size_t d = 0; d < ndim; ++d) {
    std::uint32_t e = read_be32(bytes.data() + 4 + 4 * d);
    if (e == 0) throw FormatError(FormatError::Kind::HeaderInconsistent, "idx: zero extent");
    arr.shape.push_back(e);
  }
  const std::size_t count = shape_numel(arr.shape);
  const std::size_t offset = 4 + 4 * ndim;
  if (bytes.size() - offset != count * elem_size) {
    throw FormatError(FormatError::Kind::LengthMismatch,
                      "idx: payload holds " + std::to_string(bytes.size() - offset) +
                          " bytes, header implies " + std::to_string(count * elem_size));
  }
  const std::uint8_t* p = bytes.data() + offset;
  arr.values.resize(count);
  if (arr.type == IdxType::U8) {
    arr.raw_u8.assign(p, p + count);
    for (std::size_t i = 0; i < count; ++i) arr.values[i] = static_cast<double>(p[i]) / 255.0;
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = read_be32(p + 4 * i);
      arr.values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  return arr;
}

std::vector<std::uint8_t> encode_idx_u8(const Shape& shape, std::span<const std::uint8_t> payload) {
  if (payload.size() != shape_numel(shape)) throw DimensionError("idx: payload does not match shape");
  auto out = idx_header(IdxType::U8, shape);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_f32(const Shape& shape, std::span<const float> payload) {
  if (payload.size() != shape_numel(shape)) throw DimensionError("idx: payload does not match shape");
  auto out = idx_header(IdxType::F32, shape);
  for (float f : payload) put_be32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         int num_classes) {
  auto img_bytes = read_file(images);
  auto lab_bytes = read_file(labels);
  IdxArray img = parse_idx(img_bytes);
  IdxArray lab = parse_idx(lab_bytes);
  if (lab.type != IdxType::U8 || lab.shape.size() != 1) {
    throw FormatError(FormatError::Kind::HeaderInconsistent, "idx: labels must be a u8 vector");
  }
  Shape shape = img.shape;
  if (shape.size() == 3) shape.insert(shape.begin() + 1, 1);
  Dataset ds;
  ds.inputs = Tensor(shape, std::move(img.values));
  ds.labels.assign(lab.raw_u8.begin(), lab.raw_u8.end());
  ds.num_classes = num_classes;
  ds.validate();
  return ds;
}

std::vector<std::pair<double, double>> blob_centers(int num_classes) {
  if (num_classes < 1) throw ContractError("blobs: need at least one class");
  static constexpr std::pair<double, double> kCorners[4] = {{1, 1}, {-1, 1}, {-1, -1}, {1, -1}};
  std::vector<std::pair<double, double>> centers;
  for (int c = 0; c < num_classes; ++c) {
    if (num_classes <= 4) {
      centers.push_back(kCorners[c]);
    } else {
      double a = std::numbers::pi / 4 + 2 * std::numbers::pi * c / num_classes;
      centers.emplace_back(std::numbers::sqrt2 * std::cos(a), std::numbers::sqrt2 * std::sin(a));
    }
  }
  return centers;
}

Dataset gen_blobs(std::size_t n_per_class, int num_classes, double spread, std::uint64_t seed) {
  if (n_per_class < 1) throw ContractError("blobs: n_per_class must be >= 1");
  if (spread < 0.0) throw ContractError("blobs: spread must be non-negative");
  auto centers = blob_centers(num_classes);
  Rng rng = Rng::derive(seed, "blobs");
  const std::size_t n = n_per_class * static_cast<std::size_t>(num_classes);
  std::vector<double> xs(n * 2);
  Dataset ds;
  ds.labels.resize(n);
  ds.num_classes = num_classes;
  for (int c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      std::size_t row = static_cast<std::size_t>(c) * n_per_class + i;
      xs[2 * row] = centers[c].first + spread * rng.normal();
      xs[2 * row + 1] = centers[c].second + spread * rng.normal();
      ds.labels[row] = c;
    }
  }
  ds.inputs = Tensor({n, 2}, std::move(xs));
  return ds;
}

std::vector<std::size_t> epoch_indices(std::size_t n, const SamplerSpec& sampler, std::size_t epoch) {
  if (n == 0) throw ContractError("sampler: empty dataset");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto shuffle = [](std::vector<std::size_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  };
  switch (sampler.kind) {
    case SamplerKind::Sequential:
      return idx;
    case SamplerKind::Shuffled: {
      Rng rng = Rng::derive(sampler.seed, "shuffle/epoch" + std::to_string(epoch));
      shuffle(idx, rng);
      return idx;
    }
    case SamplerKind::Partial: {
      if (!(sampler.fraction > 0.0 && sampler.fraction <= 1.0)) {
        throw ContractError("sampler: partial fraction must lie in (0, 1]");
      }
      auto k = static_cast<std::size_t>(std::floor(sampler.fraction * static_cast<double>(n)));
      if (k == 0) throw ContractError("sampler: partial fraction selects no samples");
      Rng pick = Rng::derive(sampler.seed, "partial/subset");
      shuffle(idx, pick);
      idx.resize(k);
      Rng order = Rng::derive(sampler.seed, "partial/epoch" + std::to_string(epoch));
      shuffle(idx, order);
      return idx;
    }
  }
  return idx;
}

Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("gather: empty index list");
  Shape shape = ds.inputs.shape();
  const std::size_t row = ds.inputs.numel() / shape[0];
  shape[0] = indices.size();
  auto src = ds.inputs.data();
  std::vector<double> vals(indices.size() * row);
  Batch b;
  b.y.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::size_t s = indices[i];
    if (s >= ds.size()) throw ContractError("gather: index out of range");
    std::memcpy(vals.data() + i * row, src.data() + s * row, row * sizeof(double));
    b.y.push_back(ds.labels[s]);
  }
  b.x = Tensor(shape, std::move(vals), ds.inputs.dtype());
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

MinibatchStream::MinibatchStream(const Dataset& ds, std::size_t batch_size, const SamplerSpec& sampler,
                                 std::size_t epoch)
    : ds_(&ds), batch_size_(batch_size) {
  if (batch_size == 0) throw ContractError("minibatch: batch size must be >= 1");
  if (ds.size() == 0) throw ContractError("minibatch: dataset is empty");
  order_ = epoch_indices(ds.size(), sampler, epoch);
}

std::optional<Batch> MinibatchStream::next() {
  if (pos_ >= order_.size()) return std::nullopt;
  std::size_t end = std::min(order_.size(), pos_ + batch_size_);
  Batch b = gather(*ds_, std::span(order_).subspan(pos_, end - pos_));
  pos_ = end;
  return b;
}

std::size_t MinibatchStream::batch_count() const noexcept {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

}  // namespace nncomp
