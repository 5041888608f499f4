// SPDX-License-Identifier: Apache-2.0
#include "nncomp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <set>

#include "nncomp/data.hpp"
#include "nncomp/error.hpp"

namespace nncomp {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'K', 'P'};
constexpr std::size_t kPrefix = 16;
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  auto bits = std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

std::size_t elem_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  if (dtype == "u8") return 1;
  throw FormatError(FormatError::Kind::HeaderInconsistent, "checkpoint: unknown blob dtype '" + dtype + "'");
}

class BlobWriter {
 public:
  nlohmann::json add(const std::string& name, const Tensor& t, const std::string& dtype) {
    std::size_t offset = align_up(data_.size());
    data_.resize(offset, 0);
    for (double v : t.data()) {
      if (dtype == "f32") {
        put_le(data_, static_cast<float>(v));
      } else if (dtype == "f64") {
        put_le(data_, v);
      } else {
        data_.push_back(v != 0.0 ? 1 : 0);
      }
    }
    return nlohmann::json{{"name", name},
                          {"dtype", dtype},
                          {"shape", t.shape()},
                          {"offset", offset},
                          {"length", data_.size() - offset}};
  }

  std::vector<std::uint8_t>& bytes() { return data_; }

 private:
  std::vector<std::uint8_t> data_;
};

struct BlobRef {
  std::string name;
  std::string dtype;
  Shape shape;
  std::size_t offset = 0;
  std::size_t length = 0;
};

std::vector<BlobRef> parse_index(const nlohmann::json& section, const char* what) {
  std::vector<BlobRef> refs;
  std::set<std::string> names;
  if (!section.is_array()) {
    throw FormatError(FormatError::Kind::HeaderInconsistent,
                      std::string("checkpoint: '") + what + "' index is not an array");
  }
  for (const auto& e : section) {
    BlobRef r;
    try {
      r.name = e.at("name").get<std::string>();
      r.dtype = e.at("dtype").get<std::string>();
      r.shape = e.at("shape").get<Shape>();
      r.offset = e.at("offset").get<std::size_t>();
      r.length = e.at("length").get<std::size_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(FormatError::Kind::HeaderInconsistent,
                        std::string("checkpoint: malformed '") + what + "' entry: " + ex.what());
    }
    if (!names.insert(r.name).second) {
      throw FormatError(FormatError::Kind::HeaderInconsistent,
                        "checkpoint: duplicate entry '" + r.name + "' in '" + what + "'");
    }
    if (r.length != shape_numel(r.shape) * elem_size(r.dtype)) {
      throw FormatError(FormatError::Kind::HeaderInconsistent,
                        "checkpoint: blob '" + r.name + "' length disagrees with its shape");
    }
    if (r.offset % kAlign != 0) {
      throw FormatError(FormatError::Kind::HeaderInconsistent,
                        "checkpoint: blob '" + r.name + "' is not 64-byte aligned");
    }
    refs.push_back(std::move(r));
  }
  return refs;
}

Tensor read_blob(const BlobRef& r, std::span<const std::uint8_t> blobs, DType want) {
  if (r.offset > blobs.size() || r.length > blobs.size() - r.offset) {
    throw FormatError(FormatError::Kind::Truncated,
                      "checkpoint: blob '" + r.name + "' extends past the end of the file");
  }
  const std::uint8_t* p = blobs.data() + r.offset;
  std::size_t n = shape_numel(r.shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (r.dtype == "f32") {
      v[i] = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i)));
    } else if (r.dtype == "f64") {
      v[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + 8 * i));
    } else {
      if (p[i] > 1) {
        throw FormatError(FormatError::Kind::HeaderInconsistent,
                          "checkpoint: mask '" + r.name + "' holds a value other than 0/1");
      }
      v[i] = p[i];
    }
  }
  return Tensor(r.shape, std::move(v), want);
}

DType blob_dtype(const std::string& s) { return s == "f64" ? DType::F64 : DType::F32; }

}  // namespace

bool CheckpointMeta::operator==(const CheckpointMeta& other) const {
  if (epoch != other.epoch || seed != other.seed || recipe_digest != other.recipe_digest ||
      quant != other.quant || lth_initial.has_value() != other.lth_initial.has_value()) {
    return false;
  }
  if (!lth_initial) return true;
  if (lth_initial->size() != other.lth_initial->size()) return false;
  for (std::size_t i = 0; i < lth_initial->size(); ++i) {
    const auto& [na, ta] = (*lth_initial)[i];
    const auto& [nb, tb] = (*other.lth_initial)[i];
    if (na != nb || ta.shape() != tb.shape() || ta.to_vector() != tb.to_vector()) return false;
  }
  return true;
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const MaskSet& masks,
                                            const CheckpointMeta& meta) {
  BlobWriter blobs;
  nlohmann::json header;
  header["format"] = "nncomp-checkpoint";
  header["arch"] = model.arch_json();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : model.parameters()) tensors.push_back(blobs.add(name, t, dtype_name(t.dtype())));
  header["tensors"] = tensors;
  nlohmann::json mask_index = nlohmann::json::array();
  for (const auto& [name, m] : masks) {
    if (!model.has_param(name) || model.param(name).shape() != m.values.shape()) {
      throw ContractError("checkpoint: mask '" + name + "' does not match a model parameter");
    }
    mask_index.push_back(blobs.add(name, m.values, "u8"));
  }
  header["masks"] = mask_index;
  nlohmann::json m;
  m["epoch"] = meta.epoch;
  m["seed"] = meta.seed;
  m["recipe_digest"] = meta.recipe_digest;
  m["quant"] = meta.quant;
  header["meta"] = m;
  if (meta.lth_initial) {
    nlohmann::json lth = nlohmann::json::array();
    for (const auto& [name, t] : *meta.lth_initial) lth.push_back(blobs.add(name, t, dtype_name(t.dtype())));
    header["lth_initial"] = lth;
  }

  std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le(out, kCheckpointVersion);
  put_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.resize(align_up(out.size()), 0);
  out.insert(out.end(), blobs.bytes().begin(), blobs.bytes().end());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::BadMagic, "checkpoint: bad magic (expected \"DCKP\")");
  }
  if (bytes.size() < kPrefix) throw FormatError(FormatError::Kind::Truncated, "checkpoint: truncated prefix");
  auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch,
                      "checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  auto hlen = get_le<std::uint64_t>(bytes.data() + 8);
  if (hlen > bytes.size() - kPrefix) {
    throw FormatError(FormatError::Kind::Truncated, "checkpoint: header extends past the end of the file");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPrefix, bytes.begin() + kPrefix + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(FormatError::Kind::HeaderInconsistent, std::string("checkpoint: header is not valid JSON: ") + ex.what());
  }
  std::size_t data_start = align_up(kPrefix + hlen);
  std::span<const std::uint8_t> blobs =
      data_start <= bytes.size() ? bytes.subspan(data_start) : std::span<const std::uint8_t>{};

  Checkpoint ck;
  try {
    if (header.at("format") != "nncomp-checkpoint") {
      throw FormatError(FormatError::Kind::HeaderInconsistent, "checkpoint: unexpected format tag");
    }
    ck.model = Model::from_arch_json(header.at("arch"));
    const auto& meta = header.at("meta");
    ck.meta.epoch = meta.at("epoch").get<std::int64_t>();
    ck.meta.seed = meta.at("seed").get<std::uint64_t>();
    ck.meta.recipe_digest = meta.at("recipe_digest").get<std::string>();
    ck.meta.quant = meta.at("quant");
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(FormatError::Kind::HeaderInconsistent, std::string("checkpoint: malformed header: ") + ex.what());
  } catch (const FormatError&) {
    throw;
  } catch (const Error& ex) {
    throw FormatError(FormatError::Kind::HeaderInconsistent, std::string("checkpoint: bad architecture: ") + ex.what());
  }

  if (!header.contains("tensors") || !header.contains("masks")) {
    throw FormatError(FormatError::Kind::HeaderInconsistent, "checkpoint: missing tensor or mask index");
  }
  auto tensors = parse_index(header["tensors"], "tensors");
  if (tensors.size() != ck.model.parameters().size()) {
    throw FormatError(FormatError::Kind::HeaderInconsistent,
                      "checkpoint: tensor index lists " + std::to_string(tensors.size()) +
                          " entries, architecture defines " + std::to_string(ck.model.parameters().size()));
  }
  for (const auto& r : tensors) {
    if (!ck.model.has_param(r.name)) {
      throw FormatError(FormatError::Kind::HeaderInconsistent,
                        "checkpoint: tensor '" + r.name + "' is not a parameter of the architecture");
    }
    Tensor& p = ck.model.param(r.name);
    if (p.shape() != r.shape || dtype_name(p.dtype()) != r.dtype) {
      throw FormatError(FormatError::Kind::HeaderInconsistent,
                        "checkpoint: tensor '" + r.name + "' shape/dtype disagrees with the architecture");
    }
    Tensor loaded = read_blob(r, blobs, p.dtype());
    auto src = loaded.data();
    std::copy(src.begin(), src.end(), p.mutable_data().begin());
  }
  for (const auto& r : parse_index(header["masks"], "masks")) {
    if (r.dtype != "u8" || !ck.model.has_param(r.name) || ck.model.param(r.name).shape() != r.shape) {
      throw FormatError(FormatError::Kind::HeaderInconsistent,
                        "checkpoint: mask '" + r.name + "' does not match a model parameter");
    }
    ck.masks[r.name] = Mask{r.name, read_blob(r, blobs, DType::F32)};
  }
  if (header.contains("lth_initial")) {
    NamedTensors lth;
    for (const auto& r : parse_index(header["lth_initial"], "lth_initial")) {
      lth.emplace_back(r.name, read_blob(r, blobs, blob_dtype(r.dtype)));
    }
    ck.meta.lth_initial = std::move(lth);
  }
  return ck;
}

void save_checkpoint(const Model& model, const MaskSet& masks, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(model, masks, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace nncomp
