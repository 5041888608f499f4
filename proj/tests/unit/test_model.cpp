// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "nncomp/checkpoint.hpp"
#include "nncomp/error.hpp"
#include "nncomp/model.hpp"
#include "nncomp/pruning.hpp"
#include "testing.hpp"

using namespace nncomp;
using nlohmann::json;

namespace {

struct Split {
  std::vector<std::uint8_t> prefix;
  json header;
  std::vector<std::uint8_t> blobs;
};

Split split(const std::vector<std::uint8_t>& bytes) {
  Split s;
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  s.prefix.assign(bytes.begin(), bytes.begin() + 8);
  s.header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  std::size_t start = (16 + len + 63) / 64 * 64;
  s.blobs.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
  return s;
}

std::vector<std::uint8_t> join(const Split& s) {
  std::vector<std::uint8_t> out = s.prefix;
  std::string h = s.header.dump();
  std::uint64_t len = h.size();
  out.resize(16);
  std::memcpy(out.data() + 8, &len, 8);
  out.insert(out.end(), h.begin(), h.end());
  out.resize((out.size() + 63) / 64 * 64, 0);
  out.insert(out.end(), s.blobs.begin(), s.blobs.end());
  return out;
}

FormatError::Kind decode_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no FormatError";
  return FormatError::Kind::BadMagic;
}

MaskSet random_masks(const Model& m, double level, std::uint64_t seed) {
  MaskSet masks;
  Rng rng(seed);
  for (const auto& [name, t] : m.parameters()) {
    if (name.find(".weight") == std::string::npos) continue;
    Mask mk = ones_mask(t, name);
    auto d = mk.values.mutable_data();
    for (double& v : d) v = rng.uniform() < level ? 0.0 : 1.0;
    masks.emplace(name, mk);
  }
  return masks;
}

}  // namespace

TEST(Model, MlpParameterCount) {
  Model m = build_model("mlp-blobs", 7);
  EXPECT_EQ(m.parameter_count(), 2u * 32 + 32 + 32 * 32 + 32 + 32 * 4 + 4);
  EXPECT_EQ(m.parameter_count(), 1284u);
  EXPECT_THROW(build_model("resnet", 1), ContractError);
}

TEST(Model, InitIsSeededAndBounded) {
  Model a = build_model("mlp-blobs", 7), b = build_model("mlp-blobs", 7), c = build_model("mlp-blobs", 8);
  EXPECT_EQ(a.param("fc2.weight").to_vector(), b.param("fc2.weight").to_vector());
  EXPECT_NE(a.param("fc2.weight").to_vector(), c.param("fc2.weight").to_vector());
  const double bound = std::sqrt(6.0 / 32.0);
  for (double v : a.param("fc2.weight").data()) EXPECT_LE(std::abs(v), bound);
}

TEST(Model, ForwardShapesAndErrors) {
  Model m = build_model("cnn-tiny", 1);
  Tensor x({2, 1, 28, 28});
  EXPECT_EQ(m.forward(x, Mode::Eval).shape(), (Shape{2, 10}));
  EXPECT_THROW(m.forward(Tensor({2, 1, 27, 28}), Mode::Eval), DimensionError);
  EXPECT_THROW(Model("bad", {2}, {LayerSpec::linear("a", 3, 4)}), DimensionError);
}

TEST(Model, BatchNormEvalNearIdentity) {
  Model m("bn", {2, 3, 3}, {LayerSpec::batchnorm2d("bn", 2)}, DType::F64);
  m.param("bn.gamma") = Tensor::ones({2}, DType::F64);
  Rng rng(1);
  Tensor x = nncomp::testing::random_tensor(rng, {4, 2, 3, 3});
  Tensor y = m.forward(x, Mode::Eval);
  const double f = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i] * f, 1e-15);
}

TEST(Model, ArchJsonRoundTrip) {
  Model m = build_model("cnn-tiny-bn", 2);
  Model r = Model::from_arch_json(m.arch_json());
  EXPECT_EQ(r.layers(), m.layers());
  EXPECT_EQ(r.sample_shape(), m.sample_shape());
}

TEST(Checkpoint, RoundTripIsFixedPoint) {
  Model m = build_model("cnn-tiny-bn", 3);
  MaskSet masks = random_masks(m, 0.4, 5);
  apply_masks(m, masks);
  CheckpointMeta meta;
  meta.epoch = 12;
  meta.seed = 3;
  meta.recipe_digest = "abc";
  meta.quant = json{{"bits", 4}};
  meta.lth_initial = NamedTensors{{"fc.weight", m.param("fc.weight").clone()}};
  auto bytes = encode_checkpoint(m, masks, meta);
  Checkpoint ck = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(ck.model, ck.masks, ck.meta), bytes);
  EXPECT_TRUE(ck.meta == meta);
  for (const auto& [name, t] : m.parameters()) EXPECT_EQ(ck.model.param(name).to_vector(), t.to_vector()) << name;
  for (const auto& [name, mk] : masks) EXPECT_EQ(ck.masks.at(name).zeros(), mk.zeros());
}

TEST(Checkpoint, F64ModelsKeepPrecision) {
  Model m = build_model("mlp-blobs", 3, DType::F64);
  m.param("fc1.bias").mutable_data()[0] = 0.1;
  Checkpoint ck = decode_checkpoint(encode_checkpoint(m, {}, {}));
  EXPECT_EQ(ck.model.dtype(), DType::F64);
  EXPECT_EQ(ck.model.param("fc1.bias").to_vector()[0], 0.1);
}

TEST(Checkpoint, BlobsAreAligned) {
  Model m = build_model("mlp-blobs", 3);
  auto bytes = encode_checkpoint(m, random_masks(m, 0.5, 1), {});
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DCKP");
  Split s = split(bytes);
  for (const auto& e : s.header["tensors"]) EXPECT_EQ(e["offset"].get<std::size_t>() % 64, 0u);
  for (const auto& e : s.header["masks"]) EXPECT_EQ(e["dtype"], "u8");
  EXPECT_EQ(join(s), bytes);
}

TEST(Checkpoint, CorruptionYieldsDistinctErrors) {
  Model m = build_model("mlp-blobs", 3);
  auto good = encode_checkpoint(m, random_masks(m, 0.5, 1), {});

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(decode_kind(bad_magic), FormatError::Kind::BadMagic);

  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_EQ(decode_kind(bad_version), FormatError::Kind::VersionMismatch);

  auto truncated = good;
  truncated.resize(good.size() - 16);
  EXPECT_EQ(decode_kind(truncated), FormatError::Kind::Truncated);

  Split s = split(good);
  s.header["tensors"][0]["shape"] = json::array({3, 3});
  EXPECT_EQ(decode_kind(join(s)), FormatError::Kind::HeaderInconsistent);

  Split missing = split(good);
  missing.header["tensors"].erase(missing.header["tensors"].begin());
  EXPECT_EQ(decode_kind(join(missing)), FormatError::Kind::HeaderInconsistent);
}

TEST(Checkpoint, SaveLoadFile) {
  Model m = build_model("mlp-blobs", 4);
  MaskSet masks = random_masks(m, 0.4, 2);
  auto path = std::filesystem::temp_directory_path() / "nncomp_test_ckpt.dckp";
  save_checkpoint(m, masks, {}, path);
  Checkpoint ck = load_checkpoint(path);
  std::filesystem::remove(path);
  for (const auto& [name, mk] : masks) {
    EXPECT_EQ(ck.masks.at(name).values.to_vector(), mk.values.to_vector());
    EXPECT_NEAR(ck.masks.at(name).sparsity(), mk.sparsity(), 0.0);
  }
  EXPECT_THROW(load_checkpoint(path), IoError);
}
