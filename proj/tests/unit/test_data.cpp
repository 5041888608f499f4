// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "nncomp/data.hpp"
#include "nncomp/error.hpp"
#include "nncomp/rng.hpp"

using namespace nncomp;

namespace {

const std::filesystem::path kFixtures = NNCOMP_FIXTURE_DIR;

FormatError::Kind kind_of(const std::vector<std::uint8_t>& bytes) {
  try {
    parse_idx(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no FormatError";
  return FormatError::Kind::BadMagic;
}

}  // namespace

TEST(Idx, HandDecodedVector) {
  std::vector<std::uint8_t> bytes{0, 0, 8, 1, 0, 0, 0, 3, 7, 7, 7};
  IdxArray a = parse_idx(bytes);
  EXPECT_EQ(a.shape, (Shape{3}));
  for (double v : a.values) EXPECT_EQ(v, 7.0 / 255.0);
  EXPECT_EQ(a.raw_u8, (std::vector<std::uint8_t>{7, 7, 7}));
}

TEST(Idx, FixtureDecodesByteForByte) {
  auto img_bytes = read_file(kFixtures / "tiny-images.idx");
  IdxArray img = parse_idx(img_bytes);
  EXPECT_EQ(img.shape, (Shape{3, 2, 2}));
  const std::vector<std::uint8_t> payload{0, 255, 128, 7, 1, 2, 3, 4, 10, 20, 30, 40};
  EXPECT_EQ(img.raw_u8, payload);
  for (std::size_t i = 0; i < payload.size(); ++i) EXPECT_EQ(img.values[i], payload[i] / 255.0);
  EXPECT_EQ(encode_idx_u8(img.shape, img.raw_u8), img_bytes);

  Dataset ds = load_idx_dataset(kFixtures / "tiny-images.idx", kFixtures / "tiny-labels.idx");
  EXPECT_EQ(ds.inputs.shape(), (Shape{3, 1, 2, 2}));
  EXPECT_EQ(ds.labels, (std::vector<std::int32_t>{2, 0, 9}));
  EXPECT_EQ(ds.num_classes, 10);
}

TEST(Idx, F32RoundTrip) {
  std::vector<float> v{1.5f, -2.25f, 0.1f, 3e7f};
  auto bytes = encode_idx_f32({2, 2}, v);
  IdxArray a = parse_idx(bytes);
  EXPECT_EQ(a.type, IdxType::F32);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(a.values[i], static_cast<double>(v[i]));
}

TEST(Idx, CorruptHeaders) {
  EXPECT_EQ(kind_of({1, 0, 8, 1, 0, 0, 0, 1, 5}), FormatError::Kind::BadMagic);
  EXPECT_EQ(kind_of({0, 0, 0x0B, 1, 0, 0, 0, 1, 5, 5}), FormatError::Kind::UnsupportedDtype);
  EXPECT_EQ(kind_of({0, 0, 8, 1, 0, 0, 0, 3, 7, 7}), FormatError::Kind::LengthMismatch);
  EXPECT_EQ(kind_of({0, 0, 8, 2, 0, 0, 0, 3}), FormatError::Kind::Truncated);
}

TEST(Idx, MissingFileIsIoError) {
  EXPECT_THROW(read_file(kFixtures / "does-not-exist.idx"), IoError);
}

TEST(Blobs, CentersRuleSeparates) {
  Dataset ds = gen_blobs(250, 4, 0.3, 7);
  ASSERT_EQ(ds.size(), 1000u);
  auto centers = blob_centers(4);
  EXPECT_EQ(centers[0], (std::pair<double, double>{1, 1}));
  EXPECT_EQ(centers[2], (std::pair<double, double>{-1, -1}));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double x = ds.inputs.at({i, 0}), y = ds.inputs.at({i, 1});
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t c = 0; c < 4; ++c) {
      const double d = (x - centers[c].first) * (x - centers[c].first) + (y - centers[c].second) * (y - centers[c].second);
      if (d < bd) bd = d, best = c;
    }
    correct += static_cast<std::int32_t>(best) == ds.labels[i];
  }
  EXPECT_GE(static_cast<double>(correct) / 1000.0, 0.99);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.labels[i], static_cast<std::int32_t>(i / 250));
}

TEST(Blobs, SeedDeterminesData) {
  EXPECT_EQ(gen_blobs(10, 4, 0.3, 1).inputs.to_vector(), gen_blobs(10, 4, 0.3, 1).inputs.to_vector());
  EXPECT_NE(gen_blobs(10, 4, 0.3, 1).inputs.to_vector(), gen_blobs(10, 4, 0.3, 2).inputs.to_vector());
}

TEST(Sampler, EveryIndexOnce) {
  for (auto kind : {SamplerKind::Sequential, SamplerKind::Shuffled}) {
    auto idx = epoch_indices(37, SamplerSpec{kind, 1.0, 5}, 3);
    std::sort(idx.begin(), idx.end());
    std::vector<std::size_t> expect(37);
    std::iota(expect.begin(), expect.end(), 0);
    EXPECT_EQ(idx, expect);
  }
}

TEST(Sampler, ShuffleIsPureFunctionOfSeedAndEpoch) {
  SamplerSpec s{SamplerKind::Shuffled, 1.0, 9};
  EXPECT_EQ(epoch_indices(50, s, 2), epoch_indices(50, s, 2));
  EXPECT_NE(epoch_indices(50, s, 2), epoch_indices(50, s, 3));
}

TEST(Sampler, PartialSubsetFixedAcrossEpochs) {
  SamplerSpec s{SamplerKind::Partial, 0.3, 4};
  auto a = epoch_indices(100, s, 0);
  auto b = epoch_indices(100, s, 1);
  EXPECT_EQ(a.size(), 30u);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()), std::set<std::size_t>(b.begin(), b.end()));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 30u);
}

TEST(Minibatch, LastBatchShort) {
  Dataset ds = gen_blobs(5, 2, 0.3, 1);
  MinibatchStream s(ds, 4, SamplerSpec{}, 0);
  EXPECT_EQ(s.batch_count(), 3u);
  std::vector<std::size_t> sizes;
  while (auto b = s.next()) sizes.push_back(b->y.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
}

TEST(Minibatch, EmptyDatasetRejected) {
  Dataset ds;
  EXPECT_THROW(MinibatchStream(ds, 4, SamplerSpec{}, 0), ContractError);
}

TEST(Rng, DeriveGivesIndependentReproducibleStreams) {
  Rng a = Rng::derive(7, "init"), b = Rng::derive(7, "init"), c = Rng::derive(7, "shuffle");
  const auto x = a.next_u64();
  EXPECT_EQ(x, b.next_u64());
  EXPECT_NE(x, c.next_u64());
  Rng u(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    ASSERT_GE(v, 0.0);
    ASSERT_LT(v, 1.0);
    ASSERT_LT(u.below(7), 7u);
  }
}
