// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "deepthin/serialize.hpp"

namespace deepthin {
namespace {

CompressedModel random_model(Rng& rng, std::uint32_t value_bytes) {
  CompressedModel m;
  m.value_bytes = value_bytes;
  std::vector<MatrixShape> shapes;
  const auto layers = rng.uniform_int(1, 4);
  for (count_t i = 0; i < layers; ++i) {
    shapes.push_back({"layer_" + std::to_string(i), rng.uniform_int(4, 200), rng.uniform_int(4, 200)});
  }
  const count_t rank = rng.uniform_int(1, 3);
  for (;;) {
    try {
      m.plans = plan_network(shapes, rank, rng.uniform(0.05, 0.9), rng.uniform_int(0, 50));
      break;
    } catch (const PlanningError&) {
    }
  }
  for (const auto& l : m.plans.layers) {
    FactorPairD fp = init_factors(l.plan, 1.0, rng);
    if (value_bytes == 4) {
      for (double& v : fp.xf.flat()) v = static_cast<float>(v);
      for (double& v : fp.wf.flat()) v = static_cast<float>(v);
    }
    m.factors.push_back(std::move(fp));
    std::vector<double> bias(rng.uniform_int(0, 1) ? l.plan.r_dim : 0);
    for (double& b : bias) b = value_bytes == 4 ? static_cast<float>(rng.normal(0, 1)) : rng.normal(0, 1);
    m.biases.push_back(std::move(bias));
  }
  if (rng.uniform_int(0, 1)) m.metadata["seed"] = std::to_string(rng.next_u64());
  if (rng.uniform_int(0, 1)) m.metadata["note"] = "";
  return m;
}

// Size from first principles: fixed header, metadata strings, per-layer record, values.
std::uint64_t expected_size(const CompressedModel& m) {
  std::uint64_t n = 4 + 4 + 4 + 4 + 8 + 8 + 8 + 4;
  for (const auto& [k, v] : m.metadata) n += 8 + k.size() + v.size();
  for (std::size_t i = 0; i < m.plans.layers.size(); ++i) {
    const auto& p = m.plans.layers[i].plan;
    n += 4 + m.plans.layers[i].name.size() + 40 + 1 + 8;
    n += (p.rank * (p.m + p.n) + m.biases[i].size()) * m.value_bytes;
  }
  return n;
}

TEST(Serialize, EmptyModelIsHeaderOnly) {
  CompressedModel m;
  const auto bytes = serialize(m);
  EXPECT_EQ(bytes.size(), 44u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DTHN");
  EXPECT_EQ(deserialize(bytes), m);
}

TEST(Serialize, RoundTripIsBitExact) {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const CompressedModel m = random_model(rng, t % 3 == 0 ? 8 : 4);
    const auto bytes = serialize(m);
    ASSERT_EQ(bytes.size(), expected_size(m));
    ASSERT_EQ(bytes.size(), m.structure_bytes() + m.payload_bytes());
    CompressedModel back = deserialize(bytes);
    ASSERT_EQ(back, m) << t;
    ASSERT_EQ(serialize(back), bytes);
  }
}

TEST(Serialize, PayloadMatchesPlannerAccounting) {
  Rng rng(2);
  const CompressedModel m = random_model(rng, 4);
  count_t bias = 0;
  for (const auto& b : m.biases) bias += b.size();
  const count_t planned = m.plans.compressed_total() - m.plans.uncompressed_params;
  EXPECT_EQ(m.payload_bytes(), (planned + bias) * 4);
}

TEST(Serialize, FileRoundTrip) {
  Rng rng(3);
  const CompressedModel m = random_model(rng, 4);
  const auto path = (std::filesystem::temp_directory_path() / "deepthin_serialize_test.dtm").string();
  write_file(path, serialize(m));
  EXPECT_EQ(std::filesystem::file_size(path), m.structure_bytes() + m.payload_bytes());
  EXPECT_EQ(deserialize(read_file(path)), m);
  std::filesystem::remove(path);
}

TEST(Serialize, FloatWidthRoundsValues) {
  Rng rng(4);
  CompressedModel m = random_model(rng, 8);
  m.value_bytes = 4;
  const CompressedModel back = deserialize(serialize(m));
  EXPECT_EQ(back.factors[0].xf.flat()[0], static_cast<double>(static_cast<float>(m.factors[0].xf.flat()[0])));
}

std::size_t offset_of(const std::vector<std::uint8_t>& bytes) {
  try {
    (void)deserialize(bytes);
  } catch (const ParseError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no ParseError";
  return ~std::size_t{0};
}

TEST(Deserialize, BadMagicAtOffsetZero) {
  Rng rng(5);
  auto bytes = serialize(random_model(rng, 4));
  bytes[0] = 'X';
  EXPECT_EQ(offset_of(bytes), 0u);
}

TEST(Deserialize, BadVersionAtOffsetFour) {
  Rng rng(6);
  auto bytes = serialize(random_model(rng, 4));
  bytes[4] = 9;
  EXPECT_EQ(offset_of(bytes), 4u);
}

TEST(Deserialize, BadWidthAtOffsetTwelve) {
  Rng rng(7);
  auto bytes = serialize(random_model(rng, 4));
  bytes[12] = 2;
  EXPECT_EQ(offset_of(bytes), 12u);
}

TEST(Deserialize, TruncationReportsWhereInputEnds) {
  Rng rng(8);
  CompressedModel m = random_model(rng, 4);
  m.metadata.clear();
  const auto bytes = serialize(m);
  // Header fields: cutting inside one reports the start of that field.
  EXPECT_EQ(offset_of({bytes.begin(), bytes.begin() + 2}), 0u);
  EXPECT_EQ(offset_of({bytes.begin(), bytes.begin() + 10}), 8u);
  EXPECT_EQ(offset_of({bytes.begin(), bytes.begin() + 43}), 40u);
  // Cutting one byte off the last value reports the start of the payload check or the value.
  const auto last = offset_of({bytes.begin(), bytes.end() - 1});
  EXPECT_LT(last, bytes.size());
  EXPECT_GE(last, 44u);
  for (std::size_t cut = 0; cut < bytes.size(); cut += 37) EXPECT_LE(offset_of({bytes.begin(), bytes.begin() + cut}), cut);
}

TEST(Deserialize, TrailingBytesRejected) {
  Rng rng(9);
  auto bytes = serialize(random_model(rng, 4));
  const std::size_t end = bytes.size();
  bytes.push_back(0);
  EXPECT_EQ(offset_of(bytes), end);
}

TEST(Deserialize, InvalidPlanRejected) {
  CompressedModel m;
  m.plans.target_ratio = 0.5;
  const LayerPlan p = make_layer_plan(4, 4, 1, 4, 4);
  m.plans.layers.push_back({"w", p});
  m.factors.emplace_back(DenseMatrix(4, 1), DenseMatrix(1, 4), p);
  m.biases.emplace_back();
  auto bytes = serialize(m);
  // m field sits after the 44-byte header, 4-byte name length, 1-byte name, q, r, rank.
  const std::size_t plan_at = 44 + 4 + 1;
  bytes[plan_at + 24] = 1;  // m = 1, so m*n < QR
  EXPECT_EQ(offset_of(bytes), plan_at);
}

TEST(Serialize, RejectsInconsistentModels) {
  CompressedModel m;
  m.value_bytes = 2;
  EXPECT_THROW(serialize(m), ArgumentError);
  m.value_bytes = 4;
  m.plans.layers.push_back({"w", make_layer_plan(4, 4, 1, 4, 4)});
  EXPECT_THROW(serialize(m), DimensionError);
}

}  // namespace
}  // namespace deepthin
