// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// Binary container for compressed models.
//
// All integers and floats are little-endian. Layout:
//
//   header    "DTHN" | u32 version | u32 layer_count | u32 value_bytes (4 or 8)
//             | u64 payload_bytes | f64 target_ratio | u64 uncompressed_params
//             | u32 metadata_count | { u32 len, key bytes, u32 len, value bytes }*
//   per layer u32 name_len | name bytes | u64 q, r_dim, rank, m, n | u8 floor_hit
//             | u64 bias_len | xf values (m*rank) | wf values (rank*n) | bias values
//
// payload_bytes counts only value payloads: sum of (rank*(m+n) + bias_len) * value_bytes.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "deepthin/error.hpp"
#include "deepthin/factor.hpp"
#include "deepthin/planner.hpp"

namespace deepthin {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr char kMagic[4] = {'D', 'T', 'H', 'N'};

struct CompressedModel {
  std::uint32_t format_version = kFormatVersion;
  NetworkPlan plans;
  std::vector<FactorPairD> factors;
  std::vector<std::vector<double>> biases;
  std::map<std::string, std::string> metadata;
  std::uint32_t value_bytes = 4;

  bool operator==(const CompressedModel&) const = default;

  /// Bytes of factor and bias values, matching the planner's element accounting.
  std::uint64_t payload_bytes() const {
    std::uint64_t elems = 0;
    for (const auto& l : plans.layers) elems += l.plan.compressed_size();
    for (const auto& b : biases) elems += b.size();
    return elems * value_bytes;
  }

  /// Bytes of everything that is not a value payload.
  std::uint64_t structure_bytes() const {
    std::uint64_t n = 4 + 4 + 4 + 4 + 8 + 8 + 8 + 4;
    for (const auto& [k, v] : metadata) n += 4 + k.size() + 4 + v.size();
    for (const auto& l : plans.layers) n += 4 + l.name.size() + 5 * 8 + 1 + 8;
    return n;
  }
};

/// Recomputes achieved_total_ratio from the layer plans.
/// An empty plan reports 0.
inline void refresh_totals(NetworkPlan& plan) {
  const count_t original = plan.original_total();
  plan.achieved_total_ratio =
      original == 0 ? 0.0 : static_cast<double>(plan.compressed_total()) / static_cast<double>(original);
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void value(double v, std::uint32_t width) { width == 4 ? f32(static_cast<float>(v)) : f64(v); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::uint8_t u8(const char* what) { need(1, what); return in_[pos_++]; }
  std::uint32_t u32(const char* what) { return get_le<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return get_le<std::uint64_t>(what); }
  double f64(const char* what) { return std::bit_cast<double>(get_le<std::uint64_t>(what)); }
  float f32(const char* what) { return std::bit_cast<float>(get_le<std::uint32_t>(what)); }
  double value(std::uint32_t width, const char* what) { return width == 4 ? f32(what) : f64(what); }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_), in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

 private:
  void need(std::uint64_t n, const char* what) {
    if (n > in_.size() - pos_) throw ParseError(std::string("truncated input reading ") + what, pos_);
  }
  template <typename U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const CompressedModel& model) {
  if (model.value_bytes != 4 && model.value_bytes != 8) throw ArgumentError("value_bytes must be 4 or 8");
  if (model.factors.size() != model.plans.layers.size() || model.biases.size() != model.plans.layers.size()) {
    throw DimensionError("model has " + std::to_string(model.plans.layers.size()) + " plans, " +
                         std::to_string(model.factors.size()) + " factor pairs and " +
                         std::to_string(model.biases.size()) + " biases");
  }
  detail::ByteWriter w;
  w.bytes(std::string(kMagic, 4));
  w.u32(model.format_version);
  w.u32(static_cast<std::uint32_t>(model.plans.layers.size()));
  w.u32(model.value_bytes);
  w.u64(model.payload_bytes());
  w.f64(model.plans.target_ratio);
  w.u64(model.plans.uncompressed_params);
  w.u32(static_cast<std::uint32_t>(model.metadata.size()));
  for (const auto& [k, v] : model.metadata) {
    w.u32(static_cast<std::uint32_t>(k.size()));
    w.bytes(k);
    w.u32(static_cast<std::uint32_t>(v.size()));
    w.bytes(v);
  }
  for (std::size_t i = 0; i < model.plans.layers.size(); ++i) {
    const auto& named = model.plans.layers[i];
    const LayerPlan& p = named.plan;
    if (!(model.factors[i].plan == p)) throw ArgumentError("factor plan differs from network plan for " + named.name);
    model.factors[i].check();
    w.u32(static_cast<std::uint32_t>(named.name.size()));
    w.bytes(named.name);
    for (count_t v : {p.q, p.r_dim, p.rank, p.m, p.n}) w.u64(v);
    const bool hit = std::find(model.plans.floor_hits.begin(), model.plans.floor_hits.end(), named.name) !=
                     model.plans.floor_hits.end();
    w.u8(hit ? 1 : 0);
    w.u64(model.biases[i].size());
    for (double v : model.factors[i].xf.flat()) w.value(v, model.value_bytes);
    for (double v : model.factors[i].wf.flat()) w.value(v, model.value_bytes);
    for (double v : model.biases[i]) w.value(v, model.value_bytes);
  }
  return w.take();
}

inline CompressedModel deserialize(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  const std::size_t magic_at = r.pos();
  if (r.bytes(4, "magic") != std::string(kMagic, 4)) throw ParseError("bad magic", magic_at);
  CompressedModel m;
  const std::size_t version_at = r.pos();
  m.format_version = r.u32("version");
  if (m.format_version != kFormatVersion) {
    throw ParseError("unsupported format version " + std::to_string(m.format_version), version_at);
  }
  const std::uint32_t layers = r.u32("layer count");
  const std::size_t width_at = r.pos();
  m.value_bytes = r.u32("value width");
  if (m.value_bytes != 4 && m.value_bytes != 8) throw ParseError("value width must be 4 or 8", width_at);
  const std::size_t payload_at = r.pos();
  const std::uint64_t declared_payload = r.u64("payload size");
  m.plans.target_ratio = r.f64("target ratio");
  m.plans.uncompressed_params = r.u64("uncompressed parameter count");
  const std::uint32_t meta = r.u32("metadata count");
  for (std::uint32_t i = 0; i < meta; ++i) {
    const std::string key = r.bytes(r.u32("metadata key length"), "metadata key");
    m.metadata[key] = r.bytes(r.u32("metadata value length"), "metadata value");
  }
  for (std::uint32_t i = 0; i < layers; ++i) {
    const std::string name = r.bytes(r.u32("layer name length"), "layer name");
    const std::size_t plan_at = r.pos();
    count_t dims[5];
    for (count_t& d : dims) d = r.u64("layer plan");
    const LayerPlan plan = make_layer_plan(dims[0], dims[1], dims[2], dims[3], dims[4]);
    if (const std::string why = validate_plan(plan); !why.empty()) {
      throw ParseError("invalid plan for layer " + name + ": " + why, plan_at);
    }
    const bool hit = r.u8("floor flag") != 0;
    const std::uint64_t bias_len = r.u64("bias length");
    const std::uint64_t values = plan.compressed_size() + bias_len;
    if (values > r.remaining() / m.value_bytes) {
      throw ParseError("truncated input reading payload of layer " + name, r.pos());
    }
    DenseMatrix xf(plan.m, plan.rank), wf(plan.rank, plan.n);
    for (double& v : xf.flat()) v = r.value(m.value_bytes, "xf");
    for (double& v : wf.flat()) v = r.value(m.value_bytes, "wf");
    std::vector<double> bias(bias_len);
    for (double& v : bias) v = r.value(m.value_bytes, "bias");
    m.plans.layers.push_back({name, plan});
    if (hit) m.plans.floor_hits.push_back(name);
    m.factors.emplace_back(std::move(xf), std::move(wf), plan);
    m.biases.push_back(std::move(bias));
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after last layer", r.pos());
  if (m.payload_bytes() != declared_payload) {
    throw ParseError("declared payload size " + std::to_string(declared_payload) + " != actual " +
                         std::to_string(m.payload_bytes()),
                     payload_at);
  }
  refresh_totals(m.plans);
  return m;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Hashed layer container: "DTHH" | u64 q | u64 r_dim | u64 bins | u64 seed | f32 bins.
/// The cell-to-bin map is recomputed from the seed, never stored.
inline constexpr std::uint64_t kHashedHeaderBytes = 4 + 4 * 8;

template <typename HashedLayerT>
std::vector<std::uint8_t> serialize_hashed(const HashedLayerT& layer) {
  detail::ByteWriter w;
  w.bytes("DTHH");
  w.u64(layer.q);
  w.u64(layer.r_dim);
  w.u64(layer.bins.size());
  w.u64(layer.hash_seed);
  for (double b : layer.bins) w.f32(static_cast<float>(b));
  return w.take();
}

}  // namespace deepthin
