// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// Comparison methods with honest storage accounting: hashed weight sharing,
// magnitude pruning stored as CSR, and plain low-rank factorization.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "deepthin/core.hpp"
#include "deepthin/planner.hpp"

namespace deepthin {

// ---------------------------------------------------------------------------
// Hashed weight sharing

/// 64-bit mixer over (row, col, seed): combine with two odd constants, then
/// two xorshift-multiply rounds with a final xorshift (the MurmurHash3 fmix64
/// finalizer). Bit-exact on every platform.
constexpr std::uint64_t weight_hash(std::uint64_t row, std::uint64_t col, std::uint64_t seed) noexcept {
  std::uint64_t x = (row * 0x9E3779B97F4A7C15ULL) ^ (col * 0xC2B2AE3D27D4EB4FULL) ^ seed;
  x ^= x >> 33;
  x *= 0xFF51AFD7ED558CCDULL;
  x ^= x >> 33;
  x *= 0xC4CEB9FE1A85EC53ULL;
  x ^= x >> 33;
  return x;
}

struct HashedLayer {
  std::vector<double> bins;
  count_t q = 0;
  count_t r_dim = 0;
  std::uint64_t hash_seed = 0;

  count_t bin_of(count_t row, count_t col) const noexcept {
    return weight_hash(row, col, hash_seed) % bins.size();
  }
};

inline double hashed_lookup(const HashedLayer& layer, count_t row, count_t col) {
  if (row >= layer.q || col >= layer.r_dim) throw ArgumentError("hashed_lookup: index out of range");
  if (layer.bins.empty()) throw ArgumentError("hashed_lookup: no bins");
  return layer.bins[layer.bin_of(row, col)];
}

/// Bin index of every cell, row-major. A runtime cache only; never serialized.
inline std::vector<count_t> hashed_index_map(const HashedLayer& layer) {
  std::vector<count_t> idx(layer.q * layer.r_dim);
  for (count_t i = 0; i < layer.q; ++i)
    for (count_t j = 0; j < layer.r_dim; ++j) idx[i * layer.r_dim + j] = layer.bin_of(i, j);
  return idx;
}

inline DenseMatrix materialize(const HashedLayer& layer, const std::vector<count_t>& index_map) {
  DenseMatrix w(layer.q, layer.r_dim);
  for (std::size_t k = 0; k < index_map.size(); ++k) w.flat()[k] = layer.bins[index_map[k]];
  return w;
}

// ---------------------------------------------------------------------------
// Pruning

/// Bytes of a CSR matrix: values and column indices per non-zero, plus rows + 1 row pointers.
constexpr count_t csr_size(count_t nnz, count_t rows, count_t value_bytes = 4, count_t index_bytes = 4) noexcept {
  return nnz * value_bytes + nnz * index_bytes + (rows + 1) * index_bytes;
}

/// Largest nnz whose CSR form fits in alpha of the dense Q x R storage; 0 when even an empty matrix does not fit.
inline count_t csr_max_nnz(double alpha, count_t rows, count_t cols, count_t value_bytes = 4,
                           count_t index_bytes = 4) {
  const count_t budget = exact_floor_mul(alpha, rows * cols * value_bytes);
  const count_t fixed = (rows + 1) * index_bytes;
  if (budget < fixed) return 0;
  return std::min(rows * cols, (budget - fixed) / (value_bytes + index_bytes));
}

struct PruneStep {
  count_t step = 0;
  double target_density = 1.0;
};

struct PrunedLayer {
  DenseMatrix weights;
  std::vector<std::uint8_t> mask;  // row-major, 1 = kept
  std::vector<PruneStep> schedule;

  PrunedLayer() = default;
  PrunedLayer(DenseMatrix w, std::vector<PruneStep> sched)
      : weights(std::move(w)), mask(weights.size(), 1), schedule(std::move(sched)) {
    for (std::size_t i = 1; i < schedule.size(); ++i) {
      if (schedule[i].target_density > schedule[i - 1].target_density) {
        throw ScheduleError("pruning schedule density must be non-increasing");
      }
    }
  }

  count_t nnz() const { return static_cast<count_t>(std::count(mask.begin(), mask.end(), 1)); }
  double density() const { return static_cast<double>(nnz()) / static_cast<double>(mask.size()); }

  DenseMatrix masked() const {
    DenseMatrix w = weights;
    for (std::size_t k = 0; k < w.size(); ++k) if (!mask[k]) w.flat()[k] = 0.0;
    return w;
  }
};

/// Survivors to keep for a density, rounded to the nearest element count.
inline count_t keep_count(double density, count_t cells) {
  return static_cast<count_t>(std::llround(density * static_cast<double>(cells)));
}

/// Applies the schedule entry for `step`, if any: clears the smallest
/// |weight| survivors (ties by row-major position) until the target density.
inline PrunedLayer prune_step(PrunedLayer layer, count_t step) {
  const auto it = std::find_if(layer.schedule.begin(), layer.schedule.end(),
                               [step](const PruneStep& s) { return s.step == step; });
  if (it == layer.schedule.end()) return layer;
  const count_t cells = layer.mask.size();
  const count_t keep = keep_count(it->target_density, cells);
  const count_t alive = layer.nnz();
  if (keep > alive) {
    throw ScheduleError("pruning step " + std::to_string(step) + " asks for " + std::to_string(keep) +
                        " survivors but only " + std::to_string(alive) + " remain");
  }
  std::vector<count_t> order;
  order.reserve(alive);
  for (count_t k = 0; k < cells; ++k) if (layer.mask[k]) order.push_back(k);
  std::stable_sort(order.begin(), order.end(), [&](count_t a, count_t b) {
    return std::abs(layer.weights.flat()[a]) < std::abs(layer.weights.flat()[b]);
  });
  for (count_t i = 0; i < alive - keep; ++i) layer.mask[order[i]] = 0;
  return layer;
}

/// `count` geometric steps from density 1 down to `final_density`, every `every` steps from `first`.
inline std::vector<PruneStep> geometric_schedule(count_t first, count_t every, count_t count, double final_density) {
  std::vector<PruneStep> out;
  for (count_t i = 1; i <= count; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(count);
    const double d = i == count ? final_density : std::pow(final_density, frac);
    out.push_back({first + (i - 1) * every, d});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plain rank factorization

struct RankFactLayer {
  DenseMatrix xf;  // Q x rank
  DenseMatrix wf;  // rank x R

  count_t stored_size() const { return xf.size() + wf.size(); }
  DenseMatrix materialize() const { return matmul(xf, wf); }
};

/// Largest rank with rank * (Q + R) within the alpha budget; 0 when none fits.
inline count_t rank_for_ratio(count_t q, count_t r_dim, double alpha) {
  return exact_floor_mul(alpha, q * r_dim) / (q + r_dim);
}

// ---------------------------------------------------------------------------
// Same-size networks

/// Width multiplier s so that a feedforward stack whose hidden widths are
/// scaled by s has about target * the original parameter count. With
/// `fixed_io`, the first input and last output dimension stay fixed;
/// otherwise every dimension scales. Returns 0 if fixed parts alone exceed the target.
inline double same_size_hint(const std::vector<MatrixShape>& shapes, double target, bool fixed_io = true) {
  if (shapes.empty()) throw ArgumentError("same_size_hint: no matrices");
  if (!(target > 0.0)) throw ArgumentError("same_size_hint: target must be > 0");
  double quad = 0.0, lin = 0.0, con = 0.0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const double size = static_cast<double>(shapes[i].q * shapes[i].r_dim);
    const bool in_fixed = fixed_io && i == 0;
    const bool out_fixed = fixed_io && i + 1 == shapes.size();
    const int scaled = (in_fixed ? 0 : 1) + (out_fixed ? 0 : 1);
    (scaled == 2 ? quad : scaled == 1 ? lin : con) += size;
  }
  const double goal = target * (quad + lin + con) - con;
  if (goal < 0.0) return 0.0;
  if (quad == 0.0) return lin > 0.0 ? goal / lin : 1.0;
  return (-lin + std::sqrt(lin * lin + 4.0 * quad * goal)) / (2.0 * quad);
}

/// Parameter count of a stack with hidden widths scaled by s (continuous).
inline double scaled_param_count(const std::vector<MatrixShape>& shapes, double s, bool fixed_io = true) {
  double total = 0.0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const double in = static_cast<double>(shapes[i].q) * ((fixed_io && i == 0) ? 1.0 : s);
    const double out = static_cast<double>(shapes[i].r_dim) * ((fixed_io && i + 1 == shapes.size()) ? 1.0 : s);
    total += in * out;
  }
  return total;
}

}  // namespace deepthin
