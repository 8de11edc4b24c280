// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// Choosing auxiliary-matrix shapes (m, n) and factor rank for a size budget.
//
// A Q x R weight matrix is generated from factors of an m x n auxiliary
// matrix; the stored size is rank * (m + n) elements and must not exceed the
// budget floor(alpha * Q * R). All feasibility decisions are made in exact
// integer arithmetic: the real-valued ratio is converted to an element budget
// once, using the exact binary value of the double.

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "deepthin/error.hpp"

namespace deepthin {

using count_t = std::uint64_t;

/// floor(alpha * x), exact for every finite non-negative double alpha.
inline count_t exact_floor_mul(double alpha, count_t x) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ArgumentError("ratio must be finite and >= 0");
  if (alpha == 0.0 || x == 0) return 0;
  int exp = 0;
  const double frac = std::frexp(alpha, &exp);  // alpha = frac * 2^exp, frac in [0.5, 1)
  const auto mant = static_cast<unsigned __int128>(std::ldexp(frac, 53));
  const unsigned __int128 prod = mant * x;  // alpha * x = prod * 2^(exp - 53)
  const int shift = 53 - exp;
  if (shift >= 128) return 0;
  if (shift >= 0) return static_cast<count_t>(prod >> shift);
  if (-shift >= 64) throw ArgumentError("ratio too large");
  return static_cast<count_t>(prod << (-shift));
}

struct LayerPlan {
  count_t q = 0;       // rows of the target matrix
  count_t r_dim = 0;   // columns of the target matrix
  count_t rank = 0;
  count_t m = 0;       // auxiliary rows
  count_t n = 0;       // auxiliary columns
  double achieved_ratio = 0.0;
  count_t lcm_nq = 0;

  count_t original_size() const noexcept { return q * r_dim; }
  count_t compressed_size() const noexcept { return rank * (m + n); }

  bool operator==(const LayerPlan&) const = default;
};

/// Builds a plan from explicit dimensions, filling the derived fields.
inline LayerPlan make_layer_plan(count_t q, count_t r_dim, count_t rank, count_t m, count_t n) {
  LayerPlan p{q, r_dim, rank, m, n, 0.0, 0};
  p.achieved_ratio = static_cast<double>(p.compressed_size()) / static_cast<double>(p.original_size());
  p.lcm_nq = std::lcm(n, q);
  return p;
}

/// Checks m*n >= Q*R, the ratio identity, and the LCM field. Empty string when valid.
inline std::string validate_plan(const LayerPlan& p) {
  if (p.q == 0 || p.r_dim == 0 || p.rank == 0 || p.m == 0 || p.n == 0) return "zero dimension";
  if (p.m * p.n < p.q * p.r_dim) return "auxiliary matrix smaller than target";
  const double expect = static_cast<double>(p.compressed_size()) / static_cast<double>(p.original_size());
  if (p.achieved_ratio != expect) return "achieved_ratio inconsistent with (m, n, rank)";
  if (p.lcm_nq != std::lcm(p.n, p.q)) return "lcm_nq inconsistent";
  return {};
}

struct NRange {
  count_t n_lo = 0;
  count_t n_hi = 0;
  bool operator==(const NRange&) const = default;
};

namespace detail {

inline void check_dims(count_t q, count_t r_dim, count_t rank) {
  if (q == 0 || r_dim == 0 || rank == 0) throw ArgumentError("q, r_dim and rank must be >= 1");
}

inline count_t ceil_div(count_t a, count_t b) { return a / b + (a % b != 0); }

inline count_t isqrt(count_t x) {
  auto r = static_cast<count_t>(std::sqrt(static_cast<double>(x)));
  while (r > 0 && r * r > x) --r;
  while ((r + 1) * (r + 1) <= x) ++r;
  return r;
}

/// min over n >= 1 of n + ceil(N / n). The minimum sits at isqrt(N) or isqrt(N) + 1.
inline count_t min_aux_factor_sum(count_t elements) {
  const count_t s = isqrt(elements);
  count_t best = elements + 1;  // n = N
  for (count_t n = (s > 2 ? s - 2 : 1); n <= s + 2; ++n) {
    best = std::min(best, n + ceil_div(elements, n));
  }
  return best;
}

/// n range with n + ceil(N/n) <= cap, i.e. n^2 - cap*n + N <= 0.
inline std::optional<NRange> n_range_for_cap(count_t elements, count_t cap) {
  using i128 = __int128;
  auto g = [&](count_t n) { return static_cast<i128>(n) * n - static_cast<i128>(cap) * n + elements; };
  const count_t v = std::max<count_t>(1, cap / 2);
  count_t vertex = v;
  if (g(v) > 0) {
    if (g(v + 1) > 0) return std::nullopt;
    vertex = v + 1;
  }
  // g is non-increasing on [1, vertex]: smallest n with g(n) <= 0.
  count_t lo = 1, hi = vertex;
  while (lo < hi) {
    const count_t mid = lo + (hi - lo) / 2;
    if (g(mid) <= 0) hi = mid; else lo = mid + 1;
  }
  const count_t n_lo = lo;
  // g is non-decreasing on [vertex, cap]: largest n with g(n) <= 0.
  lo = vertex;
  hi = std::max(cap, vertex);
  while (lo < hi) {
    const count_t mid = lo + (hi - lo + 1) / 2;
    if (g(mid) <= 0) lo = mid; else hi = mid - 1;
  }
  return NRange{n_lo, std::min(lo, elements)};
}

inline std::optional<NRange> n_range_for_budget(count_t q, count_t r_dim, count_t rank, count_t budget) {
  return n_range_for_cap(q * r_dim, budget / rank);
}

/// Smallest n coprime with q in range; otherwise the n maximizing lcm(n, q), smallest first.
inline count_t choose_n(const NRange& range, count_t q) {
  count_t best = range.n_lo;
  count_t best_lcm = 0;
  for (count_t n = range.n_lo; n <= range.n_hi; ++n) {
    if (std::gcd(n, q) == 1) return n;
    const count_t l = std::lcm(n, q);
    if (l > best_lcm) {
      best_lcm = l;
      best = n;
    }
  }
  return best;
}

}  // namespace detail

/// Minimum stored size rank * min_n (n + ceil(QR/n)).
inline count_t lower_bound_size(count_t q, count_t r_dim, count_t rank) {
  detail::check_dims(q, r_dim, rank);
  return rank * detail::min_aux_factor_sum(q * r_dim);
}

inline double lower_bound_ratio(count_t q, count_t r_dim, count_t rank) {
  return static_cast<double>(lower_bound_size(q, r_dim, rank)) / static_cast<double>(q * r_dim);
}

/// Integer n with rank * (ceil(QR/n) + n) <= alpha * QR; nullopt below the lower bound.
inline std::optional<NRange> feasible_n_range(count_t q, count_t r_dim, count_t rank, double alpha) {
  detail::check_dims(q, r_dim, rank);
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ArgumentError("alpha must be in (0, 1]");
  return detail::n_range_for_budget(q, r_dim, rank, exact_floor_mul(alpha, q * r_dim));
}

/// Plan with stored size <= budget elements, or nullopt when the budget is below the lower bound.
inline std::optional<LayerPlan> plan_layer_for_budget(count_t q, count_t r_dim, count_t rank,
                                                      count_t budget) {
  detail::check_dims(q, r_dim, rank);
  const auto range = detail::n_range_for_budget(q, r_dim, rank, budget);
  if (!range) return std::nullopt;
  const count_t n = detail::choose_n(*range, q);
  // Rows past ceil(QR/n) would land entirely in the discarded tail.
  const count_t m = detail::ceil_div(q * r_dim, n);
  return make_layer_plan(q, r_dim, rank, m, n);
}

inline LayerPlan plan_layer(count_t q, count_t r_dim, count_t rank, double alpha) {
  detail::check_dims(q, r_dim, rank);
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ArgumentError("alpha must be in (0, 1]");
  auto plan = plan_layer_for_budget(q, r_dim, rank, exact_floor_mul(alpha, q * r_dim));
  if (!plan) {
    const double lb = lower_bound_ratio(q, r_dim, rank);
    throw PlanningError("ratio " + std::to_string(alpha) + " is below the lower bound " +
                            std::to_string(lb) + " for " + std::to_string(q) + "x" +
                            std::to_string(r_dim) + " at rank " + std::to_string(rank),
                        {{std::to_string(q) + "x" + std::to_string(r_dim), lb}});
  }
  return *plan;
}

struct MatrixShape {
  std::string name;
  count_t q = 0;
  count_t r_dim = 0;
};

struct NamedLayerPlan {
  std::string name;
  LayerPlan plan;
  bool operator==(const NamedLayerPlan&) const = default;
};

struct NetworkPlan {
  std::vector<NamedLayerPlan> layers;
  double target_ratio = 0.0;
  double achieved_total_ratio = 0.0;
  std::vector<std::string> floor_hits;
  /// Parameters stored dense (biases etc.), counted on both sides of the ratio.
  count_t uncompressed_params = 0;

  count_t original_total() const {
    count_t t = uncompressed_params;
    for (const auto& l : layers) t += l.plan.original_size();
    return t;
  }
  count_t compressed_total() const {
    count_t t = uncompressed_params;
    for (const auto& l : layers) t += l.plan.compressed_size();
    return t;
  }
  bool operator==(const NetworkPlan&) const = default;
};

/// Fits a set of matrices under one global ratio. Matrices whose lower bound
/// exceeds their proportional share are pinned at the lower bound and the
/// remaining budget is re-split across the others by original element count,
/// repeating until no new matrix pins.
inline NetworkPlan plan_network(const std::vector<MatrixShape>& shapes, count_t rank,
                                double target_ratio, count_t uncompressed_params = 0) {
  if (shapes.empty()) throw ArgumentError("plan_network: no matrices");
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) throw ArgumentError("target ratio must be in (0, 1)");
  if (rank == 0) throw ArgumentError("rank must be >= 1");

  const std::size_t count = shapes.size();
  std::vector<count_t> original(count), floor_size(count);
  count_t total = uncompressed_params;
  for (std::size_t i = 0; i < count; ++i) {
    detail::check_dims(shapes[i].q, shapes[i].r_dim, rank);
    original[i] = shapes[i].q * shapes[i].r_dim;
    floor_size[i] = lower_bound_size(shapes[i].q, shapes[i].r_dim, rank);
    total += original[i];
  }

  auto fail = [&](const std::string& why) -> PlanningError {
    std::vector<LowerBoundEntry> bounds;
    for (std::size_t i = 0; i < count; ++i) {
      bounds.push_back({shapes[i].name, static_cast<double>(floor_size[i]) / static_cast<double>(original[i])});
    }
    return PlanningError(why, std::move(bounds));
  };

  const count_t global_budget = exact_floor_mul(target_ratio, total);
  if (global_budget < uncompressed_params) throw fail("uncompressed parameters alone exceed the target");
  const count_t available = global_budget - uncompressed_params;

  std::vector<bool> pinned(count, false);
  std::vector<count_t> share(count, 0);
  for (;;) {
    count_t pinned_size = 0, free_original = 0;
    for (std::size_t i = 0; i < count; ++i) {
      if (pinned[i]) pinned_size += floor_size[i]; else free_original += original[i];
    }
    if (pinned_size > available) throw fail("target unreachable: lower bounds of pinned matrices exceed it");
    const count_t remaining = available - pinned_size;
    if (free_original == 0) break;  // every matrix at its floor, and they fit
    bool newly_pinned = false;
    for (std::size_t i = 0; i < count; ++i) {
      if (pinned[i]) continue;
      share[i] = static_cast<count_t>(static_cast<unsigned __int128>(remaining) * original[i] / free_original);
      if (floor_size[i] > share[i]) {
        pinned[i] = true;
        newly_pinned = true;
      }
    }
    if (!newly_pinned) break;
  }

  NetworkPlan out;
  out.target_ratio = target_ratio;
  out.uncompressed_params = uncompressed_params;
  for (std::size_t i = 0; i < count; ++i) {
    const count_t budget = pinned[i] ? floor_size[i] : share[i];
    auto plan = plan_layer_for_budget(shapes[i].q, shapes[i].r_dim, rank, budget);
    if (!plan) throw fail("internal: budget below floor for " + shapes[i].name);
    out.layers.push_back({shapes[i].name, *plan});
    if (pinned[i]) out.floor_hits.push_back(shapes[i].name);
  }
  out.achieved_total_ratio = static_cast<double>(out.compressed_total()) / static_cast<double>(total);
  return out;
}

}  // namespace deepthin
