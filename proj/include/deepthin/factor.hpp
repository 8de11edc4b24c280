// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// The compressed representation of one weight matrix.
//
// The auxiliary matrix W_aux = xf * wf (m x n) is flattened row-major into v,
// and v is poured column-major into the Q x R target: v[k] lands at
// (k mod Q, k div Q). Column c of the target is therefore the contiguous
// slice v[cQ, cQ + Q), which may span several auxiliary rows or only part of
// one. Elements of v past Q*R are discarded.

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "deepthin/core.hpp"
#include "deepthin/planner.hpp"

namespace deepthin {

template <typename T>
struct FactorPair {
  Matrix<T> xf;  // m x rank
  Matrix<T> wf;  // rank x n
  LayerPlan plan;

  FactorPair() = default;
  FactorPair(Matrix<T> xf_, Matrix<T> wf_, LayerPlan plan_)
      : xf(std::move(xf_)), wf(std::move(wf_)), plan(plan_) {
    check();
  }

  void check() const {
    if (xf.rows() != plan.m || xf.cols() != plan.rank || wf.rows() != plan.rank || wf.cols() != plan.n) {
      throw DimensionError("factor shapes " + shape_string(xf) + " and " + shape_string(wf) +
                           " do not match plan m=" + std::to_string(plan.m) + " n=" +
                           std::to_string(plan.n) + " rank=" + std::to_string(plan.rank));
    }
    const std::string why = validate_plan(plan);
    if (!why.empty()) throw ArgumentError("invalid layer plan: " + why);
  }

  template <typename U>
  FactorPair<U> cast() const {
    return FactorPair<U>(xf.template cast<U>(), wf.template cast<U>(), plan);
  }

  bool operator==(const FactorPair&) const = default;
};

using FactorPairD = FactorPair<double>;
using FactorPairF = FactorPair<float>;

/// xf ~ N(0, sigma^2), wf ~ N(0, 1/rank), so each generated weight has variance sigma^2.
inline FactorPairD init_factors(const LayerPlan& plan, double sigma, Rng& rng) {
  if (!(sigma > 0.0)) throw ArgumentError("init_factors: sigma must be > 0");
  DenseMatrix xf = sample_normal(rng, 0.0, sigma, plan.m, plan.rank);
  DenseMatrix wf = sample_normal(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(plan.rank)), plan.rank, plan.n);
  return FactorPairD(std::move(xf), std::move(wf), plan);
}

struct MatrixIndex {
  count_t row = 0;
  count_t col = 0;
  bool operator==(const MatrixIndex&) const = default;
};

/// Target position of flattened auxiliary element `flat`.
inline MatrixIndex relayout_index(count_t flat, const LayerPlan& plan) {
  if (flat >= plan.q * plan.r_dim) {
    throw ArgumentError("relayout_index: flat index " + std::to_string(flat) + " outside " +
                        std::to_string(plan.q) + "x" + std::to_string(plan.r_dim));
  }
  return {flat % plan.q, flat / plan.q};
}

/// Offset into wf at which target column `col` begins.
inline count_t phase(count_t col, const LayerPlan& plan) {
  if (col >= plan.r_dim) throw ArgumentError("phase: column out of range");
  return (col * plan.q) % plan.n;
}

/// Number of distinct phases over all columns of an unbounded target: n / gcd(n, Q).
inline count_t phase_period(const LayerPlan& plan) { return plan.n / std::gcd(plan.n, plan.q); }

inline count_t distinct_phase_count(const LayerPlan& plan) {
  return std::min<count_t>(plan.r_dim, phase_period(plan));
}

/// Element v[k] of the flattened auxiliary matrix.
template <typename T>
T aux_element(const FactorPair<T>& fp, count_t flat) {
  const count_t j = flat / fp.plan.n;
  const count_t c = flat % fp.plan.n;
  T acc = T(0);
  for (count_t i = 0; i < fp.plan.rank; ++i) acc += fp.xf(j, i) * fp.wf(i, c);
  return acc;
}

/// Fills W row by row. Along a row, the flat index advances by Q per column,
/// so its (aux row, aux col) pair is stepped incrementally instead of divided.
template <typename T>
Matrix<T> decompress(const FactorPair<T>& fp) {
  const LayerPlan& p = fp.plan;
  Matrix<T> w(p.q, p.r_dim);
  const count_t dj = p.q / p.n, dc = p.q % p.n;
  const T* __restrict xf = fp.xf.data();
  const T* __restrict wf = fp.wf.data();
  for (count_t row = 0; row < p.q; ++row) {
    T* __restrict out = w.data() + row * p.r_dim;
    count_t j = row / p.n, c = row % p.n;
    for (count_t col = 0; col < p.r_dim; ++col) {
      if (p.rank == 1) {
        out[col] = T(0) + xf[j] * wf[c];
      } else {
        T acc = T(0);
        for (count_t i = 0; i < p.rank; ++i) acc += xf[j * p.rank + i] * wf[i * p.n + c];
        out[col] = acc;
      }
      j += dj;
      c += dc;
      if (c >= p.n) {
        c -= p.n;
        ++j;
      }
    }
  }
  return w;
}

namespace detail {

/// Solves the small symmetric positive system A x = b in place (Gaussian elimination, partial pivoting).
inline std::vector<double> solve_small(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
      std::swap(b[col], b[piv]);
    }
    const double d = a[col * n + col];
    if (d == 0.0) continue;
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / d;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a[i * n + c] * x[c];
    x[i] = a[i * n + i] != 0.0 ? s / a[i * n + i] : 0.0;
  }
  return x;
}

}  // namespace detail

/// Least-squares fit of factors to an existing dense matrix by alternating
/// least squares on the observed (non-discarded) auxiliary entries. `fp`
/// provides the plan and the starting point.
inline FactorPairD fit_factors(const DenseMatrix& target, FactorPairD fp, int sweeps = 25,
                               double ridge = 1e-9) {
  const LayerPlan& p = fp.plan;
  if (target.rows() != p.q || target.cols() != p.r_dim) {
    throw DimensionError("fit_factors: target " + shape_string(target) + " does not match plan");
  }
  const count_t total = p.q * p.r_dim;
  const std::size_t r = p.rank;
  auto observed = [&](count_t j, count_t c) { return j * p.n + c < total; };
  auto value = [&](count_t j, count_t c) {
    const count_t k = j * p.n + c;
    return target(k % p.q, k / p.q);
  };
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (count_t j = 0; j < p.m; ++j) {
      std::vector<double> a(r * r, 0.0), b(r, 0.0);
      for (count_t c = 0; c < p.n && observed(j, c); ++c) {
        const double t = value(j, c);
        for (std::size_t u = 0; u < r; ++u) {
          b[u] += fp.wf(u, c) * t;
          for (std::size_t w = 0; w < r; ++w) a[u * r + w] += fp.wf(u, c) * fp.wf(w, c);
        }
      }
      for (std::size_t u = 0; u < r; ++u) a[u * r + u] += ridge;
      const auto x = detail::solve_small(std::move(a), std::move(b));
      for (std::size_t u = 0; u < r; ++u) fp.xf(j, u) = x[u];
    }
    for (count_t c = 0; c < p.n; ++c) {
      std::vector<double> a(r * r, 0.0), b(r, 0.0);
      for (count_t j = 0; j < p.m && observed(j, c); ++j) {
        const double t = value(j, c);
        for (std::size_t u = 0; u < r; ++u) {
          b[u] += fp.xf(j, u) * t;
          for (std::size_t w = 0; w < r; ++w) a[u * r + w] += fp.xf(j, u) * fp.xf(j, w);
        }
      }
      for (std::size_t u = 0; u < r; ++u) a[u * r + u] += ridge;
      const auto x = detail::solve_small(std::move(a), std::move(b));
      for (std::size_t u = 0; u < r; ++u) fp.wf(u, c) = x[u];
    }
  }
  return fp;
}

}  // namespace deepthin
