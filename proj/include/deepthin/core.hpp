// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// Dense row-major matrices, seeded RNG, and the reference matrix product.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "deepthin/error.hpp"

namespace deepthin {

template <typename T>
class Matrix {
  static_assert(std::is_floating_point_v<T>, "Matrix holds real values");

 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match shape " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  /// Element-type conversion (e.g. the 64-bit training copy to a 32-bit kernel copy).
  template <typename U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using DenseMatrix = Matrix<double>;
using DenseMatrixF = Matrix<float>;

template <typename T>
std::string shape_string(const Matrix<T>& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.flat().begin(), m.flat().end(), [](T v) { return std::isfinite(v); });
}

namespace detail {

// orow_r[j] += a_r * brow[j] for four output rows at once, sharing each load of brow.
template <typename T>
inline void axpy4(T* __restrict o0, T* __restrict o1, T* __restrict o2, T* __restrict o3, T a0, T a1, T a2,
                  T a3, const T* __restrict brow, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const T b = brow[j];
    o0[j] += a0 * b;
    o1[j] += a1 * b;
    o2[j] += a2 * b;
    o3[j] += a3 * b;
  }
}

}  // namespace detail

/// Reference product. Each output cell accumulates over the inner index in
/// increasing order, so results do not depend on how rows are partitioned.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a) + " * " + shape_string(b));
  }
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t inner = a.cols();
  const std::size_t n = b.cols();
  std::size_t i = 0;
  for (; i + 4 <= a.rows(); i += 4) {
    T* o = out.data() + i * n;
    const T* ar = a.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      detail::axpy4(o, o + n, o + 2 * n, o + 3 * n, ar[k], ar[inner + k], ar[2 * inner + k], ar[3 * inner + k],
                    b.data() + k * n, n);
    }
  }
  for (; i < a.rows(); ++i) {
    T* __restrict orow = out.data() + i * n;
    const T* arow = a.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const T aik = arow[k];
      const T* __restrict brow = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

/// a^T * b without materializing the transpose. Same accumulation order as matmul.
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn shape mismatch: " + shape_string(a) + "^T * " +
                         shape_string(b));
  }
  Matrix<T> out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  const std::size_t m = a.cols();
  const std::size_t inner = a.rows();
  // Blocks of four output rows stay cache-resident across the whole inner loop.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* o = out.data() + i * n;
    for (std::size_t k = 0; k < inner; ++k) {
      const T* arow = a.data() + k * m + i;
      detail::axpy4(o, o + n, o + 2 * n, o + 3 * n, arow[0], arow[1], arow[2], arow[3], b.data() + k * n, n);
    }
  }
  for (; i < m; ++i) {
    T* __restrict orow = out.data() + i * n;
    for (std::size_t k = 0; k < inner; ++k) {
      const T aki = a.data()[k * m + i];
      const T* __restrict brow = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a);

/// a * b^T. Same accumulation order as matmul.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt shape mismatch: " + shape_string(a) + " * " +
                         shape_string(b) + "^T");
  }
  return matmul(a, transpose(b));
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
double max_abs(const Matrix<T>& a) {
  double m = 0.0;
  for (T v : a.flat()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T, typename U>
double max_abs_diff(const Matrix<T>& a, const Matrix<U>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("max_abs_diff shape mismatch: " + shape_string(a) + " vs " +
                         shape_string(b));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.flat()[i]) - static_cast<double>(b.flat()[i])));
  }
  return m;
}

/// max|a - ref| / max|ref|, or the absolute difference when ref is all zero.
template <typename T, typename U>
double max_rel_error(const Matrix<T>& a, const Matrix<U>& ref) {
  const double diff = max_abs_diff(a, ref);
  const double scale = max_abs(ref);
  return scale > 0.0 ? diff / scale : diff;
}

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seeded generator. Single owner; parallel code derives children with `child`.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  /// Deterministic independent stream, a pure function of (seed, stream).
  Rng child(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 1))); }

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  /// Uniform integer in [lo, hi].
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

inline DenseMatrix sample_normal(Rng& rng, double mean, double stddev, std::size_t rows,
                                 std::size_t cols) {
  if (!(stddev >= 0.0)) throw ArgumentError("sample_normal: stddev must be >= 0");
  DenseMatrix out(rows, cols, mean);
  if (stddev == 0.0) return out;
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : out.flat()) v = dist(rng.engine());
  return out;
}

inline DenseMatrix sample_uniform(Rng& rng, double lo, double hi, std::size_t rows,
                                  std::size_t cols) {
  DenseMatrix out(rows, cols);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : out.flat()) v = dist(rng.engine());
  return out;
}

/// Worker count: a positive request is honored, 0 means hardware concurrency.
inline unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs body(worker) for worker in [0, workers), on the calling thread when workers == 1.
template <typename Body>
void run_workers(unsigned workers, Body&& body) {
  if (workers <= 1) {
    body(0u);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back([&body, w] { body(w); });
  body(0u);
}

/// matmul with output columns split across workers. Bit-identical to matmul.
template <typename T>
Matrix<T> matmul_threaded(const Matrix<T>& a, const Matrix<T>& b, unsigned threads) {
  const unsigned workers = std::min<unsigned>(resolve_threads(threads), std::max<std::size_t>(1, b.cols() / 64));
  if (workers <= 1) return matmul(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a) + " * " + shape_string(b));
  }
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t n = b.cols(), inner = a.cols();
  run_workers(workers, [&](unsigned w) {
    const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      T* __restrict orow = out.data() + i * n;
      const T* arow = a.data() + i * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        const T aik = arow[k];
        const T* __restrict brow = b.data() + k * n;
        for (std::size_t j = lo; j < hi; ++j) orow[j] += aik * brow[j];
      }
    }
  });
  return out;
}

}  // namespace deepthin
