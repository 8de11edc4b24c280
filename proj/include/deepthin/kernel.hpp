// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// Y = X * W computed directly from rank-1 factors, never materializing W.
//
// Column c of W is the slice v[cQ, cQ + Q) of the flattened auxiliary
// matrix. That slice splits into runs, each a contiguous piece of one
// auxiliary row j: v[k] = xf[j] * wf[k mod n]. For a run starting at target
// row s with wf offset o and length L,
//
//     contribution = xf[j] * dot(x[s : s+L], wf[o : o+L])
//
// so the dot is computed once and scaled afterwards. The runs of column c
// are fully determined by its phase (cQ) mod n, which repeats with period
// n / gcd(n, Q) in c; every column after the first in a phase class reuses
// the stored dots of that class. Consecutive runs of a column belong to
// consecutive auxiliary rows, so the scaling step is itself a short dot
// product between a contiguous xf segment and the stored dots.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "deepthin/core.hpp"
#include "deepthin/factor.hpp"

namespace deepthin {

struct RunKey {
  count_t wf_offset = 0;
  count_t slice_start = 0;  // first target row (input element) covered by the run
  count_t run_length = 0;
  bool operator==(const RunKey&) const = default;
  auto operator<=>(const RunKey&) const = default;
};

struct OpCount {
  std::uint64_t multiplies = 0;
  std::uint64_t adds = 0;
  OpCount& operator+=(const OpCount& o) {
    multiplies += o.multiplies;
    adds += o.adds;
    return *this;
  }
};

/// Run segmentation of one column per phase class.
struct RunLayout {
  count_t q = 0;
  count_t n = 0;
  count_t period = 0;     // n / gcd(n, Q)
  count_t classes = 0;    // min(R, period)
  std::vector<count_t> class_begin;  // classes + 1 offsets into the run arrays
  std::vector<count_t> start, offset, length;
  std::vector<count_t> phase_to_class;  // n entries, npos when the phase never occurs

  static constexpr count_t npos = std::numeric_limits<count_t>::max();

  explicit RunLayout(const LayerPlan& plan)
      : q(plan.q), n(plan.n), period(phase_period(plan)), classes(distinct_phase_count(plan)) {
    phase_to_class.assign(n, npos);
    class_begin.reserve(classes + 1);
    class_begin.push_back(0);
    for (count_t k = 0; k < classes; ++k) {
      const count_t p = (k * q) % n;
      phase_to_class[p] = k;
      for (count_t s = 0; s < q;) {
        const count_t o = (p + s) % n;
        const count_t len = std::min(n - o, q - s);
        start.push_back(s);
        offset.push_back(o);
        length.push_back(len);
        s += len;
      }
      class_begin.push_back(start.size());
    }
  }

  count_t slots() const noexcept { return start.size(); }
  count_t runs_in_class(count_t k) const noexcept { return class_begin[k + 1] - class_begin[k]; }

  /// Slot holding `key`, if that run occurs in some column.
  std::optional<count_t> slot_of(const RunKey& key) const {
    if (key.wf_offset >= n || key.slice_start >= q) return std::nullopt;
    const count_t p = (key.wf_offset + n - key.slice_start % n) % n;
    const count_t k = phase_to_class[p];
    if (k == npos) return std::nullopt;
    for (count_t s = class_begin[k]; s < class_begin[k + 1]; ++s) {
      if (start[s] == key.slice_start) {
        if (offset[s] == key.wf_offset && length[s] == key.run_length) return s;
        return std::nullopt;
      }
    }
    return std::nullopt;
  }
};

/// Memoized partial dots for one fused product, one table per input row.
class ReuseTable {
 public:
  ReuseTable() = default;
  ReuseTable(RunLayout layout, std::size_t batch)
      : layout_(std::move(layout)), batch_(batch), dots_(batch * layout_.slots(), 0.0),
        present_(batch * layout_.slots(), 0) {}

  std::optional<double> find(std::size_t input_row, const RunKey& key) const {
    if (input_row >= batch_) return std::nullopt;
    const auto slot = layout_.slot_of(key);
    if (!slot) return std::nullopt;
    const std::size_t idx = input_row * layout_.slots() + *slot;
    if (!present_[idx]) return std::nullopt;
    return dots_[idx];
  }

  std::size_t entries() const noexcept {
    return static_cast<std::size_t>(std::count(present_.begin(), present_.end(), 1));
  }
  std::uint64_t hits() const noexcept { return hits_; }
  std::uint64_t misses() const noexcept { return misses_; }
  const RunLayout& layout() const noexcept { return layout_; }

 private:
  template <typename T>
  friend struct FusedKernel;

  double* row_slots(std::size_t input_row) { return dots_.data() + input_row * layout_.slots(); }

  RunLayout layout_{LayerPlan{1, 1, 1, 1, 1, 1.0, 1}};
  std::size_t batch_ = 0;
  std::vector<double> dots_;
  std::vector<std::uint8_t> present_;
  std::uint64_t hits_ = 0;
  std::uint64_t misses_ = 0;
};

struct KernelOptions {
  unsigned threads = 1;  // 0 = hardware concurrency
};

template <typename T>
struct FusedResult {
  Matrix<T> y;
  OpCount ops;
  ReuseTable table;
};

template <typename T>
struct FusedKernel {
  static FusedResult<T> run(const Matrix<T>& x, const FactorPair<T>& fp, const KernelOptions& opt) {
    const LayerPlan& p = fp.plan;
    if (x.cols() != p.q) {
      throw DimensionError("fused_matmul shape mismatch: input " + shape_string(x) + " vs weight " +
                           std::to_string(p.q) + "x" + std::to_string(p.r_dim));
    }
    if (p.rank != 1) {
      throw UnsupportedError("fused_matmul supports rank 1 only, got rank " + std::to_string(p.rank));
    }
    const std::size_t batch = x.rows();
    FusedResult<T> res{Matrix<T>(batch, p.r_dim), {}, ReuseTable(RunLayout(p), batch)};
    ReuseTable& table = res.table;
    const RunLayout& lay = table.layout_;
    const count_t classes = lay.classes;
    const unsigned workers = static_cast<unsigned>(
        std::max<count_t>(1, std::min<count_t>(resolve_threads(opt.threads), classes)));

    std::vector<OpCount> ops(workers);
    std::vector<std::uint64_t> hits(workers, 0), misses(workers, 0);
    const T* xf = fp.xf.data();
    const T* wf = fp.wf.data();

    // Worker w owns phase classes k = w, w + workers, ...: disjoint output
    // columns and disjoint table slots.
    run_workers(workers, [&](unsigned w) {
      for (std::size_t b = 0; b < batch; ++b) {
        const T* xrow = x.data() + b * p.q;
        double* slots = table.row_slots(b);
        std::uint8_t* present = table.present_.data() + b * lay.slots();
        T* yrow = res.y.data() + b * p.r_dim;
        for (count_t k = w; k < classes; k += workers) {
          const count_t first = lay.class_begin[k];
          const count_t runs = lay.runs_in_class(k);
          for (count_t s = first; s < first + runs; ++s) {
            const T* xs = xrow + lay.start[s];
            const T* ws = wf + lay.offset[s];
            double acc = 0.0;
            for (count_t t = 0; t < lay.length[s]; ++t) acc += static_cast<double>(xs[t]) * static_cast<double>(ws[t]);
            slots[s] = acc;
            present[s] = 1;
          }
          misses[w] += runs;
          ops[w].multiplies += p.q;  // run lengths of a column sum to Q
          ops[w].adds += p.q;
          const double* dots = slots + first;
          count_t columns = 0;
          for (count_t c = k; c < p.r_dim; c += lay.period, ++columns) {
            const T* xs = xf + (c * p.q) / p.n;
            double acc = 0.0;
            for (count_t r = 0; r < runs; ++r) acc += static_cast<double>(xs[r]) * dots[r];
            yrow[c] = static_cast<T>(acc);
          }
          hits[w] += (columns - 1) * runs;
          ops[w].multiplies += columns * runs;
          ops[w].adds += columns * runs;
        }
      }
    });
    for (unsigned w = 0; w < workers; ++w) {
      res.ops += ops[w];
      table.hits_ += hits[w];
      table.misses_ += misses[w];
    }
    return res;
  }
};

/// X * decompress(fp) from the factors, with reuse instrumentation. Rank 1 only.
template <typename T>
FusedResult<T> fused_matmul(const Matrix<T>& x, const FactorPair<T>& fp, const KernelOptions& opt = {}) {
  return FusedKernel<T>::run(x, fp, opt);
}

struct ReusePrediction {
  count_t distinct_runs = 0;  // per input row
  count_t total_runs = 0;     // per input row
};

/// Number of runs in a column whose phase is p.
inline count_t runs_for_phase(count_t p, count_t q, count_t n) {
  const count_t first = n - p;
  if (first >= q) return 1;
  return 1 + detail::ceil_div(q - first, n);
}

/// Closed-form run counts for one input row: runs depend only on phase, and a
/// column's phase repeats with period n / gcd(n, Q).
inline ReusePrediction predict_reuse(const LayerPlan& plan, count_t batch) {
  if (batch == 0) throw ArgumentError("predict_reuse: batch must be >= 1");
  const count_t period = phase_period(plan);
  const count_t classes = std::min(plan.r_dim, period);
  ReusePrediction out;
  for (count_t k = 0; k < classes; ++k) {
    const count_t runs = runs_for_phase((k * plan.q) % plan.n, plan.q, plan.n);
    const count_t columns = detail::ceil_div(plan.r_dim - k, period);
    out.distinct_runs += runs;
    out.total_runs += runs * columns;
  }
  return out;
}

/// Multiplies of the naive path that scales every wf copy before the dot: 2 per weight use.
inline std::uint64_t naive_multiplies(const LayerPlan& plan, count_t batch) {
  return 2 * plan.q * plan.r_dim * batch;
}

enum class Activation { identity, relu, sigmoid, tanh };

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-z));
    case Activation::tanh: return std::tanh(z);
  }
  return z;
}

/// d activation / dz evaluated at the pre-activation z; relu'(0) = 0.
inline double activation_derivative(Activation a, double z) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-z));
      return s * (1.0 - s);
    }
    case Activation::tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  throw ArgumentError("unknown activation '" + s + "'");
}

/// In-place z + bias (broadcast over rows) followed by the activation.
template <typename T, typename B>
void apply_bias_activation(Matrix<T>& z, const Matrix<B>& bias, Activation act) {
  if (bias.size() != z.cols()) {
    throw DimensionError("bias length " + std::to_string(bias.size()) + " does not match " +
                         std::to_string(z.cols()) + " outputs");
  }
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < z.cols(); ++j) {
      z(i, j) = static_cast<T>(activate(act, static_cast<double>(z(i, j)) + static_cast<double>(bias.flat()[j])));
    }
  }
}

/// a(X * W + B) from the factors. Ranks above 1 fall back to decompress + matmul.
template <typename T>
Matrix<T> layer_forward(const Matrix<T>& x, const FactorPair<T>& fp, const Matrix<T>& bias,
                        Activation act, const KernelOptions& opt = {}) {
  if (bias.size() != fp.plan.r_dim) {
    throw DimensionError("bias length " + std::to_string(bias.size()) + " does not match r_dim " +
                         std::to_string(fp.plan.r_dim));
  }
  Matrix<T> z;
  if (fp.plan.rank == 1) {
    z = fused_matmul(x, fp, opt).y;
  } else {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) {
      std::clog << "deepthin: rank " << fp.plan.rank
                << " layer uses decompress + matmul (fused kernel is rank 1 only)\n";
    }
    if (x.cols() != fp.plan.q) {
      throw DimensionError("layer_forward shape mismatch: input " + shape_string(x));
    }
    z = matmul(x, decompress(fp));
  }
  apply_bias_activation(z, bias, act);
  return z;
}

}  // namespace deepthin
