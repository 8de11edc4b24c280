// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// Analytic backward pass through a factorized layer, plus a central
// finite-difference checker.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "deepthin/core.hpp"
#include "deepthin/factor.hpp"
#include "deepthin/kernel.hpp"

namespace deepthin {

enum class Loss { mse, softmax_cross_entropy };

inline std::string to_string(Loss l) { return l == Loss::mse ? "mse" : "softmax_cross_entropy"; }

inline Loss parse_loss(const std::string& s) {
  if (s == "mse") return Loss::mse;
  if (s == "softmax_cross_entropy" || s == "ce") return Loss::softmax_cross_entropy;
  throw ArgumentError("unknown loss '" + s + "'");
}

/// Mean loss over rows. MSE averages over every element; cross entropy takes
/// (possibly soft) target distributions per row.
inline double loss_value(Loss loss, const DenseMatrix& out, const DenseMatrix& target) {
  if (out.rows() != target.rows() || out.cols() != target.cols()) {
    throw DimensionError("loss shape mismatch: " + shape_string(out) + " vs " + shape_string(target));
  }
  double total = 0.0;
  if (loss == Loss::mse) {
    for (std::size_t k = 0; k < out.size(); ++k) {
      const double d = out.flat()[k] - target.flat()[k];
      total += d * d;
    }
    return total / static_cast<double>(out.size());
  }
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const auto row = out.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < out.cols(); ++j) total -= target(i, j) * (row[j] - lse);
  }
  return total / static_cast<double>(out.rows());
}

inline DenseMatrix loss_gradient(Loss loss, const DenseMatrix& out, const DenseMatrix& target) {
  DenseMatrix g(out.rows(), out.cols());
  if (loss == Loss::mse) {
    const double scale = 2.0 / static_cast<double>(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) g.flat()[k] = scale * (out.flat()[k] - target.flat()[k]);
    return g;
  }
  const double inv = 1.0 / static_cast<double>(out.rows());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const auto row = out.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0, tsum = 0.0;
    for (double v : row) z += std::exp(v - mx);
    for (std::size_t j = 0; j < out.cols(); ++j) tsum += target(i, j);
    for (std::size_t j = 0; j < out.cols(); ++j) {
      g(i, j) = inv * (tsum * std::exp(row[j] - mx) / z - target(i, j));
    }
  }
  return g;
}

struct FactorGradients {
  DenseMatrix d_xf;  // m x rank
  DenseMatrix d_wf;  // rank x n
};

/// Pulls a dense weight gradient back through the re-layout gather and the
/// factor product. Discarded tail elements of the auxiliary matrix get zero.
inline FactorGradients factor_gradients(const DenseMatrix& d_w, const FactorPairD& fp) {
  const LayerPlan& p = fp.plan;
  if (d_w.rows() != p.q || d_w.cols() != p.r_dim) {
    throw DimensionError("factor_gradients: weight gradient " + shape_string(d_w) + " does not match plan");
  }
  DenseMatrix d_aux(p.m, p.n, 0.0);
  for (count_t col = 0; col < p.r_dim; ++col) {
    const count_t base = col * p.q;
    for (count_t row = 0; row < p.q; ++row) d_aux.flat()[base + row] = d_w(row, col);
  }
  return {matmul_nt(d_aux, fp.wf), matmul_tn(fp.xf, d_aux)};
}

struct Gradients {
  DenseMatrix d_xf;
  DenseMatrix d_wf;
  DenseMatrix d_input;
  DenseMatrix d_bias;  // 1 x R
};

/// Pre-activation x * W + b.
inline DenseMatrix pre_activation(const DenseMatrix& x, const DenseMatrix& w, const DenseMatrix& bias) {
  if (bias.size() != w.cols()) {
    throw DimensionError("bias length " + std::to_string(bias.size()) + " does not match " +
                         std::to_string(w.cols()) + " outputs");
  }
  DenseMatrix z = matmul(x, w);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += bias.flat()[j];
  return z;
}

/// upstream * a'(z), elementwise.
inline DenseMatrix activation_backward(const DenseMatrix& z, const DenseMatrix& upstream, Activation act) {
  DenseMatrix dz(z.rows(), z.cols());
  for (std::size_t k = 0; k < z.size(); ++k) {
    dz.flat()[k] = upstream.flat()[k] * activation_derivative(act, z.flat()[k]);
  }
  return dz;
}

inline DenseMatrix column_sums(const DenseMatrix& a) {
  DenseMatrix s(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s(0, j) += a(i, j);
  return s;
}

inline Gradients layer_backward(const DenseMatrix& x, const FactorPairD& fp, const DenseMatrix& bias,
                                Activation act, const DenseMatrix& upstream) {
  if (x.cols() != fp.plan.q) {
    throw DimensionError("layer_backward: input " + shape_string(x) + " does not match Q=" + std::to_string(fp.plan.q));
  }
  if (upstream.rows() != x.rows() || upstream.cols() != fp.plan.r_dim) {
    throw DimensionError("layer_backward: upstream " + shape_string(upstream) + " does not match output " +
                         std::to_string(x.rows()) + "x" + std::to_string(fp.plan.r_dim));
  }
  const DenseMatrix w = decompress(fp);
  const DenseMatrix z = pre_activation(x, w, bias);
  const DenseMatrix dz = activation_backward(z, upstream, act);
  const DenseMatrix d_w = matmul_tn(x, dz);
  auto fg = factor_gradients(d_w, fp);
  return {std::move(fg.d_xf), std::move(fg.d_wf), matmul_nt(dz, w), column_sums(dz)};
}

struct GradCheckReport {
  double max_rel_xf = 0.0;
  double max_rel_wf = 0.0;
  double max_rel_input = 0.0;
  double max_rel_bias = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  double worst() const { return std::max({max_rel_xf, max_rel_wf, max_rel_input, max_rel_bias}); }
};

/// |a - f| / max(|a|, |f|, 1e-6): relative, switching to absolute for near-zero gradients.
inline double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

namespace detail {

using Wide = long double;

inline Wide wide_activate(Activation act, Wide v) {
  switch (act) {
    case Activation::identity: return v;
    case Activation::relu: return v > 0 ? v : 0;
    case Activation::sigmoid: return 1 / (1 + std::exp(-v));
    case Activation::tanh: return std::tanh(v);
  }
  return v;
}

/// Extended-precision loss around a base pre-activation z0. change() reports
/// how far the loss moves when only the listed columns of z0 are replaced.
class WideLoss {
 public:
  WideLoss(Loss loss, Activation act, const Matrix<Wide>& z0, const DenseMatrix& target)
      : loss_(loss), act_(act), target_(target), a0_(z0.rows(), z0.cols()), e0_(z0.rows(), z0.cols()),
        shift_(z0.rows()), sum0_(z0.rows(), 0) {
    for (std::size_t k = 0; k < z0.size(); ++k) a0_.flat()[k] = wide_activate(act, z0.flat()[k]);
    if (loss == Loss::softmax_cross_entropy) {
      for (std::size_t i = 0; i < a0_.rows(); ++i) {
        const auto row = a0_.row(i);
        shift_[i] = *std::max_element(row.begin(), row.end());
        for (std::size_t j = 0; j < a0_.cols(); ++j) sum0_[i] += e0_(i, j) = std::exp(row[j] - shift_[i]);
      }
    }
  }

  /// loss(z) - loss(z0), where z differs from z0 only in `cols`.
  Wide change(const Matrix<Wide>& z, const std::vector<count_t>& cols) const {
    Wide total = 0;
    if (loss_ == Loss::mse) {
      for (std::size_t i = 0; i < z.rows(); ++i) {
        for (count_t c : cols) {
          const Wide d1 = wide_activate(act_, z(i, c)) - target_(i, c), d0 = a0_(i, c) - target_(i, c);
          total += (d1 - d0) * (d1 + d0);
        }
      }
      return total / static_cast<Wide>(z.size());
    }
    for (std::size_t i = 0; i < z.rows(); ++i) {
      Wide dsum = 0, dlin = 0;
      for (count_t c : cols) {
        const Wide a = wide_activate(act_, z(i, c));
        dsum += std::exp(a - shift_[i]) - e0_(i, c);
        dlin += target_(i, c) * (a - a0_(i, c));
      }
      // every target row sums to one for cross entropy; log1p keeps the small change exact
      Wide mass = 0;
      for (std::size_t j = 0; j < z.cols(); ++j) mass += target_(i, j);
      total += mass * std::log1p(dsum / sum0_[i]) - dlin;
    }
    return total / static_cast<Wide>(z.rows());
  }

 private:
  Loss loss_;
  Activation act_;
  const DenseMatrix& target_;
  Matrix<Wide> a0_, e0_;
  std::vector<Wide> shift_, sum0_;
};

}  // namespace detail

/// Compares layer_backward against central differences of loss(a(xW + b), target).
/// The numeric side is evaluated in extended precision: each perturbation updates
/// the reference pre-activation by exactly the change it causes.
/// `tamper` may modify the analytic gradients first (negative controls).
inline GradCheckReport finite_diff_check(const FactorPairD& fp, const DenseMatrix& x, const DenseMatrix& bias,
                                         Activation act, Loss loss, const DenseMatrix& target, double tolerance,
                                         const std::function<void(Gradients&)>& tamper = {},
                                         double eps = 1e-5) {
  using detail::Wide;
  const LayerPlan& p = fp.plan;
  if (target.rows() != x.rows() || target.cols() != p.r_dim || bias.size() != p.r_dim) {
    throw DimensionError("finite_diff_check: target or bias shape mismatch");
  }
  DenseMatrix out = pre_activation(x, decompress(fp), bias);
  for (double& v : out.flat()) v = activate(act, v);
  Gradients g = layer_backward(x, fp, bias, act, loss_gradient(loss, out, target));
  if (tamper) tamper(g);

  const Matrix<Wide> w = decompress(fp.cast<Wide>());
  Matrix<Wide> z0 = matmul(x.cast<Wide>(), w);
  for (std::size_t i = 0; i < z0.rows(); ++i)
    for (std::size_t j = 0; j < z0.cols(); ++j) z0(i, j) += bias(0, j);

  const detail::WideLoss ref(loss, act, z0, target);

  const count_t total = p.q * p.r_dim;
  Matrix<Wide> z = z0;
  std::vector<count_t> cols;
  std::vector<char> touched(p.r_dim, 0);
  // Adds x(:, row) * dw to z(:, col) for the weight at flat index k.
  auto bump_weight = [&](count_t k, Wide dw) {
    const count_t row = k % p.q, col = k / p.q;
    for (std::size_t i = 0; i < z.rows(); ++i) z(i, col) += static_cast<Wide>(x(i, row)) * dw;
    if (!touched[col]) {
      touched[col] = 1;
      cols.push_back(col);
    }
  };
  auto all_cols = [&] {
    for (count_t c = 0; c < p.r_dim; ++c) touched[c] = 1;
    cols.resize(p.r_dim);
    std::iota(cols.begin(), cols.end(), count_t{0});
  };

  // shift(k, d) moves element k by d, recording what it touched in z and cols.
  auto check = [&](const DenseMatrix& primal, auto shift, const DenseMatrix& analytic) {
    double worst = 0.0;
    auto side = [&](std::size_t k, Wide d) {
      shift(k, d);
      const Wide change = ref.change(z, cols);
      for (count_t c : cols) {
        for (std::size_t i = 0; i < z.rows(); ++i) z(i, c) = z0(i, c);
        touched[c] = 0;
      }
      cols.clear();
      return change;
    };
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      const double v = primal.flat()[k];
      const double hi = v + eps, lo = v - eps;  // divide by the steps actually taken
      const Wide up = static_cast<Wide>(hi) - v, down = static_cast<Wide>(lo) - v;
      const Wide diff = side(k, up) - side(k, down);
      worst = std::max(worst, gradient_rel_error(analytic.flat()[k], static_cast<double>(diff / (up - down))));
    }
    return worst;
  };

  GradCheckReport rep;
  rep.tolerance = tolerance;
  rep.max_rel_xf = check(fp.xf, [&](std::size_t k, Wide d) {
    const count_t j = k / p.rank, t = k % p.rank;
    for (count_t c = 0; c < p.n && j * p.n + c < total; ++c) bump_weight(j * p.n + c, d * fp.wf(t, c));
  }, g.d_xf);
  rep.max_rel_wf = check(fp.wf, [&](std::size_t k, Wide d) {
    const count_t t = k / p.n, c = k % p.n;
    for (count_t j = 0; j < p.m && j * p.n + c < total; ++j) bump_weight(j * p.n + c, d * fp.xf(j, t));
  }, g.d_wf);
  rep.max_rel_input = check(x, [&](std::size_t k, Wide d) {
    const std::size_t i = k / x.cols(), row = k % x.cols();
    for (std::size_t col = 0; col < z.cols(); ++col) z(i, col) += d * w(row, col);
    all_cols();
  }, g.d_input);
  rep.max_rel_bias = check(bias, [&](std::size_t k, Wide d) {
    for (std::size_t i = 0; i < z.rows(); ++i) z(i, k) += d;
    touched[k] = 1;
    cols.push_back(static_cast<count_t>(k));
  }, g.d_bias);
  rep.pass = rep.worst() <= tolerance;
  return rep;
}

}  // namespace deepthin
