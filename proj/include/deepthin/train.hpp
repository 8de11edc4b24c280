// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// Toy-scale training of MLPs whose hidden-to-hidden weight matrices are
// produced by a compression method, for comparing methods at equal storage.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "deepthin/baselines.hpp"
#include "deepthin/core.hpp"
#include "deepthin/factor.hpp"
#include "deepthin/grad.hpp"
#include "deepthin/planner.hpp"

namespace deepthin {

enum class Task { synthetic_regression, spiral_classification };
enum class Method { deepthin, rank_fact, hashed, pruned, same_size, dense };

inline std::string to_string(Task t) {
  return t == Task::synthetic_regression ? "synthetic_regression" : "spiral_classification";
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::deepthin: return "deepthin";
    case Method::rank_fact: return "rank_fact";
    case Method::hashed: return "hashed";
    case Method::pruned: return "pruned";
    case Method::same_size: return "same_size";
    case Method::dense: return "dense";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "synthetic_regression" || s == "regression") return Task::synthetic_regression;
  if (s == "spiral_classification" || s == "spiral") return Task::spiral_classification;
  throw ArgumentError("unknown task '" + s + "'");
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::deepthin, Method::rank_fact, Method::hashed, Method::pruned, Method::same_size,
                   Method::dense}) {
    if (to_string(m) == s) return m;
  }
  throw ArgumentError("unknown method '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 0.05;
  count_t epochs = 30;
  count_t batch_size = 32;
  std::uint64_t seed = 1;
  Loss loss = Loss::mse;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be > 0");
    if (epochs < 1 || batch_size < 1) throw ArgumentError("epochs and batch_size must be >= 1");
  }
};

struct Dataset {
  DenseMatrix x_train, y_train, x_val, y_val;
  Loss loss = Loss::mse;
};

struct Architecture {
  count_t input = 0;
  std::vector<count_t> hidden;
  count_t output = 0;
  Activation hidden_activation = Activation::tanh;

  std::vector<MatrixShape> shapes() const {
    std::vector<MatrixShape> out;
    count_t prev = input;
    for (std::size_t i = 0; i <= hidden.size(); ++i) {
      const count_t next = i < hidden.size() ? hidden[i] : output;
      out.push_back({"w" + std::to_string(i), prev, next});
      prev = next;
    }
    return out;
  }
  /// Hidden-to-hidden layers are the compressed ones; input and output projections stay dense.
  bool compressible(std::size_t layer) const { return layer > 0 && layer < hidden.size(); }
};

inline constexpr count_t kToyHidden = 256;

inline Architecture task_architecture(Task task, double width_scale = 1.0) {
  const auto h = static_cast<count_t>(std::max(1.0, std::round(kToyHidden * width_scale)));
  if (task == Task::spiral_classification) return {2, {h, h, h}, 3, Activation::tanh};
  return {64, {h, h, h}, 64, Activation::tanh};
}

inline TrainConfig default_config(Task task) {
  TrainConfig cfg;
  if (task == Task::spiral_classification) {
    cfg.loss = Loss::softmax_cross_entropy;
    cfg.learning_rate = 0.1;
    cfg.epochs = 30;
  } else {
    cfg.loss = Loss::mse;
    cfg.learning_rate = 0.05;
    cfg.epochs = 4;
  }
  return cfg;
}

/// Three interleaved noisy spiral arms in 2-D, one-hot labels.
inline void spiral_points(Rng& rng, count_t per_class, DenseMatrix& x, DenseMatrix& y) {
  const count_t classes = 3;
  x = DenseMatrix(per_class * classes, 2);
  y = DenseMatrix(per_class * classes, classes);
  for (count_t c = 0; c < classes; ++c) {
    for (count_t i = 0; i < per_class; ++i) {
      const count_t row = c * per_class + i;
      const double t = rng.uniform(0.05, 1.0);
      const double theta = 8.0 * t + 2.0 * std::numbers::pi * static_cast<double>(c) / 3.0 + rng.normal(0.0, 0.2);
      x(row, 0) = t * std::sin(theta);
      x(row, 1) = t * std::cos(theta);
      y(row, c) = 1.0;
    }
  }
}

/// Targets tanh(x A) B + noise with a rank-8 planted interaction.
inline Dataset make_regression(std::uint64_t seed, count_t train = 8192, count_t val = 512) {
  Rng rng(splitmix64(seed ^ 0x5EED0001ULL));
  const count_t dim = 64, planted = 8;
  const DenseMatrix a = sample_normal(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(dim)), dim, planted);
  const DenseMatrix b = sample_normal(rng, 0.0, 1.0, planted, dim);
  auto make = [&](count_t rows, DenseMatrix& x, DenseMatrix& y) {
    x = sample_normal(rng, 0.0, 1.0, rows, dim);
    DenseMatrix h = matmul(x, a);
    for (double& v : h.flat()) v = std::tanh(2.0 * v);
    y = matmul(h, b);
    for (double& v : y.flat()) v += rng.normal(0.0, 0.1);
  };
  Dataset d;
  d.loss = Loss::mse;
  make(train, d.x_train, d.y_train);
  make(val, d.x_val, d.y_val);
  return d;
}

inline Dataset make_spiral(std::uint64_t seed, count_t train_per_class = 400, count_t val_per_class = 200) {
  Rng rng(splitmix64(seed ^ 0x5EED0002ULL));
  Dataset d;
  d.loss = Loss::softmax_cross_entropy;
  spiral_points(rng, train_per_class, d.x_train, d.y_train);
  spiral_points(rng, val_per_class, d.x_val, d.y_val);
  return d;
}

inline Dataset make_dataset(Task task, std::uint64_t seed) {
  return task == Task::spiral_classification ? make_spiral(seed) : make_regression(seed);
}

// ---------------------------------------------------------------------------
// Weight sources

/// Something that produces a dense Q x R weight for the forward pass and
/// accepts the dense weight gradient.
class WeightSource {
 public:
  virtual ~WeightSource() = default;
  virtual DenseMatrix materialize() const = 0;
  virtual void sgd(const DenseMatrix& d_w, double lr) = 0;
  virtual count_t stored_params() const = 0;
  virtual void after_step(count_t /*step*/) {}
};

class DenseSource final : public WeightSource {
 public:
  DenseSource(count_t q, count_t r, double sigma, Rng& rng) : w_(sample_normal(rng, 0.0, sigma, q, r)) {}
  DenseMatrix materialize() const override { return w_; }
  void sgd(const DenseMatrix& d_w, double lr) override {
    for (std::size_t k = 0; k < w_.size(); ++k) w_.flat()[k] -= lr * d_w.flat()[k];
  }
  count_t stored_params() const override { return w_.size(); }

 private:
  DenseMatrix w_;
};

class DeepThinSource final : public WeightSource {
 public:
  DeepThinSource(const LayerPlan& plan, double sigma, Rng& rng) : fp_(init_factors(plan, sigma, rng)) {}
  DenseMatrix materialize() const override { return decompress(fp_); }
  void sgd(const DenseMatrix& d_w, double lr) override {
    const auto g = factor_gradients(d_w, fp_);
    for (std::size_t k = 0; k < g.d_xf.size(); ++k) fp_.xf.flat()[k] -= lr * g.d_xf.flat()[k];
    for (std::size_t k = 0; k < g.d_wf.size(); ++k) fp_.wf.flat()[k] -= lr * g.d_wf.flat()[k];
  }
  count_t stored_params() const override { return fp_.plan.compressed_size(); }
  const FactorPairD& factors() const { return fp_; }

 private:
  FactorPairD fp_;
};

class RankFactSource final : public WeightSource {
 public:
  RankFactSource(count_t q, count_t r, count_t rank, double sigma, Rng& rng) {
    layer_.xf = sample_normal(rng, 0.0, sigma, q, rank);
    layer_.wf = sample_normal(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(rank)), rank, r);
  }
  DenseMatrix materialize() const override { return layer_.materialize(); }
  void sgd(const DenseMatrix& d_w, double lr) override {
    const DenseMatrix d_xf = matmul(d_w, transpose(layer_.wf));
    const DenseMatrix d_wf = matmul_tn(layer_.xf, d_w);
    for (std::size_t k = 0; k < d_xf.size(); ++k) layer_.xf.flat()[k] -= lr * d_xf.flat()[k];
    for (std::size_t k = 0; k < d_wf.size(); ++k) layer_.wf.flat()[k] -= lr * d_wf.flat()[k];
  }
  count_t stored_params() const override { return layer_.stored_size(); }

 private:
  RankFactLayer layer_;
};

class HashedSource final : public WeightSource {
 public:
  HashedSource(count_t q, count_t r, count_t bins, std::uint64_t hash_seed, double sigma, Rng& rng) {
    layer_.q = q;
    layer_.r_dim = r;
    layer_.hash_seed = hash_seed;
    layer_.bins.resize(bins);
    for (double& b : layer_.bins) b = rng.normal(0.0, sigma);
    index_ = hashed_index_map(layer_);
  }
  DenseMatrix materialize() const override { return deepthin::materialize(layer_, index_); }
  void sgd(const DenseMatrix& d_w, double lr) override {
    std::vector<double> g(layer_.bins.size(), 0.0);
    for (std::size_t k = 0; k < index_.size(); ++k) g[index_[k]] += d_w.flat()[k];
    for (std::size_t b = 0; b < g.size(); ++b) layer_.bins[b] -= lr * g[b];
  }
  count_t stored_params() const override { return layer_.bins.size(); }

 private:
  HashedLayer layer_;
  std::vector<count_t> index_;
};

class PrunedSource final : public WeightSource {
 public:
  PrunedSource(count_t q, count_t r, std::vector<PruneStep> schedule, double sigma, Rng& rng)
      : layer_(sample_normal(rng, 0.0, sigma, q, r), std::move(schedule)) {}
  DenseMatrix materialize() const override { return layer_.masked(); }
  void sgd(const DenseMatrix& d_w, double lr) override {
    for (std::size_t k = 0; k < d_w.size(); ++k) {
      if (layer_.mask[k]) layer_.weights.flat()[k] -= lr * d_w.flat()[k];
    }
  }
  /// Stored size expressed in 4-byte value units of the final CSR form.
  count_t stored_params() const override {
    return detail::ceil_div(csr_size(layer_.nnz(), layer_.weights.rows()), 4);
  }
  void after_step(count_t step) override { layer_ = prune_step(std::move(layer_), step); }

 private:
  PrunedLayer layer_;
};

// ---------------------------------------------------------------------------

struct EpochRecord {
  count_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  count_t compressed_params = 0;  // stored size of the compressible matrices
  count_t original_params = 0;    // their uncompressed size
  count_t total_params = 0;       // every stored parameter, biases included

  double final_val_loss() const { return history.empty() ? 0.0 : history.back().val_loss; }
  double best_val_loss() const {
    double best = history.empty() ? 0.0 : history.front().val_loss;
    for (const auto& h : history) best = std::min(best, h.val_loss);
    return best;
  }
};

struct Mlp {
  Architecture arch;
  std::vector<std::unique_ptr<WeightSource>> weights;
  std::vector<DenseMatrix> biases;

  /// Forward pass keeping pre-activations and layer inputs for backward.
  DenseMatrix forward(const DenseMatrix& x, std::vector<DenseMatrix>* inputs = nullptr,
                      std::vector<DenseMatrix>* pre = nullptr, std::vector<DenseMatrix>* ws = nullptr) const {
    DenseMatrix a = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      DenseMatrix w = weights[l]->materialize();
      DenseMatrix z = pre_activation(a, w, biases[l]);
      if (inputs) inputs->push_back(std::move(a));
      a = z;
      if (l + 1 < weights.size()) for (double& v : a.flat()) v = activate(arch.hidden_activation, v);
      if (pre) pre->push_back(std::move(z));
      if (ws) ws->push_back(std::move(w));
    }
    return a;
  }
};

namespace detail {

inline DenseMatrix gather_rows(const DenseMatrix& src, const std::vector<std::size_t>& idx, std::size_t lo,
                               std::size_t hi) {
  DenseMatrix out(hi - lo, src.cols());
  for (std::size_t i = lo; i < hi; ++i) {
    std::copy(src.row(idx[i]).begin(), src.row(idx[i]).end(), out.row(i - lo).begin());
  }
  return out;
}

}  // namespace detail

/// Builds the network for a method at a storage ratio of the compressible matrices.
inline Mlp build_model(Task task, Method method, double ratio, count_t total_steps, Rng& rng) {
  double width = 1.0;
  if (method == Method::same_size) {
    const Architecture base = task_architecture(task);
    std::vector<MatrixShape> inner;
    for (std::size_t l = 0; l < base.shapes().size(); ++l)
      if (base.compressible(l)) inner.push_back(base.shapes()[l]);
    width = same_size_hint(inner, ratio, /*fixed_io=*/false);
  }
  Mlp net;
  net.arch = task_architecture(task, width);
  const auto shapes = net.arch.shapes();

  std::vector<MatrixShape> compressed;
  for (std::size_t l = 0; l < shapes.size(); ++l)
    if (net.arch.compressible(l)) compressed.push_back(shapes[l]);

  std::optional<NetworkPlan> plan;
  if (method == Method::deepthin) plan = plan_network(compressed, 1, ratio);

  std::size_t ci = 0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const count_t q = shapes[l].q, r = shapes[l].r_dim;
    const double sigma = 1.0 / std::sqrt(static_cast<double>(q));
    Rng lrng = rng.child(l);
    const bool squeeze = net.arch.compressible(l) && method != Method::dense && method != Method::same_size;
    if (!squeeze) {
      net.weights.push_back(std::make_unique<DenseSource>(q, r, sigma, lrng));
    } else if (method == Method::deepthin) {
      net.weights.push_back(std::make_unique<DeepThinSource>(plan->layers[ci].plan, sigma, lrng));
    } else if (method == Method::rank_fact) {
      const count_t rank = rank_for_ratio(q, r, ratio);
      if (rank == 0) {
        throw PlanningError("rank factorization cannot reach ratio " + std::to_string(ratio) + " for " +
                                shapes[l].name,
                            {{shapes[l].name, static_cast<double>(q + r) / static_cast<double>(q * r)}});
      }
      net.weights.push_back(std::make_unique<RankFactSource>(q, r, rank, sigma, lrng));
    } else if (method == Method::hashed) {
      const count_t bins = exact_floor_mul(ratio, q * r);
      if (bins == 0) throw PlanningError("hashed layer has no bins at ratio " + std::to_string(ratio), {});
      net.weights.push_back(std::make_unique<HashedSource>(q, r, bins, splitmix64(rng.seed() + l), sigma, lrng));
    } else {
      const count_t nnz = csr_max_nnz(ratio, q, r);
      if (nnz == 0) {
        throw PlanningError("CSR row pointers alone exceed ratio " + std::to_string(ratio) + " for " +
                                shapes[l].name,
                            {{shapes[l].name, static_cast<double>(csr_size(1, q)) / static_cast<double>(4 * q * r)}});
      }
      // Prune in 10 steps between 25% and 65% of training, then fine-tune.
      const count_t first = std::max<count_t>(1, total_steps / 4);
      const count_t every = std::max<count_t>(1, total_steps * 2 / 5 / 10);
      const double final_density = static_cast<double>(nnz) / static_cast<double>(q * r);
      net.weights.push_back(std::make_unique<PrunedSource>(q, r, geometric_schedule(first, every, 10, final_density),
                                                           sigma, lrng));
    }
    if (net.arch.compressible(l)) ++ci;
    net.biases.emplace_back(1, r, 0.0);
  }
  return net;
}

/// Per-epoch (train, validation) loss of SGD training. Deterministic for a seed.
inline TrainResult train_toy(Task task, Method method, double ratio, const TrainConfig& cfg) {
  cfg.validate();
  if (method == Method::dense) ratio = 1.0;
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ArgumentError("ratio must be in (0, 1]");
  const Dataset data = make_dataset(task, cfg.seed);
  if ((task == Task::spiral_classification) != (cfg.loss == Loss::softmax_cross_entropy)) {
    throw ArgumentError("loss " + to_string(cfg.loss) + " does not fit task " + to_string(task));
  }
  const std::size_t n = data.x_train.rows();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  Rng rng(splitmix64(cfg.seed ^ 0xA11CE5ULL));
  Mlp net = build_model(task, method, ratio, cfg.epochs * steps_per_epoch, rng);

  TrainResult res;
  const Architecture base = task_architecture(task);
  for (std::size_t l = 0; l < base.shapes().size(); ++l) {
    if (base.compressible(l)) res.original_params += base.shapes()[l].q * base.shapes()[l].r_dim;
  }
  for (const auto& b : net.biases) res.total_params += b.size();

  Rng order_rng = rng.child(0xBA7C4);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  count_t step = 0;
  const std::size_t layers = net.weights.size();
  for (count_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < n; lo += cfg.batch_size) {
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      const DenseMatrix xb = detail::gather_rows(data.x_train, order, lo, hi);
      const DenseMatrix yb = detail::gather_rows(data.y_train, order, lo, hi);
      std::vector<DenseMatrix> inputs, pre, ws;
      const DenseMatrix out = net.forward(xb, &inputs, &pre, &ws);
      loss_sum += loss_value(cfg.loss, out, yb) * static_cast<double>(hi - lo);
      DenseMatrix dz = loss_gradient(cfg.loss, out, yb);
      for (std::size_t l = layers; l-- > 0;) {
        const DenseMatrix d_w = matmul_tn(inputs[l], dz);
        const DenseMatrix d_b = column_sums(dz);
        if (l > 0) {
          const DenseMatrix da = matmul(dz, transpose(ws[l]));
          dz = activation_backward(pre[l - 1], da, net.arch.hidden_activation);
        }
        net.weights[l]->sgd(d_w, cfg.learning_rate);
        for (std::size_t j = 0; j < d_b.size(); ++j) net.biases[l].flat()[j] -= cfg.learning_rate * d_b.flat()[j];
      }
      ++step;
      for (auto& w : net.weights) w->after_step(step);
    }
    const double val = loss_value(cfg.loss, net.forward(data.x_val), data.y_val);
    res.history.push_back({epoch, loss_sum / static_cast<double>(n), val});
  }
  for (std::size_t l = 0; l < layers; ++l) {
    res.total_params += net.weights[l]->stored_params();
    if (net.arch.compressible(l)) res.compressed_params += net.weights[l]->stored_params();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Method grid

struct CompareRow {
  Task task = Task::synthetic_regression;
  Method method = Method::dense;
  double ratio = 1.0;
  bool skipped = false;
  std::string reason;
  std::vector<double> final_losses;  // one per seed
  std::vector<double> best_losses;
  count_t compressed_params = 0;
  count_t original_params = 0;

  /// A diverged (NaN) run counts as +inf.
  static double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    for (double& x : v) if (std::isnan(x)) x = std::numeric_limits<double>::infinity();
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  }
  double median_final() const { return median(final_losses); }
  double median_best() const { return median(best_losses); }
};

/// Trains every (method, ratio) cell for seeds 1..seeds. Dense runs once at ratio 1.
/// Cells a method cannot reach are returned as skipped rows with the reason.
inline std::vector<CompareRow> compare_methods(Task task, const std::vector<Method>& methods,
                                               const std::vector<double>& ratios, count_t seeds,
                                               const std::function<void(const CompareRow&)>& on_row = {}) {
  if (seeds == 0) throw ArgumentError("compare_methods: seeds must be >= 1");
  std::vector<CompareRow> rows;
  for (Method m : methods) {
    const std::vector<double> cells = m == Method::dense ? std::vector<double>{1.0} : ratios;
    for (double ratio : cells) {
      CompareRow row;
      row.task = task;
      row.method = m;
      row.ratio = ratio;
      for (count_t s = 1; s <= seeds && !row.skipped; ++s) {
        TrainConfig cfg = default_config(task);
        cfg.seed = s;
        try {
          const TrainResult r = train_toy(task, m, ratio, cfg);
          row.final_losses.push_back(r.final_val_loss());
          row.best_losses.push_back(r.best_val_loss());
          row.compressed_params = r.compressed_params;
          row.original_params = r.original_params;
        } catch (const PlanningError& e) {
          row.skipped = true;
          row.reason = e.what();
        }
      }
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace deepthin
