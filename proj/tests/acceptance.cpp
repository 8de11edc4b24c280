// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "deepthin/baselines.hpp"
#include "deepthin/core.hpp"
#include "deepthin/factor.hpp"
#include "deepthin/grad.hpp"
#include "deepthin/kernel.hpp"
#include "deepthin/planner.hpp"
#include "deepthin/serialize.hpp"
#include "deepthin/train.hpp"
#include "oracles.hpp"

namespace dt = deepthin;
using dt::count_t;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail << "first failure: " << what << "; ";
      pass = false;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename T>
double normwise_error(const dt::Matrix<T>& got, const dt::Matrix<T>& ref) {
  return dt::max_abs_diff(got, ref) / std::max(dt::max_abs(ref), 1e-300);
}

double log_uniform(dt::Rng& rng, double lo, double hi) { return std::exp(rng.uniform(std::log(lo), std::log(hi))); }

// ---------------------------------------------------------------------------

void kernel_equivalence(Outcome& o) {
  const auto t0 = Clock::now();
  dt::Rng rng(101);
  int plans = 0, redraws = 0;
  double worst_f = 0.0, worst_d = 0.0;
  while (plans < 1000) {
    const count_t q = rng.uniform_int(1, 2048), r = rng.uniform_int(1, 2048);
    const double alpha = log_uniform(rng, 0.001, 0.1);
    dt::LayerPlan plan;
    try {
      plan = dt::plan_layer(q, r, 1, alpha);
    } catch (const dt::PlanningError&) {
      ++redraws;
      continue;
    }
    const count_t batch = rng.uniform_int(1, 8);
    dt::Rng lr = rng.child(static_cast<std::uint64_t>(plans));
    const dt::FactorPairD fp = dt::init_factors(plan, 1.0 / std::sqrt(static_cast<double>(q)), lr);
    const dt::DenseMatrix x = dt::sample_normal(lr, 0.0, 1.0, batch, q);
    const double ed = normwise_error(dt::fused_matmul(x, fp).y, dt::matmul(x, dt::decompress(fp)));
    const dt::FactorPairF ff = fp.cast<float>();
    const dt::DenseMatrixF xf = x.cast<float>();
    const double ef = normwise_error(dt::fused_matmul(xf, ff).y, dt::matmul(xf, dt::decompress(ff)));
    worst_d = std::max(worst_d, ed);
    worst_f = std::max(worst_f, ef);
    o.require(ed <= 1e-10, "double error " + std::to_string(ed) + " at " + std::to_string(q) + "x" + std::to_string(r));
    o.require(ef <= 1e-5, "float error " + std::to_string(ef) + " at " + std::to_string(q) + "x" + std::to_string(r));
    ++plans;
  }
  const double secs = seconds_since(t0);
  o.require(secs <= 300.0, "suite took longer than 5 min");
  o.detail << plans << " plans (" << redraws << " infeasible draws skipped), worst rel error float " << worst_f
           << " double " << worst_d << ", " << secs << " s";
}

// ---------------------------------------------------------------------------

void gradient_checks(Outcome& o) {
  const auto t0 = Clock::now();
  dt::Rng rng(202);
  const dt::Activation acts[] = {dt::Activation::identity, dt::Activation::relu, dt::Activation::sigmoid,
                                 dt::Activation::tanh};
  const dt::Loss losses[] = {dt::Loss::mse, dt::Loss::softmax_cross_entropy};
  // Fixed corner shapes plus random ones, all with Q*R <= 4096.
  std::vector<std::pair<count_t, count_t>> shapes{{2, 2}, {3, 2}, {64, 64}, {4096 / 2, 2}, {2, 4096 / 2}, {1, 64}};
  for (int i = 0; i < 14; ++i) {
    const count_t q = rng.uniform_int(2, 128);
    shapes.push_back({q, rng.uniform_int(2, std::min<count_t>(128, 4096 / q))});
  }
  int configs = 0;
  double worst = 0.0;
  for (const auto& [q, r] : shapes) {
    for (count_t rank = 1; rank <= 2; ++rank) {
      const double lb = std::nextafter(dt::lower_bound_ratio(q, r, rank), 2.0);
      if (lb > 1.0) continue;  // no factorization of this shape fits in its own size
      const double alpha = std::min(1.0, std::max(lb, rng.uniform(lb, 1.0)));
      const dt::LayerPlan plan = dt::plan_layer(q, r, rank, alpha);
      const dt::FactorPairD fp = dt::init_factors(plan, 1.0 / std::sqrt(static_cast<double>(q)), rng);
      const count_t batch = rng.uniform_int(1, 3);
      const dt::DenseMatrix x = dt::sample_normal(rng, 0.0, 1.0, batch, q);
      const dt::DenseMatrix bias = dt::sample_normal(rng, 0.0, 0.1, 1, r);
      for (dt::Activation act : acts) {
        for (dt::Loss loss : losses) {
          dt::DenseMatrix target = dt::sample_normal(rng, 0.0, 1.0, batch, r);
          if (loss == dt::Loss::softmax_cross_entropy) {
            target = dt::DenseMatrix(batch, r, 0.0);
            for (count_t i = 0; i < batch; ++i) target(i, rng.uniform_int(0, r - 1)) = 1.0;
          }
          const auto rep = dt::finite_diff_check(fp, x, bias, act, loss, target, 1e-4);
          worst = std::max(worst, rep.worst());
          o.require(rep.pass, std::to_string(q) + "x" + std::to_string(r) + " rank " + std::to_string(rank) + " " +
                                  dt::to_string(act) + "/" + dt::to_string(loss) + " error " +
                                  std::to_string(rep.worst()));
          ++configs;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs <= 120.0, "gradient checks took longer than 2 min");
  o.detail << configs << " configurations, worst rel error " << worst << ", " << secs << " s";
}

// ---------------------------------------------------------------------------

void planner_exactness(Outcome& o) {
  const auto t0 = Clock::now();
  dt::Rng rng(303);
  int layer_plans = 0;
  for (int t = 0; t < 1000; ++t) {
    const count_t q = rng.uniform_int(1, 4096), r = rng.uniform_int(1, 4096), rank = rng.uniform_int(1, 4);
    const double alpha = log_uniform(rng, 1e-4, 1.0);
    const count_t lb = dt::lower_bound_size(q, r, rank);
    const bool feasible = dt::oracle::le_alpha_times(lb, alpha, q * r);
    try {
      const dt::LayerPlan p = dt::plan_layer(q, r, rank, alpha);
      o.require(feasible, "plan emitted below the lower bound");
      o.require(p.m * p.n >= q * r, "m*n < QR");
      o.require(dt::oracle::le_alpha_times(p.rank * (p.m + p.n), alpha, q * r), "rank(m+n) > alpha QR");
      o.require(dt::validate_plan(p).empty(), "plan fields inconsistent");
      ++layer_plans;
    } catch (const dt::PlanningError&) {
      o.require(!feasible, "feasible target rejected");
    }
  }
  int scans = 0;
  for (int t = 0; t < 500; ++t) {
    const count_t q = rng.uniform_int(1, 200), r = rng.uniform_int(1, 200), rank = rng.uniform_int(1, 3);
    const double lbr = static_cast<double>(dt::oracle::scan_lower_bound(q, r, rank)) / static_cast<double>(q * r);
    const double alpha = t % 2 ? std::min(1.0, lbr * rng.uniform(0.95, 1.1)) : rng.uniform(1e-3, 1.0);
    const auto want = dt::oracle::scan_n_range(q, r, rank, alpha);
    o.require(want.contiguous, "scan found a non-contiguous feasible set");
    o.require(dt::feasible_n_range(q, r, rank, alpha) == want.range, "feasible_n_range differs from scan");
    ++scans;
  }
  int networks = 0, network_failures = 0;
  double worst_excess = 0.0;
  for (int t = 0; t < 300; ++t) {
    std::vector<dt::MatrixShape> shapes;
    const auto layers = rng.uniform_int(1, 6);
    for (count_t i = 0; i < layers; ++i) {
      shapes.push_back({"w" + std::to_string(i), rng.uniform_int(8, 4096), rng.uniform_int(8, 4096)});
    }
    const count_t rank = rng.uniform_int(1, 2);
    const double target = log_uniform(rng, 1e-3, 0.5);
    const count_t extra = rng.uniform_int(0, 1) ? rng.uniform_int(0, 10000) : 0;
    count_t floors = extra, orig = extra;
    for (const auto& s : shapes) {
      floors += dt::lower_bound_size(s.q, s.r_dim, rank);
      orig += s.q * s.r_dim;
    }
    try {
      const dt::NetworkPlan np = dt::plan_network(shapes, rank, target, extra);
      worst_excess = std::max(worst_excess, np.achieved_total_ratio / target - 1.0);
      o.require(np.achieved_total_ratio <= target * (1 + 1e-9), "network over target");
      o.require(dt::oracle::le_alpha_times(np.compressed_total(), target, np.original_total()), "network total over budget");
      for (const auto& l : np.layers) {
        o.require(l.plan.compressed_size() >= dt::lower_bound_size(l.plan.q, l.plan.r_dim, rank),
                  "layer below its lower bound");
      }
      ++networks;
    } catch (const dt::PlanningError&) {
      o.require(!dt::oracle::le_alpha_times(floors, target, orig), "feasible network rejected");
      ++network_failures;
    }
  }
  const double lb2048 = dt::lower_bound_ratio(2048, 2048, 1);
  o.require(lb2048 < 1.0 / 1000, "2048x2048 lower bound not below 1/1000");
  o.require(dt::oracle::scan_lower_bound(2048, 2048, 1) == dt::lower_bound_size(2048, 2048, 1),
            "2048x2048 lower bound differs from scan");
  o.detail << layer_plans << " layer plans exact, " << scans << " scans agree, " << networks << " networks ("
           << network_failures << " correctly infeasible), max total/target - 1 = " << worst_excess
           << ", 2048x2048 lower bound " << lb2048 << ", " << seconds_since(t0) << " s";
}

// ---------------------------------------------------------------------------

void reuse_laws(Outcome& o) {
  dt::Rng rng(404);
  int checked = 0, with_reuse = 0;
  for (int t = 0; t < 200; ++t) {
    const count_t q = rng.uniform_int(1, 1024), r = rng.uniform_int(1, 1024);
    const double lb = std::nextafter(dt::lower_bound_ratio(q, r, 1), 2.0);
    if (lb > 1.0) {
      --t;
      continue;
    }
    const dt::LayerPlan plan = dt::plan_layer(q, r, 1, std::min(1.0, std::max(lb, log_uniform(rng, 1e-3, 1.0))));
    const count_t period = plan.n / std::gcd(plan.n, plan.q);
    // Phases over an unbounded target: exactly n / gcd(n, Q) of them.
    std::set<count_t> unbounded;
    for (count_t c = 0; c < 2 * period; ++c) unbounded.insert((c * plan.q) % plan.n);
    o.require(unbounded.size() == period, "phase period law");
    std::set<count_t> seen;
    for (count_t c = 0; c < r; ++c) seen.insert(dt::phase(c, plan));
    o.require(seen.size() == std::min(r, period) && dt::distinct_phase_count(plan) == seen.size(),
              "distinct phase count");

    const count_t batch = rng.uniform_int(1, 4);
    dt::Rng lr = rng.child(static_cast<std::uint64_t>(t));
    const dt::FactorPairD fp = dt::init_factors(plan, 1.0, lr);
    const dt::DenseMatrix x = dt::sample_normal(lr, 0.0, 1.0, batch, q);
    const auto res = dt::fused_matmul(x, fp);
    const auto pred = dt::predict_reuse(plan, batch);
    o.require(res.table.misses() == pred.distinct_runs * batch, "misses differ from prediction");
    o.require(res.table.hits() == (pred.total_runs - pred.distinct_runs) * batch, "hits differ from prediction");
    // Scale after dot: each run use costs at most its length plus one multiply.
    o.require(res.ops.multiplies <= batch * (q * r + pred.total_runs), "more than L+1 multiplies per run");
    if (res.table.hits() > 0) {
      ++with_reuse;
      o.require(res.ops.multiplies < dt::naive_multiplies(plan, batch), "no saving despite reuse");
    }
    ++checked;
  }
  o.detail << checked << " plans, " << with_reuse << " with predicted reuse";
}

// ---------------------------------------------------------------------------

void accuracy_orderings(Outcome& o) {
  const auto t0 = Clock::now();
  const std::vector<double> ratios{1.0 / 25, 1.0 / 50, 1.0 / 100};
  const std::vector<dt::Method> methods{dt::Method::deepthin, dt::Method::rank_fact, dt::Method::hashed,
                                        dt::Method::pruned};
  for (dt::Task task : {dt::Task::synthetic_regression, dt::Task::spiral_classification}) {
    const auto rows = dt::compare_methods(task, methods, ratios, 5);
    auto cell = [&](dt::Method m, double ratio) -> const dt::CompareRow& {
      return *std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.method == m && r.ratio == ratio; });
    };
    o.detail << dt::to_string(task) << ":";
    for (double ratio : ratios) {
      const auto& thin = cell(dt::Method::deepthin, ratio);
      if (thin.skipped) {
        o.detail << " 1/" << std::lround(1 / ratio) << " deepthin infeasible;";
        continue;
      }
      const double d = thin.median_final();
      o.detail << " 1/" << std::lround(1 / ratio) << " deepthin " << d;
      for (dt::Method m : {dt::Method::rank_fact, dt::Method::pruned, dt::Method::hashed}) {
        const auto& other = cell(m, ratio);
        if (other.skipped) {
          o.detail << " " << dt::to_string(m) << " infeasible";
          continue;
        }
        const double v = other.median_final();
        o.detail << " " << dt::to_string(m) << " " << v;
        const std::string where = dt::to_string(task) + " at ratio " + std::to_string(ratio);
        if (m == dt::Method::hashed) {
          o.require(d <= 1.05 * v, "deepthin > 1.05x hashed on " + where);
        } else {
          o.require(d < v, "deepthin not below " + dt::to_string(m) + " on " + where);
        }
      }
      o.detail << ";";
    }
    o.detail << " ";
  }
  const double secs = seconds_since(t0);
  o.require(secs <= 1800.0, "training grid took longer than 30 min");
  o.detail << secs << " s";
}

// ---------------------------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

void performance_direction(Outcome& o) {
  const count_t q = 4096, r = 4096;
  const std::vector<double> grid{0.0195, 0.0129, 0.0099, 0.0057, 0.0040, 0.0027, 0.0020, 0.0014};
  std::vector<unsigned> threads{1};
  if (const unsigned hw = std::thread::hardware_concurrency(); hw > 1) threads.push_back(hw);
  const int repeats = 31;
  dt::Rng rng(606);
  const dt::DenseMatrixF x = dt::sample_normal(rng, 0.0, 1.0, 1, q).cast<float>();
  // best[i] = best speedup over thread counts at grid[i]
  std::vector<double> best(grid.size(), 0.0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const dt::LayerPlan plan = dt::plan_layer(q, r, 1, grid[i]);
    dt::Rng lr = rng.child(i);
    const dt::FactorPairF fp = dt::init_factors(plan, 1.0 / 64.0, lr).cast<float>();
    const dt::DenseMatrixF w = dt::decompress(fp);
    for (unsigned t : threads) {
      volatile float sink = 0.0f;
      std::vector<double> dense_ms, fused_ms;
      const dt::KernelOptions opt{t};
      sink = dt::fused_matmul(x, fp, opt).y.flat()[0];
      sink = dt::matmul_threaded(x, w, t).flat()[0];
      // Interleaved so slow drift affects both equally.
      for (int k = 0; k < repeats; ++k) {
        auto a = Clock::now();
        sink = dt::matmul_threaded(x, w, t).flat()[0];
        dense_ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - a).count());
        a = Clock::now();
        sink = dt::fused_matmul(x, fp, opt).y.flat()[0];
        fused_ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - a).count());
      }
      (void)sink;
      const double s = median(dense_ms) / median(fused_ms);
      best[i] = std::max(best[i], s);
      o.detail << grid[i] << "@" << t << "t:" << s << "x ";
    }
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] <= 0.01) o.require(best[i] >= 1.5, "speedup below 1.5x at ratio " + std::to_string(grid[i]));
  }
  const auto peak = static_cast<std::size_t>(std::max_element(best.begin(), best.end()) - best.begin());
  o.require(peak != 0 && peak + 1 != grid.size(), "speedup peak at an endpoint of the grid");
  o.detail << "peak at " << grid[peak];
}

// ---------------------------------------------------------------------------

void serialization(Outcome& o) {
  dt::Rng rng(707);
  int models = 0;
  for (int t = 0; t < 1000; ++t) {
    dt::CompressedModel m;
    m.value_bytes = t % 4 == 0 ? 8 : 4;
    std::vector<dt::MatrixShape> shapes;
    const auto layers = rng.uniform_int(0, 4);
    for (count_t i = 0; i < layers; ++i) {
      shapes.push_back({"l" + std::to_string(i), rng.uniform_int(4, 300), rng.uniform_int(4, 300)});
    }
    const count_t rank = rng.uniform_int(1, 3);
    if (!shapes.empty()) {
      try {
        m.plans = dt::plan_network(shapes, rank, rng.uniform(0.05, 0.95), rng.uniform_int(0, 100));
      } catch (const dt::PlanningError&) {
        --t;
        continue;
      }
    }
    std::uint64_t values = 0;
    for (const auto& l : m.plans.layers) {
      dt::FactorPairD fp = dt::init_factors(l.plan, 1.0, rng);
      if (m.value_bytes == 4) {
        for (double& v : fp.xf.flat()) v = static_cast<float>(v);
        for (double& v : fp.wf.flat()) v = static_cast<float>(v);
      }
      std::vector<double> bias(rng.uniform_int(0, 1) ? l.plan.r_dim : 0);
      for (double& b : bias) b = static_cast<float>(rng.normal(0.0, 1.0));
      values += l.plan.rank * (l.plan.m + l.plan.n) + bias.size();
      m.factors.push_back(std::move(fp));
      m.biases.push_back(std::move(bias));
    }
    if (rng.uniform_int(0, 1)) m.metadata["k" + std::to_string(t)] = std::string(rng.uniform_int(0, 20), 'v');
    const auto bytes = dt::serialize(m);
    // Independent byte count: fixed header, metadata, per-layer record, values.
    std::uint64_t expect = 44;
    for (const auto& [k, v] : m.metadata) expect += 8 + k.size() + v.size();
    for (const auto& l : m.plans.layers) expect += 4 + l.name.size() + 49;
    expect += values * m.value_bytes;
    o.require(bytes.size() == expect, "file size differs from accounting");
    o.require(bytes.size() == m.structure_bytes() + m.payload_bytes(), "structure + payload mismatch");
    const dt::CompressedModel back = dt::deserialize(bytes);
    o.require(back == m, "round trip not bit-exact");
    o.require(dt::serialize(back) == bytes, "re-serialization differs");
    ++models;
  }
  o.detail << models << " models round-tripped";
}

// ---------------------------------------------------------------------------

void initialization_law(Outcome& o) {
  const count_t q = 512, r = 512;
  for (const auto& [rank, alpha, sigma] : {std::tuple<count_t, double, double>{1, 0.0045, 1.0},
                                           std::tuple<count_t, double, double>{4, 0.018, 0.05}}) {
    const dt::LayerPlan plan = dt::plan_layer(q, r, rank, alpha);
    double acc = 0.0;
    const int draws = 40;
    for (int s = 0; s < draws; ++s) {
      dt::Rng rng(9000 + static_cast<std::uint64_t>(s));
      const dt::DenseMatrix w = dt::decompress(dt::init_factors(plan, sigma, rng));
      double mean = 0.0;
      for (double v : w.flat()) mean += v;
      mean /= static_cast<double>(w.size());
      double sq = 0.0;
      for (double v : w.flat()) sq += (v - mean) * (v - mean);
      acc += sq / static_cast<double>(w.size() - 1);
    }
    const double ratio = acc / draws / (sigma * sigma);
    o.require(std::abs(ratio - 1.0) <= 0.1, "rank " + std::to_string(rank) + " variance off by more than 10%");
    o.detail << "rank " << rank << " (m=" << plan.m << ", n=" << plan.n << ") var/sigma^2 = " << ratio << "; ";
  }
}

}  // namespace

// Optional arguments select criteria by number; default is all of them.
int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    void (*run)(Outcome&);
  };
  const Criterion criteria[] = {
      {1, "kernel matches decompress + matmul", kernel_equivalence},
      {2, "analytic gradients match finite differences", gradient_checks},
      {3, "planner exactness", planner_exactness},
      {4, "phase and reuse laws", reuse_laws},
      {5, "toy-task accuracy orderings", accuracy_orderings},
      {6, "fused kernel speedup direction", performance_direction},
      {7, "serialization round trip and sizes", serialization},
      {8, "initialization variance", initialization_law},
  };
  bool all = true;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    all = all && o.pass;
    std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << " " << c.name << " | "
              << o.detail.str() << std::endl;
  }
  std::cout << (all ? "all criteria PASS" : "some criteria FAIL") << std::endl;
  return all ? 0 : 1;
}
