// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// deepthin: plan, compress, inspect, benchmark and train compressed layers.
//
// Exit status: 0 ok, 1 usage or parse error, 2 infeasible target, 3 failed check.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "deepthin/baselines.hpp"
#include "deepthin/core.hpp"
#include "deepthin/factor.hpp"
#include "deepthin/grad.hpp"
#include "deepthin/io.hpp"
#include "deepthin/kernel.hpp"
#include "deepthin/planner.hpp"
#include "deepthin/serialize.hpp"
#include "deepthin/train.hpp"

namespace dt = deepthin;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kInfeasible = 2;
constexpr int kCheckFailed = 3;

/// DEEPTHIN_THREADS, when set, replaces every --threads value.
std::optional<unsigned> env_threads() {
  const char* env = std::getenv("DEEPTHIN_THREADS");
  if (!env || !*env) return std::nullopt;
  const std::string s(env);
  if (s.find_first_not_of("0123456789") != std::string::npos || s.size() > 6) {
    throw dt::ArgumentError("DEEPTHIN_THREADS is not a count: " + s);
  }
  return static_cast<unsigned>(std::stoul(s));
}

std::string fmt(double v, int digits = 6) {
  std::ostringstream ss;
  ss << std::setprecision(digits) << v;
  return ss.str();
}

void print_lower_bounds(const dt::PlanningError& e) {
  std::cerr << "infeasible: " << e.what() << "\n";
  std::cerr << "name,lower_bound_ratio\n";
  for (const auto& b : e.lower_bounds()) std::cerr << b.name << "," << fmt(b.lower_bound, 9) << "\n";
}

// ---------------------------------------------------------------------------

struct PlanArgs {
  std::string shapes;
  double ratio = 0.01;
  dt::count_t rank = 1;
  dt::count_t bias_params = 0;
};

void print_plan(const dt::NetworkPlan& plan) {
  std::cout << "name,Q,R,m,n,achieved_ratio,lcm,floor_hit\n";
  for (const auto& l : plan.layers) {
    const bool hit = std::find(plan.floor_hits.begin(), plan.floor_hits.end(), l.name) != plan.floor_hits.end();
    std::cout << l.name << "," << l.plan.q << "," << l.plan.r_dim << "," << l.plan.m << "," << l.plan.n << ","
              << fmt(l.plan.achieved_ratio, 9) << "," << l.plan.lcm_nq << "," << (hit ? 1 : 0) << "\n";
  }
  std::cout << "# total " << plan.compressed_total() << "/" << plan.original_total() << " = "
            << fmt(plan.achieved_total_ratio, 9) << " (target " << fmt(plan.target_ratio, 9) << ")\n";
}

int cmd_plan(const PlanArgs& a) {
  const auto shapes = dt::load_shapes(a.shapes);
  try {
    print_plan(dt::plan_network(shapes, a.rank, a.ratio, a.bias_params));
  } catch (const dt::PlanningError& e) {
    print_lower_bounds(e);
    return kInfeasible;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct CompressArgs {
  std::string shapes;
  std::string out;
  double ratio = 0.01;
  dt::count_t rank = 1;
  std::uint64_t seed = 1;
  std::vector<std::string> weights;  // name=path
  int sweeps = 25;
  unsigned value_bytes = 4;
  bool bias = true;
};

int cmd_compress(const CompressArgs& a) {
  const auto shapes = dt::load_shapes(a.shapes);
  std::map<std::string, std::string> sources;
  for (const auto& w : a.weights) {
    const auto eq = w.find('=');
    if (eq == std::string::npos || eq == 0) throw dt::ArgumentError("--weights expects name=path, got '" + w + "'");
    sources[w.substr(0, eq)] = w.substr(eq + 1);
  }
  for (const auto& [name, path] : sources) {
    if (std::none_of(shapes.begin(), shapes.end(), [&](const dt::MatrixShape& s) { return s.name == name; })) {
      throw dt::ArgumentError("--weights names unknown matrix '" + name + "'");
    }
  }
  dt::count_t bias_params = 0;
  if (a.bias) for (const auto& s : shapes) bias_params += s.r_dim;

  dt::CompressedModel model;
  try {
    model.plans = dt::plan_network(shapes, a.rank, a.ratio, bias_params);
  } catch (const dt::PlanningError& e) {
    print_lower_bounds(e);
    return kInfeasible;
  }
  model.value_bytes = a.value_bytes;
  model.metadata["seed"] = std::to_string(a.seed);
  model.metadata["rank"] = std::to_string(a.rank);
  dt::Rng rng(a.seed);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const dt::LayerPlan& plan = model.plans.layers[i].plan;
    dt::Rng lrng = rng.child(i);
    dt::FactorPairD fp = dt::init_factors(plan, 1.0 / std::sqrt(static_cast<double>(plan.q)), lrng);
    if (const auto it = sources.find(shapes[i].name); it != sources.end()) {
      const dt::DenseMatrix target = dt::load_matrix(it->second);
      fp = dt::fit_factors(target, std::move(fp), a.sweeps);
      const double err = dt::max_abs_diff(dt::decompress(fp), target);
      std::cerr << shapes[i].name << ": fitted, max abs error " << fmt(err) << "\n";
    }
    if (a.value_bytes == 4) {
      for (double& v : fp.xf.flat()) v = static_cast<float>(v);
      for (double& v : fp.wf.flat()) v = static_cast<float>(v);
    }
    model.factors.push_back(std::move(fp));
    model.biases.emplace_back(a.bias ? shapes[i].r_dim : 0, 0.0);
  }
  const auto bytes = dt::serialize(model);
  dt::write_file(a.out, bytes);
  print_plan(model.plans);
  std::cout << "# wrote " << bytes.size() << " bytes to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct DecompressArgs {
  std::string model;
  std::string out_dir;
  std::string layer;
  bool info = false;
};

int cmd_decompress(const DecompressArgs& a) {
  const auto bytes = dt::read_file(a.model);
  const dt::CompressedModel model = dt::deserialize(bytes);
  if (a.info) {
    std::cout << "# format_version " << model.format_version << ", " << bytes.size() << " bytes, "
              << model.structure_bytes() << " structure + " << model.payload_bytes() << " payload\n";
    for (const auto& [k, v] : model.metadata) std::cout << "# " << k << " = " << v << "\n";
    print_plan(model.plans);
    return kOk;
  }
  bool found = a.layer.empty();
  for (std::size_t i = 0; i < model.factors.size(); ++i) {
    const std::string& name = model.plans.layers[i].name;
    if (!a.layer.empty() && name != a.layer) continue;
    found = true;
    const dt::DenseMatrix w = dt::decompress(model.factors[i]);
    if (a.out_dir.empty()) {
      if (a.layer.empty()) std::cout << "# " << name << " " << w.rows() << "x" << w.cols() << "\n";
      dt::write_matrix(std::cout, w);
    } else {
      std::filesystem::create_directories(a.out_dir);
      const std::string path = (std::filesystem::path(a.out_dir) / (name + ".txt")).string();
      dt::save_matrix(path, w);
      std::cerr << "wrote " << path << "\n";
    }
  }
  if (!found) throw dt::ArgumentError("no layer named '" + a.layer + "' in " + a.model);
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  dt::count_t q = 4096;
  dt::count_t r = 4096;
  std::vector<double> ratios{0.0195, 0.0129, 0.0099, 0.0057, 0.0040, 0.0027, 0.0020, 0.0014};
  dt::count_t batch = 1;
  std::vector<unsigned> threads{1};
  int repeat = 21;
  std::uint64_t seed = 1;
};

template <typename F>
double median_ms(int repeat, F&& f) {
  std::vector<double> t;
  t.reserve(static_cast<std::size_t>(repeat));
  for (int i = 0; i < repeat; ++i) {
    const auto a = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - a).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

int cmd_bench(const BenchArgs& a) {
  if (a.repeat < 1) throw dt::ArgumentError("--repeat must be >= 1");
  std::vector<unsigned> threads = a.threads;
  if (const auto env = env_threads()) threads = {*env};
  std::cout << "config,dense_ms,fused_ms,speedup,multiplies_dense,multiplies_fused,reuse_hits,dense_e2e_ms,speedup_e2e\n";
  dt::Rng rng(a.seed);
  for (double ratio : a.ratios) {
    dt::LayerPlan plan;
    try {
      plan = dt::plan_layer(a.q, a.r, 1, ratio);
    } catch (const dt::PlanningError& e) {
      print_lower_bounds(e);
      return kInfeasible;
    }
    dt::Rng lrng = rng.child(static_cast<std::uint64_t>(ratio * 1e9));
    const dt::FactorPairF fp = dt::init_factors(plan, 1.0 / std::sqrt(static_cast<double>(a.q)), lrng).cast<float>();
    const dt::DenseMatrixF x = dt::sample_normal(lrng, 0.0, 1.0, a.batch, a.q).cast<float>();
    const dt::DenseMatrixF w = dt::decompress(fp);
    for (unsigned t : threads) {
      const dt::KernelOptions opt{t};
      volatile float sink = 0.0f;
      const double dense_ms = median_ms(a.repeat, [&] { sink = dt::matmul_threaded(x, w, t).flat()[0]; });
      const double e2e_ms = median_ms(a.repeat, [&] { sink = dt::matmul_threaded(x, dt::decompress(fp), t).flat()[0]; });
      const double fused_ms = median_ms(a.repeat, [&] { sink = dt::fused_matmul(x, fp, opt).y.flat()[0]; });
      (void)sink;
      const auto probe = dt::fused_matmul(x, fp, opt);
      std::cout << "q=" << a.q << ";r=" << a.r << ";ratio=" << ratio << ";m=" << plan.m << ";n=" << plan.n
                << ";batch=" << a.batch << ";threads=" << dt::resolve_threads(t) << "," << fmt(dense_ms) << ","
                << fmt(fused_ms) << "," << fmt(dense_ms / fused_ms) << "," << a.q * a.r * a.batch << ","
                << probe.ops.multiplies << "," << probe.table.hits() << "," << fmt(e2e_ms) << ","
                << fmt(e2e_ms / fused_ms) << "\n";
    }
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string task = "synthetic_regression";
  std::string method = "deepthin";
  double ratio = 0.02;
  std::uint64_t seed = 1;
  dt::count_t epochs = 0;
  double lr = 0.0;
  dt::count_t batch = 0;
};

int cmd_train(const TrainArgs& a) {
  const dt::Task task = dt::parse_task(a.task);
  const dt::Method method = dt::parse_method(a.method);
  dt::TrainConfig cfg = dt::default_config(task);
  cfg.seed = a.seed;
  if (a.epochs) cfg.epochs = a.epochs;
  if (a.lr > 0.0) cfg.learning_rate = a.lr;
  if (a.batch) cfg.batch_size = a.batch;
  dt::TrainResult r;
  try {
    r = dt::train_toy(task, method, a.ratio, cfg);
  } catch (const dt::PlanningError& e) {
    print_lower_bounds(e);
    return kInfeasible;
  }
  std::cout << "epoch,train_loss,val_loss\n";
  std::cout << std::setprecision(9);
  for (const auto& h : r.history) std::cout << h.epoch << "," << h.train_loss << "," << h.val_loss << "\n";
  std::cout << "# stored " << r.compressed_params << "/" << r.original_params << " compressible, " << r.total_params
            << " total\n";
  return kOk;
}

struct CompareArgs {
  std::vector<std::string> tasks{"synthetic_regression", "spiral_classification"};
  std::vector<std::string> methods{"dense", "deepthin", "rank_fact", "hashed", "pruned", "same_size"};
  std::vector<double> ratios{0.04, 0.02, 0.01, 0.005};
  dt::count_t seeds = 5;
};

int cmd_compare(const CompareArgs& a) {
  std::vector<dt::Method> methods;
  for (const auto& m : a.methods) methods.push_back(dt::parse_method(m));
  std::cout << "task,method,ratio,stored,original,median_final_val,median_best_val,seeds,status\n";
  for (const auto& t : a.tasks) {
    const dt::Task task = dt::parse_task(t);
    dt::compare_methods(task, methods, a.ratios, a.seeds, [&](const dt::CompareRow& row) {
      std::cout << dt::to_string(task) << "," << dt::to_string(row.method) << "," << fmt(row.ratio) << ",";
      if (row.skipped) {
        std::string why = row.reason;
        std::replace(why.begin(), why.end(), ',', ';');
        std::cout << ",,,," << a.seeds << ",skipped: " << why << "\n";
      } else {
        std::cout << row.compressed_params << "," << row.original_params << "," << fmt(row.median_final(), 8) << ","
                  << fmt(row.median_best(), 8) << "," << row.final_losses.size() << ",ok\n";
      }
      std::cout.flush();
    });
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct CheckGradArgs {
  dt::count_t q = 12;
  dt::count_t r = 10;
  dt::count_t rank = 1;
  double ratio = 0.9;
  dt::count_t batch = 3;
  std::string activation = "tanh";
  std::string loss = "mse";
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
};

int cmd_check_grad(const CheckGradArgs& a) {
  if (a.q * a.r > 4096) throw dt::ArgumentError("check-grad requires Q*R <= 4096");
  dt::LayerPlan plan;
  try {
    plan = dt::plan_layer(a.q, a.r, a.rank, a.ratio);
  } catch (const dt::PlanningError& e) {
    print_lower_bounds(e);
    return kInfeasible;
  }
  const dt::Activation act = dt::parse_activation(a.activation);
  const dt::Loss loss = dt::parse_loss(a.loss);
  dt::Rng rng(a.seed);
  const dt::FactorPairD fp = dt::init_factors(plan, 0.5, rng);
  const dt::DenseMatrix x = dt::sample_normal(rng, 0.0, 1.0, a.batch, a.q);
  const dt::DenseMatrix bias = dt::sample_normal(rng, 0.0, 0.1, 1, a.r);
  dt::DenseMatrix target = dt::sample_normal(rng, 0.0, 1.0, a.batch, a.r);
  if (loss == dt::Loss::softmax_cross_entropy) {
    target = dt::DenseMatrix(a.batch, a.r, 0.0);
    for (dt::count_t i = 0; i < a.batch; ++i) target(i, rng.uniform_int(0, a.r - 1)) = 1.0;
  }
  const auto rep = dt::finite_diff_check(fp, x, bias, act, loss, target, a.tolerance);
  std::cout << "param,max_rel_error\n"
            << "xf," << fmt(rep.max_rel_xf) << "\nwf," << fmt(rep.max_rel_wf) << "\ninput," << fmt(rep.max_rel_input)
            << "\nbias," << fmt(rep.max_rel_bias) << "\n";
  std::cout << (rep.pass ? "PASS" : "FAIL") << " worst " << fmt(rep.worst()) << " tolerance " << fmt(rep.tolerance)
            << "\n";
  return rep.pass ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compress dense weight matrices into small factor pairs and run on the compressed form."};
  app.require_subcommand(1);

  PlanArgs plan;
  auto* p = app.add_subcommand("plan", "Plan per-matrix factor shapes for a global size ratio");
  p->add_option("shapes", plan.shapes, "File of 'name Q R' lines")->required();
  p->add_option("--ratio", plan.ratio, "Target compressed/original size")->required();
  p->add_option("--rank", plan.rank, "Factor rank");
  p->add_option("--bias-params", plan.bias_params, "Dense parameters counted on both sides of the ratio");

  CompressArgs comp;
  auto* c = app.add_subcommand("compress", "Plan, initialize or fit factors, and write a model file");
  c->add_option("shapes", comp.shapes, "File of 'name Q R' lines")->required();
  c->add_option("--ratio", comp.ratio, "Target compressed/original size")->required();
  c->add_option("--out,-o", comp.out, "Output model path")->required();
  c->add_option("--rank", comp.rank, "Factor rank");
  c->add_option("--seed", comp.seed, "Initialization seed");
  c->add_option("--weights", comp.weights, "name=path of a dense text matrix to fit");
  c->add_option("--sweeps", comp.sweeps, "Alternating least squares sweeps when fitting");
  c->add_option("--value-bytes", comp.value_bytes, "Stored value width")->check(CLI::IsMember({4u, 8u}));
  c->add_flag("!--no-bias", comp.bias, "Do not store dense biases");

  DecompressArgs dec;
  auto* d = app.add_subcommand("decompress", "Reconstruct dense matrices from a model file");
  d->add_option("model", dec.model, "Model file")->required();
  d->add_option("--out-dir", dec.out_dir, "Write <name>.txt files here instead of stdout");
  d->add_option("--layer", dec.layer, "Only this matrix");
  d->add_flag("--info", dec.info, "Print the stored plan and sizes only");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Time the fused kernel against a dense product");
  b->add_option("--q", bench.q, "Input dimension");
  b->add_option("--r", bench.r, "Output dimension");
  b->add_option("--ratio", bench.ratios, "Ratios to test")->delimiter(',');
  b->add_option("--batch", bench.batch, "Rows of the input");
  b->add_option("--threads", bench.threads, "Thread counts to test (0 = all cores)")->delimiter(',');
  b->add_option("--repeat", bench.repeat, "Timed repetitions; the median is reported");
  b->add_option("--seed", bench.seed, "Data seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one toy model and print its loss history as CSV");
  t->add_option("--task", tr.task, "synthetic_regression or spiral_classification");
  t->add_option("--method", tr.method, "deepthin, rank_fact, hashed, pruned, same_size or dense");
  t->add_option("--ratio", tr.ratio, "Stored/original size of the hidden matrices");
  t->add_option("--seed", tr.seed, "Seed for data and initialization");
  t->add_option("--epochs", tr.epochs, "Override the task default");
  t->add_option("--lr", tr.lr, "Override the task default");
  t->add_option("--batch", tr.batch, "Override the task default");

  CompareArgs cmp;
  auto* k = app.add_subcommand("compare", "Train the method grid and print a median-of-seeds summary");
  k->add_option("--tasks", cmp.tasks, "Tasks to run")->delimiter(',');
  k->add_option("--methods", cmp.methods, "Methods to run")->delimiter(',');
  k->add_option("--ratios", cmp.ratios, "Ratios to run")->delimiter(',');
  k->add_option("--seeds", cmp.seeds, "Seeds per cell");

  CheckGradArgs cg;
  auto* g = app.add_subcommand("check-grad", "Compare analytic gradients with central differences");
  g->add_option("--q", cg.q, "Input dimension");
  g->add_option("--r", cg.r, "Output dimension");
  g->add_option("--rank", cg.rank, "Factor rank");
  g->add_option("--ratio", cg.ratio, "Plan ratio");
  g->add_option("--batch", cg.batch, "Input rows");
  g->add_option("--activation", cg.activation, "identity, relu, sigmoid or tanh");
  g->add_option("--loss", cg.loss, "mse or softmax_cross_entropy");
  g->add_option("--tolerance", cg.tolerance, "Maximum relative error");
  g->add_option("--seed", cg.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*p) return cmd_plan(plan);
    if (*c) return cmd_compress(comp);
    if (*d) return cmd_decompress(dec);
    if (*b) return cmd_bench(bench);
    if (*t) return cmd_train(tr);
    if (*k) return cmd_compare(cmp);
    if (*g) return cmd_check_grad(cg);
  } catch (const dt::LineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const dt::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
