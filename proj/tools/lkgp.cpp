#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>

#include "lkgp/dataset_io.hpp"
#include "lkgp/errors.hpp"
#include "lkgp/kron.hpp"
#include "lkgp/linalg.hpp"
#include "lkgp/model.hpp"
#include "lkgp/model_io.hpp"
#include "lkgp/rng.hpp"
#include "lkgp/solvers.hpp"

using nlohmann::json;
using namespace lkgp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

struct TimingStats {
  double mean_ms = 0.0;
  double median_ms = 0.0;
};

TimingStats summarize(std::vector<double> times) {
  TimingStats stats;
  if (times.empty()) return stats;
  for (double t : times) stats.mean_ms += t;
  stats.mean_ms /= static_cast<double>(times.size());
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  stats.median_ms = times.size() % 2 == 1 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
  return stats;
}

json config_file_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream file(path);
  if (!file) throw ParseError("config: cannot open " + path);
  json parsed = json::parse(file, nullptr, false);
  if (parsed.is_discarded()) throw ParseError("config: invalid json in " + path);
  return parsed;
}

// Flags override the config file: only unset options fall back.
template <typename T>
void fallback(const CLI::Option* opt, const json& cfg, const char* key, T& value) {
  if (opt->count() == 0 && cfg.contains(key)) value = cfg.at(key).get<T>();
}

std::ofstream* records_stream(const std::string& path, std::optional<std::ofstream>& storage) {
  if (path.empty()) return nullptr;
  storage.emplace(path, std::ios::app);
  if (!*storage) throw ParseError("records: cannot open " + path);
  return &*storage;
}

void emit(const json& record, std::ofstream* sink) {
  const std::string line = record.dump();
  std::cout << line << "\n";
  if (sink) *sink << line << "\n";
}

Matrix uniform_inputs(std::size_t n, std::size_t d, Rng& rng) {
  Matrix x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = rng.uniform();
  return x;
}

std::vector<double> normal_vector(std::size_t n, Rng& rng) {
  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal();
  return x;
}

json counters_json(const CostCounters& c) {
  return {{"mults", c.mults},
          {"kernel_evals", c.kernel_evals},
          {"peak_elements", c.peak_elements}};
}

std::string sci(double value) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.3e", value);
  return buffer;
}

// ---------------------------------------------------------------------------
// synth-bench
// ---------------------------------------------------------------------------

int run_synth_bench(const std::vector<double>& sizes, std::size_t dims, std::size_t reps,
                    std::uint64_t seed, double dense_cap, const std::string& records_path) {
  std::optional<std::ofstream> storage;
  std::ofstream* sink = records_stream(records_path, storage);

  const std::size_t d_s = std::max<std::size_t>(dims / 2, 1);
  const std::size_t d_t = std::max<std::size_t>(dims - d_s, 1);
  for (double requested : sizes) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(requested)));
    const std::size_t p = std::max<std::size_t>(side, 2), q = p, n = p * q;
    Rng rng(seed ^ n);
    const Matrix s = uniform_inputs(p, d_s, rng);
    const Matrix t = uniform_inputs(q, d_t, rng);
    const KernelSpec spatial = SqExpKernel{std::vector<double>(d_s, 1.0), 1.0};
    const KernelSpec temporal = SqExpKernel{std::vector<double>(d_t, 1.0), 1.0};
    const auto mask = ObservationMask::full(p, q);
    const auto x = normal_vector(n, rng);

    json record{{"schema", 1},
                {"command", "synth-bench"},
                {"config",
                 {{"n_requested", requested},
                  {"n", n},
                  {"p", p},
                  {"q", q},
                  {"dims", dims},
                  {"reps", reps},
                  {"seed", seed},
                  {"dense_element_cap", dense_cap},
                  {"input_law", "iid uniform [0,1]^dims, dims split between S and T"}}}};

    {
      Stopwatch build;
      LatentKroneckerOperator op(spatial, s, temporal, t, mask, 0.0);
      const double build_ms = build.ms();
      std::vector<double> out(n), times;
      for (std::size_t r = 0; r < reps; ++r) {
        Stopwatch sw;
        op.apply(x, out);
        times.push_back(sw.ms());
      }
      const auto stats = summarize(std::move(times));
      record["latent"] = {{"kernel_eval_ms", build_ms},
                          {"mvm_mean_ms", stats.mean_ms},
                          {"mvm_median_ms", stats.median_ms},
                          {"per_apply_mults", static_cast<std::uint64_t>(p) * q * (p + q) + n},
                          {"counters", counters_json(op.counters())}};
    }
    {
      auto op = LatentKroneckerOperator::lazy(spatial, s, temporal, t, mask, 0.0);
      std::vector<double> out(n), times;
      const std::size_t lazy_reps = std::min<std::size_t>(reps, 10);
      for (std::size_t r = 0; r < lazy_reps; ++r) {
        Stopwatch sw;
        op.apply(x, out);
        times.push_back(sw.ms());
      }
      const auto stats = summarize(std::move(times));
      record["latent_lazy"] = {{"reps", lazy_reps},
                               {"mvm_mean_ms", stats.mean_ms},
                               {"mvm_median_ms", stats.median_ms},
                               {"counters", counters_json(op.counters())}};
    }

    const double dense_elements = static_cast<double>(n) * static_cast<double>(n);
    if (dense_elements <= dense_cap) {
      Stopwatch build;
      DenseObservedOperator op(spatial, s, temporal, t, mask, 0.0);
      const double build_ms = build.ms();
      std::vector<double> out(n), times;
      for (std::size_t r = 0; r < reps; ++r) {
        Stopwatch sw;
        op.apply(x, out);
        times.push_back(sw.ms());
      }
      const auto stats = summarize(std::move(times));
      record["dense"] = {{"kernel_eval_ms", build_ms},
                         {"mvm_mean_ms", stats.mean_ms},
                         {"mvm_median_ms", stats.median_ms},
                         {"per_apply_mults", static_cast<std::uint64_t>(n) * n},
                         {"counters", counters_json(op.counters())}};
    } else {
      record["dense"] = {{"skipped", "exceeds element cap"},
                         {"elements", dense_elements},
                         {"per_apply_mults", dense_elements}};
    }
    emit(record, sink);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// breakeven
// ---------------------------------------------------------------------------

std::optional<double> interpolate_crossing(const std::vector<double>& gammas,
                                           const std::vector<double>& ratios) {
  for (std::size_t i = 1; i < gammas.size(); ++i) {
    if (std::isnan(ratios[i - 1]) || std::isnan(ratios[i])) continue;
    const double a = ratios[i - 1] - 1.0, b = ratios[i] - 1.0;
    if (a == 0.0) return gammas[i - 1];
    if (a * b < 0.0) return gammas[i - 1] + (gammas[i] - gammas[i - 1]) * a / (a - b);
  }
  return std::nullopt;
}

int run_breakeven(std::size_t p, std::size_t q, std::vector<double> ratios, std::size_t reps,
                  std::uint64_t seed, std::size_t dims, double dense_cap,
                  const std::string& records_path) {
  std::optional<std::ofstream> storage;
  std::ofstream* sink = records_stream(records_path, storage);

  if (ratios.empty())
    for (double g = 0.0; g < 0.9501; g += 0.05) ratios.push_back(g);

  const std::size_t d_s = std::max<std::size_t>(dims / 2, 1);
  const std::size_t d_t = std::max<std::size_t>(dims - d_s, 1);
  Rng rng(seed);
  const Matrix s = uniform_inputs(p, d_s, rng);
  const Matrix t = uniform_inputs(q, d_t, rng);
  const Matrix k_ss = eval_matrix(SqExpKernel{std::vector<double>(d_s, 1.0), 1.0}, s, s);
  const Matrix k_tt = eval_matrix(SqExpKernel{std::vector<double>(d_t, 1.0), 1.0}, t, t);
  const auto analytic = breakeven_points(p, q);

  const json config{{"p", p},       {"q", q},       {"ratios", ratios},
                    {"reps", reps}, {"seed", seed}, {"dims", dims},
                    {"dense_element_cap", dense_cap}};

  std::vector<double> time_ratios, count_ratios;
  for (double gamma : ratios) {
    const auto mask = gamma == 0.0 ? ObservationMask::full(p, q)
                                   : generate_mask(p, q, UniformMissing{gamma}, seed + 1);
    const std::size_t n = mask.count();
    const auto x = normal_vector(n, rng);

    LatentKroneckerOperator latent(k_ss, k_tt, mask, 0.0);
    std::vector<double> out(n), latent_times;
    for (std::size_t r = 0; r < reps; ++r) {
      Stopwatch sw;
      latent.apply(x, out);
      latent_times.push_back(sw.ms());
    }
    const auto latent_stats = summarize(std::move(latent_times));
    const double latent_mults = static_cast<double>(p) * q * (p + q) + n;
    const double dense_mults = static_cast<double>(n) * n;
    count_ratios.push_back(dense_mults / latent_mults);

    json record{{"schema", 1},
                {"command", "breakeven"},
                {"config", config},
                {"gamma", gamma},
                {"n", n},
                {"latent",
                 {{"mvm_mean_ms", latent_stats.mean_ms},
                  {"mvm_median_ms", latent_stats.median_ms},
                  {"per_apply_mults", latent_mults}}},
                {"counted_mult_ratio", count_ratios.back()}};

    if (dense_mults <= dense_cap) {
      DenseObservedOperator dense(k_ss, k_tt, mask, 0.0);
      std::vector<double> dense_times;
      for (std::size_t r = 0; r < reps; ++r) {
        Stopwatch sw;
        dense.apply(x, out);
        dense_times.push_back(sw.ms());
      }
      const auto dense_stats = summarize(std::move(dense_times));
      record["dense"] = {{"mvm_mean_ms", dense_stats.mean_ms},
                         {"mvm_median_ms", dense_stats.median_ms},
                         {"per_apply_mults", dense_mults}};
      time_ratios.push_back(dense_stats.median_ms / latent_stats.median_ms);
      record["time_ratio"] = time_ratios.back();
    } else {
      record["dense"] = {{"skipped", "exceeds element cap"}, {"per_apply_mults", dense_mults}};
      time_ratios.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    emit(record, sink);
  }

  json summary{{"schema", 1},
               {"command", "breakeven-summary"},
               {"config", config},
               {"gamma_time_analytic", analytic.time},
               {"gamma_mem_analytic", analytic.memory}};
  const auto measured = interpolate_crossing(ratios, time_ratios);
  const auto counted = interpolate_crossing(ratios, count_ratios);
  summary["measured_crossover"] = measured ? json(*measured) : json();
  summary["counted_crossover"] = counted ? json(*counted) : json();
  emit(summary, sink);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct KernelConfig {
  KernelSpec spatial;
  KernelSpec temporal;
};

KernelConfig kernels_for_dataset(const PartialGrid& grid, const std::string& path) {
  if (path.empty())
    return {SqExpKernel::default_init(grid.s_points.cols()),
            SqExpKernel::default_init(grid.t_points.cols())};
  std::ifstream file(path);
  if (!file) throw ParseError("kernel config: cannot open " + path);
  json parsed = json::parse(file, nullptr, false);
  if (parsed.is_discarded() || !parsed.contains("spatial") || !parsed.contains("temporal"))
    throw ParseError("kernel config: expected {\"spatial\": ..., \"temporal\": ...}");
  return {kernel_from_json(parsed["spatial"].dump()),
          kernel_from_json(parsed["temporal"].dump())};
}

int run_fit(const std::string& data_path, const std::string& kernel_config,
            std::size_t steps, double learning_rate, double tol, std::size_t precond_rank,
            std::size_t max_iters, std::size_t probes, std::uint64_t seed, bool standardize_y,
            const std::string& out_path, const std::string& records_path) {
  std::optional<std::ofstream> storage;
  std::ofstream* sink = records_stream(records_path, storage);

  PartialGrid grid = load_csv(data_path);
  Standardization st;
  if (standardize_y) {
    auto [z, fitted_st] = standardize(grid.y);
    grid.y = std::move(z);
    st = fitted_st;
  }
  auto kernels = kernels_for_dataset(grid, kernel_config);

  LkgpModel model{std::move(grid), std::move(kernels.spatial), std::move(kernels.temporal),
                  softplus(0.0)};
  const SolverConfig solver{tol, max_iters, precond_rank, seed};
  FitOptions options;
  options.steps = steps;
  options.learning_rate = learning_rate;
  options.probe_count = probes;
  options.seed = seed;

  const FitReport report = fit(model, options, solver);

  Checkpoint checkpoint{model.spatial_kernel, model.temporal_kernel, model.pack_params(), st,
                        model.data.mask};
  if (!out_path.empty()) save_checkpoint(out_path, checkpoint);

  std::size_t total_iters = 0;
  for (const auto& r : report.solver_reports) total_iters += r.iterations;
  json record{{"schema", 1},
              {"command", "fit"},
              {"config",
               {{"data", data_path},
                {"kernel_config", kernel_config},
                {"steps", steps},
                {"lr", learning_rate},
                {"tol", tol},
                {"precond_rank", precond_rank},
                {"max_iters", max_iters},
                {"probes", probes},
                {"seed", seed},
                {"standardize", standardize_y},
                {"out", out_path}}},
              {"n", model.data.n()},
              {"p", model.data.p()},
              {"q", model.data.q()},
              {"steps_completed", report.steps_completed},
              {"aborted", report.aborted},
              {"diagnostic", report.diagnostic},
              {"loss_proxy_first", report.loss_proxy.empty() ? json() : json(report.loss_proxy.front())},
              {"loss_proxy_final", report.loss_proxy.empty() ? json() : json(report.loss_proxy.back())},
              {"total_cg_iterations", total_iters},
              {"wall_seconds", report.wall_seconds},
              {"params", model.pack_params()}};
  emit(record, sink);
  return report.aborted ? kExitNumerical : kExitOk;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

int run_predict(const std::string& checkpoint_path, const std::string& data_path,
                const std::string& targets, std::vector<std::int64_t> cells,
                std::size_t n_samples, double tol, std::size_t precond_rank,
                std::size_t max_iters, std::uint64_t seed, const std::string& out_path,
                const std::string& truth_path, bool raw_metrics,
                const std::string& records_path) {
  std::optional<std::ofstream> storage;
  std::ofstream* sink = records_stream(records_path, storage);

  const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
  PartialGrid grid = load_csv(data_path);
  for (auto& v : grid.y) v = checkpoint.standardization.forward(v);

  LkgpModel model{std::move(grid), checkpoint.spatial_kernel, checkpoint.temporal_kernel,
                  softplus(0.0)};
  model.set_params(checkpoint.params);

  std::vector<std::int64_t> target_cells;
  if (targets == "missing") {
    target_cells = model.data.mask.missing();
  } else if (targets == "observed") {
    const auto observed = model.data.mask.observed();
    target_cells.assign(observed.begin(), observed.end());
  } else if (targets == "cells") {
    target_cells = std::move(cells);
  } else {
    throw ParseError("predict: targets must be missing, observed, or cells");
  }

  json record{{"schema", 1},
              {"command", "predict"},
              {"config",
               {{"checkpoint", checkpoint_path},
                {"data", data_path},
                {"targets", targets},
                {"samples", n_samples},
                {"tol", tol},
                {"precond_rank", precond_rank},
                {"max_iters", max_iters},
                {"seed", seed},
                {"out", out_path},
                {"truth", truth_path},
                {"raw_metrics", raw_metrics}}},
              {"n", model.data.n()},
              {"n_targets", target_cells.size()}};

  if (target_cells.empty()) {
    std::cerr << "warning: no target cells (grid fully observed); emitting empty prediction\n";
    if (!out_path.empty()) {
      std::ofstream out(out_path);
      out << "cell,spatial_index,temporal_index,mean,variance\n";
    }
    record["predictions"] = 0;
    emit(record, sink);
    return kExitOk;
  }

  const SolverConfig solver{tol, max_iters, precond_rank, seed};
  const auto samples = pathwise_posterior_samples(model, n_samples, solver, seed);
  const auto pred = predict(model, samples, target_cells);
  record["converged_samples"] = samples.converged_count();
  record["predictions"] = target_cells.size();

  const auto& st = checkpoint.standardization;
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw ParseError("predict: cannot write " + out_path);
    out << "cell,spatial_index,temporal_index,mean,variance\n";
    const auto q = static_cast<std::int64_t>(model.data.q());
    for (std::size_t i = 0; i < pred.cells.size(); ++i) {
      const auto cell = pred.cells[i];
      out << cell << "," << cell / q << "," << cell % q << ","
          << st.inverse(pred.mean[i]) << "," << pred.variance[i] * st.scale * st.scale << "\n";
    }
  }

  if (!truth_path.empty()) {
    const PartialGrid truth_grid = load_csv(truth_path);
    // The truth file builds its own grid indexing, so cells are matched by
    // input values rather than by linear index.
    auto match_row = [](const Matrix& needle, std::size_t row, const Matrix& haystack) {
      for (std::size_t i = 0; i < haystack.rows(); ++i) {
        bool equal = true;
        for (std::size_t d = 0; d < haystack.cols(); ++d)
          equal = equal && needle(row, d) == haystack(i, d);
        if (equal) return static_cast<std::int64_t>(i);
      }
      return std::int64_t{-1};
    };
    std::vector<std::int64_t> s_map(model.data.p()), t_map(model.data.q());
    for (std::size_t j = 0; j < model.data.p(); ++j)
      s_map[j] = match_row(model.data.s_points, j, truth_grid.s_points);
    for (std::size_t k = 0; k < model.data.q(); ++k)
      t_map[k] = match_row(model.data.t_points, k, truth_grid.t_points);

    std::vector<double> truth;
    truth.reserve(target_cells.size());
    const auto observed = truth_grid.mask.observed();
    const auto data_q = static_cast<std::int64_t>(model.data.q());
    const auto truth_q = static_cast<std::int64_t>(truth_grid.q());
    for (const auto cell : target_cells) {
      const auto js = s_map[static_cast<std::size_t>(cell / data_q)];
      const auto kt = t_map[static_cast<std::size_t>(cell % data_q)];
      if (js < 0 || kt < 0)
        throw ParseError("predict: truth file lacks the inputs of cell " + std::to_string(cell));
      const auto truth_cell = js * truth_q + kt;
      const auto it = std::lower_bound(observed.begin(), observed.end(), truth_cell);
      if (it == observed.end() || *it != truth_cell)
        throw ParseError("predict: truth file missing cell " + std::to_string(cell));
      truth.push_back(truth_grid.y[static_cast<std::size_t>(it - observed.begin())]);
    }
    Metrics m;
    if (raw_metrics) {
      Prediction raw = pred;
      for (std::size_t i = 0; i < raw.mean.size(); ++i) {
        raw.mean[i] = st.inverse(raw.mean[i]);
        raw.variance[i] *= st.scale * st.scale;
      }
      m = metrics(raw, truth);
    } else {
      std::vector<double> truth_std(truth.size());
      for (std::size_t i = 0; i < truth.size(); ++i) truth_std[i] = st.forward(truth[i]);
      m = metrics(pred, truth_std);
    }
    record["metrics"] = {{"rmse", m.rmse},
                         {"nll", m.mean_nll},
                         {"scale", raw_metrics ? "raw" : "standardized"}};
  }
  emit(record, sink);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// verify: oracle-equivalence suite on small instances
// ---------------------------------------------------------------------------

struct VerifyOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

int run_verify(std::uint64_t seed) {
  std::vector<VerifyOutcome> outcomes;
  Rng rng(seed);

  auto random_psd = [&rng](std::size_t n) {
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) a(i, j) = rng.normal();
    Matrix s = linalg::gram(a);
    for (std::size_t i = 0; i < n; ++i) s(i, i) += 0.5;
    return s;
  };

  {  // Projected apply against the dense oracle.
    double worst = 0.0;
    const double gammas[] = {0.0, 0.25, 0.5, 0.8};
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t p = 2 + rng.uniform_below(11);
      const std::size_t q = 2 + rng.uniform_below(11);
      const double gamma = gammas[trial % 4];
      const auto mask = gamma == 0.0 ? ObservationMask::full(p, q)
                                     : generate_mask(p, q, UniformMissing{gamma}, rng.next_u64());
      LatentKroneckerOperator op(random_psd(p), random_psd(q), mask, rng.uniform());
      const auto x = normal_vector(mask.count(), rng);
      const auto fast = op.apply(x);
      const Matrix dense = op.dense();
      std::vector<double> slow(mask.count());
      linalg::gemv(dense, x, slow);
      double x_inf = 0.0;
      for (double v : x) x_inf = std::max(x_inf, std::abs(v));
      for (std::size_t i = 0; i < fast.size(); ++i)
        worst = std::max(worst, std::abs(fast[i] - slow[i]) / (1.0 + x_inf));
    }
    outcomes.push_back({"projected apply vs dense oracle", worst <= 1e-12,
                        "max scaled error " + sci(worst)});
  }

  {  // Operator symmetry.
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t p = 2 + rng.uniform_below(9), q = 2 + rng.uniform_below(9);
      const auto mask = generate_mask(p, q, UniformMissing{0.4}, rng.next_u64());
      LatentKroneckerOperator op(random_psd(p), random_psd(q), mask, 0.2);
      const auto x = normal_vector(mask.count(), rng);
      const auto y = normal_vector(mask.count(), rng);
      const double a = linalg::dot(x, op.apply(y));
      const double b = linalg::dot(y, op.apply(x));
      worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(a)));
    }
    outcomes.push_back({"operator symmetry", worst <= 1e-10,
                        "max relative asymmetry " + sci(worst)});
  }

  {  // Counter exactness.
    const std::size_t p = 11, q = 7;
    const auto mask = generate_mask(p, q, UniformMissing{0.35}, seed + 1);
    LatentKroneckerOperator op(random_psd(p), random_psd(q), mask, 0.1);
    op.counters().reset();
    (void)op.apply(normal_vector(mask.count(), rng));
    const auto expected = p * q * (p + q) + mask.count();
    const bool ok = op.counters().mults == expected &&
                    op.counters().peak_elements == p * p + q * q + p * q;
    outcomes.push_back({"cost counter formulas", ok,
                        "mults " + std::to_string(op.counters().mults) + "/" +
                            std::to_string(expected) + ", peak " +
                            std::to_string(op.counters().peak_elements) + "/" +
                            std::to_string(p * p + q * q + p * q)});
  }

  {  // CG against a direct solve.
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 10 + rng.uniform_below(40);
      const Matrix a = random_psd(n);
      const auto x_true = normal_vector(n, rng);
      std::vector<double> b(n);
      linalg::gemv(a, x_true, b);
      const ApplyFn apply = [&a](std::span<const double> in, std::span<double> out) {
        linalg::gemv(a, in, out);
      };
      const auto [x, report] = cg_solve(apply, b, SolverConfig{1e-10, 4 * n, 0, 0});
      double err = 0.0, ref = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        err += (x[i] - x_true[i]) * (x[i] - x_true[i]);
        ref += x_true[i] * x_true[i];
      }
      worst = std::max(worst, std::sqrt(err / ref));
      if (!report.converged) worst = 1.0;
    }
    outcomes.push_back(
        {"cg vs direct solve", worst <= 1e-6, "max relative error " + sci(worst)});
  }

  {  // Break-even defining equations.
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const double p = 2.0 + static_cast<double>(rng.uniform_below(10000));
      const double q = 2.0 + static_cast<double>(rng.uniform_below(10000));
      const auto pts = breakeven_points(static_cast<std::size_t>(p), static_cast<std::size_t>(q));
      const double u_t = 1.0 - pts.time, u_m = 1.0 - pts.memory;
      worst = std::max(worst, std::abs(u_t * u_t * p * p * q * q - (p * p * q + p * q * q)) /
                                  (p * p * q + p * q * q));
      worst = std::max(worst,
                       std::abs(u_m * u_m * p * p * q * q - (p * p + q * q)) / (p * p + q * q));
    }
    outcomes.push_back({"break-even defining equations", worst <= 1e-9,
                        "max relative defect " + sci(worst)});
  }

  {  // Pathwise sampling against the closed-form posterior.
    Rng data_rng(seed + 7);
    const std::size_t p = 6, q = 4;
    Matrix s = uniform_inputs(p, 2, data_rng);
    Matrix t(q, 1);
    for (std::size_t k = 0; k < q; ++k) t(k, 0) = static_cast<double>(k);
    auto mask = generate_mask(p, q, UniformMissing{0.3}, seed + 7);
    PartialGrid grid{std::move(s), std::move(t), std::move(mask), {}};
    grid.y.assign(grid.n(), 0.0);
    LkgpModel model{std::move(grid), SqExpKernel{{1.0, 1.0}, 1.0}, SqExpKernel{{1.5}, 1.0}, 0.1};
    const auto f = prior_grid_sample(model, seed + 8);
    auto obs = project(model.data.mask, f);
    for (auto& v : obs) v += std::sqrt(model.noise) * data_rng.normal();
    model.data.y = std::move(obs);

    const auto missing_cells = model.data.mask.missing();
    const auto exact = exact_posterior_reference(model, missing_cells);
    const std::size_t count = 4000;
    const auto samples =
        pathwise_posterior_samples(model, count, SolverConfig{1e-10, 1000, model.data.n(), 0},
                                   seed + 9);
    const auto pred = predict(model, samples, missing_cells);
    bool ok = samples.converged_count() == count;
    double worst_sigma = 0.0;
    for (std::size_t c = 0; c < missing_cells.size(); ++c) {
      const double stderr_mean =
          std::sqrt(exact.latent_variance[c] / static_cast<double>(count));
      worst_sigma = std::max(worst_sigma, std::abs(pred.mean[c] - exact.mean[c]) / stderr_mean);
    }
    ok = ok && worst_sigma <= 4.0;
    outcomes.push_back({"pathwise sampling vs closed form", ok,
                        "worst mean deviation " + sci(worst_sigma) + " stderr"});
  }

  {  // Exact-trace gradient against finite differences.
    Rng data_rng(seed + 21);
    const std::size_t p = 7, q = 4;
    Matrix s = uniform_inputs(p, 2, data_rng);
    Matrix t(q, 1);
    for (std::size_t k = 0; k < q; ++k) t(k, 0) = static_cast<double>(k);
    auto mask = generate_mask(p, q, UniformMissing{0.25}, seed + 21);
    std::vector<double> y(mask.count());
    for (auto& v : y) v = data_rng.normal();
    PartialGrid grid{std::move(s), std::move(t), std::move(mask), std::move(y)};
    LkgpModel model{std::move(grid), SqExpKernel{{1.0, 1.0}, 1.0}, SqExpKernel{{1.0}, 1.0}, 0.4};

    const auto analytic = mll_grad_estimate(model, SolverConfig{1e-12, 1000, 28, 0}, 0, true);
    auto raw = model.pack_params();
    double worst = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const double h = 1e-5;
      raw[i] += h;
      model.set_params(raw);
      const double hi = log_marginal_likelihood_exact(model);
      raw[i] -= 2.0 * h;
      model.set_params(raw);
      const double lo = log_marginal_likelihood_exact(model);
      raw[i] += h;
      model.set_params(raw);
      const double fd = (hi - lo) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(std::abs(fd), 1e-2));
    }
    outcomes.push_back({"gradient vs finite differences", worst <= 1e-4,
                        "max relative error " + sci(worst)});
  }

  bool all_passed = true;
  std::printf("%-40s %s\n", "check", "result");
  for (const auto& o : outcomes) {
    std::printf("%-40s %s  (%s)\n", o.name.c_str(), o.passed ? "PASS" : "FAIL",
                o.detail.c_str());
    all_passed = all_passed && o.passed;
  }
  return all_passed ? kExitOk : kExitVerifyFailure;
}

}  // namespace

int main(int argc, char** argv) {
  linalg::init_threads_from_env();
  CLI::App app{"Gaussian process regression on partially observed product grids"};
  app.require_subcommand(1);

  // synth-bench
  auto* synth = app.add_subcommand(
      "synth-bench", "Kernel-evaluation and MVM resource benchmark on synthetic grids");
  std::vector<double> sizes{1e2, 1e3, 1e4};
  std::size_t dims = 10, reps = 100;
  std::uint64_t seed = 0;
  double dense_cap = 2e8;
  std::string config_path, records_path;
  auto* synth_sizes = synth->add_option("--sizes", sizes, "Dataset sizes n")->delimiter(',');
  auto* synth_dims = synth->add_option("--dims", dims, "Total input dimensionality");
  auto* synth_reps = synth->add_option("--reps", reps, "Repetitions per measurement");
  auto* synth_seed = synth->add_option("--seed", seed, "Random seed");
  auto* synth_cap = synth->add_option("--dense-cap", dense_cap, "Dense path element cap");
  synth->add_option("--config", config_path, "JSON config file (flags override)");
  synth->add_option("--records", records_path, "Append JSON-lines records to this file");

  // breakeven
  auto* brk = app.add_subcommand("breakeven",
                                 "Missing-ratio sweep comparing dense and latent MVM");
  std::size_t brk_p = 512, brk_q = 512, brk_reps = 5, brk_dims = 10;
  std::vector<double> brk_ratios;
  std::uint64_t brk_seed = 0;
  double brk_cap = 2e8;
  std::string brk_config, brk_records;
  auto* brk_p_opt = brk->add_option("--p", brk_p, "Spatial grid size");
  auto* brk_q_opt = brk->add_option("--q", brk_q, "Temporal grid size");
  auto* brk_ratios_opt =
      brk->add_option("--ratios", brk_ratios, "Missing ratios (default 0..0.95 step 0.05)")
          ->delimiter(',');
  auto* brk_reps_opt = brk->add_option("--reps", brk_reps, "Repetitions per ratio");
  auto* brk_seed_opt = brk->add_option("--seed", brk_seed, "Random seed");
  auto* brk_dims_opt = brk->add_option("--dims", brk_dims, "Total input dimensionality");
  auto* brk_cap_opt = brk->add_option("--dense-cap", brk_cap, "Dense path element cap");
  brk->add_option("--config", brk_config, "JSON config file (flags override)");
  brk->add_option("--records", brk_records, "Append JSON-lines records to this file");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Fit hyperparameters on a CSV dataset");
  std::string fit_data, fit_kernel_config, fit_out, fit_config, fit_records;
  std::size_t fit_steps = 100, fit_rank = 100, fit_max_iters = 1000, fit_probes = 16;
  double fit_lr = 0.1, fit_tol = 0.01;
  std::uint64_t fit_seed = 0;
  bool fit_no_standardize = false;
  fit_cmd->add_option("--data", fit_data, "Dataset CSV")->required();
  fit_cmd->add_option("--kernel-config", fit_kernel_config,
                      "JSON kernel config {\"spatial\":..., \"temporal\":...}");
  auto* fit_steps_opt = fit_cmd->add_option("--steps", fit_steps, "Optimizer steps");
  auto* fit_lr_opt = fit_cmd->add_option("--lr", fit_lr, "Learning rate");
  auto* fit_tol_opt = fit_cmd->add_option("--tol", fit_tol, "CG relative residual tolerance");
  auto* fit_rank_opt = fit_cmd->add_option("--precond-rank", fit_rank, "Preconditioner rank");
  auto* fit_iters_opt = fit_cmd->add_option("--max-iters", fit_max_iters, "CG iteration cap");
  auto* fit_probes_opt = fit_cmd->add_option("--probes", fit_probes, "Trace probe count");
  auto* fit_seed_opt = fit_cmd->add_option("--seed", fit_seed, "Random seed");
  fit_cmd->add_flag("--no-standardize", fit_no_standardize,
                    "Skip output standardization before fitting");
  fit_cmd->add_option("--out", fit_out, "Checkpoint output path");
  fit_cmd->add_option("--config", fit_config, "JSON config file (flags override)");
  fit_cmd->add_option("--records", fit_records, "Append JSON-lines records to this file");

  // predict
  auto* pred_cmd = app.add_subcommand("predict", "Predict grid cells from a checkpoint");
  std::string pred_checkpoint, pred_data, pred_targets = "missing", pred_out, pred_truth,
              pred_config, pred_records;
  std::vector<std::int64_t> pred_cells;
  std::size_t pred_samples = 64, pred_rank = 100, pred_max_iters = 1000;
  double pred_tol = 0.01;
  std::uint64_t pred_seed = 0;
  bool pred_raw_metrics = false;
  pred_cmd->add_option("--checkpoint", pred_checkpoint, "Checkpoint JSON")->required();
  pred_cmd->add_option("--data", pred_data, "Dataset CSV")->required();
  pred_cmd->add_option("--targets", pred_targets, "missing | observed | cells");
  pred_cmd->add_option("--cells", pred_cells, "Linear cell indices for --targets cells")
      ->delimiter(',');
  auto* pred_samples_opt =
      pred_cmd->add_option("--samples", pred_samples, "Posterior sample count");
  auto* pred_tol_opt = pred_cmd->add_option("--tol", pred_tol, "CG tolerance");
  auto* pred_rank_opt = pred_cmd->add_option("--precond-rank", pred_rank, "Preconditioner rank");
  auto* pred_iters_opt = pred_cmd->add_option("--max-iters", pred_max_iters, "CG iteration cap");
  auto* pred_seed_opt = pred_cmd->add_option("--seed", pred_seed, "Random seed");
  pred_cmd->add_option("--out", pred_out, "Prediction CSV output path");
  pred_cmd->add_option("--truth", pred_truth, "CSV with held-out true values for metrics");
  pred_cmd->add_flag("--raw-metrics", pred_raw_metrics, "Compute metrics in raw units");
  pred_cmd->add_option("--config", pred_config, "JSON config file (flags override)");
  pred_cmd->add_option("--records", pred_records, "Append JSON-lines records to this file");

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "Run the oracle-equivalence suite");
  std::uint64_t verify_seed = 0;
  verify_cmd->add_option("--seed", verify_seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      const json cfg = config_file_json(config_path);
      fallback(synth_sizes, cfg, "sizes", sizes);
      fallback(synth_dims, cfg, "dims", dims);
      fallback(synth_reps, cfg, "reps", reps);
      fallback(synth_seed, cfg, "seed", seed);
      fallback(synth_cap, cfg, "dense_cap", dense_cap);
      return run_synth_bench(sizes, dims, reps, seed, dense_cap, records_path);
    }
    if (brk->parsed()) {
      const json cfg = config_file_json(brk_config);
      fallback(brk_p_opt, cfg, "p", brk_p);
      fallback(brk_q_opt, cfg, "q", brk_q);
      fallback(brk_ratios_opt, cfg, "ratios", brk_ratios);
      fallback(brk_reps_opt, cfg, "reps", brk_reps);
      fallback(brk_seed_opt, cfg, "seed", brk_seed);
      fallback(brk_dims_opt, cfg, "dims", brk_dims);
      fallback(brk_cap_opt, cfg, "dense_cap", brk_cap);
      return run_breakeven(brk_p, brk_q, brk_ratios, brk_reps, brk_seed, brk_dims, brk_cap,
                           brk_records);
    }
    if (fit_cmd->parsed()) {
      const json cfg = config_file_json(fit_config);
      fallback(fit_steps_opt, cfg, "steps", fit_steps);
      fallback(fit_lr_opt, cfg, "lr", fit_lr);
      fallback(fit_tol_opt, cfg, "tol", fit_tol);
      fallback(fit_rank_opt, cfg, "precond_rank", fit_rank);
      fallback(fit_iters_opt, cfg, "max_iters", fit_max_iters);
      fallback(fit_probes_opt, cfg, "probes", fit_probes);
      fallback(fit_seed_opt, cfg, "seed", fit_seed);
      return run_fit(fit_data, fit_kernel_config, fit_steps, fit_lr, fit_tol, fit_rank,
                     fit_max_iters, fit_probes, fit_seed, !fit_no_standardize, fit_out,
                     fit_records);
    }
    if (pred_cmd->parsed()) {
      const json cfg = config_file_json(pred_config);
      fallback(pred_samples_opt, cfg, "samples", pred_samples);
      fallback(pred_tol_opt, cfg, "tol", pred_tol);
      fallback(pred_rank_opt, cfg, "precond_rank", pred_rank);
      fallback(pred_iters_opt, cfg, "max_iters", pred_max_iters);
      fallback(pred_seed_opt, cfg, "seed", pred_seed);
      return run_predict(pred_checkpoint, pred_data, pred_targets, pred_cells, pred_samples,
                         pred_tol, pred_rank, pred_max_iters, pred_seed, pred_out, pred_truth,
                         pred_raw_metrics, pred_records);
    }
    if (verify_cmd->parsed()) return run_verify(verify_seed);
  } catch (const NumericalBreakdown& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return kExitNumerical;
  } catch (const NotPSD& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return kExitNumerical;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
