#include "lkgp/model.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "lkgp/errors.hpp"
#include "lkgp/linalg.hpp"
#include "lkgp/rng.hpp"

namespace lkgp {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

void check_model(const LkgpModel& model) {
  if (input_dim(model.spatial_kernel) != model.data.s_points.cols())
    throw ShapeMismatch("model: spatial kernel dimensionality does not match data");
  if (input_dim(model.temporal_kernel) != model.data.t_points.cols())
    throw ShapeMismatch("model: temporal kernel dimensionality does not match data");
  if (!(model.noise > 0.0)) throw ShapeMismatch("model: noise variance must be positive");
}

std::pair<std::size_t, std::size_t> cell_coords(std::int64_t cell, std::size_t q) {
  const auto qi = static_cast<std::int64_t>(q);
  return {static_cast<std::size_t>(cell / qi), static_cast<std::size_t>(cell % qi)};
}

}  // namespace

std::size_t LkgpModel::param_count() const {
  return lkgp::param_count(spatial_kernel) + lkgp::param_count(temporal_kernel) + 1;
}

std::vector<double> LkgpModel::pack_params() const {
  auto raw = lkgp::pack_params(spatial_kernel);
  const auto temporal = lkgp::pack_params(temporal_kernel);
  raw.insert(raw.end(), temporal.begin(), temporal.end());
  raw.push_back(softplus_inverse(noise));
  return raw;
}

void LkgpModel::set_params(std::span<const double> raw) {
  if (raw.size() != param_count())
    throw ShapeMismatch("model: expected " + std::to_string(param_count()) + " parameters");
  const std::size_t ns = lkgp::param_count(spatial_kernel);
  const std::size_t nt = lkgp::param_count(temporal_kernel);
  spatial_kernel = with_params(spatial_kernel, raw.subspan(0, ns));
  temporal_kernel = with_params(temporal_kernel, raw.subspan(ns, nt));
  noise = softplus(raw[ns + nt]);
}

LatentKroneckerOperator make_operator(const LkgpModel& model) {
  check_model(model);
  return LatentKroneckerOperator(model.spatial_kernel, model.data.s_points,
                                 model.temporal_kernel, model.data.t_points, model.data.mask,
                                 model.noise);
}

Matrix cholesky_with_jitter(Matrix a) {
  const std::size_t n = a.rows();
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += a(i, i);
  mean_diag /= static_cast<double>(n);

  static constexpr double kJitters[] = {0.0, 1e-10, 1e-8, 1e-6};
  for (double jitter : kJitters) {
    Matrix attempt = a;
    for (std::size_t i = 0; i < n; ++i) attempt(i, i) += jitter * mean_diag;
    if (linalg::try_cholesky(attempt)) return attempt;
  }
  throw NumericalBreakdown("cholesky failed after jitter escalation to 1e-6");
}

double log_marginal_likelihood_exact(const LkgpModel& model) {
  check_model(model);
  const std::size_t n = model.data.n();
  if (n > 4096)
    throw OracleTooLarge("log_marginal_likelihood_exact limited to n <= 4096");
  const Matrix k_ss = eval_matrix(model.spatial_kernel, model.data.s_points, model.data.s_points);
  const Matrix k_tt =
      eval_matrix(model.temporal_kernel, model.data.t_points, model.data.t_points);
  const Matrix system = dense_observed_matrix(k_ss, k_tt, model.data.mask, model.noise);
  const Matrix l = cholesky_with_jitter(system);

  std::vector<double> z(n);
  linalg::solve_lower(l, model.data.y, z);
  const double quad = linalg::dot(z, z);
  double logdet = 0.0;
  for (std::size_t i = 0; i < n; ++i) logdet += std::log(l(i, i));
  logdet *= 2.0;
  return -0.5 * quad - 0.5 * logdet - 0.5 * static_cast<double>(n) * kLog2Pi;
}

namespace {

// Derivative of the system matrix in one unconstrained parameter, applied
// matrix-free: spatial/temporal parameters give projected Kronecker
// operators, the noise parameter scales the identity.
struct GradTermComputer {
  const LkgpModel& model;
  Matrix k_ss, k_tt;
  std::size_t ns, nt;
  std::vector<double> raw;

  explicit GradTermComputer(const LkgpModel& m)
      : model(m),
        k_ss(eval_matrix(m.spatial_kernel, m.data.s_points, m.data.s_points)),
        k_tt(eval_matrix(m.temporal_kernel, m.data.t_points, m.data.t_points)),
        ns(lkgp::param_count(m.spatial_kernel)),
        nt(lkgp::param_count(m.temporal_kernel)),
        raw(m.pack_params()) {}

  bool is_noise(std::size_t index) const { return index == ns + nt; }
  double noise_chain() const { return softplus_grad(raw[ns + nt]); }

  /// Materialized operator for dK/dtheta_index (noiseless); not valid for
  /// the noise index.
  LatentKroneckerOperator derivative_operator(std::size_t index) const {
    if (index < ns) {
      Matrix d_ss = grad_matrix(model.spatial_kernel, model.data.s_points, index);
      return LatentKroneckerOperator(std::move(d_ss), k_tt, model.data.mask, 0.0);
    }
    Matrix d_tt = grad_matrix(model.temporal_kernel, model.data.t_points, index - ns);
    return LatentKroneckerOperator(k_ss, std::move(d_tt), model.data.mask, 0.0);
  }

  Matrix derivative_dense(std::size_t index) const {
    if (index < ns) {
      const Matrix d_ss = grad_matrix(model.spatial_kernel, model.data.s_points, index);
      return dense_observed_matrix(d_ss, k_tt, model.data.mask, 0.0);
    }
    const Matrix d_tt = grad_matrix(model.temporal_kernel, model.data.t_points, index - ns);
    return dense_observed_matrix(k_ss, d_tt, model.data.mask, 0.0);
  }
};

struct GradResult {
  std::vector<double> grad;
  double loss_proxy = 0.0;
  std::vector<SolveReport> reports;
};

GradResult compute_mll_grad(const LkgpModel& model, const SolverConfig& config,
                            std::size_t probe_count, bool exact_trace,
                            std::uint64_t probe_seed) {
  check_model(model);
  const std::size_t n = model.data.n();
  if (!exact_trace && probe_count == 0)
    throw ShapeMismatch("mll_grad_estimate: probe_count must be >= 1");
  if (exact_trace && n > 4096)
    throw OracleTooLarge("mll_grad_estimate: exact trace limited to n <= 4096");

  GradTermComputer terms(model);
  LatentKroneckerOperator op(terms.k_ss, terms.k_tt, model.data.mask, model.noise);

  const std::size_t rank = std::min(config.precond_rank, n);
  const auto factor = pivoted_cholesky(
      [&op](std::size_t i) { return op.diag_entry(i); },
      [&op](std::size_t i, std::span<double> out) { op.column(i, out); }, rank, n);
  const WoodburyPreconditioner precond(factor, model.noise);
  const ApplyFn precond_fn = precond.as_fn();
  const ApplyFn apply_fn = [&op](std::span<const double> x, std::span<double> out) {
    op.apply(x, out);
  };

  GradResult result;
  auto [v, v_report] = cg_solve(apply_fn, model.data.y, config, &precond_fn);
  result.reports.push_back(v_report);
  if (!v_report.converged)
    throw NumericalBreakdown("mll_grad_estimate: CG on y did not converge (residual " +
                             std::to_string(v_report.final_rel_residual) + ")");
  result.loss_proxy = 0.5 * linalg::dot(model.data.y, v);

  // Probe solves are shared across all parameters.
  std::vector<std::vector<double>> probes, solved;
  Matrix a_inverse;
  if (exact_trace) {
    const Matrix system = dense_observed_matrix(terms.k_ss, terms.k_tt, model.data.mask,
                                                model.noise);
    const Matrix l = cholesky_with_jitter(system);
    a_inverse = Matrix(n, n);
    std::vector<double> e(n, 0.0), z(n), col(n);
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = 1.0;
      linalg::solve_lower(l, e, z);
      linalg::solve_lower_trans(l, z, col);
      for (std::size_t i = 0; i < n; ++i) a_inverse(i, j) = col[i];
      e[j] = 0.0;
    }
  } else {
    probes = make_probes(n, probe_count, probe_seed);
    solved.reserve(probe_count);
    for (const auto& probe : probes) {
      auto [w, report] = cg_solve(apply_fn, probe, config, &precond_fn);
      result.reports.push_back(report);
      if (!report.converged)
        throw NumericalBreakdown("mll_grad_estimate: probe CG did not converge");
      solved.push_back(std::move(w));
    }
  }

  const std::size_t n_params = model.param_count();
  result.grad.resize(n_params);
  std::vector<double> dk_v(n), dk_z(n);
  for (std::size_t idx = 0; idx < n_params; ++idx) {
    double quad = 0.0, trace = 0.0;
    if (terms.is_noise(idx)) {
      const double chain = terms.noise_chain();
      quad = chain * linalg::dot(v, v);
      if (exact_trace) {
        for (std::size_t i = 0; i < n; ++i) trace += a_inverse(i, i);
        trace *= chain;
      } else {
        double acc = 0.0;
        for (std::size_t j = 0; j < probes.size(); ++j) acc += linalg::dot(solved[j], probes[j]);
        trace = chain * acc / static_cast<double>(probes.size());
      }
    } else {
      auto dk = terms.derivative_operator(idx);
      dk.apply(v, dk_v);
      quad = linalg::dot(v, dk_v);
      if (exact_trace) {
        const Matrix dk_dense = terms.derivative_dense(idx);
        for (std::size_t a = 0; a < n; ++a)
          for (std::size_t b = 0; b < n; ++b) trace += a_inverse(a, b) * dk_dense(b, a);
      } else {
        double acc = 0.0;
        for (std::size_t j = 0; j < probes.size(); ++j) {
          dk.apply(probes[j], dk_z);
          acc += linalg::dot(solved[j], dk_z);
        }
        trace = acc / static_cast<double>(probes.size());
      }
    }
    result.grad[idx] = 0.5 * quad - 0.5 * trace;
  }
  return result;
}

}  // namespace

std::vector<double> mll_grad_estimate(const LkgpModel& model, const SolverConfig& config,
                                      std::size_t probe_count, bool exact_trace) {
  return compute_mll_grad(model, config, probe_count, exact_trace, config.seed).grad;
}

FitReport fit(LkgpModel& model, const FitOptions& options, const SolverConfig& config) {
  const auto start = std::chrono::steady_clock::now();

  FitReport report;
  std::vector<double> theta = model.pack_params();
  std::vector<double> last_good = theta;
  const std::size_t n_params = theta.size();
  std::vector<double> m1(n_params, 0.0), m2(n_params, 0.0);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  for (std::size_t step = 1; step <= options.steps; ++step) {
    model.set_params(theta);
    GradResult grad;
    try {
      // Fresh probes every step, keyed by (seed, step).
      grad = compute_mll_grad(model, config, options.probe_count, options.exact_trace,
                              Rng::substream(options.seed, step).next_u64());
    } catch (const NumericalBreakdown& err) {
      model.set_params(last_good);
      report.aborted = true;
      report.diagnostic = "step " + std::to_string(step) + ": " + err.what();
      break;
    }
    bool finite = true;
    for (double g : grad.grad) finite = finite && std::isfinite(g);
    if (!finite) {
      model.set_params(last_good);
      report.aborted = true;
      report.diagnostic = "step " + std::to_string(step) + ": non-finite gradient";
      break;
    }

    // Adam ascent on the log marginal likelihood.
    for (std::size_t i = 0; i < n_params; ++i) {
      m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * grad.grad[i];
      m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * grad.grad[i] * grad.grad[i];
      const double m1_hat = m1[i] / (1.0 - std::pow(kBeta1, static_cast<double>(step)));
      const double m2_hat = m2[i] / (1.0 - std::pow(kBeta2, static_cast<double>(step)));
      theta[i] += options.learning_rate * m1_hat / (std::sqrt(m2_hat) + kEps);
    }
    last_good = theta;
    report.loss_proxy.push_back(grad.loss_proxy);
    report.param_trajectory.push_back(theta);
    report.solver_reports.insert(report.solver_reports.end(), grad.reports.begin(),
                                 grad.reports.end());
    report.steps_completed = step;
  }

  if (!report.aborted) model.set_params(theta);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

namespace {

void draw_prior_sample(const Matrix& l_ss, const Matrix& l_tt, Rng& rng,
                       std::span<double> out, std::span<double> scratch,
                       std::span<double> work) {
  for (auto& v : scratch) v = rng.normal();
  kron_mvm(l_ss, l_tt, scratch, out, work, nullptr);
}

}  // namespace

std::vector<double> prior_grid_sample(const LkgpModel& model, std::uint64_t seed) {
  check_model(model);
  const Matrix k_ss = eval_matrix(model.spatial_kernel, model.data.s_points, model.data.s_points);
  const Matrix k_tt =
      eval_matrix(model.temporal_kernel, model.data.t_points, model.data.t_points);
  const Matrix l_ss = cholesky_with_jitter(k_ss);
  const Matrix l_tt = cholesky_with_jitter(k_tt);
  const std::size_t pq = model.data.p() * model.data.q();
  std::vector<double> out(pq), scratch(pq), work(pq);
  Rng rng(seed);
  draw_prior_sample(l_ss, l_tt, rng, out, scratch, work);
  return out;
}

std::size_t PosteriorSamples::converged_count() const {
  std::size_t c = 0;
  for (auto flag : converged) c += flag;
  return c;
}

PosteriorSamples pathwise_posterior_samples(const LkgpModel& model, std::size_t n_samples,
                                            const SolverConfig& config, std::uint64_t seed) {
  check_model(model);
  const std::size_t n = model.data.n();
  const std::size_t pq = model.data.p() * model.data.q();
  const double noise_sd = std::sqrt(model.noise);

  const Matrix k_ss = eval_matrix(model.spatial_kernel, model.data.s_points, model.data.s_points);
  const Matrix k_tt =
      eval_matrix(model.temporal_kernel, model.data.t_points, model.data.t_points);
  const Matrix l_ss = cholesky_with_jitter(k_ss);
  const Matrix l_tt = cholesky_with_jitter(k_tt);

  const std::size_t rank = std::min(config.precond_rank, n);
  LatentKroneckerOperator proto(k_ss, k_tt, model.data.mask, model.noise);
  const auto factor = pivoted_cholesky(
      [&proto](std::size_t i) { return proto.diag_entry(i); },
      [&proto](std::size_t i, std::span<double> out) { proto.column(i, out); }, rank, n);
  const WoodburyPreconditioner precond(factor, model.noise);
  const ApplyFn precond_fn = precond.as_fn();

  PosteriorSamples result;
  result.samples = Matrix(n_samples, pq);
  result.converged.assign(n_samples, 0);
  result.reports.resize(n_samples);
  result.seed = seed;

  // Samples are independent given (seed, index); operator instances and
  // buffers are per thread.
#pragma omp parallel
  {
    LatentKroneckerOperator op = proto;
    const ApplyFn apply_fn = [&op](std::span<const double> x, std::span<double> out) {
      op.apply(x, out);
    };
    std::vector<double> f_grid(pq), scratch(pq), work(pq), b(n), update(pq);
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n_samples); ++i) {
      Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i));
      draw_prior_sample(l_ss, l_tt, rng, f_grid, scratch, work);
      project(model.data.mask, f_grid, b);
      for (std::size_t a = 0; a < n; ++a)
        b[a] = model.data.y[a] - b[a] - noise_sd * rng.normal();

      try {
        auto [r, rep] = cg_solve(apply_fn, b, config, &precond_fn);
        result.reports[i] = rep;
        result.converged[i] = rep.converged ? 1 : 0;
        if (rep.converged) {
          unproject(model.data.mask, r, scratch);
          kron_mvm(k_ss, k_tt, scratch, update, work, nullptr);
          double* row = result.samples.data() + static_cast<std::size_t>(i) * pq;
          for (std::size_t c = 0; c < pq; ++c) row[c] = f_grid[c] + update[c];
        }
      } catch (const NumericalBreakdown&) {
        result.converged[i] = 0;
      }
    }
  }
  return result;
}

Prediction predict(const LkgpModel& model, const PosteriorSamples& samples,
                   std::span<const std::int64_t> target_cells) {
  const std::size_t m = samples.converged_count();
  if (m == 0) throw NumericalBreakdown("predict: no converged posterior samples");
  const std::size_t pq = model.data.p() * model.data.q();

  Prediction pred;
  pred.cells.assign(target_cells.begin(), target_cells.end());
  pred.mean.resize(target_cells.size());
  pred.latent_variance.resize(target_cells.size());
  pred.variance.resize(target_cells.size());

  for (std::size_t c = 0; c < target_cells.size(); ++c) {
    const auto cell = target_cells[c];
    if (cell < 0 || cell >= static_cast<std::int64_t>(pq))
      throw IndexOutOfGrid("predict: cell " + std::to_string(cell) + " outside grid");
    double mean = 0.0;
    for (std::size_t i = 0; i < samples.count(); ++i)
      if (samples.converged[i]) mean += samples.samples(i, cell);
    mean /= static_cast<double>(m);
    double var = 0.0;
    if (m > 1) {
      for (std::size_t i = 0; i < samples.count(); ++i)
        if (samples.converged[i]) {
          const double d = samples.samples(i, cell) - mean;
          var += d * d;
        }
      var /= static_cast<double>(m - 1);
    }
    pred.mean[c] = mean;
    pred.latent_variance[c] = var;
    pred.variance[c] = var + model.noise;
  }
  return pred;
}

Prediction exact_posterior_reference(const LkgpModel& model,
                                     std::span<const std::int64_t> target_cells) {
  check_model(model);
  const std::size_t n = model.data.n();
  if (n > 4096) throw OracleTooLarge("exact_posterior_reference limited to n <= 4096");
  const std::size_t q = model.data.q();
  const std::size_t pq = model.data.p() * q;

  const Matrix k_ss = eval_matrix(model.spatial_kernel, model.data.s_points, model.data.s_points);
  const Matrix k_tt =
      eval_matrix(model.temporal_kernel, model.data.t_points, model.data.t_points);
  const Matrix system = dense_observed_matrix(k_ss, k_tt, model.data.mask, model.noise);
  const Matrix l = cholesky_with_jitter(system);

  std::vector<double> z(n), alpha(n);
  linalg::solve_lower(l, model.data.y, z);
  linalg::solve_lower_trans(l, z, alpha);

  const auto observed = model.data.mask.observed();
  for (const auto cell : target_cells)
    if (cell < 0 || cell >= static_cast<std::int64_t>(pq))
      throw IndexOutOfGrid("exact_posterior_reference: cell outside grid");

  Prediction pred;
  pred.cells.assign(target_cells.begin(), target_cells.end());
  pred.mean.resize(target_cells.size());
  pred.latent_variance.resize(target_cells.size());
  pred.variance.resize(target_cells.size());

#pragma omp parallel
  {
    std::vector<double> k_star(n), w(n);
#pragma omp for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(target_cells.size()); ++c) {
      const auto [j, k] = cell_coords(target_cells[c], q);
      for (std::size_t b = 0; b < n; ++b) {
        const auto [jb, kb] = cell_coords(observed[b], q);
        k_star[b] = k_ss(j, jb) * k_tt(k, kb);
      }
      pred.mean[c] = linalg::dot(k_star, alpha);
      linalg::solve_lower(l, k_star, w);
      const double latent = k_ss(j, j) * k_tt(k, k) - linalg::dot(w, w);
      pred.latent_variance[c] = std::max(latent, 0.0);
      pred.variance[c] = pred.latent_variance[c] + model.noise;
    }
  }
  return pred;
}

Metrics metrics(const Prediction& prediction, std::span<const double> truth) {
  if (truth.size() != prediction.mean.size())
    throw ShapeMismatch("metrics: truth length does not match prediction");
  if (truth.empty()) throw ShapeMismatch("metrics: empty prediction");
  double sq = 0.0, nll = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = prediction.mean[i] - truth[i];
    sq += d * d;
    const double var = prediction.variance[i];
    nll += 0.5 * std::log(2.0 * M_PI * var) + d * d / (2.0 * var);
  }
  const double count = static_cast<double>(truth.size());
  return {std::sqrt(sq / count), nll / count};
}

}  // namespace lkgp
