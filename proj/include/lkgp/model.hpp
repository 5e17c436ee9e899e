#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lkgp/grid.hpp"
#include "lkgp/kernels.hpp"
#include "lkgp/kron.hpp"
#include "lkgp/solvers.hpp"

namespace lkgp {

/**
 * Gaussian process with product kernel k((s,t), (s',t')) = k_S(s,s') k_T(t,t')
 * over a partially observed grid. Parameters live in a flat unconstrained
 * vector [spatial kernel, temporal kernel, raw noise].
 */
struct LkgpModel {
  PartialGrid data;
  KernelSpec spatial_kernel;
  KernelSpec temporal_kernel;
  double noise = 0.6931471805599453;  // softplus(0)

  std::size_t param_count() const;
  std::vector<double> pack_params() const;
  void set_params(std::span<const double> raw);
};

/// Materialized latent Kronecker operator for the model's current parameters.
LatentKroneckerOperator make_operator(const LkgpModel& model);

/// Lower Cholesky factor with relative jitter escalation
/// (0, 1e-10, 1e-8, 1e-6 of the mean diagonal); throws NumericalBreakdown.
Matrix cholesky_with_jitter(Matrix a);

/// Dense-oracle log evidence -0.5 y' K^{-1} y - 0.5 logdet K - n/2 log 2pi
/// with K = P (K_SS kron K_TT) P^T + noise I; guarded to n <= 4096.
double log_marginal_likelihood_exact(const LkgpModel& model);

/**
 * Gradient of the log marginal likelihood over the unconstrained parameter
 * vector: 0.5 v' dK v - 0.5 tr(A^{-1} dK) with v = A^{-1} y. Solves run
 * through preconditioned CG against the latent operator; the trace term
 * uses Hutchinson probes, or the dense inverse when exact_trace is set
 * (n <= 4096). Throws NumericalBreakdown if a solve fails to converge.
 */
std::vector<double> mll_grad_estimate(const LkgpModel& model, const SolverConfig& config,
                                      std::size_t probe_count, bool exact_trace);

struct FitOptions {
  std::size_t steps = 100;
  double learning_rate = 0.1;
  std::size_t probe_count = 16;
  bool exact_trace = false;
  std::uint64_t seed = 0;
};

struct FitReport {
  std::vector<double> loss_proxy;                     // 0.5 y'v per step, the
                                                      // quadratic part of the
                                                      // negative log likelihood
  std::vector<std::vector<double>> param_trajectory;  // after each step
  std::vector<SolveReport> solver_reports;
  double wall_seconds = 0.0;
  std::size_t steps_completed = 0;
  bool aborted = false;
  std::string diagnostic;
};

/// Adam ascent on the estimated marginal likelihood gradient in
/// unconstrained space (beta1 0.9, beta2 0.999, eps 1e-8). Probes are
/// redrawn each step from (seed, step). A non-finite gradient or solver
/// breakdown aborts, restoring the last good parameters.
FitReport fit(LkgpModel& model, const FitOptions& options, const SolverConfig& config);

/// Exact draw from the GP prior on the full p*q grid via Kronecker-factored
/// Cholesky; never materializes the pq x pq covariance.
std::vector<double> prior_grid_sample(const LkgpModel& model, std::uint64_t seed);

struct PosteriorSamples {
  Matrix samples;                   // n_samples x pq function values
  std::vector<std::uint8_t> converged;
  std::vector<SolveReport> reports;
  std::uint64_t seed = 0;

  std::size_t count() const { return samples.rows(); }
  std::size_t converged_count() const;
};

/**
 * Pathwise-conditioned posterior samples on the full grid: each sample is
 * prior draw + (K_SS kron K_TT) P^T r with
 * r = (P (K_SS kron K_TT) P^T + noise I)^{-1} (y - P f - eps).
 * Sample i draws its randomness only from (seed, i), so results are
 * independent of execution order. Non-converged solves are flagged.
 */
PosteriorSamples pathwise_posterior_samples(const LkgpModel& model, std::size_t n_samples,
                                            const SolverConfig& config, std::uint64_t seed);

struct Prediction {
  std::vector<std::int64_t> cells;
  std::vector<double> mean;
  std::vector<double> latent_variance;
  std::vector<double> variance;  // observation space: latent + noise
};

/// Sample moments at the target cells; variance uses divisor m - 1 over the
/// converged samples.
Prediction predict(const LkgpModel& model, const PosteriorSamples& samples,
                   std::span<const std::int64_t> target_cells);

/// Closed-form posterior mean and variance through the dense oracle
/// (n <= 4096).
Prediction exact_posterior_reference(const LkgpModel& model,
                                     std::span<const std::int64_t> target_cells);

struct Metrics {
  double rmse = 0.0;
  double mean_nll = 0.0;
};

/// RMSE and mean per-point Gaussian predictive NLL in observation space.
Metrics metrics(const Prediction& prediction, std::span<const double> truth);

}  // namespace lkgp
