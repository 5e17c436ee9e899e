#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lkgp/matrix.hpp"

namespace lkgp {

struct SolverConfig {
  double rel_tol = 0.01;
  std::size_t max_iters = 1000;
  std::size_t precond_rank = 100;
  std::uint64_t seed = 0;
};

struct SolveReport {
  std::size_t iterations = 0;
  double final_rel_residual = 0.0;
  bool converged = false;
};

using ApplyFn = std::function<void(std::span<const double>, std::span<double>)>;

/**
 * Preconditioned conjugate gradients for an SPD operator on R^n.
 * Stops when |A x - b| / |b| <= rel_tol or after max_iters. b = 0 returns
 * x = 0 in zero iterations. Throws NumericalBreakdown when a non-finite
 * value appears, reporting the iteration.
 */
std::pair<std::vector<double>, SolveReport> cg_solve(const ApplyFn& apply,
                                                     std::span<const double> b,
                                                     const SolverConfig& config,
                                                     const ApplyFn* precond = nullptr);

/// Partial Cholesky factor chosen by greedy largest-residual-diagonal pivoting.
struct PivotedCholeskyFactor {
  Matrix l;                          // n x r
  std::vector<std::size_t> pivots;   // chosen indices, one per column

  std::size_t rank() const { return l.cols(); }
};

/**
 * Greedy pivoted Cholesky of an SPD matrix accessed through diagonal and
 * column callbacks. Stops early once the largest residual diagonal falls
 * below 1e-12 of its initial value; a residual diagonal below -1e-8 of the
 * initial maximum raises NotPSD.
 */
PivotedCholeskyFactor pivoted_cholesky(const std::function<double(std::size_t)>& diag,
                                       const std::function<void(std::size_t, std::span<double>)>& column,
                                       std::size_t rank, std::size_t n);

/**
 * Applies (L L^T + noise I)^{-1} through the r x r capacitance system
 * I + L^T L / noise, factored once at construction.
 */
class WoodburyPreconditioner {
 public:
  WoodburyPreconditioner(const PivotedCholeskyFactor& factor, double noise);

  void apply(std::span<const double> z, std::span<double> out) const;
  std::vector<double> apply(std::span<const double> z) const;

  ApplyFn as_fn() const;

 private:
  Matrix l_;
  Matrix capacitance_chol_;
  double noise_;
};

/// `count` i.i.d. Rademacher vectors in {-1, +1}^n, deterministic per seed.
std::vector<std::vector<double>> make_probes(std::size_t n, std::size_t count,
                                             std::uint64_t seed);

}  // namespace lkgp
