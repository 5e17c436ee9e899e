#include "lkgp/solvers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lkgp/errors.hpp"
#include "lkgp/linalg.hpp"
#include "lkgp/rng.hpp"

namespace lkgp {

std::pair<std::vector<double>, SolveReport> cg_solve(const ApplyFn& apply,
                                                     std::span<const double> b,
                                                     const SolverConfig& config,
                                                     const ApplyFn* precond) {
  if (config.rel_tol <= 0.0 || config.rel_tol >= 1.0)
    throw ShapeMismatch("cg_solve: rel_tol must lie in (0, 1)");
  const std::size_t n = b.size();
  std::vector<double> x(n, 0.0);
  SolveReport report;

  const double b_norm = linalg::norm2(b);
  if (!std::isfinite(b_norm)) throw NumericalBreakdown("cg_solve: non-finite right-hand side");
  if (b_norm == 0.0) {
    report.converged = true;
    return {std::move(x), report};
  }

  std::vector<double> r(b.begin(), b.end());
  std::vector<double> z(n), p(n), ap(n);
  if (precond) {
    (*precond)(r, z);
  } else {
    z = r;
  }
  p = z;
  double rz = linalg::dot(r, z);

  for (std::size_t iter = 1; iter <= config.max_iters; ++iter) {
    apply(p, ap);
    const double p_ap = linalg::dot(p, ap);
    const double alpha = rz / p_ap;
    if (!std::isfinite(alpha))
      throw NumericalBreakdown("cg_solve: breakdown at iteration " + std::to_string(iter));
    linalg::axpy(alpha, p, x);
    linalg::axpy(-alpha, ap, r);

    const double rel = linalg::norm2(r) / b_norm;
    if (!std::isfinite(rel))
      throw NumericalBreakdown("cg_solve: non-finite residual at iteration " +
                               std::to_string(iter));
    report.iterations = iter;
    report.final_rel_residual = rel;
    if (rel <= config.rel_tol) {
      report.converged = true;
      return {std::move(x), report};
    }

    if (precond) {
      (*precond)(r, z);
    } else {
      z = r;
    }
    const double rz_next = linalg::dot(r, z);
    const double beta = rz_next / rz;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    rz = rz_next;
  }
  return {std::move(x), report};
}

PivotedCholeskyFactor pivoted_cholesky(
    const std::function<double(std::size_t)>& diag,
    const std::function<void(std::size_t, std::span<double>)>& column, std::size_t rank,
    std::size_t n) {
  if (rank > n) throw ShapeMismatch("pivoted_cholesky: rank exceeds dimension");
  PivotedCholeskyFactor factor;
  if (rank == 0) {
    factor.l = Matrix(n, 0);
    return factor;
  }

  std::vector<double> residual(n);
  for (std::size_t i = 0; i < n; ++i) residual[i] = diag(i);
  const double initial_max = *std::max_element(residual.begin(), residual.end());
  if (initial_max <= 0.0) {
    factor.l = Matrix(n, 0);
    return factor;
  }

  Matrix l(n, rank);
  std::vector<double> col(n);
  std::size_t achieved = 0;

  for (std::size_t m = 0; m < rank; ++m) {
    std::size_t pivot = 0;
    double best = residual[0];
    for (std::size_t i = 1; i < n; ++i)
      if (residual[i] > best) {
        best = residual[i];
        pivot = i;
      }
    const double worst = *std::min_element(residual.begin(), residual.end());
    if (worst < -1e-8 * initial_max)
      throw NotPSD("pivoted_cholesky: residual diagonal " + std::to_string(worst) +
                   " at step " + std::to_string(m));
    if (best < 1e-12 * initial_max) break;

    column(pivot, col);
    for (std::size_t mp = 0; mp < m; ++mp) {
      const double lp = l(pivot, mp);
      for (std::size_t i = 0; i < n; ++i) col[i] -= l(i, mp) * lp;
    }
    const double scale = 1.0 / std::sqrt(best);
    col[pivot] = best;  // use tracked residual for the pivot entry
    for (std::size_t i = 0; i < n; ++i) l(i, m) = col[i] * scale;
    for (std::size_t i = 0; i < n; ++i) residual[i] -= l(i, m) * l(i, m);
    residual[pivot] = 0.0;
    factor.pivots.push_back(pivot);
    ++achieved;
  }

  // Shrink to the achieved rank.
  factor.l = Matrix(n, achieved);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < achieved; ++m) factor.l(i, m) = l(i, m);
  return factor;
}

WoodburyPreconditioner::WoodburyPreconditioner(const PivotedCholeskyFactor& factor,
                                               double noise)
    : l_(factor.l), noise_(noise) {
  if (noise_ <= 0.0)
    throw ShapeMismatch("preconditioner: noise variance must be positive");
  const std::size_t r = l_.cols();
  capacitance_chol_ = linalg::gram(l_);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) capacitance_chol_(i, j) /= noise_;
    capacitance_chol_(i, i) += 1.0;
  }
  if (!linalg::try_cholesky(capacitance_chol_))
    throw NotPSD("preconditioner: capacitance system not positive definite");
}

void WoodburyPreconditioner::apply(std::span<const double> z, std::span<double> out) const {
  const std::size_t n = l_.rows(), r = l_.cols();
  if (z.size() != n || out.size() != n)
    throw ShapeMismatch("preconditioner apply: length mismatch");
  if (r == 0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = z[i] / noise_;
    return;
  }
  std::vector<double> u(r), w(r), v(r);
  linalg::gemv_trans(l_, z, u);
  linalg::solve_lower(capacitance_chol_, u, w);
  linalg::solve_lower_trans(capacitance_chol_, w, v);
  linalg::gemv(l_, v, out);
  for (std::size_t i = 0; i < n; ++i) out[i] = (z[i] - out[i] / noise_) / noise_;
}

std::vector<double> WoodburyPreconditioner::apply(std::span<const double> z) const {
  std::vector<double> out(z.size());
  apply(z, out);
  return out;
}

ApplyFn WoodburyPreconditioner::as_fn() const {
  return [this](std::span<const double> z, std::span<double> out) { apply(z, out); };
}

std::vector<std::vector<double>> make_probes(std::size_t n, std::size_t count,
                                             std::uint64_t seed) {
  std::vector<std::vector<double>> probes(count);
  Rng rng(seed);
  for (auto& probe : probes) {
    probe.resize(n);
    for (auto& v : probe) v = static_cast<double>(rng.rademacher());
  }
  return probes;
}

}  // namespace lkgp
