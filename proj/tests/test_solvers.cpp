#include <doctest.h>

#include <cmath>

#include "lkgp/errors.hpp"
#include "lkgp/linalg.hpp"
#include "lkgp/rng.hpp"
#include "lkgp/solvers.hpp"

using namespace lkgp;

namespace {

ApplyFn matrix_apply(const Matrix& m) {
  return [&m](std::span<const double> x, std::span<double> out) { linalg::gemv(m, x, out); };
}

Matrix random_spd(std::size_t n, Rng& rng, double shift = 1.0) {
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = rng.normal();
  Matrix s = linalg::gram(a);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += shift;
  return s;
}

std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("cg solves the identity in one iteration") {
  const Matrix eye = Matrix::identity(8);
  Rng rng(1);
  const auto b = random_vector(8, rng);
  const auto [x, report] = cg_solve(matrix_apply(eye), b, SolverConfig{1e-12, 100, 0, 0});
  CHECK(report.iterations == 1);
  CHECK(report.converged);
  for (std::size_t i = 0; i < 8; ++i) CHECK(x[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("cg matches the closed-form 2x2 solution") {
  Matrix a(2, 2);
  a(0, 0) = 4; a(0, 1) = 1; a(1, 0) = 1; a(1, 1) = 3;
  const std::vector<double> b{1, 2};
  const auto [x, report] = cg_solve(matrix_apply(a), b, SolverConfig{1e-14, 10, 0, 0});
  CHECK(report.converged);
  CHECK(x[0] == doctest::Approx(1.0 / 11.0).epsilon(1e-10));
  CHECK(x[1] == doctest::Approx(7.0 / 11.0).epsilon(1e-10));
}

TEST_CASE("cg terminates finitely on a diagonal system") {
  const std::size_t n = 24;
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) a(i, i) = static_cast<double>(i + 1);
  const std::vector<double> b(n, 1.0);
  const auto [x, report] = cg_solve(matrix_apply(a), b, SolverConfig{1e-10, n, 0, 0});
  CHECK(report.converged);
  CHECK(report.iterations <= n);
  for (std::size_t i = 0; i < n; ++i)
    CHECK(x[i] == doctest::Approx(1.0 / static_cast<double>(i + 1)).epsilon(1e-8));
}

TEST_CASE("cg handles a zero right-hand side") {
  const Matrix eye = Matrix::identity(5);
  const std::vector<double> b(5, 0.0);
  const auto [x, report] = cg_solve(matrix_apply(eye), b, SolverConfig{});
  CHECK(report.iterations == 0);
  CHECK(report.converged);
  CHECK(x == std::vector<double>(5, 0.0));
}

TEST_CASE("cg reports the iteration of a numerical breakdown") {
  const ApplyFn nan_apply = [](std::span<const double>, std::span<double> out) {
    for (auto& v : out) v = std::numeric_limits<double>::quiet_NaN();
  };
  const std::vector<double> b{1.0, 1.0};
  CHECK_THROWS_AS((void)cg_solve(nan_apply, b, SolverConfig{}), NumericalBreakdown);
}

TEST_CASE("cg convergence flag is consistent with the residual") {
  Rng rng(2);
  const Matrix a = random_spd(32, rng, 0.01);  // poorly conditioned
  const auto b = random_vector(32, rng);
  const SolverConfig strict{1e-13, 3, 0, 0};
  const auto [x, report] = cg_solve(matrix_apply(a), b, strict);
  CHECK(report.converged == (report.final_rel_residual <= strict.rel_tol));
}

TEST_CASE("cg with a tight tolerance matches the direct solve") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 8 + rng.uniform_below(56);
    const Matrix a = random_spd(n, rng);
    const auto x_true = random_vector(n, rng);
    std::vector<double> b(n);
    linalg::gemv(a, x_true, b);
    const auto [x, report] = cg_solve(matrix_apply(a), b, SolverConfig{1e-10, 4 * n, 0, 0});
    CHECK(report.converged);
    double err = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      err += (x[i] - x_true[i]) * (x[i] - x_true[i]);
      ref += x_true[i] * x_true[i];
    }
    CHECK(std::sqrt(err) <= 1e-6 * std::sqrt(ref));
  }
}

TEST_CASE("pivoted cholesky at full rank factorizes exactly") {
  Rng rng(4);
  const std::size_t n = 20;
  const Matrix a = random_spd(n, rng);
  const auto factor = pivoted_cholesky([&](std::size_t i) { return a(i, i); },
                                       [&](std::size_t i, std::span<double> out) {
                                         for (std::size_t r = 0; r < n; ++r) out[r] = a(r, i);
                                       },
                                       n, n);
  const Matrix rebuilt = linalg::matmul_transb(factor.l, factor.l);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, a(i, i));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      CHECK(std::abs(rebuilt(i, j) - a(i, j)) <= 1e-10 * max_diag);
}

TEST_CASE("pivoted cholesky picks the largest diagonal entries first") {
  const std::size_t n = 5;
  Matrix a(n, n);
  const double diag[] = {0.5, 3.0, 1.0, 7.0, 2.0};
  for (std::size_t i = 0; i < n; ++i) a(i, i) = diag[i];
  const auto factor = pivoted_cholesky([&](std::size_t i) { return a(i, i); },
                                       [&](std::size_t i, std::span<double> out) {
                                         for (std::size_t r = 0; r < n; ++r) out[r] = a(r, i);
                                       },
                                       2, n);
  REQUIRE(factor.pivots.size() == 2);
  CHECK(factor.pivots[0] == 3);
  CHECK(factor.pivots[1] == 1);
}

TEST_CASE("pivoted cholesky with rank zero and on non-psd input") {
  const auto factor = pivoted_cholesky([](std::size_t) { return 1.0; },
                                       [](std::size_t, std::span<double>) {}, 0, 4);
  CHECK(factor.rank() == 0);
  CHECK(factor.pivots.empty());

  Matrix bad(2, 2);
  bad(0, 0) = 1; bad(0, 1) = 2; bad(1, 0) = 2; bad(1, 1) = 1;
  CHECK_THROWS_AS((void)pivoted_cholesky([&](std::size_t i) { return bad(i, i); },
                                         [&](std::size_t i, std::span<double> out) {
                                           for (std::size_t r = 0; r < 2; ++r) out[r] = bad(r, i);
                                         },
                                         2, 2),
                  NotPSD);
}

TEST_CASE("pivoted cholesky stops early on low-rank input") {
  Rng rng(5);
  const std::size_t n = 30, true_rank = 4;
  Matrix g(n, true_rank);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < true_rank; ++j) g(i, j) = rng.normal();
  const Matrix a = linalg::matmul_transb(g, g);
  const auto factor = pivoted_cholesky([&](std::size_t i) { return a(i, i); },
                                       [&](std::size_t i, std::span<double> out) {
                                         for (std::size_t r = 0; r < n; ++r) out[r] = a(r, i);
                                       },
                                       n, n);
  CHECK(factor.rank() == true_rank);
}

TEST_CASE("woodbury preconditioner matches the dense inverse") {
  Rng rng(6);
  const std::size_t n = 64, r = 12;
  Matrix l(n, r);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < r; ++j) l(i, j) = rng.normal() * 0.6;
  const double noise = 0.37;

  PivotedCholeskyFactor factor;
  factor.l = l;
  const WoodburyPreconditioner precond(factor, noise);

  Matrix dense = linalg::matmul_transb(l, l);
  for (std::size_t i = 0; i < n; ++i) dense(i, i) += noise;
  Matrix chol = dense;
  REQUIRE(linalg::try_cholesky(chol));

  for (int trial = 0; trial < 5; ++trial) {
    const auto z = random_vector(n, rng);
    const auto fast = precond.apply(z);
    std::vector<double> tmp(n), exact(n);
    linalg::solve_lower(chol, z, tmp);
    linalg::solve_lower_trans(chol, tmp, exact);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(std::abs(fast[i] - exact[i]) <= 1e-8 * (1.0 + std::abs(exact[i])));

    // Composing with the forward operator is the identity.
    std::vector<double> forward(n);
    linalg::gemv(dense, fast, forward);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(forward[i] == doctest::Approx(z[i]).epsilon(1e-8));
  }
}

TEST_CASE("preconditioning does not increase iteration counts on low-rank systems") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 128, rank = 10;
    Matrix g(n, rank);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < rank; ++j) g(i, j) = rng.normal();
    Matrix a = linalg::matmul_transb(g, g);
    const double noise = 0.05;
    for (std::size_t i = 0; i < n; ++i) a(i, i) += noise;
    const auto b = random_vector(n, rng);

    // Noiseless part exposed to the factorization, as in the GP solves.
    const auto factor = pivoted_cholesky([&](std::size_t i) { return a(i, i) - noise; },
                                         [&](std::size_t i, std::span<double> out) {
                                           for (std::size_t r2 = 0; r2 < n; ++r2)
                                             out[r2] = a(r2, i);
                                           out[i] -= noise;
                                         },
                                         rank, n);
    const WoodburyPreconditioner precond(factor, noise);
    const ApplyFn precond_fn = precond.as_fn();

    const SolverConfig config{1e-8, 1000, rank, 0};
    const auto [xp, with] = cg_solve(matrix_apply(a), b, config, &precond_fn);
    const auto [xu, without] = cg_solve(matrix_apply(a), b, config, nullptr);
    CHECK(with.converged);
    CHECK(without.converged);
    CHECK(with.iterations <= without.iterations);
  }
}

TEST_CASE("probe vectors are deterministic rademacher draws") {
  CHECK(make_probes(8, 0, 1).empty());

  const auto a = make_probes(4, 3, 99);
  const auto b = make_probes(4, 3, 99);
  CHECK(a == b);
  for (const auto& probe : a)
    for (double v : probe) CHECK((v == 1.0 || v == -1.0));

  // Empirical second moment approaches the identity.
  const std::size_t n = 4, count = 100000;
  const auto probes = make_probes(n, count, 7);
  Matrix second(n, n);
  for (const auto& z : probes)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) second(i, j) += z[i] * z[j];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double expected = i == j ? 1.0 : 0.0;
      CHECK(std::abs(second(i, j) / count - expected) < 0.02);
    }
}
