#pragma once

#include <span>

#include "lkgp/matrix.hpp"

namespace lkgp::linalg {

/// Applies the LKGP_THREADS env var cap to the OpenMP runtime. Call once at
/// program start; no-op when the variable is unset or unparsable.
void init_threads_from_env();

/// Number of threads the parallel kernels will use.
int max_threads();

// Parallel kernels. Each output element is accumulated in a fixed serial
// order, so results are bitwise identical to the *_serial references for
// any thread count.

/// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_serial(const Matrix& a, const Matrix& b);

/// C = A * B^T
Matrix matmul_transb(const Matrix& a, const Matrix& b);

/// C = A^T * A (Gram matrix, symmetric result)
Matrix gram(const Matrix& a);

/// y = A * x
void gemv(const Matrix& a, std::span<const double> x, std::span<double> y);
void gemv_serial(const Matrix& a, std::span<const double> x, std::span<double> y);

/// y = A^T * x
void gemv_trans(const Matrix& a, std::span<const double> x, std::span<double> y);

/// In-place lower Cholesky factorization; strict upper triangle is zeroed.
/// Returns false on a nonpositive pivot (matrix not positive definite).
bool try_cholesky(Matrix& a);
bool try_cholesky_serial(Matrix& a);

/// Solve L z = b with lower-triangular L.
void solve_lower(const Matrix& l, std::span<const double> b, std::span<double> z);

/// Solve L^T x = z with lower-triangular L.
void solve_lower_trans(const Matrix& l, std::span<const double> z, std::span<double> x);

double dot(std::span<const double> x, std::span<const double> y);
double norm2(std::span<const double> x);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

}  // namespace lkgp::linalg
