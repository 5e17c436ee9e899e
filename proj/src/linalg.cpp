#include "lkgp/linalg.hpp"

#include <omp.h>

#include <cmath>
#include <cstdlib>
#include <string>

namespace lkgp::linalg {

void init_threads_from_env() {
  const char* raw = std::getenv("LKGP_THREADS");
  if (raw == nullptr) return;
  char* end = nullptr;
  const long value = std::strtol(raw, &end, 10);
  if (end == raw || value < 1) return;
  const int hw = omp_get_max_threads();
  omp_set_num_threads(static_cast<int>(value) < hw ? static_cast<int>(value) : hw);
}

int max_threads() { return omp_get_max_threads(); }

namespace {

void check_matmul_shapes(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_matmul_shapes(a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix c(m, n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double* ci = c.data() + i * n;
    const double* ai = a.data() + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = ai[l];
      const double* bl = b.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
  return c;
}

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
  check_matmul_shapes(a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    const double* ai = a.data() + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = ai[l];
      const double* bl = b.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
  return c;
}

Matrix matmul_transb(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeMismatch("matmul_transb: inner dimensions differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Matrix c(m, n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const double* ai = a.data() + i * k;
    double* ci = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] = acc;
    }
  }
  return c;
}

Matrix gram(const Matrix& a) {
  const std::size_t n = a.rows(), r = a.cols();
  Matrix c(r, r);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(r); ++i) {
    for (std::size_t j = 0; j <= static_cast<std::size_t>(i); ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < n; ++l) acc += a(l, i) * a(l, j);
      c(i, j) = acc;
      c(j, i) = acc;
    }
  }
  return c;
}

void gemv(const Matrix& a, std::span<const double> x, std::span<double> y) {
  if (x.size() != a.cols() || y.size() != a.rows())
    throw ShapeMismatch("gemv: vector length mismatch");
  const std::size_t n = a.cols();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(a.rows()); ++i) {
    const double* ai = a.data() + i * n;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += ai[j] * x[j];
    y[i] = acc;
  }
}

void gemv_serial(const Matrix& a, std::span<const double> x, std::span<double> y) {
  if (x.size() != a.cols() || y.size() != a.rows())
    throw ShapeMismatch("gemv: vector length mismatch");
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.data() + i * n;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += ai[j] * x[j];
    y[i] = acc;
  }
}

void gemv_trans(const Matrix& a, std::span<const double> x, std::span<double> y) {
  if (x.size() != a.rows() || y.size() != a.cols())
    throw ShapeMismatch("gemv_trans: vector length mismatch");
  const std::size_t n = a.cols();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(n); ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) acc += a(i, j) * x[i];
    y[j] = acc;
  }
}

// Right-looking factorization: pivot k is eliminated serially, the trailing
// update is parallel over columns. Every element sees the same sequence of
// fused updates regardless of thread count.
bool try_cholesky(Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeMismatch("cholesky: matrix not square");
  const std::size_t n = a.rows();
  for (std::size_t k = 0; k < n; ++k) {
    const double pivot = a(k, k);
    if (!(pivot > 0.0) || !std::isfinite(pivot)) return false;
    const double lkk = std::sqrt(pivot);
    a(k, k) = lkk;
    const double inv = 1.0 / lkk;
    for (std::size_t i = k + 1; i < n; ++i) a(i, k) *= inv;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = static_cast<std::ptrdiff_t>(k) + 1;
         j < static_cast<std::ptrdiff_t>(n); ++j) {
      const double ljk = a(j, k);
      for (std::size_t i = j; i < n; ++i) a(i, j) -= a(i, k) * ljk;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = 0.0;
  return true;
}

bool try_cholesky_serial(Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeMismatch("cholesky: matrix not square");
  const std::size_t n = a.rows();
  for (std::size_t k = 0; k < n; ++k) {
    const double pivot = a(k, k);
    if (!(pivot > 0.0) || !std::isfinite(pivot)) return false;
    const double lkk = std::sqrt(pivot);
    a(k, k) = lkk;
    const double inv = 1.0 / lkk;
    for (std::size_t i = k + 1; i < n; ++i) a(i, k) *= inv;
    for (std::size_t j = k + 1; j < n; ++j) {
      const double ljk = a(j, k);
      for (std::size_t i = j; i < n; ++i) a(i, j) -= a(i, k) * ljk;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = 0.0;
  return true;
}

void solve_lower(const Matrix& l, std::span<const double> b, std::span<double> z) {
  const std::size_t n = l.rows();
  if (b.size() != n || z.size() != n) throw ShapeMismatch("solve_lower: length mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    double acc = b[i];
    for (std::size_t j = 0; j < i; ++j) acc -= l(i, j) * z[j];
    z[i] = acc / l(i, i);
  }
}

void solve_lower_trans(const Matrix& l, std::span<const double> z, std::span<double> x) {
  const std::size_t n = l.rows();
  if (z.size() != n || x.size() != n) throw ShapeMismatch("solve_lower_trans: length mismatch");
  for (std::size_t ii = n; ii-- > 0;) {
    double acc = z[ii];
    for (std::size_t j = ii + 1; j < n; ++j) acc -= l(j, ii) * x[j];
    x[ii] = acc / l(ii, ii);
  }
}

double dot(std::span<const double> x, std::span<const double> y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace lkgp::linalg
