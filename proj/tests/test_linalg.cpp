#include <doctest.h>

#include <cmath>

#include "lkgp/linalg.hpp"
#include "lkgp/rng.hpp"

using namespace lkgp;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

// SPD by construction: A^T A + n I.
Matrix random_spd(std::size_t n, Rng& rng) {
  const Matrix a = random_matrix(n, n, rng);
  Matrix s = linalg::gram(a);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += static_cast<double>(n);
  return s;
}

}  // namespace

TEST_CASE("matmul matches hand computation") {
  Matrix a(2, 2), b(2, 2);
  a(0, 0) = 1; a(0, 1) = 2; a(1, 0) = 3; a(1, 1) = 4;
  b(0, 0) = 5; b(0, 1) = 6; b(1, 0) = 7; b(1, 1) = 8;
  const Matrix c = linalg::matmul(a, b);
  CHECK(c(0, 0) == 19);
  CHECK(c(0, 1) == 22);
  CHECK(c(1, 0) == 43);
  CHECK(c(1, 1) == 50);
}

TEST_CASE("parallel kernels are bitwise identical to serial references") {
  Rng rng(7);
  const Matrix a = random_matrix(37, 23, rng);
  const Matrix b = random_matrix(23, 41, rng);
  CHECK(linalg::matmul(a, b) == linalg::matmul_serial(a, b));

  std::vector<double> x(23), y_par(37), y_ser(37);
  for (auto& v : x) v = rng.normal();
  linalg::gemv(a, x, y_par);
  linalg::gemv_serial(a, x, y_ser);
  CHECK(y_par == y_ser);

  Matrix spd_par = random_spd(31, rng);
  Matrix spd_ser = spd_par;
  REQUIRE(linalg::try_cholesky(spd_par));
  REQUIRE(linalg::try_cholesky_serial(spd_ser));
  CHECK(spd_par == spd_ser);
}

TEST_CASE("cholesky reconstructs the input") {
  Rng rng(11);
  const Matrix a = random_spd(24, rng);
  Matrix l = a;
  REQUIRE(linalg::try_cholesky(l));
  const Matrix rebuilt = linalg::matmul_transb(l, l);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      CHECK(rebuilt(i, j) == doctest::Approx(a(i, j)).epsilon(1e-10));
}

TEST_CASE("cholesky rejects indefinite matrices") {
  Matrix a(2, 2);
  a(0, 0) = 1; a(0, 1) = 2; a(1, 0) = 2; a(1, 1) = 1;
  CHECK_FALSE(linalg::try_cholesky(a));
}

TEST_CASE("triangular solves invert the factorization") {
  Rng rng(3);
  const std::size_t n = 16;
  const Matrix a = random_spd(n, rng);
  Matrix l = a;
  REQUIRE(linalg::try_cholesky(l));
  std::vector<double> x_true(n), b(n), z(n), x(n);
  for (auto& v : x_true) v = rng.normal();
  linalg::gemv(a, x_true, b);
  linalg::solve_lower(l, b, z);
  linalg::solve_lower_trans(l, z, x);
  for (std::size_t i = 0; i < n; ++i)
    CHECK(x[i] == doctest::Approx(x_true[i]).epsilon(1e-9));
}

TEST_CASE("gemv_trans and gram agree with explicit products") {
  Rng rng(5);
  const Matrix a = random_matrix(9, 6, rng);
  std::vector<double> x(9), y(6);
  for (auto& v : x) v = rng.normal();
  linalg::gemv_trans(a, x, y);
  for (std::size_t j = 0; j < 6; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 9; ++i) acc += a(i, j) * x[i];
    CHECK(y[j] == doctest::Approx(acc).epsilon(1e-12));
  }

  const Matrix g = linalg::gram(a);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < 9; ++l) acc += a(l, i) * a(l, j);
      CHECK(g(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("shape mismatches are rejected") {
  const Matrix a(3, 4), b(3, 4);
  CHECK_THROWS_AS((void)linalg::matmul(a, b), ShapeMismatch);
  std::vector<double> x(3), y(3);
  CHECK_THROWS_AS(linalg::gemv(a, x, y), ShapeMismatch);
}
