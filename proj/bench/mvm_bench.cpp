// Compares the OpenMP kernels against their serial reference
// implementations: wall time and bitwise agreement.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <vector>

#include "lkgp/kron.hpp"
#include "lkgp/linalg.hpp"
#include "lkgp/rng.hpp"

using namespace lkgp;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

template <typename Fn>
double time_best_of(std::size_t reps, Fn&& fn) {
  double best = 1e300;
  for (std::size_t r = 0; r < reps; ++r) {
    const double start = now_ms();
    fn();
    best = std::min(best, now_ms() - start);
  }
  return best;
}

Matrix random_matrix(std::size_t n, Rng& rng) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) = rng.normal();
  return m;
}

Matrix random_spd(std::size_t n, Rng& rng) {
  Matrix a = random_matrix(n, rng);
  Matrix s = linalg::gram(a);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += static_cast<double>(n);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  linalg::init_threads_from_env();
  std::size_t reps = 5;
  if (argc > 1) reps = static_cast<std::size_t>(std::strtoul(argv[1], nullptr, 10));

  std::printf("threads: %d, reps: %zu (best-of timing)\n\n", linalg::max_threads(), reps);
  std::printf("%-28s %10s %10s %8s %8s\n", "kernel", "serial ms", "omp ms", "speedup",
              "bitwise");

  Rng rng(0);
  bool all_equal = true;

  for (const std::size_t n : {128, 256, 512}) {
    const Matrix a = random_matrix(n, rng);
    const Matrix b = random_matrix(n, rng);
    Matrix out_serial, out_parallel;
    const double serial =
        time_best_of(reps, [&] { out_serial = linalg::matmul_serial(a, b); });
    const double parallel = time_best_of(reps, [&] { out_parallel = linalg::matmul(a, b); });
    const bool equal = out_serial == out_parallel;
    all_equal = all_equal && equal;
    char label[64];
    std::snprintf(label, sizeof(label), "matmul %zux%zu", n, n);
    std::printf("%-28s %10.3f %10.3f %7.2fx %8s\n", label, serial, parallel,
                serial / parallel, equal ? "yes" : "NO");
  }

  for (const std::size_t n : {256, 512, 1024}) {
    const Matrix spd = random_spd(n, rng);
    Matrix chol_serial, chol_parallel;
    const double serial = time_best_of(reps, [&] {
      chol_serial = spd;
      linalg::try_cholesky_serial(chol_serial);
    });
    const double parallel = time_best_of(reps, [&] {
      chol_parallel = spd;
      linalg::try_cholesky(chol_parallel);
    });
    const bool equal = chol_serial == chol_parallel;
    all_equal = all_equal && equal;
    char label[64];
    std::snprintf(label, sizeof(label), "cholesky %zux%zu", n, n);
    std::printf("%-28s %10.3f %10.3f %7.2fx %8s\n", label, serial, parallel,
                serial / parallel, equal ? "yes" : "NO");
  }

  for (const auto [p, q] : {std::pair<std::size_t, std::size_t>{256, 64},
                            {512, 128},
                            {128, 512}}) {
    const Matrix k_ss = random_spd(p, rng);
    const Matrix k_tt = random_spd(q, rng);
    std::vector<double> x(p * q), ys(p * q), yp(p * q), work(p * q);
    for (auto& v : x) v = rng.normal();
    const double serial =
        time_best_of(reps, [&] { kron_mvm_serial(k_ss, k_tt, x, ys, work, nullptr); });
    const double parallel =
        time_best_of(reps, [&] { kron_mvm(k_ss, k_tt, x, yp, work, nullptr); });
    const bool equal = ys == yp;
    all_equal = all_equal && equal;
    char label[64];
    std::snprintf(label, sizeof(label), "kron_mvm p=%zu q=%zu", p, q);
    std::printf("%-28s %10.3f %10.3f %7.2fx %8s\n", label, serial, parallel,
                serial / parallel, equal ? "yes" : "NO");
  }

  if (!all_equal) {
    std::printf("\nFAIL: parallel kernels diverged from serial references\n");
    return 1;
  }
  std::printf("\nall parallel kernels bitwise-match their serial references\n");
  return 0;
}
