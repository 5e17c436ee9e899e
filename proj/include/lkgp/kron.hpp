#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lkgp/grid.hpp"
#include "lkgp/kernels.hpp"
#include "lkgp/matrix.hpp"

namespace lkgp {

/// Instrumented resource accounting for matrix-free operators.
struct CostCounters {
  std::uint64_t mults = 0;          // scalar multiply-adds
  std::uint64_t kernel_evals = 0;   // kernel function calls
  std::uint64_t peak_elements = 0;  // max simultaneously stored elements

  void reset() {
    mults = 0;
    kernel_evals = 0;
    peak_elements = 0;
  }
  void note_storage(std::uint64_t elements) {
    if (elements > peak_elements) peak_elements = elements;
  }
};

/**
 * out = (A kron B) x for square A (p x p) and B (q x q), with the linear
 * index convention x[j * q + k]. Runs as two dense stages costing exactly
 * p*q*q and p*p*q multiply-adds; `work` must hold p*q scratch elements and
 * may not alias x or out.
 */
void kron_mvm(const Matrix& a, const Matrix& b, std::span<const double> x,
              std::span<double> out, std::span<double> work, CostCounters* counters = nullptr);
void kron_mvm_serial(const Matrix& a, const Matrix& b, std::span<const double> x,
                     std::span<double> out, std::span<double> work,
                     CostCounters* counters = nullptr);
std::vector<double> kron_mvm(const Matrix& a, const Matrix& b, std::span<const double> x);

/// Gather observed coordinates: v_obs = P v_full.
void project(const ObservationMask& mask, std::span<const double> v_full,
             std::span<double> v_obs);
std::vector<double> project(const ObservationMask& mask, std::span<const double> v_full);

/// Scatter with zero padding: v_full = P^T v_obs.
void unproject(const ObservationMask& mask, std::span<const double> v_obs,
               std::span<double> v_full);
std::vector<double> unproject(const ObservationMask& mask, std::span<const double> v_obs);

/**
 * Matrix-free operator P (K_SS kron K_TT) P^T + noise * I on R^n.
 *
 * The default mode materializes K_SS and K_TT once (p^2 + q^2 kernel
 * elements plus one p*q work vector). Lazy mode stores only kernel specs
 * and inputs, re-evaluating one kernel row at a time during each apply,
 * which trades p^2 + q^2 stored elements for p + q at the cost of
 * p^2 + q^2 kernel evaluations per apply.
 *
 * apply() reuses internal buffers and mutates counters, so a single
 * instance must not run concurrent applies; distinct instances are
 * independent. For fixed inputs the result is bitwise deterministic for
 * any thread count.
 */
class LatentKroneckerOperator {
 public:
  LatentKroneckerOperator(Matrix k_ss, Matrix k_tt, ObservationMask mask, double noise);
  LatentKroneckerOperator(const KernelSpec& spatial, const Matrix& s_points,
                          const KernelSpec& temporal, const Matrix& t_points,
                          ObservationMask mask, double noise);
  static LatentKroneckerOperator lazy(KernelSpec spatial, Matrix s_points, KernelSpec temporal,
                                      Matrix t_points, ObservationMask mask, double noise);

  std::size_t size() const { return mask_.count(); }
  std::size_t p() const { return p_; }
  std::size_t q() const { return q_; }
  double noise() const { return noise_; }
  bool is_lazy() const { return lazy_; }
  const ObservationMask& mask() const { return mask_; }
  const Matrix& k_ss() const;
  const Matrix& k_tt() const;

  void apply(std::span<const double> x, std::span<double> out);
  std::vector<double> apply(std::span<const double> x);

  /// Noiseless diagonal entry i of P (K_SS kron K_TT) P^T.
  double diag_entry(std::size_t i) const;
  /// Noiseless column i, length n.
  void column(std::size_t i, std::span<double> out) const;

  /// Explicit P (K_SS kron K_TT) P^T + noise * I; guarded to p*q <= 4096.
  Matrix dense() const;

  CostCounters& counters() { return counters_; }
  const CostCounters& counters() const { return counters_; }

 private:
  LatentKroneckerOperator(ObservationMask mask, double noise);
  void apply_materialized(std::span<const double> x, std::span<double> out);
  void apply_lazy(std::span<const double> x, std::span<double> out);
  std::uint64_t storage_footprint() const;

  ObservationMask mask_;
  std::size_t p_ = 0;
  std::size_t q_ = 0;
  double noise_ = 0.0;
  bool lazy_ = false;

  Matrix k_ss_, k_tt_;  // materialized mode
  std::optional<KernelSpec> spatial_spec_, temporal_spec_;
  Matrix s_points_, t_points_;

  std::vector<std::size_t> block_start_;  // observed-array offset per spatial block
  std::vector<double> work_;              // p*q, stage-1 result
  std::vector<double> scatter_;           // p*q, lazy mode only
  CostCounters counters_;
};

/**
 * Dense baseline: the n x n kernel matrix over observed cells, built by
 * n^2 product-kernel evaluations, with apply costing n^2 multiply-adds.
 */
class DenseObservedOperator {
 public:
  DenseObservedOperator(Matrix k_xx, double noise);
  DenseObservedOperator(const KernelSpec& spatial, const Matrix& s_points,
                        const KernelSpec& temporal, const Matrix& t_points,
                        const ObservationMask& mask, double noise);
  /// Amortized build from precomputed factor matrices; no kernel calls.
  DenseObservedOperator(const Matrix& k_ss, const Matrix& k_tt, const ObservationMask& mask,
                        double noise);

  std::size_t size() const { return matrix_.rows(); }
  double noise() const { return noise_; }
  const Matrix& matrix() const { return matrix_; }

  void apply(std::span<const double> x, std::span<double> out);
  std::vector<double> apply(std::span<const double> x);

  CostCounters& counters() { return counters_; }

 private:
  Matrix matrix_;
  double noise_ = 0.0;
  CostCounters counters_;
};

/// Explicit n x n observed-cell matrix K + noise * I from factor matrices;
/// guarded to n <= 4096. Shared dense oracle for reference computations.
Matrix dense_observed_matrix(const Matrix& k_ss, const Matrix& k_tt,
                             const ObservationMask& mask, double noise);

struct BreakevenPoints {
  double time = 0.0;
  double memory = 0.0;
};

/// Missing ratios at which dense-on-observed and latent Kronecker MVM have
/// equal asymptotic time / memory cost; clamped to [0, 1).
BreakevenPoints breakeven_points(std::size_t p, std::size_t q);

}  // namespace lkgp
