#pragma once

#include <span>
#include <variant>
#include <vector>

#include "lkgp/matrix.hpp"

namespace lkgp {

// Constrained <-> unconstrained transforms for positive hyperparameters.
double softplus(double x);
double softplus_inverse(double y);
/// d softplus / dx, i.e. the logistic sigmoid.
double softplus_grad(double x);

/// ARD squared exponential: k(x, x') = s * exp(-0.5 * sum_d (dx_d / l_d)^2).
struct SqExpKernel {
  std::vector<double> lengthscales;
  double outputscale = 1.0;

  /// All raw parameters zero: lengthscales and outputscale softplus(0).
  static SqExpKernel default_init(std::size_t dims);
};

/// Exponentiated sine squared on scalar inputs:
/// k(t, t') = s * exp(-2 * sin^2(pi * |t - t'| / period) / l^2).
struct PeriodicKernel {
  double lengthscale = 1.0;
  double period = 1.0;
  double outputscale = 1.0;

  static PeriodicKernel default_init();
};

/// Pointwise product of a squared exponential and a periodic kernel on the
/// same scalar input (seasonal-trend temporal kernel).
struct ProductTemporalKernel {
  SqExpKernel se;
  PeriodicKernel periodic;

  static ProductTemporalKernel default_init();
};

/// Intrinsic coregionalization over integer task indices:
/// k(t, t') = (L L^T)[t, t'], with L lower triangular, positive diagonal.
struct IcmKernel {
  std::size_t tasks = 0;
  Matrix factor;  // q x q, lower triangular

  static IcmKernel default_init(std::size_t tasks);  // L = I
};

using KernelSpec = std::variant<SqExpKernel, PeriodicKernel, ProductTemporalKernel, IcmKernel>;

/// Number of input columns the kernel expects.
std::size_t input_dim(const KernelSpec& spec);

/// Number of free hyperparameters.
std::size_t param_count(const KernelSpec& spec);

/// Unconstrained parameter vector for the spec's current hyperparameters.
std::vector<double> pack_params(const KernelSpec& spec);

/// Spec of the same family with hyperparameters taken from unconstrained values.
KernelSpec with_params(const KernelSpec& spec, std::span<const double> raw);

/// Pairwise kernel matrix, entry (i, j) = k(x1_i, x2_j).
Matrix eval_matrix(const KernelSpec& spec, const Matrix& x1, const Matrix& x2);

/// Diagonal of eval_matrix(spec, x, x) without forming the matrix.
std::vector<double> eval_diag(const KernelSpec& spec, const Matrix& x);

/// Derivative of eval_matrix(spec, x, x) with respect to one unconstrained
/// parameter (chain rule through the softplus transform included).
Matrix grad_matrix(const KernelSpec& spec, const Matrix& x, std::size_t param_index);

}  // namespace lkgp
