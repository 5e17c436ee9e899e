#include "lkgp/kernels.hpp"

#include <cmath>
#include <string>

#include "lkgp/errors.hpp"

namespace lkgp {

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double softplus_inverse(double y) {
  if (y > 30.0) return y;
  if (y < 1e-15) return std::log(y);  // expm1(y) ~ y below double resolution
  return std::log(std::expm1(y));
}

double softplus_grad(double x) {
  if (x > 30.0) return 1.0;
  if (x < -30.0) return std::exp(x);
  return 1.0 / (1.0 + std::exp(-x));
}

SqExpKernel SqExpKernel::default_init(std::size_t dims) {
  SqExpKernel k;
  k.lengthscales.assign(dims, softplus(0.0));
  k.outputscale = softplus(0.0);
  return k;
}

PeriodicKernel PeriodicKernel::default_init() {
  return PeriodicKernel{softplus(0.0), softplus(0.0), softplus(0.0)};
}

ProductTemporalKernel ProductTemporalKernel::default_init() {
  return ProductTemporalKernel{SqExpKernel::default_init(1), PeriodicKernel::default_init()};
}

IcmKernel IcmKernel::default_init(std::size_t tasks) {
  return IcmKernel{tasks, Matrix::identity(tasks)};
}

std::size_t input_dim(const KernelSpec& spec) {
  return std::visit(
      [](const auto& k) -> std::size_t {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, SqExpKernel>) return k.lengthscales.size();
        else return 1;
      },
      spec);
}

std::size_t param_count(const KernelSpec& spec) {
  return std::visit(
      [](const auto& k) -> std::size_t {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, SqExpKernel>) {
          return k.lengthscales.size() + 1;
        } else if constexpr (std::is_same_v<T, PeriodicKernel>) {
          return 3;
        } else if constexpr (std::is_same_v<T, ProductTemporalKernel>) {
          return k.se.lengthscales.size() + 1 + 3;
        } else {
          return k.tasks * (k.tasks + 1) / 2;
        }
      },
      spec);
}

std::vector<double> pack_params(const KernelSpec& spec) {
  return std::visit(
      [](const auto& k) -> std::vector<double> {
        using T = std::decay_t<decltype(k)>;
        std::vector<double> raw;
        if constexpr (std::is_same_v<T, SqExpKernel>) {
          for (double l : k.lengthscales) raw.push_back(softplus_inverse(l));
          raw.push_back(softplus_inverse(k.outputscale));
        } else if constexpr (std::is_same_v<T, PeriodicKernel>) {
          raw = {softplus_inverse(k.lengthscale), softplus_inverse(k.period),
                 softplus_inverse(k.outputscale)};
        } else if constexpr (std::is_same_v<T, ProductTemporalKernel>) {
          raw = pack_params(KernelSpec{k.se});
          const auto tail = pack_params(KernelSpec{k.periodic});
          raw.insert(raw.end(), tail.begin(), tail.end());
        } else {
          // Lower triangle row by row; softplus on the diagonal only.
          for (std::size_t a = 0; a < k.tasks; ++a)
            for (std::size_t b = 0; b <= a; ++b)
              raw.push_back(a == b ? softplus_inverse(k.factor(a, b)) : k.factor(a, b));
        }
        return raw;
      },
      spec);
}

KernelSpec with_params(const KernelSpec& spec, std::span<const double> raw) {
  if (raw.size() != param_count(spec))
    throw ShapeMismatch("with_params: expected " + std::to_string(param_count(spec)) +
                        " parameters, got " + std::to_string(raw.size()));
  return std::visit(
      [&](const auto& k) -> KernelSpec {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, SqExpKernel>) {
          SqExpKernel out = k;
          for (std::size_t d = 0; d < k.lengthscales.size(); ++d)
            out.lengthscales[d] = softplus(raw[d]);
          out.outputscale = softplus(raw[k.lengthscales.size()]);
          return out;
        } else if constexpr (std::is_same_v<T, PeriodicKernel>) {
          return PeriodicKernel{softplus(raw[0]), softplus(raw[1]), softplus(raw[2])};
        } else if constexpr (std::is_same_v<T, ProductTemporalKernel>) {
          const std::size_t n_se = k.se.lengthscales.size() + 1;
          ProductTemporalKernel out;
          out.se = std::get<SqExpKernel>(with_params(KernelSpec{k.se}, raw.subspan(0, n_se)));
          out.periodic =
              std::get<PeriodicKernel>(with_params(KernelSpec{k.periodic}, raw.subspan(n_se)));
          return out;
        } else {
          IcmKernel out{k.tasks, Matrix(k.tasks, k.tasks)};
          std::size_t pos = 0;
          for (std::size_t a = 0; a < k.tasks; ++a)
            for (std::size_t b = 0; b <= a; ++b, ++pos)
              out.factor(a, b) = (a == b) ? softplus(raw[pos]) : raw[pos];
          return out;
        }
      },
      spec);
}

namespace {

void check_inputs(const KernelSpec& spec, const Matrix& x1, const Matrix& x2) {
  const std::size_t d = input_dim(spec);
  if (x1.cols() != d || x2.cols() != d)
    throw ShapeMismatch("eval_matrix: inputs have " + std::to_string(x1.cols()) + "/" +
                        std::to_string(x2.cols()) + " columns, kernel expects " +
                        std::to_string(d));
}

double sq_exp_entry(const SqExpKernel& k, std::span<const double> a, std::span<const double> b) {
  double arg = 0.0;
  for (std::size_t d = 0; d < k.lengthscales.size(); ++d) {
    const double delta = (a[d] - b[d]) / k.lengthscales[d];
    arg += delta * delta;
  }
  return k.outputscale * std::exp(-0.5 * arg);
}

double periodic_entry(const PeriodicKernel& k, double a, double b) {
  const double s = std::sin(M_PI * std::abs(a - b) / k.period);
  return k.outputscale * std::exp(-2.0 * s * s / (k.lengthscale * k.lengthscale));
}

std::size_t task_index(const Matrix& x, std::size_t i, std::size_t tasks) {
  const double v = x(i, 0);
  const auto t = static_cast<std::int64_t>(std::llround(v));
  if (std::abs(v - static_cast<double>(t)) > 1e-9 || t < 0 ||
      t >= static_cast<std::int64_t>(tasks))
    throw IndexOutOfGrid("icm kernel: input " + std::to_string(v) +
                         " is not a task index in [0, " + std::to_string(tasks) + ")");
  return static_cast<std::size_t>(t);
}

Matrix coregionalization(const IcmKernel& k) {
  Matrix b(k.tasks, k.tasks);
  for (std::size_t i = 0; i < k.tasks; ++i)
    for (std::size_t j = 0; j < k.tasks; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l <= std::min(i, j); ++l) acc += k.factor(i, l) * k.factor(j, l);
      b(i, j) = acc;
    }
  return b;
}

// Unconstrained-parameter index -> lower-triangle coordinates.
std::pair<std::size_t, std::size_t> icm_coords(std::size_t index) {
  std::size_t a = 0;
  while ((a + 1) * (a + 2) / 2 <= index) ++a;
  return {a, index - a * (a + 1) / 2};
}

}  // namespace

Matrix eval_matrix(const KernelSpec& spec, const Matrix& x1, const Matrix& x2) {
  check_inputs(spec, x1, x2);
  const std::size_t m = x1.rows(), r = x2.rows();
  Matrix out(m, r);
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, SqExpKernel>) {
#pragma omp parallel for schedule(static)
          for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i)
            for (std::size_t j = 0; j < r; ++j)
              out(i, j) = sq_exp_entry(k, x1.row(i), x2.row(j));
        } else if constexpr (std::is_same_v<T, PeriodicKernel>) {
#pragma omp parallel for schedule(static)
          for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i)
            for (std::size_t j = 0; j < r; ++j)
              out(i, j) = periodic_entry(k, x1(i, 0), x2(j, 0));
        } else if constexpr (std::is_same_v<T, ProductTemporalKernel>) {
#pragma omp parallel for schedule(static)
          for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i)
            for (std::size_t j = 0; j < r; ++j)
              out(i, j) = sq_exp_entry(k.se, x1.row(i), x2.row(j)) *
                          periodic_entry(k.periodic, x1(i, 0), x2(j, 0));
        } else {
          const Matrix b = coregionalization(k);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < r; ++j)
              out(i, j) = b(task_index(x1, i, k.tasks), task_index(x2, j, k.tasks));
        }
      },
      spec);
  return out;
}

std::vector<double> eval_diag(const KernelSpec& spec, const Matrix& x) {
  check_inputs(spec, x, x);
  std::vector<double> out(x.rows());
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, SqExpKernel>) {
          for (auto& v : out) v = k.outputscale;
        } else if constexpr (std::is_same_v<T, PeriodicKernel>) {
          for (auto& v : out) v = k.outputscale;
        } else if constexpr (std::is_same_v<T, ProductTemporalKernel>) {
          for (auto& v : out) v = k.se.outputscale * k.periodic.outputscale;
        } else {
          const Matrix b = coregionalization(k);
          for (std::size_t i = 0; i < x.rows(); ++i) {
            const std::size_t t = task_index(x, i, k.tasks);
            out[i] = b(t, t);
          }
        }
      },
      spec);
  return out;
}

namespace {

Matrix sq_exp_grad(const SqExpKernel& k, const Matrix& x, std::size_t index,
                   std::span<const double> raw) {
  const std::size_t m = x.rows();
  const std::size_t d = k.lengthscales.size();
  Matrix out(m, m);
  const double chain = softplus_grad(raw[index]);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double value = sq_exp_entry(k, x.row(i), x.row(j));
      if (index < d) {
        const double delta = x(i, index) - x(j, index);
        const double l = k.lengthscales[index];
        out(i, j) = value * delta * delta / (l * l * l) * chain;
      } else {
        out(i, j) = value / k.outputscale * chain;
      }
    }
  }
  return out;
}

Matrix periodic_grad(const PeriodicKernel& k, const Matrix& x, std::size_t index,
                     std::span<const double> raw) {
  const std::size_t m = x.rows();
  Matrix out(m, m);
  const double chain = softplus_grad(raw[index]);
  const double l2 = k.lengthscale * k.lengthscale;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double dist = std::abs(x(i, 0) - x(j, 0));
      const double u = M_PI * dist / k.period;
      const double s = std::sin(u);
      const double value = k.outputscale * std::exp(-2.0 * s * s / l2);
      double g = 0.0;
      if (index == 0) {
        g = value * 4.0 * s * s / (l2 * k.lengthscale);
      } else if (index == 1) {
        g = value * 2.0 * M_PI * dist / (l2 * k.period * k.period) * std::sin(2.0 * u);
      } else {
        g = value / k.outputscale;
      }
      out(i, j) = g * chain;
    }
  }
  return out;
}

}  // namespace

Matrix grad_matrix(const KernelSpec& spec, const Matrix& x, std::size_t param_index) {
  check_inputs(spec, x, x);
  if (param_index >= param_count(spec))
    throw ShapeMismatch("grad_matrix: parameter index " + std::to_string(param_index) +
                        " out of range");
  const auto raw = pack_params(spec);
  return std::visit(
      [&](const auto& k) -> Matrix {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, SqExpKernel>) {
          return sq_exp_grad(k, x, param_index, raw);
        } else if constexpr (std::is_same_v<T, PeriodicKernel>) {
          return periodic_grad(k, x, param_index, raw);
        } else if constexpr (std::is_same_v<T, ProductTemporalKernel>) {
          const std::size_t n_se = k.se.lengthscales.size() + 1;
          const std::size_t m = x.rows();
          Matrix part = param_index < n_se
                            ? sq_exp_grad(k.se, x, param_index, raw)
                            : periodic_grad(k.periodic, x, param_index - n_se,
                                            std::span<const double>(raw).subspan(n_se));
          // Product rule: the other factor multiplies elementwise.
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
              part(i, j) *= param_index < n_se
                                ? periodic_entry(k.periodic, x(i, 0), x(j, 0))
                                : sq_exp_entry(k.se, x.row(i), x.row(j));
          return part;
        } else {
          const auto [a, b] = icm_coords(param_index);
          const double chain = (a == b) ? softplus_grad(raw[param_index]) : 1.0;
          const std::size_t m = x.rows();
          // dB = E_ab L^T + L E_ab^T
          Matrix out(m, m);
          for (std::size_t i = 0; i < m; ++i) {
            const std::size_t ti = task_index(x, i, k.tasks);
            for (std::size_t j = 0; j < m; ++j) {
              const std::size_t tj = task_index(x, j, k.tasks);
              double g = 0.0;
              if (ti == a) g += k.factor(tj, b);
              if (tj == a) g += k.factor(ti, b);
              out(i, j) = g * chain;
            }
          }
          return out;
        }
      },
      spec);
}

}  // namespace lkgp
