#include "lkgp/kron.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lkgp/errors.hpp"
#include "lkgp/linalg.hpp"

namespace lkgp {

namespace {

void check_kron_shapes(const Matrix& a, const Matrix& b, std::size_t x_len, std::size_t out_len,
                       std::size_t work_len) {
  if (a.rows() != a.cols() || b.rows() != b.cols())
    throw ShapeMismatch("kron_mvm: factors must be square");
  const std::size_t pq = a.rows() * b.rows();
  if (x_len != pq || out_len != pq || work_len != pq)
    throw ShapeMismatch("kron_mvm: expected vectors of length " + std::to_string(pq));
}

}  // namespace

void kron_mvm(const Matrix& a, const Matrix& b, std::span<const double> x,
              std::span<double> out, std::span<double> work, CostCounters* counters) {
  check_kron_shapes(a, b, x.size(), out.size(), work.size());
  const std::size_t p = a.rows(), q = b.rows();

  // Stage 1: per spatial block j', work block = B * x block.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t jp = 0; jp < static_cast<std::ptrdiff_t>(p); ++jp) {
    const double* xb = x.data() + jp * q;
    double* wb = work.data() + jp * q;
    for (std::size_t k = 0; k < q; ++k) {
      const double* brow = b.data() + k * q;
      double acc = 0.0;
      for (std::size_t kp = 0; kp < q; ++kp) acc += brow[kp] * xb[kp];
      wb[k] = acc;
    }
  }
  // Stage 2: per spatial row j, out block = sum_j' A(j, j') * work block j'.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(p); ++j) {
    const double* arow = a.data() + j * p;
    double* ob = out.data() + j * q;
    std::fill(ob, ob + q, 0.0);
    for (std::size_t jp = 0; jp < p; ++jp) {
      const double ajjp = arow[jp];
      const double* wb = work.data() + jp * q;
      for (std::size_t k = 0; k < q; ++k) ob[k] += ajjp * wb[k];
    }
  }
  if (counters) counters->mults += static_cast<std::uint64_t>(p) * q * (p + q);
}

void kron_mvm_serial(const Matrix& a, const Matrix& b, std::span<const double> x,
                     std::span<double> out, std::span<double> work, CostCounters* counters) {
  check_kron_shapes(a, b, x.size(), out.size(), work.size());
  const std::size_t p = a.rows(), q = b.rows();
  for (std::size_t jp = 0; jp < p; ++jp) {
    const double* xb = x.data() + jp * q;
    double* wb = work.data() + jp * q;
    for (std::size_t k = 0; k < q; ++k) {
      const double* brow = b.data() + k * q;
      double acc = 0.0;
      for (std::size_t kp = 0; kp < q; ++kp) acc += brow[kp] * xb[kp];
      wb[k] = acc;
    }
  }
  for (std::size_t j = 0; j < p; ++j) {
    const double* arow = a.data() + j * p;
    double* ob = out.data() + j * q;
    std::fill(ob, ob + q, 0.0);
    for (std::size_t jp = 0; jp < p; ++jp) {
      const double ajjp = arow[jp];
      const double* wb = work.data() + jp * q;
      for (std::size_t k = 0; k < q; ++k) ob[k] += ajjp * wb[k];
    }
  }
  if (counters) counters->mults += static_cast<std::uint64_t>(p) * q * (p + q);
}

std::vector<double> kron_mvm(const Matrix& a, const Matrix& b, std::span<const double> x) {
  std::vector<double> out(x.size()), work(x.size());
  kron_mvm(a, b, x, out, work, nullptr);
  return out;
}

void project(const ObservationMask& mask, std::span<const double> v_full,
             std::span<double> v_obs) {
  if (v_full.size() != mask.grid_size() || v_obs.size() != mask.count())
    throw ShapeMismatch("project: length mismatch");
  const auto observed = mask.observed();
  for (std::size_t i = 0; i < observed.size(); ++i) v_obs[i] = v_full[observed[i]];
}

std::vector<double> project(const ObservationMask& mask, std::span<const double> v_full) {
  std::vector<double> out(mask.count());
  project(mask, v_full, out);
  return out;
}

void unproject(const ObservationMask& mask, std::span<const double> v_obs,
               std::span<double> v_full) {
  if (v_full.size() != mask.grid_size() || v_obs.size() != mask.count())
    throw ShapeMismatch("unproject: length mismatch");
  std::fill(v_full.begin(), v_full.end(), 0.0);
  const auto observed = mask.observed();
  for (std::size_t i = 0; i < observed.size(); ++i) v_full[observed[i]] = v_obs[i];
}

std::vector<double> unproject(const ObservationMask& mask, std::span<const double> v_obs) {
  std::vector<double> out(mask.grid_size());
  unproject(mask, v_obs, out);
  return out;
}

LatentKroneckerOperator::LatentKroneckerOperator(ObservationMask mask, double noise)
    : mask_(std::move(mask)), p_(mask_.p()), q_(mask_.q()), noise_(noise) {
  if (noise_ < 0.0) throw ShapeMismatch("operator: negative noise variance");
  // Offsets of each spatial block within the sorted observed array.
  block_start_.assign(p_ + 1, 0);
  const auto observed = mask_.observed();
  std::size_t pos = 0;
  for (std::size_t j = 0; j <= p_; ++j) {
    const auto boundary = static_cast<std::int64_t>(j * q_);
    while (pos < observed.size() && observed[pos] < boundary) ++pos;
    block_start_[j] = pos;
  }
  work_.assign(p_ * q_, 0.0);
}

LatentKroneckerOperator::LatentKroneckerOperator(Matrix k_ss, Matrix k_tt, ObservationMask mask,
                                                 double noise)
    : LatentKroneckerOperator(std::move(mask), noise) {
  if (k_ss.rows() != p_ || k_ss.cols() != p_ || k_tt.rows() != q_ || k_tt.cols() != q_)
    throw ShapeMismatch("operator: factor sizes do not match the mask grid");
  k_ss_ = std::move(k_ss);
  k_tt_ = std::move(k_tt);
  counters_.note_storage(storage_footprint());
}

LatentKroneckerOperator::LatentKroneckerOperator(const KernelSpec& spatial,
                                                 const Matrix& s_points,
                                                 const KernelSpec& temporal,
                                                 const Matrix& t_points, ObservationMask mask,
                                                 double noise)
    : LatentKroneckerOperator(std::move(mask), noise) {
  if (s_points.rows() != p_ || t_points.rows() != q_)
    throw ShapeMismatch("operator: input point counts do not match the mask grid");
  k_ss_ = eval_matrix(spatial, s_points, s_points);
  k_tt_ = eval_matrix(temporal, t_points, t_points);
  counters_.kernel_evals += static_cast<std::uint64_t>(p_) * p_ + static_cast<std::uint64_t>(q_) * q_;
  counters_.note_storage(storage_footprint());
}

LatentKroneckerOperator LatentKroneckerOperator::lazy(KernelSpec spatial, Matrix s_points,
                                                      KernelSpec temporal, Matrix t_points,
                                                      ObservationMask mask, double noise) {
  LatentKroneckerOperator op(std::move(mask), noise);
  if (s_points.rows() != op.p_ || t_points.rows() != op.q_)
    throw ShapeMismatch("operator: input point counts do not match the mask grid");
  op.lazy_ = true;
  op.spatial_spec_ = std::move(spatial);
  op.temporal_spec_ = std::move(temporal);
  op.s_points_ = std::move(s_points);
  op.t_points_ = std::move(t_points);
  op.scatter_.assign(op.p_ * op.q_, 0.0);
  op.counters_.note_storage(op.storage_footprint());
  return op;
}

std::uint64_t LatentKroneckerOperator::storage_footprint() const {
  const auto p = static_cast<std::uint64_t>(p_);
  const auto q = static_cast<std::uint64_t>(q_);
  if (lazy_) return p + q + 2 * p * q;  // two row buffers + scatter + stage-1 work
  return p * p + q * q + p * q;         // kernel matrices + stage-1 work
}

const Matrix& LatentKroneckerOperator::k_ss() const {
  if (lazy_) throw ShapeMismatch("operator: lazy mode holds no materialized K_SS");
  return k_ss_;
}

const Matrix& LatentKroneckerOperator::k_tt() const {
  if (lazy_) throw ShapeMismatch("operator: lazy mode holds no materialized K_TT");
  return k_tt_;
}

void LatentKroneckerOperator::apply(std::span<const double> x, std::span<double> out) {
  if (x.size() != size() || out.size() != size())
    throw ShapeMismatch("operator apply: expected vectors of length " + std::to_string(size()));
  if (lazy_) {
    apply_lazy(x, out);
  } else {
    apply_materialized(x, out);
  }
  counters_.mults +=
      static_cast<std::uint64_t>(p_) * q_ * (p_ + q_) + static_cast<std::uint64_t>(size());
  counters_.note_storage(storage_footprint());
}

std::vector<double> LatentKroneckerOperator::apply(std::span<const double> x) {
  std::vector<double> out(size());
  apply(x, out);
  return out;
}

// Stage 1 scatters each observed block into a dense q-vector on the fly;
// stage 2 computes each full output block and writes back only observed
// entries, fused with the noise term. Multiply-add count is exactly
// p*q*(p+q) for the two stages plus n for the noise.
void LatentKroneckerOperator::apply_materialized(std::span<const double> x,
                                                 std::span<double> out) {
  const auto observed = mask_.observed();
#pragma omp parallel
  {
    std::vector<double> block(q_);
#pragma omp for schedule(static)
    for (std::ptrdiff_t jp = 0; jp < static_cast<std::ptrdiff_t>(p_); ++jp) {
      std::fill(block.begin(), block.end(), 0.0);
      const auto base = static_cast<std::int64_t>(jp) * static_cast<std::int64_t>(q_);
      for (std::size_t a = block_start_[jp]; a < block_start_[jp + 1]; ++a)
        block[observed[a] - base] = x[a];
      double* wb = work_.data() + jp * q_;
      for (std::size_t k = 0; k < q_; ++k) {
        const double* brow = k_tt_.data() + k * q_;
        double acc = 0.0;
        for (std::size_t kp = 0; kp < q_; ++kp) acc += brow[kp] * block[kp];
        wb[k] = acc;
      }
    }
#pragma omp for schedule(static)
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(p_); ++j) {
      const double* arow = k_ss_.data() + j * p_;
      std::fill(block.begin(), block.end(), 0.0);
      for (std::size_t jp = 0; jp < p_; ++jp) {
        const double ajjp = arow[jp];
        const double* wb = work_.data() + jp * q_;
        for (std::size_t k = 0; k < q_; ++k) block[k] += ajjp * wb[k];
      }
      const auto base = static_cast<std::int64_t>(j) * static_cast<std::int64_t>(q_);
      for (std::size_t a = block_start_[j]; a < block_start_[j + 1]; ++a)
        out[a] = block[observed[a] - base] + noise_ * x[a];
    }
  }
}

// Serial by construction: evaluates one kernel row at a time so only
// p + q kernel elements are ever live.
void LatentKroneckerOperator::apply_lazy(std::span<const double> x, std::span<double> out) {
  unproject(mask_, x, scatter_);
  Matrix point(1, t_points_.cols());

  for (std::size_t k = 0; k < q_; ++k) {
    for (std::size_t d = 0; d < t_points_.cols(); ++d) point(0, d) = t_points_(k, d);
    const Matrix krow = eval_matrix(*temporal_spec_, point, t_points_);
    counters_.kernel_evals += q_;
    for (std::size_t jp = 0; jp < p_; ++jp) {
      const double* xb = scatter_.data() + jp * q_;
      double acc = 0.0;
      for (std::size_t kp = 0; kp < q_; ++kp) acc += krow(0, kp) * xb[kp];
      work_[jp * q_ + k] = acc;
    }
  }

  const auto observed = mask_.observed();
  Matrix spoint(1, s_points_.cols());
  std::vector<double> block(q_);
  for (std::size_t j = 0; j < p_; ++j) {
    for (std::size_t d = 0; d < s_points_.cols(); ++d) spoint(0, d) = s_points_(j, d);
    const Matrix arow = eval_matrix(*spatial_spec_, spoint, s_points_);
    counters_.kernel_evals += p_;
    std::fill(block.begin(), block.end(), 0.0);
    for (std::size_t jp = 0; jp < p_; ++jp) {
      const double ajjp = arow(0, jp);
      const double* wb = work_.data() + jp * q_;
      for (std::size_t k = 0; k < q_; ++k) block[k] += ajjp * wb[k];
    }
    const auto base = static_cast<std::int64_t>(j) * static_cast<std::int64_t>(q_);
    for (std::size_t a = block_start_[j]; a < block_start_[j + 1]; ++a)
      out[a] = block[observed[a] - base] + noise_ * x[a];
  }
}

double LatentKroneckerOperator::diag_entry(std::size_t i) const {
  const auto cell = mask_.observed()[i];
  const auto j = static_cast<std::size_t>(cell / static_cast<std::int64_t>(q_));
  const auto k = static_cast<std::size_t>(cell % static_cast<std::int64_t>(q_));
  if (lazy_) {
    Matrix sp(1, s_points_.cols()), tp(1, t_points_.cols());
    for (std::size_t d = 0; d < s_points_.cols(); ++d) sp(0, d) = s_points_(j, d);
    for (std::size_t d = 0; d < t_points_.cols(); ++d) tp(0, d) = t_points_(k, d);
    return eval_matrix(*spatial_spec_, sp, sp)(0, 0) * eval_matrix(*temporal_spec_, tp, tp)(0, 0);
  }
  return k_ss_(j, j) * k_tt_(k, k);
}

void LatentKroneckerOperator::column(std::size_t i, std::span<double> out) const {
  if (out.size() != size()) throw ShapeMismatch("operator column: length mismatch");
  if (lazy_) throw ShapeMismatch("operator column: unsupported in lazy mode");
  const auto observed = mask_.observed();
  const auto cell = observed[i];
  const auto j = static_cast<std::size_t>(cell / static_cast<std::int64_t>(q_));
  const auto k = static_cast<std::size_t>(cell % static_cast<std::int64_t>(q_));
  for (std::size_t b = 0; b < observed.size(); ++b) {
    const auto jb = static_cast<std::size_t>(observed[b] / static_cast<std::int64_t>(q_));
    const auto kb = static_cast<std::size_t>(observed[b] % static_cast<std::int64_t>(q_));
    out[b] = k_ss_(jb, j) * k_tt_(kb, k);
  }
}

Matrix LatentKroneckerOperator::dense() const {
  if (p_ * q_ > 4096)
    throw OracleTooLarge("dense oracle limited to p*q <= 4096, got " +
                         std::to_string(p_ * q_));
  if (lazy_) {
    const Matrix k_ss = eval_matrix(*spatial_spec_, s_points_, s_points_);
    const Matrix k_tt = eval_matrix(*temporal_spec_, t_points_, t_points_);
    return dense_observed_matrix(k_ss, k_tt, mask_, noise_);
  }
  return dense_observed_matrix(k_ss_, k_tt_, mask_, noise_);
}

Matrix dense_observed_matrix(const Matrix& k_ss, const Matrix& k_tt,
                             const ObservationMask& mask, double noise) {
  const std::size_t n = mask.count();
  if (n > 4096)
    throw OracleTooLarge("dense oracle limited to n <= 4096, got " + std::to_string(n));
  const auto q = static_cast<std::int64_t>(mask.q());
  const auto observed = mask.observed();
  Matrix out(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    const auto ja = static_cast<std::size_t>(observed[a] / q);
    const auto ka = static_cast<std::size_t>(observed[a] % q);
    for (std::size_t b = 0; b < n; ++b) {
      const auto jb = static_cast<std::size_t>(observed[b] / q);
      const auto kb = static_cast<std::size_t>(observed[b] % q);
      out(a, b) = k_ss(ja, jb) * k_tt(ka, kb);
    }
    out(a, a) += noise;
  }
  return out;
}

DenseObservedOperator::DenseObservedOperator(Matrix k_xx, double noise)
    : matrix_(std::move(k_xx)), noise_(noise) {
  if (matrix_.rows() != matrix_.cols()) throw ShapeMismatch("dense operator: matrix not square");
  counters_.note_storage(static_cast<std::uint64_t>(matrix_.rows()) * matrix_.cols());
}

DenseObservedOperator::DenseObservedOperator(const KernelSpec& spatial, const Matrix& s_points,
                                             const KernelSpec& temporal, const Matrix& t_points,
                                             const ObservationMask& mask, double noise)
    : noise_(noise) {
  const std::size_t n = mask.count();
  const auto q = static_cast<std::int64_t>(mask.q());
  const auto observed = mask.observed();
  matrix_ = Matrix(n, n);
  // Product kernel evaluated entry by entry, without the factorization.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(n); ++a) {
    Matrix sa(1, s_points.cols()), ta(1, t_points.cols());
    Matrix sb(1, s_points.cols()), tb(1, t_points.cols());
    const auto ja = static_cast<std::size_t>(observed[a] / q);
    const auto ka = static_cast<std::size_t>(observed[a] % q);
    for (std::size_t d = 0; d < s_points.cols(); ++d) sa(0, d) = s_points(ja, d);
    for (std::size_t d = 0; d < t_points.cols(); ++d) ta(0, d) = t_points(ka, d);
    for (std::size_t b = 0; b < n; ++b) {
      const auto jb = static_cast<std::size_t>(observed[b] / q);
      const auto kb = static_cast<std::size_t>(observed[b] % q);
      for (std::size_t d = 0; d < s_points.cols(); ++d) sb(0, d) = s_points(jb, d);
      for (std::size_t d = 0; d < t_points.cols(); ++d) tb(0, d) = t_points(kb, d);
      matrix_(a, b) =
          eval_matrix(spatial, sa, sb)(0, 0) * eval_matrix(temporal, ta, tb)(0, 0);
    }
  }
  counters_.kernel_evals += static_cast<std::uint64_t>(n) * n;
  counters_.note_storage(static_cast<std::uint64_t>(n) * n);
}

DenseObservedOperator::DenseObservedOperator(const Matrix& k_ss, const Matrix& k_tt,
                                             const ObservationMask& mask, double noise)
    : noise_(noise) {
  if (k_ss.rows() != mask.p() || k_tt.rows() != mask.q())
    throw ShapeMismatch("dense operator: factor sizes do not match the mask grid");
  const std::size_t n = mask.count();
  const auto q = static_cast<std::int64_t>(mask.q());
  const auto observed = mask.observed();
  matrix_ = Matrix(n, n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(n); ++a) {
    const auto ja = static_cast<std::size_t>(observed[a] / q);
    const auto ka = static_cast<std::size_t>(observed[a] % q);
    for (std::size_t b = 0; b < n; ++b) {
      const auto jb = static_cast<std::size_t>(observed[b] / q);
      const auto kb = static_cast<std::size_t>(observed[b] % q);
      matrix_(a, b) = k_ss(ja, jb) * k_tt(ka, kb);
    }
  }
  counters_.note_storage(static_cast<std::uint64_t>(n) * n);
}

void DenseObservedOperator::apply(std::span<const double> x, std::span<double> out) {
  if (x.size() != size() || out.size() != size())
    throw ShapeMismatch("dense operator apply: length mismatch");
  linalg::gemv(matrix_, x, out);
  counters_.mults += static_cast<std::uint64_t>(size()) * size();
  if (noise_ != 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise_ * x[i];
    counters_.mults += size();
  }
  counters_.note_storage(static_cast<std::uint64_t>(size()) * size());
}

std::vector<double> DenseObservedOperator::apply(std::span<const double> x) {
  std::vector<double> out(size());
  apply(x, out);
  return out;
}

BreakevenPoints breakeven_points(std::size_t p, std::size_t q) {
  if (p == 0 || q == 0) throw ShapeMismatch("breakeven_points: empty grid");
  const double dp = static_cast<double>(p), dq = static_cast<double>(q);
  const double time = 1.0 - std::sqrt(1.0 / dp + 1.0 / dq);
  const double memory = 1.0 - std::sqrt(1.0 / (dp * dp) + 1.0 / (dq * dq));
  return {std::clamp(time, 0.0, std::nextafter(1.0, 0.0)),
          std::clamp(memory, 0.0, std::nextafter(1.0, 0.0))};
}

}  // namespace lkgp
