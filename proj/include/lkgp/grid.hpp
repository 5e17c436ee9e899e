#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "lkgp/matrix.hpp"

namespace lkgp {

/**
 * Sorted set of observed linear grid indices on a p x q product grid.
 *
 * Linear index convention: cell (j, k) with spatial index j in [0, p) and
 * temporal index k in [0, q) maps to j * q + k, i.e. temporal runs fastest.
 * The mask realizes the projection that gathers observed grid cells.
 */
class ObservationMask {
 public:
  ObservationMask(std::size_t p, std::size_t q, std::vector<std::int64_t> observed);

  static ObservationMask full(std::size_t p, std::size_t q);

  std::size_t p() const { return p_; }
  std::size_t q() const { return q_; }
  std::size_t grid_size() const { return p_ * q_; }
  std::size_t count() const { return observed_.size(); }
  bool is_full() const { return count() == grid_size(); }

  /// gamma = 1 - n / pq, in [0, 1).
  double missing_ratio() const {
    return 1.0 - static_cast<double>(count()) / static_cast<double>(grid_size());
  }

  std::span<const std::int64_t> observed() const { return observed_; }

  /// Complement of observed(), sorted.
  std::vector<std::int64_t> missing() const;

  static std::int64_t linear_index(std::int64_t j, std::int64_t k, std::size_t q) {
    return j * static_cast<std::int64_t>(q) + k;
  }

 private:
  std::size_t p_ = 0;
  std::size_t q_ = 0;
  std::vector<std::int64_t> observed_;
};

/// Affine output transform y -> (y - mean) / scale.
struct Standardization {
  double mean = 0.0;
  double scale = 1.0;

  double forward(double y) const { return (y - mean) / scale; }
  double inverse(double z) const { return z * scale + mean; }
};

/// Partially observed product-grid dataset: spatial inputs S (p x d_s),
/// temporal/task inputs T (q x d_t), observation mask, and the observed
/// outputs y in linear-index order.
struct PartialGrid {
  Matrix s_points;
  Matrix t_points;
  ObservationMask mask;
  std::vector<double> y;

  std::size_t p() const { return s_points.rows(); }
  std::size_t q() const { return t_points.rows(); }
  std::size_t n() const { return mask.count(); }
};

/// Builds a grid from (j, k) cell coordinates; cells are sorted into
/// linear-index order and y is permuted consistently.
PartialGrid build_partial_grid(Matrix s_points, Matrix t_points,
                               std::span<const std::pair<std::int64_t, std::int64_t>> cells,
                               std::span<const double> y_values);

/// Remove round(ratio * pq) cells chosen uniformly without replacement.
struct UniformMissing {
  double ratio = 0.0;
};

/// Keep a prefix of each spatial row: round(fraction * p) rows stay fully
/// observed, the rest stop at a uniform random step in [1, q].
struct TruncationMissing {
  double fully_observed_fraction = 0.0;
};

using MissingPattern = std::variant<UniformMissing, TruncationMissing>;

ObservationMask generate_mask(std::size_t p, std::size_t q, const MissingPattern& pattern,
                              std::uint64_t seed);

/// Shift/scale y to sample mean 0 and population (divisor n) standard
/// deviation 1; the scale is clamped to >= 1e-12.
std::pair<std::vector<double>, Standardization> standardize(std::span<const double> y);

}  // namespace lkgp
