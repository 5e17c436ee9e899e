#include "lkgp/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lkgp/errors.hpp"
#include "lkgp/rng.hpp"

namespace lkgp {

ObservationMask::ObservationMask(std::size_t p, std::size_t q,
                                 std::vector<std::int64_t> observed)
    : p_(p), q_(q), observed_(std::move(observed)) {
  if (p_ == 0 || q_ == 0) throw ShapeMismatch("mask: empty grid");
  if (observed_.empty()) throw EmptyMask("mask: no observed cells");
  const auto pq = static_cast<std::int64_t>(grid_size());
  for (std::size_t i = 0; i < observed_.size(); ++i) {
    if (observed_[i] < 0 || observed_[i] >= pq)
      throw IndexOutOfGrid("mask: index " + std::to_string(observed_[i]) +
                           " outside grid of size " + std::to_string(pq));
    if (i > 0 && observed_[i] <= observed_[i - 1])
      throw DuplicateObservation("mask: indices not strictly increasing at position " +
                                 std::to_string(i));
  }
}

ObservationMask ObservationMask::full(std::size_t p, std::size_t q) {
  std::vector<std::int64_t> all(p * q);
  std::iota(all.begin(), all.end(), std::int64_t{0});
  return ObservationMask(p, q, std::move(all));
}

std::vector<std::int64_t> ObservationMask::missing() const {
  std::vector<std::int64_t> out;
  out.reserve(grid_size() - count());
  std::size_t pos = 0;
  for (std::int64_t cell = 0; cell < static_cast<std::int64_t>(grid_size()); ++cell) {
    if (pos < observed_.size() && observed_[pos] == cell) {
      ++pos;
    } else {
      out.push_back(cell);
    }
  }
  return out;
}

PartialGrid build_partial_grid(Matrix s_points, Matrix t_points,
                               std::span<const std::pair<std::int64_t, std::int64_t>> cells,
                               std::span<const double> y_values) {
  const std::size_t p = s_points.rows();
  const std::size_t q = t_points.rows();
  if (cells.size() != y_values.size())
    throw ShapeMismatch("build_partial_grid: " + std::to_string(cells.size()) +
                        " cells vs " + std::to_string(y_values.size()) + " outputs");

  std::vector<std::pair<std::int64_t, double>> indexed(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto [j, k] = cells[i];
    if (j < 0 || j >= static_cast<std::int64_t>(p) || k < 0 || k >= static_cast<std::int64_t>(q))
      throw IndexOutOfGrid("build_partial_grid: cell (" + std::to_string(j) + ", " +
                           std::to_string(k) + ") outside " + std::to_string(p) + " x " +
                           std::to_string(q) + " grid");
    indexed[i] = {ObservationMask::linear_index(j, k, q), y_values[i]};
  }
  std::sort(indexed.begin(), indexed.end());
  for (std::size_t i = 1; i < indexed.size(); ++i)
    if (indexed[i].first == indexed[i - 1].first)
      throw DuplicateObservation("build_partial_grid: duplicate cell at linear index " +
                                 std::to_string(indexed[i].first));

  std::vector<std::int64_t> observed(indexed.size());
  std::vector<double> y(indexed.size());
  for (std::size_t i = 0; i < indexed.size(); ++i) {
    observed[i] = indexed[i].first;
    y[i] = indexed[i].second;
  }
  return PartialGrid{std::move(s_points), std::move(t_points),
                     ObservationMask(p, q, std::move(observed)), std::move(y)};
}

namespace {

ObservationMask uniform_mask(std::size_t p, std::size_t q, double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio >= 1.0)
    throw EmptyMask("generate_mask: uniform ratio must lie in [0, 1)");
  const std::size_t pq = p * q;
  const auto remove = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(pq)));
  if (remove >= pq) throw EmptyMask("generate_mask: all cells would be removed");

  // Partial Fisher-Yates: the first `remove` entries become the missing set.
  std::vector<std::int64_t> cells(pq);
  std::iota(cells.begin(), cells.end(), std::int64_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < remove; ++i) {
    const std::size_t pick = i + static_cast<std::size_t>(rng.uniform_below(pq - i));
    std::swap(cells[i], cells[pick]);
  }
  std::vector<std::int64_t> observed(cells.begin() + static_cast<std::ptrdiff_t>(remove),
                                     cells.end());
  std::sort(observed.begin(), observed.end());
  return ObservationMask(p, q, std::move(observed));
}

ObservationMask truncation_mask(std::size_t p, std::size_t q, double fraction,
                                std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw EmptyMask("generate_mask: fully observed fraction must lie in [0, 1]");
  const auto full_rows =
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(p)));

  Rng rng(seed);
  std::vector<std::size_t> rows(p);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  for (std::size_t i = 0; i + 1 < p; ++i) {
    const std::size_t pick = i + static_cast<std::size_t>(rng.uniform_below(p - i));
    std::swap(rows[i], rows[pick]);
  }

  // Every row keeps at least its first cell.
  std::vector<std::size_t> stop(p, q);
  for (std::size_t i = full_rows; i < p; ++i)
    stop[rows[i]] = 1 + static_cast<std::size_t>(rng.uniform_below(q));

  std::vector<std::int64_t> observed;
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t k = 0; k < stop[j]; ++k)
      observed.push_back(ObservationMask::linear_index(
          static_cast<std::int64_t>(j), static_cast<std::int64_t>(k), q));
  return ObservationMask(p, q, std::move(observed));
}

}  // namespace

ObservationMask generate_mask(std::size_t p, std::size_t q, const MissingPattern& pattern,
                              std::uint64_t seed) {
  return std::visit(
      [&](const auto& pat) {
        using T = std::decay_t<decltype(pat)>;
        if constexpr (std::is_same_v<T, UniformMissing>) {
          return uniform_mask(p, q, pat.ratio, seed);
        } else {
          return truncation_mask(p, q, pat.fully_observed_fraction, seed);
        }
      },
      pattern);
}

std::pair<std::vector<double>, Standardization> standardize(std::span<const double> y) {
  if (y.empty()) throw ShapeMismatch("standardize: empty vector");
  const double n = static_cast<double>(y.size());
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean);
  var /= n;
  Standardization st{mean, std::max(std::sqrt(var), 1e-12)};
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = st.forward(y[i]);
  return {std::move(out), st};
}

}  // namespace lkgp
