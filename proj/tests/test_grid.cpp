#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "lkgp/dataset_io.hpp"
#include "lkgp/errors.hpp"
#include "lkgp/grid.hpp"

using namespace lkgp;

namespace {

PartialGrid make_grid(std::size_t p, std::size_t q,
                      std::vector<std::pair<std::int64_t, std::int64_t>> cells,
                      std::vector<double> y) {
  Matrix s(p, 1), t(q, 1);
  for (std::size_t j = 0; j < p; ++j) s(j, 0) = static_cast<double>(j);
  for (std::size_t k = 0; k < q; ++k) t(k, 0) = static_cast<double>(k);
  return build_partial_grid(std::move(s), std::move(t), cells, y);
}

}  // namespace

TEST_CASE("build_partial_grid sorts cells into linear-index order") {
  // Two of three time steps at the first spatial location, all three at the second.
  const auto grid = make_grid(2, 3, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {1, 2}},
                              {1.0, 2.0, 3.0, 4.0, 5.0});
  const std::vector<std::int64_t> expected{0, 1, 3, 4, 5};
  CHECK(std::vector<std::int64_t>(grid.mask.observed().begin(), grid.mask.observed().end()) ==
        expected);
  CHECK(grid.mask.missing_ratio() == doctest::Approx(1.0 / 6.0));

  // y is permuted alongside the cells.
  const auto shuffled = make_grid(2, 3, {{1, 2}, {0, 0}, {1, 0}}, {9.0, 7.0, 8.0});
  CHECK(shuffled.y == std::vector<double>{7.0, 8.0, 9.0});
}

TEST_CASE("full grid has zero missing ratio") {
  const auto grid = make_grid(2, 2, {{0, 0}, {0, 1}, {1, 0}, {1, 1}}, {1, 2, 3, 4});
  CHECK(grid.mask.missing_ratio() == 0.0);
  CHECK(grid.mask.is_full());
  const std::vector<std::int64_t> expected{0, 1, 2, 3};
  CHECK(std::vector<std::int64_t>(grid.mask.observed().begin(), grid.mask.observed().end()) ==
        expected);
}

TEST_CASE("single corner cell of a 3x3 grid") {
  const auto grid = make_grid(3, 3, {{2, 2}}, {1.0});
  CHECK(grid.mask.observed()[0] == 8);
  CHECK(grid.mask.missing_ratio() == doctest::Approx(8.0 / 9.0));
}

TEST_CASE("grid construction errors") {
  CHECK_THROWS_AS(make_grid(2, 2, {{0, 0}, {0, 0}}, {1, 2}), DuplicateObservation);
  CHECK_THROWS_AS(make_grid(2, 2, {{0, 2}}, {1}), IndexOutOfGrid);
  CHECK_THROWS_AS(make_grid(2, 2, {{-1, 0}}, {1}), IndexOutOfGrid);
  CHECK_THROWS_AS(make_grid(2, 2, {{0, 0}, {0, 1}}, {1}), ShapeMismatch);
}

TEST_CASE("uniform mask with ratio zero keeps the full grid") {
  const auto mask = generate_mask(3, 4, UniformMissing{0.0}, 1);
  CHECK(mask.is_full());
}

TEST_CASE("uniform mask removes the rounded count") {
  const auto mask = generate_mask(5000, 7, UniformMissing{0.3}, 0);
  CHECK(mask.count() == 24500);  // round(0.7 * 35000)
}

TEST_CASE("uniform mask is reproducible and rejects ratio one") {
  const auto a = generate_mask(20, 11, UniformMissing{0.4}, 42);
  const auto b = generate_mask(20, 11, UniformMissing{0.4}, 42);
  CHECK(std::vector<std::int64_t>(a.observed().begin(), a.observed().end()) ==
        std::vector<std::int64_t>(b.observed().begin(), b.observed().end()));
  const auto c = generate_mask(20, 11, UniformMissing{0.4}, 43);
  CHECK(std::vector<std::int64_t>(a.observed().begin(), a.observed().end()) !=
        std::vector<std::int64_t>(c.observed().begin(), c.observed().end()));
  CHECK_THROWS_AS(generate_mask(4, 4, UniformMissing{1.0}, 0), EmptyMask);
}

TEST_CASE("truncation mask keeps per-row prefixes") {
  const std::size_t p = 4, q = 52;
  const auto mask = generate_mask(p, q, TruncationMissing{0.25}, 2);

  std::vector<std::size_t> row_count(p, 0);
  std::vector<std::int64_t> row_max(p, -1);
  for (const auto cell : mask.observed()) {
    const auto j = static_cast<std::size_t>(cell / static_cast<std::int64_t>(q));
    row_count[j]++;
    row_max[j] = std::max(row_max[j], cell % static_cast<std::int64_t>(q));
  }
  std::size_t full_rows = 0;
  for (std::size_t j = 0; j < p; ++j) {
    CHECK(row_count[j] >= 1);
    // Prefix property: the largest observed step equals the count - 1.
    CHECK(row_max[j] == static_cast<std::int64_t>(row_count[j]) - 1);
    if (row_count[j] == q) ++full_rows;
  }
  CHECK(full_rows == 1);
}

TEST_CASE("standardize handles constant vectors via the scale clamp") {
  const std::vector<double> y{1.0, 1.0, 1.0};
  const auto [z, st] = standardize(y);
  CHECK(z == std::vector<double>{0.0, 0.0, 0.0});
  CHECK(st.scale == 1e-12);
}

TEST_CASE("standardize uses the population convention") {
  const std::vector<double> y{0.0, 2.0};
  const auto [z, st] = standardize(y);
  CHECK(st.mean == doctest::Approx(1.0));
  CHECK(st.scale == doctest::Approx(1.0));
  CHECK(z[0] == doctest::Approx(-1.0));
  CHECK(z[1] == doctest::Approx(1.0));
}

TEST_CASE("standardize round-trips") {
  const std::vector<double> y{3.2, -1.5, 0.7, 12.0, 2.2};
  const auto [z, st] = standardize(y);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(st.inverse(z[i]) == doctest::Approx(y[i]).epsilon(1e-14));
}

TEST_CASE("mask json round-trips") {
  const auto mask = generate_mask(6, 5, UniformMissing{0.4}, 9);
  const auto text = mask_to_json(mask);
  const auto back = mask_from_json(text);
  CHECK(back.p() == mask.p());
  CHECK(back.q() == mask.q());
  CHECK(std::vector<std::int64_t>(back.observed().begin(), back.observed().end()) ==
        std::vector<std::int64_t>(mask.observed().begin(), mask.observed().end()));
}

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& contents) {
    path = std::string(std::tmpnam(nullptr)) + ".csv";
    std::ofstream out(path);
    out << contents;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("csv loading groups feature tuples in first-appearance order") {
  const TempFile file(
      "s:lat,s:lon,t:day,y\n"
      "1.0,2.0,0,10.5\n"
      "1.0,2.0,1,11.5\n"
      "3.0,4.0,0,20.5\n"
      "3.0,4.0,1,21.5\n");
  const auto grid = load_csv(file.path);
  CHECK(grid.p() == 2);
  CHECK(grid.q() == 2);
  CHECK(grid.n() == 4);
  CHECK(grid.s_points(0, 0) == 1.0);
  CHECK(grid.s_points(1, 1) == 4.0);
  CHECK(grid.y == std::vector<double>{10.5, 11.5, 20.5, 21.5});
}

TEST_CASE("csv duplicate cells and parse failures are reported") {
  const TempFile dup(
      "s:a,t:b,y\n"
      "1.0,0,1.0\n"
      "1.0,0,2.0\n");
  CHECK_THROWS_AS((void)load_csv(dup.path), DuplicateObservation);

  const TempFile bad(
      "s:a,t:b,y\n"
      "1.0,0,1.0\n"
      "oops,0,2.0\n");
  try {
    (void)load_csv(bad.path);
    FAIL("expected ParseError");
  } catch (const ParseError& err) {
    CHECK(std::string(err.what()).find("row 3") != std::string::npos);
  }
}

TEST_CASE("csv distinguishes byte-distinct feature encodings") {
  // 1.0 and 1.00 parse to the same double but are distinct tuples.
  const TempFile file(
      "s:a,t:b,y\n"
      "1.0,0,1.0\n"
      "1.00,0,2.0\n");
  const auto grid = load_csv(file.path);
  CHECK(grid.p() == 2);
}
