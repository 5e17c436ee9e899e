#pragma once

#include <string>
#include <vector>

#include "lkgp/grid.hpp"

namespace lkgp {

/// Column selection for CSV ingestion. Spatial/temporal feature tuples are
/// grouped by exact byte equality of the raw fields.
struct CsvSchema {
  std::vector<std::string> spatial_columns;
  std::vector<std::string> temporal_columns;
  std::string output_column = "y";
};

/// Derives a schema from `s:<name>` / `t:<name>` / `y` header names.
CsvSchema infer_schema(const std::vector<std::string>& header);

/// Loads a dataset where each row is one observed grid cell. Distinct
/// spatial feature tuples become S in first-appearance order; likewise T.
PartialGrid load_csv(const std::string& path);
PartialGrid load_csv(const std::string& path, const CsvSchema& schema);

/// Mask exchange format: {"p": int, "q": int, "observed": [int, ...]}.
std::string mask_to_json(const ObservationMask& mask);
ObservationMask mask_from_json(const std::string& text);

}  // namespace lkgp
