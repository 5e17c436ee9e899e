#include "lkgp/dataset_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "lkgp/errors.hpp"

namespace lkgp {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream stream(line);
  while (std::getline(stream, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& field, std::size_t row) {
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last)
    throw ParseError("csv row " + std::to_string(row) + ": cannot parse '" + field + "'");
  return value;
}

std::size_t column_index(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw ParseError("csv header: missing column '" + name + "'");
}

// Feature tuple key: raw fields joined with an unprintable separator.
std::string tuple_key(const std::vector<std::string>& fields,
                      const std::vector<std::size_t>& columns) {
  std::string key;
  for (std::size_t c : columns) {
    key += fields[c];
    key += '\x1f';
  }
  return key;
}

}  // namespace

CsvSchema infer_schema(const std::vector<std::string>& header) {
  CsvSchema schema;
  for (const auto& name : header) {
    if (name.rfind("s:", 0) == 0) {
      schema.spatial_columns.push_back(name);
    } else if (name.rfind("t:", 0) == 0) {
      schema.temporal_columns.push_back(name);
    }
  }
  if (schema.spatial_columns.empty() || schema.temporal_columns.empty())
    throw ParseError("csv header: expected s:<name> and t:<name> columns");
  return schema;
}

PartialGrid load_csv(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw ParseError("csv: cannot open " + path);
  std::string line;
  if (!std::getline(file, line)) throw ParseError("csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const CsvSchema schema = infer_schema(split_fields(line));
  file.close();
  return load_csv(path, schema);
}

PartialGrid load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream file(path);
  if (!file) throw ParseError("csv: cannot open " + path);

  std::string line;
  if (!std::getline(file, line)) throw ParseError("csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_fields(line);

  std::vector<std::size_t> s_cols, t_cols;
  for (const auto& name : schema.spatial_columns) s_cols.push_back(column_index(header, name));
  for (const auto& name : schema.temporal_columns) t_cols.push_back(column_index(header, name));
  const std::size_t y_col = column_index(header, schema.output_column);

  std::unordered_map<std::string, std::int64_t> s_index, t_index;
  std::vector<std::vector<double>> s_rows, t_rows;
  std::vector<std::pair<std::int64_t, std::int64_t>> cells;
  std::vector<double> y;

  std::size_t row = 1;
  while (std::getline(file, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw ParseError("csv row " + std::to_string(row) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));

    auto intern = [&](std::unordered_map<std::string, std::int64_t>& index,
                      std::vector<std::vector<double>>& rows,
                      const std::vector<std::size_t>& cols) {
      const std::string key = tuple_key(fields, cols);
      const auto it = index.find(key);
      if (it != index.end()) return it->second;
      std::vector<double> values;
      values.reserve(cols.size());
      for (std::size_t c : cols) values.push_back(parse_double(fields[c], row));
      const auto id = static_cast<std::int64_t>(rows.size());
      rows.push_back(std::move(values));
      index.emplace(key, id);
      return id;
    };

    const std::int64_t j = intern(s_index, s_rows, s_cols);
    const std::int64_t k = intern(t_index, t_rows, t_cols);
    cells.emplace_back(j, k);
    y.push_back(parse_double(fields[y_col], row));
  }
  if (cells.empty()) throw ParseError("csv: no data rows in " + path);

  Matrix s(s_rows.size(), s_cols.size());
  for (std::size_t i = 0; i < s_rows.size(); ++i)
    for (std::size_t d = 0; d < s_cols.size(); ++d) s(i, d) = s_rows[i][d];
  Matrix t(t_rows.size(), t_cols.size());
  for (std::size_t i = 0; i < t_rows.size(); ++i)
    for (std::size_t d = 0; d < t_cols.size(); ++d) t(i, d) = t_rows[i][d];

  return build_partial_grid(std::move(s), std::move(t), cells, y);
}

std::string mask_to_json(const ObservationMask& mask) {
  nlohmann::json out;
  out["p"] = mask.p();
  out["q"] = mask.q();
  out["observed"] = std::vector<std::int64_t>(mask.observed().begin(), mask.observed().end());
  return out.dump();
}

ObservationMask mask_from_json(const std::string& text) {
  const auto parsed = nlohmann::json::parse(text, nullptr, false);
  if (parsed.is_discarded() || !parsed.contains("p") || !parsed.contains("q") ||
      !parsed.contains("observed"))
    throw ParseError("mask json: expected {\"p\", \"q\", \"observed\"}");
  return ObservationMask(parsed["p"].get<std::size_t>(), parsed["q"].get<std::size_t>(),
                         parsed["observed"].get<std::vector<std::int64_t>>());
}

}  // namespace lkgp
