#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnf/predictor/predictor.hpp"

namespace pfnf::harness {

using predictor::Matrix;

enum class SplitLabel : std::uint8_t { kTrain, kTest };

// Canonical table: one row per sample. `columns` holds the feature (`f_*`)
// and covariate (`c_*`) names in file order; x is [n, columns.size()] with
// NaN for a missing cell. Imputation happens in the predictor.
struct FeatureTable {
  std::vector<std::string> ids;
  std::vector<std::string> columns;
  Matrix x;
  std::optional<std::vector<double>> y;  // NaN where a row has no target
  std::optional<std::vector<SplitLabel>> split;
  std::optional<std::vector<int>> fold;
  std::optional<std::vector<std::string>> group;
  // Featurizer provenance; `featurize_seconds` feeds the timing records.
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t n_rows() const { return ids.size(); }
  std::size_t n_columns() const { return columns.size(); }
  double featurize_seconds() const;

  // Throws ParseError on duplicate ids, ragged columns, infinite values,
  // negative folds, or both `split` and `fold`.
  void validate() const;
  // Rows selected by `rows`, in that order.
  FeatureTable take(const std::vector<std::size_t>& rows) const;
};

// Bitwise equality (NaN cells compare equal to NaN).
bool same_table(const FeatureTable& a, const FeatureTable& b);

// `.ftbin` by extension, else CSV. A CSV may carry provenance in a sidecar
// `<path>.manifest.json`. Errors name the line and column.
FeatureTable load_feature_table(const std::filesystem::path& path);
FeatureTable read_table_csv(std::istream& in, const std::string& source = "<csv>");
FeatureTable read_table_ftbin(std::istream& in, const std::string& source = "<ftbin>");

// CSV values are written with round-trip precision. `.ftbin` stores x as
// little-endian float32, so only float32-representable cells survive
// exactly; everything else travels in the JSON header.
void write_table(const FeatureTable& table, const std::filesystem::path& path);
void write_table_csv(const FeatureTable& table, std::ostream& out);
void write_table_ftbin(const FeatureTable& table, std::ostream& out);

}  // namespace pfnf::harness
