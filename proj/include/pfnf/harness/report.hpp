#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnf/harness/bench.hpp"
#include "pfnf/stats/stats.hpp"

namespace pfnf::harness {

// Shortest round-trip decimal form; shared by JSON, CSV and SVG so the
// three artifacts carry identical numbers.
std::string format_double(double v);

struct ScoreTable {
  stats::ScoreMatrix matrix;  // raw scores, replicate = (seed, fold)
  std::vector<std::pair<std::string, std::string>> excluded;  // (dataset, reason)
};
// Datasets where every model has the same complete set of successful
// replicates; the rest are listed as excluded. Models and datasets are
// ordered by name.
ScoreTable score_table(const std::vector<CellResult>& cells);

struct ReportBundle {
  nlohmann::json summary;
  std::string scores_csv;  // one row per cell
  std::string table_csv;   // model, win count, win rate, average rank
  std::string cd_svg;      // empty when the CD test does not apply
  std::string pareto_svg;  // empty without RMSE datasets
};

// Throws PreconditionError when no dataset survives.
ReportBundle build_report(const std::vector<CellResult>& cells, double alpha = 0.05);
// Writes summary.json, scores.csv, table.csv, cd_diagram.svg and
// pareto.svg into `out_dir`.
ReportBundle emit_report(const ResultsStore& store, const std::filesystem::path& out_dir, double alpha = 0.05);

// The summary without the keys it lists under "volatile_keys" (wall-clock
// dependent), for reproducibility comparisons.
nlohmann::json strip_volatile(const nlohmann::json& summary);

std::string cd_diagram_svg(const std::vector<std::string>& models, const stats::CdReport& cd);
std::string pareto_svg(const std::vector<stats::ParetoRow>& rows);

}  // namespace pfnf::harness
