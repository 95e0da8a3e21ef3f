#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnf/baselines/baselines.hpp"
#include "pfnf/harness/table.hpp"
#include "pfnf/model/model.hpp"
#include "pfnf/predictor/predictor.hpp"
#include "pfnf/stats/stats.hpp"

namespace pfnf::harness {

inline constexpr int kSchemaVersion = 1;

enum class SplitMode : std::uint8_t { kFixed, kKFold, kGroupKFold };
const char* split_mode_name(SplitMode m);
SplitMode parse_split_mode(const std::string& name);

// "reg"/"regression" and "cls"/"classification".
model::TaskKind parse_task_kind(const std::string& name);
const char* task_kind_name(model::TaskKind kind);

struct DatasetSpec {
  std::string name;
  std::filesystem::path path;
  model::TaskKind kind = model::TaskKind::kRegression;
  stats::MetricKind metric = stats::MetricKind::kRmse;
  SplitMode split = SplitMode::kFixed;
  std::size_t folds = 5;  // k-fold modes
};

struct ModelSpec {
  std::string name;
  // "pfn" runs the in-context predictor from `checkpoint`; otherwise a
  // baseline named by `baseline.kind`.
  bool is_pfn = false;
  std::filesystem::path checkpoint;
  predictor::EnsembleConfig ensemble;
  baselines::BaselineSpec baseline;
};

// INI schema:
//   [bench]          seeds = 0,1,2,3,4   output = results
//   [dataset.NAME]   path, task (reg|cls), metric, split (fixed|kfold|group-kfold), folds
//   [model.NAME]     type = pfn | ridge | logistic | knn | random_forest, plus that
//                    type's options (ensemble keys for pfn, BaselineSpec keys otherwise)
// Relative paths resolve against the config file's directory. Sections keep
// file order.
struct BenchConfig {
  std::vector<DatasetSpec> datasets;
  std::vector<ModelSpec> models;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::filesystem::path output_dir = "results";

  void validate() const;
  static BenchConfig from_file(const std::filesystem::path& path);
  static BenchConfig from_ini_text(const std::string& text, const std::filesystem::path& base_dir);
};

// Fold per row. Fixed mode: 0 for train rows and the test split; the split
// column is required. k-fold: the fold column when present, else
// FNV-1a(id) mod F. Group k-fold: whole groups go to the currently smallest
// fold, groups taken in order of FNV-1a(group). Seed-independent.
std::vector<int> assign_folds(const FeatureTable& table, const DatasetSpec& spec);
// Fold indices present; fixed mode yields {0}.
std::vector<int> fold_ids(const FeatureTable& table, const DatasetSpec& spec);
// (train rows, test rows) for one fold, ascending.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> fold_rows(const FeatureTable& table,
                                                                        const DatasetSpec& spec, int fold);

std::uint64_t fnv1a(const std::string& s);
// RNG seed for one cell; depends on the master seed and the cell key only.
std::uint64_t cell_seed(std::uint64_t seed, const std::string& dataset, int fold, const std::string& model);

struct TimingRecord {
  double featurize_seconds = 0.0;
  double fit_seconds = 0.0;
  double predict_seconds = 0.0;
  double total_seconds = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;

  double runtime_per_1000() const;
  nlohmann::json to_json() const;
  static TimingRecord from_json(const nlohmann::json& j);
};

// Monotonic-clock timing around fit and predict; featurization is copied in.
TimingRecord time_phases(const std::function<void()>& fit, const std::function<void()>& predict,
                         double featurize_seconds, std::size_t n_train, std::size_t n_test);

struct CellKey {
  std::string dataset;
  std::string model;
  std::uint64_t seed = 0;
  int fold = 0;

  std::string str() const;
  friend auto operator<=>(const CellKey&, const CellKey&) = default;
};

struct CellResult {
  CellKey key;
  bool ok = false;
  std::string error;
  model::TaskKind kind = model::TaskKind::kRegression;
  stats::MetricKind metric = stats::MetricKind::kRmse;
  double score = 0.0;
  std::optional<double> rmse;  // regression cells
  std::optional<stats::SubsetScore> subset;  // when the test rows carry a 0/1 group
  std::uint64_t scaler_hash = 0;
  std::vector<std::string> ids;
  std::vector<double> y_true;
  std::vector<double> point;
  std::vector<std::vector<double>> probs;  // classification
  TimingRecord timing;

  // `with_timing` = false drops the wall-clock fields for reproducibility
  // comparisons.
  nlohmann::json to_json(bool with_timing = true) const;
  static CellResult from_json(const nlohmann::json& j);
};

// Append-only JSONL store in `dir`/results.jsonl. A later line for the same
// key supersedes an earlier one.
class ResultsStore {
 public:
  explicit ResultsStore(std::filesystem::path dir);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path file() const { return dir_ / "results.jsonl"; }
  // Latest record per key, in key order.
  const std::map<CellKey, CellResult>& cells() const { return cells_; }
  bool completed(const CellKey& key) const;
  void append(const CellResult& result);
  std::vector<CellResult> failures() const;

 private:
  std::filesystem::path dir_;
  std::map<CellKey, CellResult> cells_;
};

struct RunOptions {
  bool force = false;
  // Worker cap; 0 reads PFNF_THREADS, defaulting to the hardware count.
  std::size_t threads = 0;
  std::function<void(const CellResult&)> on_cell;
};

std::size_t worker_count(std::size_t requested);

// Runs every (dataset, fold, model, seed) cell not yet completed in the
// store under `config.output_dir`. Cell failures are recorded, not thrown.
ResultsStore run_benchmark(const BenchConfig& config, const RunOptions& options = {});

// One cell, exposed for tests. `model` is loaded once per spec by the runner.
CellResult run_cell(const CellKey& key, const DatasetSpec& dataset, const FeatureTable& table, const ModelSpec& spec,
                    const std::shared_ptr<const model::TabularModel<float>>& model);

}  // namespace pfnf::harness
