#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pfnf::stats {

enum class MetricKind : std::uint8_t { kRmse, kMae, kR2, kAccuracy, kAuroc, kLogLoss };
const char* metric_name(MetricKind k);
MetricKind parse_metric(const std::string& name);
bool higher_is_better(MetricKind k);
bool is_classification_metric(MetricKind k);

// Regression kinds take point predictions. Classification kinds take binary
// labels {0, 1} in y_true and P(class 1) in y_pred; accuracy thresholds at
// `threshold`. Throws UndefinedScoreError for R^2 on constant y_true and for
// AUROC on a single class.
double metric(const std::vector<double>& y_true, const std::vector<double>& y_pred, MetricKind kind,
              double threshold = 0.5);
// Multi-class: per-row probability vectors; accuracy uses argmax, log-loss
// the true class, AUROC only for two classes.
double metric(const std::vector<double>& y_true, const std::vector<std::vector<double>>& probs, MetricKind kind);

// scores[model][dataset][seed].
struct ScoreMatrix {
  std::vector<std::string> models;
  std::vector<std::string> datasets;
  std::vector<MetricKind> metrics;  // per dataset
  std::vector<std::vector<std::vector<double>>> scores;
  // Set by normalize_scores: every dataset is then higher-better in [0, 1].
  bool normalized = false;

  // Throws PreconditionError on ragged shapes or non-finite scores.
  void validate() const;
  std::size_t n_models() const { return models.size(); }
  std::size_t n_datasets() const { return datasets.size(); }
  bool dataset_higher_better(std::size_t d) const { return normalized || higher_is_better(metrics.at(d)); }
  // Mean over seeds.
  double mean(std::size_t model, std::size_t dataset) const;
};

// Per dataset, min-max over all models and seeds; error metrics are then
// inverted. A constant dataset maps to 0.5.
ScoreMatrix normalize_scores(const ScoreMatrix& m);

// Models (indices) whose mean is not significantly below the best mean by
// Tukey's HSD: |mean_best - mean_m| <= q(alpha; k, k(n - 1)) sqrt(MS_within / n).
// groups[model] holds that model's replicate scores (higher is better).
// With zero pooled variance only models tied exactly with the best win.
std::vector<std::size_t> tukey_hsd_wins(const std::vector<std::vector<double>>& groups, double alpha = 0.05);

// Upper-alpha point of the studentized range (alpha = 0.05 only), k in
// [2, 30]. Linear interpolation in df between table entries and in 1/df
// beyond 120.
double studentized_range_q(std::size_t k, double df, double alpha = 0.05);
// Nemenyi q_alpha(k) = q(alpha; k, inf) / sqrt 2.
double nemenyi_q(std::size_t k, double alpha = 0.05);

struct WinReport {
  std::vector<std::vector<std::size_t>> win_sets;  // per dataset
  std::vector<std::size_t> win_count;              // per model
  std::vector<double> win_rate;                    // percent
  std::vector<double> average_rank;
  nlohmann::json to_json(const ScoreMatrix& m) const;
};
// Datasets with a single seed (or a single model) skip the test: the best
// model and exact ties win.
WinReport win_report(const ScoreMatrix& m, double alpha = 0.05);

// ranks[dataset][model] from seed means; rank 1 = best, ties averaged.
std::vector<std::vector<double>> dataset_ranks(const ScoreMatrix& m);
std::vector<double> average_ranks(const ScoreMatrix& m);
// Average ranks of one row of higher-is-better values.
std::vector<double> rank_descending(const std::vector<double>& values);

struct CdReport {
  std::vector<double> mean_ranks;
  double chi2 = 0.0;
  double p_value = 1.0;
  double cd = 0.0;
  // Maximal runs of models (sorted by mean rank) whose rank spread is below
  // CD; every model belongs to at least one clique. Members and the list
  // itself are sorted by model index.
  std::vector<std::vector<std::size_t>> cliques;
  nlohmann::json to_json() const;
};
// ranks[dataset][model]; needs k >= 3 models and N >= 2 datasets.
CdReport friedman_nemenyi(const std::vector<std::vector<double>>& ranks, double alpha = 0.05);

struct SubsetScore {
  double in = 0.0;
  double out = 0.0;
  double difference = 0.0;  // in - out
};
SubsetScore subset_metric(const std::vector<double>& y_true, const std::vector<double>& y_pred,
                          const std::vector<bool>& mask, MetricKind kind);

// One model's result on one replicate (fold and seed) of one task.
struct RunRecord {
  std::string task;
  std::string model;
  std::string replicate;
  double rmse = 0.0;
  double fit_seconds = 0.0;
  double predict_seconds = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  bool has_timing = true;
};

struct ParetoRow {
  std::string model;
  double relative_gap = 0.0;
  double runtime_per_1000 = 0.0;
  bool on_front = false;
};
// Gap (RMSE - best) / RMSE against the best model of the same task and
// replicate; runtime per 1000 samples = (fit + predict) * 1000 / (n_train +
// n_test). Both are averaged over replicates, then over tasks. Throws
// PreconditionError when a record lacks timings or a model misses a
// replicate another model has.
std::vector<ParetoRow> pareto_table(const std::vector<RunRecord>& records);
// Indices of rows no other row beats on both gap and runtime.
std::vector<bool> pareto_front(const std::vector<std::pair<double, double>>& points);

}  // namespace pfnf::stats
