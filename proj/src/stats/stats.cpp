#include "pfnf/stats/stats.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <boost/math/distributions/chi_squared.hpp>

#include "pfnf/error.hpp"

namespace pfnf::stats {

namespace {

#include "qtable.inc"

constexpr double kLogLossClip = 1e-15;

void check_lengths(const std::vector<double>& a, std::size_t b, std::size_t min_len = 1) {
  if (a.size() != b) throw PreconditionError("y_true and predictions differ in length");
  if (a.size() < min_len) throw PreconditionError("metric needs at least " + std::to_string(min_len) + " rows");
}

void check_binary(const std::vector<double>& y_true, const std::vector<double>& p) {
  for (double y : y_true) {
    if (y != 0.0 && y != 1.0) throw PreconditionError("binary metrics need labels in {0, 1}");
  }
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw PreconditionError("probabilities must lie in [0, 1]");
  }
}

// Mann-Whitney U with mid-ranks for ties.
double auroc(const std::vector<double>& y_true, const std::vector<double>& score) {
  const std::vector<double> r = rank_descending(score);  // 1 = largest
  double pos = 0, rank_sum = 0;
  const auto n = static_cast<double>(y_true.size());
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] == 1.0) {
      ++pos;
      rank_sum += n + 1.0 - r[i];  // ascending rank
    }
  }
  const double neg = n - pos;
  if (pos == 0 || neg == 0) throw UndefinedScoreError("AUROC is undefined when y_true has a single class");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

}  // namespace

const char* metric_name(MetricKind k) {
  switch (k) {
    case MetricKind::kRmse: return "rmse";
    case MetricKind::kMae: return "mae";
    case MetricKind::kR2: return "r2";
    case MetricKind::kAccuracy: return "accuracy";
    case MetricKind::kAuroc: return "auroc";
    case MetricKind::kLogLoss: return "log_loss";
  }
  return "?";
}

MetricKind parse_metric(const std::string& name) {
  for (MetricKind k : {MetricKind::kRmse, MetricKind::kMae, MetricKind::kR2, MetricKind::kAccuracy,
                       MetricKind::kAuroc, MetricKind::kLogLoss}) {
    if (name == metric_name(k)) return k;
  }
  throw ParseError("unknown metric '" + name + "'");
}

bool higher_is_better(MetricKind k) {
  return k == MetricKind::kR2 || k == MetricKind::kAccuracy || k == MetricKind::kAuroc;
}

bool is_classification_metric(MetricKind k) {
  return k == MetricKind::kAccuracy || k == MetricKind::kAuroc || k == MetricKind::kLogLoss;
}

double metric(const std::vector<double>& y_true, const std::vector<double>& y_pred, MetricKind kind,
              double threshold) {
  check_lengths(y_true, y_pred.size(), kind == MetricKind::kR2 ? 2 : 1);
  const auto n = static_cast<double>(y_true.size());
  switch (kind) {
    case MetricKind::kRmse:
    case MetricKind::kMae: {
      double s = 0.0;
      for (std::size_t i = 0; i < y_true.size(); ++i) {
        const double e = y_pred[i] - y_true[i];
        s += kind == MetricKind::kRmse ? e * e : std::abs(e);
      }
      return kind == MetricKind::kRmse ? std::sqrt(s / n) : s / n;
    }
    case MetricKind::kR2: {
      const double mean = std::accumulate(y_true.begin(), y_true.end(), 0.0) / n;
      double res = 0.0, tot = 0.0;
      for (std::size_t i = 0; i < y_true.size(); ++i) {
        res += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
        tot += (y_true[i] - mean) * (y_true[i] - mean);
      }
      if (tot == 0.0) throw UndefinedScoreError("R^2 is undefined for a constant y_true");
      return 1.0 - res / tot;
    }
    case MetricKind::kAccuracy: {
      check_binary(y_true, y_pred);
      double hits = 0.0;
      for (std::size_t i = 0; i < y_true.size(); ++i) hits += (y_pred[i] >= threshold ? 1.0 : 0.0) == y_true[i];
      return hits / n;
    }
    case MetricKind::kAuroc:
      check_binary(y_true, y_pred);
      return auroc(y_true, y_pred);
    case MetricKind::kLogLoss: {
      check_binary(y_true, y_pred);
      double s = 0.0;
      for (std::size_t i = 0; i < y_true.size(); ++i) {
        const double p = std::clamp(y_pred[i], kLogLossClip, 1.0 - kLogLossClip);
        s -= y_true[i] == 1.0 ? std::log(p) : std::log(1.0 - p);
      }
      return s / n;
    }
  }
  throw PreconditionError("unknown metric");
}

double metric(const std::vector<double>& y_true, const std::vector<std::vector<double>>& probs, MetricKind kind) {
  check_lengths(y_true, probs.size());
  if (!is_classification_metric(kind)) throw PreconditionError("probability matrices take classification metrics");
  const std::size_t k = probs.front().size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != k) throw ShapeError("probability rows differ in length");
    const double label = y_true[i];
    if (!(label >= 0.0) || label != std::floor(label) || label >= static_cast<double>(k)) {
      throw PreconditionError("labels must be integers below the class count");
    }
  }
  if (k == 2) {
    std::vector<double> p1;
    for (const auto& p : probs) p1.push_back(p[1]);
    if (kind == MetricKind::kAccuracy) {
      double hits = 0.0;
      for (std::size_t i = 0; i < probs.size(); ++i) hits += (probs[i][1] > probs[i][0] ? 1.0 : 0.0) == y_true[i];
      return hits / static_cast<double>(probs.size());
    }
    return metric(y_true, p1, kind);
  }
  if (kind == MetricKind::kAuroc) throw PreconditionError("AUROC is implemented for binary tasks only");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto label = static_cast<std::size_t>(y_true[i]);
    if (kind == MetricKind::kAccuracy) {
      s += static_cast<std::size_t>(std::max_element(probs[i].begin(), probs[i].end()) - probs[i].begin()) == label;
    } else {
      s -= std::log(std::clamp(probs[i][label], kLogLossClip, 1.0));
    }
  }
  return s / static_cast<double>(probs.size());
}

void ScoreMatrix::validate() const {
  if (models.empty() || datasets.empty()) throw PreconditionError("score matrix needs models and datasets");
  if (metrics.size() != datasets.size()) throw PreconditionError("one metric kind per dataset");
  if (scores.size() != models.size()) throw PreconditionError("scores must have one entry per model");
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    std::size_t seeds = 0;
    for (std::size_t m = 0; m < models.size(); ++m) {
      if (scores[m].size() != datasets.size()) throw PreconditionError("scores must cover every dataset");
      const auto& s = scores[m][d];
      if (s.empty()) throw PreconditionError("no seeds for " + models[m] + " on " + datasets[d]);
      if (m == 0) seeds = s.size();
      if (s.size() != seeds) throw PreconditionError("seed counts differ across models on " + datasets[d]);
      for (double v : s) {
        if (!std::isfinite(v)) throw PreconditionError("non-finite score for " + models[m] + " on " + datasets[d]);
      }
    }
  }
}

double ScoreMatrix::mean(std::size_t model, std::size_t dataset) const {
  const auto& s = scores.at(model).at(dataset);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

ScoreMatrix normalize_scores(const ScoreMatrix& m) {
  m.validate();
  ScoreMatrix out = m;
  for (std::size_t d = 0; d < m.n_datasets(); ++d) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t k = 0; k < m.n_models(); ++k) {
      for (double v : m.scores[k][d]) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    const bool invert = !m.dataset_higher_better(d);
    for (std::size_t k = 0; k < m.n_models(); ++k) {
      for (double& v : out.scores[k][d]) {
        if (hi == lo) {
          v = 0.5;
          continue;
        }
        const double t = (v - lo) / (hi - lo);
        v = invert ? 1.0 - t : t;
      }
    }
  }
  out.normalized = true;
  return out;
}

double studentized_range_q(std::size_t k, double df, double alpha) {
  if (alpha != 0.05) throw PreconditionError("only alpha = 0.05 is tabulated");
  if (k < 2 || k > 30) throw PreconditionError("studentized range table covers 2 <= k <= 30, got " + std::to_string(k));
  if (!(df >= 1.0)) throw PreconditionError("studentized range needs df >= 1");
  const double* row = kQ05[k - 2];
  constexpr std::size_t n_df = sizeof(kTableDf) / sizeof(kTableDf[0]);
  if (std::isinf(df)) return row[n_df];
  if (df >= kTableDf[n_df - 1]) {
    // Between 120 and infinity, linear in 1/df.
    const double t = static_cast<double>(kTableDf[n_df - 1]) / df;
    return row[n_df] + t * (row[n_df - 1] - row[n_df]);
  }
  std::size_t i = 0;
  while (kTableDf[i + 1] <= df) ++i;
  if (kTableDf[i] == df) return row[i];
  const double t = (df - kTableDf[i]) / static_cast<double>(kTableDf[i + 1] - kTableDf[i]);
  return row[i] + t * (row[i + 1] - row[i]);
}

double nemenyi_q(std::size_t k, double alpha) { return studentized_range_q(k, INFINITY, alpha) / std::sqrt(2.0); }

std::vector<std::size_t> tukey_hsd_wins(const std::vector<std::vector<double>>& groups, double alpha) {
  const std::size_t k = groups.size();
  if (k < 2) throw PreconditionError("Tukey HSD needs at least 2 models");
  const std::size_t n = groups.front().size();
  if (n < 2) throw PreconditionError("Tukey HSD needs at least 2 replicates per model");
  std::vector<double> means(k);
  double ss = 0.0;
  for (std::size_t m = 0; m < k; ++m) {
    if (groups[m].size() != n) throw PreconditionError("Tukey HSD needs equal replicate counts");
    means[m] = std::accumulate(groups[m].begin(), groups[m].end(), 0.0) / static_cast<double>(n);
    for (double v : groups[m]) ss += (v - means[m]) * (v - means[m]);
  }
  const auto best = static_cast<std::size_t>(std::max_element(means.begin(), means.end()) - means.begin());
  const double df = static_cast<double>(k * (n - 1));
  const double ms_within = ss / df;
  const double margin = studentized_range_q(k, df, alpha) * std::sqrt(ms_within / static_cast<double>(n));
  std::vector<std::size_t> wins;
  for (std::size_t m = 0; m < k; ++m) {
    const double gap = means[best] - means[m];
    if (m == best || gap == 0.0 || (ms_within > 0.0 && gap <= margin)) wins.push_back(m);
  }
  return wins;
}

std::vector<double> rank_descending(const std::vector<double>& values) {
  const std::size_t k = values.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  std::vector<double> ranks(k);
  for (std::size_t i = 0; i < k;) {
    std::size_t j = i;
    while (j + 1 < k && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::vector<std::vector<double>> dataset_ranks(const ScoreMatrix& m) {
  m.validate();
  std::vector<std::vector<double>> ranks;
  for (std::size_t d = 0; d < m.n_datasets(); ++d) {
    std::vector<double> means(m.n_models());
    for (std::size_t k = 0; k < m.n_models(); ++k) {
      means[k] = m.dataset_higher_better(d) ? m.mean(k, d) : -m.mean(k, d);
    }
    ranks.push_back(rank_descending(means));
  }
  return ranks;
}

std::vector<double> average_ranks(const ScoreMatrix& m) {
  const auto ranks = dataset_ranks(m);
  std::vector<double> avg(m.n_models(), 0.0);
  for (const auto& row : ranks) {
    for (std::size_t k = 0; k < row.size(); ++k) avg[k] += row[k];
  }
  for (double& v : avg) v /= static_cast<double>(ranks.size());
  return avg;
}

WinReport win_report(const ScoreMatrix& m, double alpha) {
  m.validate();
  WinReport r;
  r.win_count.assign(m.n_models(), 0);
  for (std::size_t d = 0; d < m.n_datasets(); ++d) {
    std::vector<std::vector<double>> groups;
    for (std::size_t k = 0; k < m.n_models(); ++k) {
      groups.push_back(m.scores[k][d]);
      // Orient so higher is better.
      if (!m.dataset_higher_better(d)) {
        for (double& v : groups.back()) v = -v;
      }
    }
    if (groups.size() >= 2 && groups.front().size() >= 2) {
      r.win_sets.push_back(tukey_hsd_wins(groups, alpha));
    } else {
      // A single model, or a single replicate with no variance estimate:
      // only the best and exact ties win.
      double best = -INFINITY;
      for (const auto& g : groups) best = std::max(best, g.front());
      std::vector<std::size_t> wins;
      for (std::size_t k = 0; k < groups.size(); ++k) {
        if (groups[k].front() == best) wins.push_back(k);
      }
      r.win_sets.push_back(wins);
    }
    for (std::size_t k : r.win_sets.back()) ++r.win_count[k];
  }
  for (std::size_t c : r.win_count) {
    r.win_rate.push_back(100.0 * static_cast<double>(c) / static_cast<double>(m.n_datasets()));
  }
  r.average_rank = average_ranks(m);
  return r;
}

nlohmann::json WinReport::to_json(const ScoreMatrix& m) const {
  nlohmann::json models = nlohmann::json::array();
  for (std::size_t k = 0; k < m.n_models(); ++k) {
    models.push_back({{"model", m.models[k]},
                      {"wins", win_count[k]},
                      {"win_rate", win_rate[k]},
                      {"average_rank", average_rank[k]}});
  }
  nlohmann::json sets = nlohmann::json::object();
  for (std::size_t d = 0; d < m.n_datasets(); ++d) {
    nlohmann::json names = nlohmann::json::array();
    for (std::size_t k : win_sets[d]) names.push_back(m.models[k]);
    sets[m.datasets[d]] = names;
  }
  return {{"models", models}, {"win_sets", sets}};
}

CdReport friedman_nemenyi(const std::vector<std::vector<double>>& ranks, double alpha) {
  const std::size_t n = ranks.size();
  if (n < 2) throw PreconditionError("Friedman test needs at least 2 datasets");
  const std::size_t k = ranks.front().size();
  if (k < 3) throw PreconditionError("Friedman test needs at least 3 models");
  CdReport r;
  r.mean_ranks.assign(k, 0.0);
  for (const auto& row : ranks) {
    if (row.size() != k) throw PreconditionError("rank rows differ in length");
    for (std::size_t j = 0; j < k; ++j) r.mean_ranks[j] += row[j];
  }
  for (double& v : r.mean_ranks) v /= static_cast<double>(n);
  const auto kd = static_cast<double>(k), nd = static_cast<double>(n);
  double sum_sq = 0.0;
  for (double v : r.mean_ranks) sum_sq += v * v;
  r.chi2 = 12.0 * nd / (kd * (kd + 1.0)) * (sum_sq - kd * (kd + 1.0) * (kd + 1.0) / 4.0);
  r.chi2 = std::max(r.chi2, 0.0);
  r.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(kd - 1.0), r.chi2));
  r.cd = nemenyi_q(k, alpha) * std::sqrt(kd * (kd + 1.0) / (6.0 * nd));

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return r.mean_ranks[a] < r.mean_ranks[b]; });
  std::size_t last_end = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i;
    while (j + 1 < k && r.mean_ranks[order[j + 1]] - r.mean_ranks[order[i]] < r.cd) ++j;
    // Runs starting later end no earlier, so a run is maximal iff it reaches
    // past every previous one.
    if (i == 0 || j + 1 > last_end) {
      std::vector<std::size_t> clique(order.begin() + static_cast<std::ptrdiff_t>(i),
                                      order.begin() + static_cast<std::ptrdiff_t>(j + 1));
      std::sort(clique.begin(), clique.end());
      r.cliques.push_back(std::move(clique));
      last_end = j + 1;
    }
  }
  std::sort(r.cliques.begin(), r.cliques.end());
  return r;
}

nlohmann::json CdReport::to_json() const {
  return {{"mean_ranks", mean_ranks}, {"chi2", chi2}, {"p_value", p_value}, {"cd", cd}, {"cliques", cliques}};
}

SubsetScore subset_metric(const std::vector<double>& y_true, const std::vector<double>& y_pred,
                          const std::vector<bool>& mask, MetricKind kind) {
  if (mask.size() != y_true.size() || y_pred.size() != y_true.size()) {
    throw PreconditionError("mask, y_true and y_pred must have equal lengths");
  }
  std::vector<double> ti, pi, to, po;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    (mask[i] ? ti : to).push_back(y_true[i]);
    (mask[i] ? pi : po).push_back(y_pred[i]);
  }
  if (ti.empty() || to.empty()) throw PreconditionError("subset_metric needs both subsets nonempty");
  SubsetScore s;
  s.in = metric(ti, pi, kind);
  s.out = metric(to, po, kind);
  s.difference = s.in - s.out;
  return s;
}

std::vector<bool> pareto_front(const std::vector<std::pair<double, double>>& points) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return points[a] < points[b]; });
  // Sweep by gap; a row is dominated iff some row with strictly smaller gap
  // has strictly smaller runtime.
  std::vector<bool> front(points.size(), true);
  double best_runtime = INFINITY;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && points[order[j]].first == points[order[i]].first) ++j;
    for (std::size_t t = i; t < j; ++t) front[order[t]] = !(best_runtime < points[order[t]].second);
    for (std::size_t t = i; t < j; ++t) best_runtime = std::min(best_runtime, points[order[t]].second);
    i = j;
  }
  return front;
}

std::vector<ParetoRow> pareto_table(const std::vector<RunRecord>& records) {
  if (records.empty()) throw PreconditionError("pareto_table needs records");
  std::set<std::string> models;
  // (task, replicate) -> model -> record
  std::map<std::pair<std::string, std::string>, std::map<std::string, const RunRecord*>> cells;
  for (const RunRecord& r : records) {
    if (!r.has_timing) throw PreconditionError("missing timing record for " + r.model + " on " + r.task);
    if (r.n_train + r.n_test == 0) throw PreconditionError("run record with no rows");
    models.insert(r.model);
    cells[{r.task, r.replicate}][r.model] = &r;
  }
  // model -> task -> (sum gap, sum runtime, count)
  std::map<std::string, std::map<std::string, std::array<double, 3>>> acc;
  for (const auto& [key, by_model] : cells) {
    std::set<std::string> task_models;
    for (const auto& [name, rec] : by_model) task_models.insert(name);
    double best = INFINITY;
    for (const auto& [name, rec] : by_model) best = std::min(best, rec->rmse);
    for (const auto& [name, rec] : by_model) {
      auto& a = acc[name][key.first];
      a[0] += rec->rmse > 0.0 ? (rec->rmse - best) / rec->rmse : 0.0;
      a[1] += (rec->fit_seconds + rec->predict_seconds) * 1000.0 / static_cast<double>(rec->n_train + rec->n_test);
      a[2] += 1.0;
    }
    // Every model seen on this task must appear in each of its replicates.
    for (const auto& [other_key, other] : cells) {
      if (other_key.first != key.first) continue;
      for (const auto& [name, rec] : other) {
        if (!task_models.count(name)) {
          throw PreconditionError("missing timing record for " + name + " on " + key.first + " replicate " +
                                  key.second);
        }
      }
    }
  }
  std::vector<ParetoRow> rows;
  for (const std::string& model : models) {
    ParetoRow row{model, 0.0, 0.0, false};
    const auto& tasks = acc[model];
    for (const auto& [task, a] : tasks) {
      row.relative_gap += a[0] / a[2];
      row.runtime_per_1000 += a[1] / a[2];
    }
    row.relative_gap /= static_cast<double>(tasks.size());
    row.runtime_per_1000 /= static_cast<double>(tasks.size());
    rows.push_back(row);
  }
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : rows) pts.emplace_back(r.relative_gap, r.runtime_per_1000);
  const std::vector<bool> front = pareto_front(pts);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].on_front = front[i];
  return rows;
}

}  // namespace pfnf::stats
