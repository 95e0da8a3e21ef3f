#include "pfnf/harness/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "pfnf/error.hpp"

namespace pfnf::harness {

namespace {

constexpr const char* kReplicateCaveat =
    "Replicates are random seeds (and folds where configured). Seed variation reflects model stochasticity "
    "only; it does not resample the data, so win sets are not a test of generalization across datasets.";

using Replicate = std::pair<std::uint64_t, int>;  // (seed, fold)

std::string replicate_name(const Replicate& r) {
  return "seed" + std::to_string(r.first) + "/fold" + std::to_string(r.second);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

std::string format_double(double v) {
  if (!std::isfinite(v)) throw NonFiniteError("cannot format a non-finite report value");
  return nlohmann::json(v).dump();
}

ScoreTable score_table(const std::vector<CellResult>& cells) {
  std::set<std::string> model_names, dataset_names;
  // dataset -> model -> replicate -> cell
  std::map<std::string, std::map<std::string, std::map<Replicate, const CellResult*>>> grid;
  std::map<std::string, std::vector<std::string>> failed;
  for (const CellResult& c : cells) {
    model_names.insert(c.key.model);
    dataset_names.insert(c.key.dataset);
    if (c.ok) {
      grid[c.key.dataset][c.key.model][{c.key.seed, c.key.fold}] = &c;
    } else {
      failed[c.key.dataset].push_back(c.key.str());
    }
  }
  ScoreTable out;
  auto& m = out.matrix;
  m.models.assign(model_names.begin(), model_names.end());
  m.scores.assign(m.models.size(), {});
  for (const std::string& d : dataset_names) {
    if (failed.count(d)) {
      std::string reason = "failed cell(s):";
      for (const auto& k : failed[d]) reason += " " + k;
      out.excluded.emplace_back(d, reason);
      continue;
    }
    const auto& by_model = grid[d];
    std::set<Replicate> reps;
    for (const auto& [name, r] : by_model) {
      for (const auto& [rep, cell] : r) reps.insert(rep);
    }
    std::string missing;
    for (const std::string& name : m.models) {
      const auto it = by_model.find(name);
      for (const Replicate& rep : reps) {
        if (it == by_model.end() || !it->second.count(rep)) missing += " " + name + "@" + replicate_name(rep);
      }
    }
    if (!missing.empty()) {
      out.excluded.emplace_back(d, "missing cell(s):" + missing);
      continue;
    }
    m.datasets.push_back(d);
    m.metrics.push_back(by_model.begin()->second.begin()->second->metric);
    for (std::size_t k = 0; k < m.models.size(); ++k) {
      std::vector<double> s;
      for (const Replicate& rep : reps) s.push_back(by_model.at(m.models[k]).at(rep)->score);
      m.scores[k].push_back(std::move(s));
    }
  }
  return out;
}

ReportBundle build_report(const std::vector<CellResult>& cells, double alpha) {
  const ScoreTable table = score_table(cells);
  const stats::ScoreMatrix& m = table.matrix;
  if (m.datasets.empty()) throw PreconditionError("no complete dataset in the results; nothing to report");
  m.validate();
  const std::size_t k = m.n_models();

  ReportBundle out;
  nlohmann::json& s = out.summary;
  s["schema_version"] = kSchemaVersion;
  s["alpha"] = alpha;
  s["caveat"] = kReplicateCaveat;
  s["volatile_keys"] = {"pareto", "runtime"};
  s["models"] = m.models;
  s["datasets"] = m.datasets;

  nlohmann::json metrics = nlohmann::json::object(), scores = nlohmann::json::object();
  for (std::size_t d = 0; d < m.n_datasets(); ++d) {
    metrics[m.datasets[d]] = stats::metric_name(m.metrics[d]);
    for (std::size_t j = 0; j < k; ++j) {
      nlohmann::json reps = nlohmann::json::array();
      for (double v : m.scores[j][d]) reps.push_back(v);
      scores[m.datasets[d]][m.models[j]] = reps;
    }
  }
  s["metrics"] = metrics;
  s["scores"] = scores;

  const stats::WinReport wins = stats::win_report(m, alpha);
  const auto ranks = stats::dataset_ranks(m);
  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream table_csv;
  table_csv << "model,win_count,win_rate,average_rank\n";
  for (std::size_t j = 0; j < k; ++j) {
    rows.push_back({{"model", m.models[j]},
                    {"win_count", wins.win_count[j]},
                    {"win_rate", wins.win_rate[j]},
                    {"average_rank", wins.average_rank[j]}});
    table_csv << csv_field(m.models[j]) << ',' << wins.win_count[j] << ',' << format_double(wins.win_rate[j]) << ','
              << format_double(wins.average_rank[j]) << '\n';
  }
  s["table"] = rows;
  out.table_csv = table_csv.str();
  s["win_sets"] = wins.to_json(m)["win_sets"];
  nlohmann::json per_dataset = nlohmann::json::object();
  for (std::size_t d = 0; d < m.n_datasets(); ++d) {
    nlohmann::json r = nlohmann::json::array();
    for (double v : ranks[d]) r.push_back(v);
    per_dataset[m.datasets[d]] = r;
  }
  s["ranks"] = per_dataset;

  std::string cd_reason;
  auto add_reason = [&cd_reason](const std::string& r) { cd_reason += (cd_reason.empty() ? "" : "; ") + r; };
  if (k < 3) add_reason("needs at least 3 models");
  if (k > 30) add_reason("critical-value table covers at most 30 models");
  if (m.n_datasets() < 2) add_reason("needs at least 2 datasets");
  if (cd_reason.empty()) {
    const stats::CdReport cd = stats::friedman_nemenyi(ranks, alpha);
    nlohmann::json cliques = nlohmann::json::array();
    for (const auto& c : cd.cliques) {
      nlohmann::json names = nlohmann::json::array();
      for (std::size_t j : c) names.push_back(m.models[j]);
      cliques.push_back(names);
    }
    nlohmann::json mr = nlohmann::json::array();
    for (double v : cd.mean_ranks) mr.push_back(v);
    s["cd"] = {{"applicable", true},   {"mean_ranks", mr},     {"chi2", cd.chi2},
               {"p_value", cd.p_value}, {"cd", cd.cd}, {"cliques", cliques}};
    out.cd_svg = cd_diagram_svg(m.models, cd);
  } else {
    s["cd"] = {{"applicable", false}, {"reason", cd_reason}};
  }

  // Pareto, runtime and subset summaries come from the cells of reported
  // datasets.
  const std::set<std::string> included(m.datasets.begin(), m.datasets.end());
  std::vector<stats::RunRecord> runs;
  std::map<std::string, std::array<double, 4>> runtime;  // featurize, fit, predict, count
  std::map<std::string, std::map<std::string, std::array<double, 4>>> subsets;  // in, out, diff, count
  std::ostringstream scores_csv;
  scores_csv << "dataset,model,seed,fold,metric,score\n";
  for (const CellResult& c : cells) {
    if (!c.ok || !included.count(c.key.dataset)) continue;
    scores_csv << csv_field(c.key.dataset) << ',' << csv_field(c.key.model) << ',' << c.key.seed << ','
               << c.key.fold << ',' << stats::metric_name(c.metric) << ',' << format_double(c.score) << '\n';
    auto& rt = runtime[c.key.model];
    rt[0] += c.timing.featurize_seconds;
    rt[1] += c.timing.fit_seconds;
    rt[2] += c.timing.predict_seconds;
    rt[3] += 1.0;
    if (c.metric == stats::MetricKind::kRmse && c.rmse) {
      runs.push_back({c.key.dataset, c.key.model, replicate_name({c.key.seed, c.key.fold}), *c.rmse,
                      c.timing.fit_seconds, c.timing.predict_seconds, c.timing.n_train, c.timing.n_test, true});
    }
    if (c.subset) {
      auto& a = subsets[c.key.dataset][c.key.model];
      a[0] += c.subset->in;
      a[1] += c.subset->out;
      a[2] += c.subset->difference;
      a[3] += 1.0;
    }
  }
  out.scores_csv = scores_csv.str();

  nlohmann::json rt = nlohmann::json::object();
  for (const auto& [model, a] : runtime) {
    rt[model] = {{"featurize_seconds", a[0] / a[3]}, {"fit_seconds", a[1] / a[3]}, {"predict_seconds", a[2] / a[3]}};
  }
  s["runtime"] = rt;
  if (!runs.empty()) {
    const auto pareto = stats::pareto_table(runs);
    nlohmann::json prow = nlohmann::json::array();
    for (const auto& r : pareto) {
      prow.push_back({{"model", r.model},
                      {"relative_gap", r.relative_gap},
                      {"runtime_per_1000", r.runtime_per_1000},
                      {"on_front", r.on_front}});
    }
    s["pareto"] = {{"applicable", true}, {"rows", prow}};
    out.pareto_svg = pareto_svg(pareto);
  } else {
    s["pareto"] = {{"applicable", false}, {"reason", "no RMSE datasets"}};
  }
  if (!subsets.empty()) {
    nlohmann::json sj = nlohmann::json::object();
    for (const auto& [d, by_model] : subsets) {
      for (const auto& [model, a] : by_model) {
        sj[d][model] = {{"rmse_in", a[0] / a[3]}, {"rmse_out", a[1] / a[3]}, {"difference", a[2] / a[3]}};
      }
    }
    s["subsets"] = sj;
  }

  nlohmann::json failures = nlohmann::json::array();
  for (const CellResult& c : cells) {
    if (!c.ok) failures.push_back({{"cell", c.key.str()}, {"error", c.error}});
  }
  s["failures"] = failures;
  nlohmann::json excluded = nlohmann::json::array();
  for (const auto& [d, reason] : table.excluded) excluded.push_back({{"dataset", d}, {"reason", reason}});
  s["excluded_datasets"] = excluded;
  return out;
}

ReportBundle emit_report(const ResultsStore& store, const std::filesystem::path& out_dir, double alpha) {
  std::vector<CellResult> cells;
  for (const auto& [key, cell] : store.cells()) cells.push_back(cell);
  if (cells.empty()) throw PreconditionError("results store " + store.file().string() + " is empty");
  ReportBundle b = build_report(cells, alpha);
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "summary.json", b.summary.dump(1) + "\n");
  write_text(out_dir / "scores.csv", b.scores_csv);
  write_text(out_dir / "table.csv", b.table_csv);
  if (!b.cd_svg.empty()) write_text(out_dir / "cd_diagram.svg", b.cd_svg);
  if (!b.pareto_svg.empty()) write_text(out_dir / "pareto.svg", b.pareto_svg);
  return b;
}

nlohmann::json strip_volatile(const nlohmann::json& summary) {
  nlohmann::json out = summary;
  for (const auto& key : summary.value("volatile_keys", nlohmann::json::array())) out.erase(key.get<std::string>());
  return out;
}

// Rank axis across the top, models hanging from it on both sides, cliques
// as thick bars under the axis and the CD interval above it.
std::string cd_diagram_svg(const std::vector<std::string>& models, const stats::CdReport& cd) {
  const std::size_t k = models.size();
  const double width = 640, left = 150, right = 490, axis_y = 70;
  const double row_h = 22;
  auto x_of = [&](double rank) { return left + (rank - 1.0) / static_cast<double>(k - 1) * (right - left); };
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cd.mean_ranks[a] < cd.mean_ranks[b]; });
  const std::size_t n_left = (k + 1) / 2;
  const double label_top = axis_y + 30 + row_h * static_cast<double>(cd.cliques.size());
  const double height = label_top + row_h * static_cast<double>(n_left) + 20;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\" data-cd=\"" << format_double(cd.cd) << "\" data-chi2=\""
     << format_double(cd.chi2) << "\" data-p-value=\"" << format_double(cd.p_value) << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << axis_y << "\" x2=\"" << right << "\" y2=\"" << axis_y
     << "\" stroke=\"black\"/>\n";
  for (std::size_t r = 1; r <= k; ++r) {
    const double x = x_of(static_cast<double>(r));
    os << "<line x1=\"" << x << "\" y1=\"" << axis_y - 5 << "\" x2=\"" << x << "\" y2=\"" << axis_y
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << axis_y - 9 << "\" text-anchor=\"middle\">" << r << "</text>\n";
  }
  const double cd_x2 = x_of(1.0 + cd.cd);
  os << "<g class=\"cd\" data-value=\"" << format_double(cd.cd) << "\">\n";
  os << "<line x1=\"" << left << "\" y1=\"22\" x2=\"" << cd_x2 << "\" y2=\"22\" stroke=\"black\" stroke-width=\"2\"/>\n";
  os << "<text x=\"" << (left + cd_x2) / 2 << "\" y=\"16\" text-anchor=\"middle\">CD = " << fixed(cd.cd, 3)
     << "</text>\n</g>\n";
  for (std::size_t c = 0; c < cd.cliques.size(); ++c) {
    double lo = INFINITY, hi = -INFINITY;
    std::string members;
    for (std::size_t j : cd.cliques[c]) {
      lo = std::min(lo, cd.mean_ranks[j]);
      hi = std::max(hi, cd.mean_ranks[j]);
      members += (members.empty() ? "" : "|") + xml_escape(models[j]);
    }
    const double y = axis_y + 15 + row_h * static_cast<double>(c) / 2.0;
    os << "<line class=\"clique\" data-members=\"" << members << "\" x1=\"" << x_of(lo) - 3 << "\" y1=\"" << y
       << "\" x2=\"" << x_of(hi) + 3 << "\" y2=\"" << y << "\" stroke=\"black\" stroke-width=\"4\"/>\n";
  }
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = order[i];
    const bool on_left = i < n_left;
    const std::size_t row = on_left ? i : k - 1 - i;
    const double y = label_top + row_h * static_cast<double>(row);
    const double x = x_of(cd.mean_ranks[j]);
    const double text_x = on_left ? left - 10 : right + 10;
    os << "<g class=\"model\" data-name=\"" << xml_escape(models[j]) << "\" data-mean-rank=\""
       << format_double(cd.mean_ranks[j]) << "\">\n";
    os << "<polyline fill=\"none\" stroke=\"black\" points=\"" << x << ',' << axis_y << ' ' << x << ',' << y << ' '
       << text_x << ',' << y << "\"/>\n";
    os << "<text x=\"" << (on_left ? text_x - 4 : text_x + 4) << "\" y=\"" << y + 4 << "\" text-anchor=\""
       << (on_left ? "end" : "start") << "\">" << xml_escape(models[j]) << " (" << fixed(cd.mean_ranks[j], 3)
       << ")</text>\n</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// Gap against runtime per 1000 samples (log axis); front points filled and
// joined by a step line.
std::string pareto_svg(const std::vector<stats::ParetoRow>& rows) {
  const double width = 640, height = 420, left = 70, right = 600, top = 30, bottom = 370;
  double lo = INFINITY, hi = -INFINITY, gap_hi = 0.0;
  for (const auto& r : rows) {
    const double t = std::max(r.runtime_per_1000, 1e-9);
    lo = std::min(lo, std::log10(t));
    hi = std::max(hi, std::log10(t));
    gap_hi = std::max(gap_hi, r.relative_gap);
  }
  lo = std::floor(lo);
  hi = std::max(std::ceil(hi), lo + 1.0);
  gap_hi = gap_hi > 0.0 ? gap_hi * 1.1 : 1.0;
  auto x_of = [&](double t) { return left + (std::log10(std::max(t, 1e-9)) - lo) / (hi - lo) * (right - left); };
  auto y_of = [&](double g) { return bottom - g / gap_hi * (bottom - top); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right << "\" y2=\"" << bottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom
     << "\" stroke=\"black\"/>\n";
  for (double e = lo; e <= hi; e += 1.0) {
    const double x = left + (e - lo) / (hi - lo) * (right - left);
    os << "<text x=\"" << x << "\" y=\"" << bottom + 16 << "\" text-anchor=\"middle\">1e" << e << "</text>\n";
  }
  os << "<text x=\"" << (left + right) / 2 << "\" y=\"" << height - 12
     << "\" text-anchor=\"middle\">runtime per 1000 samples (s)</text>\n";
  os << "<text x=\"16\" y=\"" << (top + bottom) / 2 << "\" transform=\"rotate(-90 16 " << (top + bottom) / 2
     << ")\" text-anchor=\"middle\">relative RMSE gap</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double g = gap_hi * i / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << y_of(g) + 4 << "\" text-anchor=\"end\">" << fixed(g, 3)
       << "</text>\n";
  }
  std::vector<const stats::ParetoRow*> front;
  for (const auto& r : rows) {
    if (r.on_front) front.push_back(&r);
  }
  std::sort(front.begin(), front.end(),
            [](const auto* a, const auto* b) { return a->runtime_per_1000 < b->runtime_per_1000; });
  if (front.size() > 1) {
    os << "<polyline class=\"front\" fill=\"none\" stroke=\"#c0392b\" points=\"";
    for (std::size_t i = 0; i < front.size(); ++i) {
      if (i > 0) os << x_of(front[i]->runtime_per_1000) << ',' << y_of(front[i - 1]->relative_gap) << ' ';
      os << x_of(front[i]->runtime_per_1000) << ',' << y_of(front[i]->relative_gap) << ' ';
    }
    os << "\"/>\n";
  }
  for (const auto& r : rows) {
    const double x = x_of(r.runtime_per_1000), y = y_of(r.relative_gap);
    os << "<g class=\"point\" data-model=\"" << xml_escape(r.model) << "\" data-relative-gap=\""
       << format_double(r.relative_gap) << "\" data-runtime-per-1000=\"" << format_double(r.runtime_per_1000)
       << "\" data-on-front=\"" << (r.on_front ? "true" : "false") << "\">\n";
    os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"5\" fill=\"" << (r.on_front ? "#c0392b" : "white")
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << x + 8 << "\" y=\"" << y - 6 << "\">" << xml_escape(r.model) << " (" << fixed(r.relative_gap, 3)
       << ")</text>\n</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace pfnf::harness
