#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "pfnf/error.hpp"
#include "pfnf/harness/bench.hpp"
#include "pfnf/harness/report.hpp"
#include "pfnf/harness/synth.hpp"
#include "pfnf/harness/table.hpp"
#include "pfnf/model/model.hpp"

using namespace pfnf;
using namespace pfnf::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pfnf_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

FeatureTable csv(const std::string& text) {
  std::istringstream in(text);
  return read_table_csv(in, "t.csv");
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

DatasetSpec kfold_spec(std::size_t folds, SplitMode mode = SplitMode::kKFold) {
  DatasetSpec d;
  d.name = "d";
  d.split = mode;
  d.folds = folds;
  return d;
}

}  // namespace

TEST_CASE("minimal CSV loads") {
  const auto t = csv("id,y,split,f_0\na,1.5,train,0.25\nb,2.5,test,-1\n");
  CHECK(t.n_rows() == 2);
  CHECK(t.n_columns() == 1);
  CHECK(t.x.at(1, 0) == -1.0);
  CHECK((*t.y)[0] == 1.5);
  CHECK((*t.split)[1] == SplitLabel::kTest);
  CHECK(!t.fold);
  CHECK(!t.group);
}

TEST_CASE("CSV parse errors carry coordinates") {
  CHECK(error_of([] { csv("id,f_0\na,1\na,2\n"); }).find("duplicate id 'a'") != std::string::npos);
  const auto bad = error_of([] { csv("id,f_0,f_1\na,1,2\nb,3,x7\n"); });
  CHECK(bad.find("t.csv:3") != std::string::npos);
  CHECK(bad.find("column 3 ('f_1')") != std::string::npos);
  CHECK(bad.find("x7") != std::string::npos);
  CHECK_THROWS_AS(csv("f_0\n1\n"), ParseError);
  CHECK_THROWS_AS(csv("id,f_0,smiles\na,1,C\n"), ParseError);
  CHECK_THROWS_AS(csv("id,f_0\na,1,2\n"), ParseError);
  CHECK_THROWS_AS(csv("id,f_0\na,inf\n"), ParseError);
  CHECK_THROWS_AS(csv("id,split,f_0\na,valid,1\n"), ParseError);
  CHECK_THROWS_AS(csv("id,fold,f_0\na,-1,1\n"), ParseError);
  CHECK_THROWS_AS(csv("id,split,fold,f_0\na,train,0,1\n"), ParseError);
  CHECK_THROWS_AS(csv("id,y\na,1\n"), ParseError);
  CHECK_THROWS_AS(load_feature_table("/nonexistent/table.csv"), IoError);
}

TEST_CASE("missing cells, quoting and covariates") {
  const auto t = csv("id,group,y,f_0,c_temp\n\"x,1\",\"a \"\"b\"\"\",,NaN, 300\ny2,g,1,,2\n");
  CHECK(t.ids[0] == "x,1");
  CHECK((*t.group)[0] == "a \"b\"");
  CHECK(std::isnan((*t.y)[0]));
  CHECK(std::isnan(t.x.at(0, 0)));
  CHECK(std::isnan(t.x.at(1, 0)));
  CHECK(t.x.at(0, 1) == 300.0);
  CHECK(t.columns == std::vector<std::string>{"f_0", "c_temp"});
}

TEST_CASE("CSV and ftbin round trips are bit exact for float32 payloads") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n01;
  FeatureTable t;
  const std::size_t n = 40, d = 7;
  for (std::size_t j = 0; j < d; ++j) t.columns.push_back(j < 5 ? "f_" + std::to_string(j) : "c_" + std::to_string(j));
  t.x = Matrix({n, d});
  t.y.emplace();
  t.fold.emplace();
  t.group.emplace();
  for (std::size_t i = 0; i < n; ++i) {
    t.ids.push_back("mol," + std::to_string(i));
    for (std::size_t j = 0; j < d; ++j) t.x.at(i, j) = (i + j) % 11 == 0 ? NAN : static_cast<double>(n01(rng));
    t.y->push_back(i % 9 == 0 ? NAN : static_cast<double>(n01(rng)) * 1e-3 + 1.0 / 3.0);
    t.fold->push_back(static_cast<int>(i % 3));
    t.group->push_back(i % 2 ? "1" : "0");
  }
  t.metadata = {{"scheme", "morgan"}, {"featurize_seconds", 1.25}};
  const fs::path dir = scratch("roundtrip");
  write_table(t, dir / "a.csv");
  const FeatureTable from_csv = load_feature_table(dir / "a.csv");
  CHECK(same_table(t, from_csv));
  CHECK(from_csv.featurize_seconds() == 1.25);
  write_table(from_csv, dir / "a.ftbin");
  const FeatureTable from_bin = load_feature_table(dir / "a.ftbin");
  CHECK(same_table(from_csv, from_bin));
  write_table(from_bin, dir / "b.csv");
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));

  std::ofstream junk(dir / "bad.ftbin", std::ios::binary);
  junk << "not a table";
  junk.close();
  CHECK_THROWS_AS(load_feature_table(dir / "bad.ftbin"), ParseError);
}

TEST_CASE("ftbin truncation is detected") {
  const auto t = synth_table({});
  std::ostringstream out;
  write_table_ftbin(t, out);
  const std::string bytes = out.str();
  std::istringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_table_ftbin(cut), ParseError);
}

TEST_CASE("k-fold assignment is exhaustive and seed independent") {
  SynthSpec s;
  s.n_rows = 97;
  const auto t = synth_table(s);
  const auto spec = kfold_spec(5);
  const auto folds = assign_folds(t, spec);
  CHECK(folds == assign_folds(t, spec));
  std::vector<int> seen(t.n_rows(), 0);
  for (int f : fold_ids(t, spec)) {
    const auto [train, test] = fold_rows(t, spec, f);
    CHECK(train.size() + test.size() == t.n_rows());
    for (std::size_t i : test) ++seen[i];
  }
  for (int c : seen) CHECK(c == 1);
  for (std::size_t i = 0; i < t.n_rows(); ++i) CHECK(folds[i] == static_cast<int>(fnv1a(t.ids[i]) % 5));

  auto with_folds = csv("id,fold,f_0\na,0,1\nb,1,2\nc,1,3\n");
  CHECK(assign_folds(with_folds, kfold_spec(2)) == std::vector<int>{0, 1, 1});
  CHECK_THROWS_AS(assign_folds(with_folds, kfold_spec(1)), PreconditionError);
}

TEST_CASE("group k-fold keeps every group inside one fold") {
  SynthSpec s;
  s.n_rows = 300;
  s.groups = 10;
  const auto t = synth_table(s);
  const auto spec = kfold_spec(5, SplitMode::kGroupKFold);
  const auto folds = assign_folds(t, spec);
  std::map<std::string, std::set<int>> fold_of_group;
  for (std::size_t i = 0; i < t.n_rows(); ++i) fold_of_group[(*t.group)[i]].insert(folds[i]);
  CHECK(fold_of_group.size() == 10);
  for (const auto& [g, fs] : fold_of_group) CHECK(fs.size() == 1);
  CHECK(fold_ids(t, spec).size() == 5);
  std::vector<int> seen(t.n_rows(), 0);
  for (int f : fold_ids(t, spec)) {
    for (std::size_t i : fold_rows(t, spec, f).second) ++seen[i];
  }
  for (int c : seen) CHECK(c == 1);
  CHECK_THROWS_AS(assign_folds(csv("id,f_0\na,1\n"), spec), PreconditionError);
}

TEST_CASE("fixed split uses the split column") {
  const auto t = csv("id,y,split,f_0\na,1,test,0\nb,2,train,1\nc,3,train,2\n");
  DatasetSpec spec;
  const auto [train, test] = fold_rows(t, spec, 0);
  CHECK(train == std::vector<std::size_t>{1, 2});
  CHECK(test == std::vector<std::size_t>{0});
  CHECK(fold_ids(t, spec) == std::vector<int>{0});
  CHECK_THROWS_AS(fold_rows(csv("id,f_0\na,1\n"), spec, 0), PreconditionError);
}

TEST_CASE("phase timers") {
  const auto slow = time_phases([] { std::this_thread::sleep_for(std::chrono::milliseconds(50)); }, [] {}, 2.0, 8, 2);
  CHECK(slow.fit_seconds >= 0.045);
  CHECK(slow.fit_seconds <= 0.5);
  CHECK(slow.featurize_seconds == 2.0);
  const auto idle = time_phases([] {}, [] {}, 0.0, 1, 1);
  CHECK(idle.fit_seconds >= 0.0);
  CHECK(idle.predict_seconds >= 0.0);
  CHECK(idle.fit_seconds + idle.predict_seconds <= idle.total_seconds);
  TimingRecord caco2;
  caco2.fit_seconds = 0.6;
  caco2.predict_seconds = 0.31;
  caco2.n_train = 728;
  caco2.n_test = 182;
  CHECK(caco2.runtime_per_1000() == doctest::Approx(0.91 * 1000.0 / 910.0));
}

TEST_CASE("bench config INI") {
  const std::string text =
      "[bench]\nseeds = 0,1,2\noutput = out\n"
      "[dataset.lin]\npath = data/lin.csv\ntask = reg\nmetric = mae\n"
      "[dataset.cls]\npath = /abs/c.ftbin\ntask = cls\nmetric = auroc\nsplit = group-kfold\nfolds = 4\n"
      "[model.tfm]\ntype = pfn\ncheckpoint = m.ckpt\nn_estimators = 4\noutlier_threshold = none\n"
      "[model.rf]\ntype = random_forest\nn_trees = 50\nmax_depth = 6\n";
  const auto c = BenchConfig::from_ini_text(text, "/base");
  CHECK(c.seeds == std::vector<std::uint64_t>{0, 1, 2});
  CHECK(c.output_dir == fs::path("/base/out"));
  REQUIRE(c.datasets.size() == 2);
  CHECK(c.datasets[0].name == "lin");
  CHECK(c.datasets[0].path == fs::path("/base/data/lin.csv"));
  CHECK(c.datasets[0].metric == stats::MetricKind::kMae);
  CHECK(c.datasets[1].path == fs::path("/abs/c.ftbin"));
  CHECK(c.datasets[1].split == SplitMode::kGroupKFold);
  CHECK(c.datasets[1].folds == 4);
  REQUIRE(c.models.size() == 2);
  CHECK(c.models[0].is_pfn);
  CHECK(c.models[0].ensemble.n_estimators == 4);
  CHECK(!c.models[0].ensemble.outlier_threshold);
  CHECK(c.models[1].baseline.kind == baselines::BaselineKind::kRandomForest);
  CHECK(c.models[1].baseline.max_depth == std::size_t{6});

  CHECK_THROWS_AS(BenchConfig::from_ini_text("[dataset.a]\npath=x\n[model.r]\ntype=ridge\nlambda=2\n", ""), ParseError);
  CHECK_THROWS_AS(BenchConfig::from_ini_text("[dataset.a]\npath=x\n", ""), PreconditionError);
  CHECK_THROWS_AS(BenchConfig::from_ini_text("[dataset.a]\npath=x\nmetric=auroc\n[model.r]\ntype=ridge\n", ""),
                  PreconditionError);
  CHECK_THROWS_AS(BenchConfig::from_ini_text("[extra]\nk=v\n", ""), ParseError);
  CHECK_THROWS_AS(BenchConfig::from_ini_text("[model.p]\ntype=pfn\n", ""), ParseError);
}

TEST_CASE("benchmark cells, rerun no-op, force and determinism") {
  const fs::path dir = scratch("bench");
  SynthSpec s;
  s.n_rows = 60;
  s.n_features = 3;
  s.noise = 0.1;
  write_table(synth_table(s), dir / "lin.csv");
  BenchConfig c;
  c.datasets.push_back({"lin", dir / "lin.csv", model::TaskKind::kRegression, stats::MetricKind::kRmse});
  ModelSpec rf;
  rf.name = "rf";
  rf.baseline.kind = baselines::BaselineKind::kRandomForest;
  rf.baseline.n_trees = 10;
  c.models.push_back(rf);
  c.output_dir = dir / "run1";

  const auto store = run_benchmark(c);
  CHECK(store.cells().size() == 5);
  for (const auto& [k, r] : store.cells()) CHECK(r.ok);
  CHECK(line_count(store.file()) == 5);

  const auto again = run_benchmark(c);
  CHECK(line_count(again.file()) == 5);
  RunOptions force;
  force.force = true;
  run_benchmark(c, force);
  CHECK(line_count(again.file()) == 10);
  CHECK(ResultsStore(c.output_dir).cells().size() == 5);

  c.output_dir = dir / "run2";
  const auto second = run_benchmark(c);
  REQUIRE(second.cells().size() == 5);
  auto a = store.cells().begin();
  for (const auto& [k, r] : second.cells()) {
    CHECK(r.to_json(false).dump() == a->second.to_json(false).dump());
    ++a;
  }
  // Different seeds give different forests.
  CHECK(store.cells().begin()->second.point != std::next(store.cells().begin())->second.point);
}

TEST_CASE("cell failures are isolated") {
  const fs::path dir = scratch("fail");
  SynthSpec s;
  s.n_rows = 40;
  write_table(synth_table(s), dir / "ok.csv");
  BenchConfig c;
  c.datasets.push_back({"missing", dir / "nope.csv", model::TaskKind::kRegression, stats::MetricKind::kRmse});
  c.datasets.push_back({"ok", dir / "ok.csv", model::TaskKind::kRegression, stats::MetricKind::kRmse});
  ModelSpec ridge;
  ridge.name = "ridge";
  ModelSpec logistic;
  logistic.name = "logistic";
  logistic.baseline.kind = baselines::BaselineKind::kLogistic;  // wrong task kind
  ModelSpec pfn;
  pfn.name = "pfn";
  pfn.is_pfn = true;
  pfn.checkpoint = dir / "absent.ckpt";
  c.models = {ridge, logistic, pfn};
  c.seeds = {0, 1};
  c.output_dir = dir / "out";
  const auto store = run_benchmark(c);
  CHECK(store.cells().size() == 12);
  const auto failures = store.failures();
  CHECK(failures.size() == 10);
  for (const auto& f : failures) CHECK(!f.error.empty());
  CHECK(store.completed({"ok", "ridge", 0, 0}));
  CHECK(store.completed({"ok", "ridge", 1, 0}));
  CHECK(!store.completed({"ok", "logistic", 0, 0}));
  // A rerun retries failed cells only.
  const std::size_t before = line_count(store.file());
  run_benchmark(c);
  CHECK(line_count(store.file()) == before + 10);
}

TEST_CASE("in-context predictor cells, classification and subset scores") {
  const fs::path dir = scratch("pfn");
  model::ModelConfig mc;
  mc.embed_dim = 16;
  mc.n_blocks = 1;
  mc.n_heads = 2;
  mc.mlp_hidden = 16;
  mc.regression_bins = 16;
  auto model = std::make_shared<const model::TabularModel<float>>(mc, model::TabularModel<float>::init_params(mc, 1));
  SynthSpec s;
  s.n_rows = 50;
  s.n_features = 4;
  s.kind = model::TaskKind::kClassification;
  s.classes = 3;
  auto cls = synth_table(s);
  DatasetSpec ds{"cls", "", model::TaskKind::kClassification, stats::MetricKind::kLogLoss};
  ModelSpec spec;
  spec.name = "pfn";
  spec.is_pfn = true;
  spec.ensemble.n_estimators = 2;
  const auto r = run_cell({"cls", "pfn", 0, 0}, ds, cls, spec, model);
  CHECK_MESSAGE(r.ok, r.error);
  CHECK(r.probs.size() == 10);
  CHECK(r.probs[0].size() == 3);
  CHECK(std::isfinite(r.score));
  CHECK(!r.rmse);

  s.kind = model::TaskKind::kRegression;
  s.groups = 2;
  auto reg = synth_table(s);
  for (auto& g : *reg.group) g = g == "g0" ? "0" : "1";
  DatasetSpec dr{"reg", "", model::TaskKind::kRegression, stats::MetricKind::kRmse};
  const auto rr = run_cell({"reg", "pfn", 0, 0}, dr, reg, spec, model);
  REQUIRE_MESSAGE(rr.ok, rr.error);
  CHECK(rr.rmse == rr.score);
  REQUIRE(rr.subset);
  CHECK(rr.subset->difference == doctest::Approx(rr.subset->in - rr.subset->out));

  // Unscorable test rows fail the cell rather than the run.
  auto hidden = reg;
  for (std::size_t i = 0; i < hidden.n_rows(); ++i) {
    if ((*hidden.split)[i] == SplitLabel::kTest) (*hidden.y)[i] = NAN;
  }
  const auto hr = run_cell({"reg", "pfn", 0, 0}, dr, hidden, spec, model);
  CHECK(!hr.ok);
  CHECK(hr.error.find("test") != std::string::npos);
}

TEST_CASE("scaler is unchanged when test targets are hidden") {
  SynthSpec s;
  s.n_rows = 80;
  s.n_features = 6;
  const auto full = synth_table(s);
  auto hidden = full;
  for (std::size_t i = 0; i < hidden.n_rows(); ++i) {
    if ((*hidden.split)[i] == SplitLabel::kTest) (*hidden.y)[i] = NAN;
  }
  const fs::path dir = scratch("leak");
  write_table(hidden, dir / "hidden.csv");
  const auto reloaded = load_feature_table(dir / "hidden.csv");
  const DatasetSpec spec;
  auto fit_hash = [&](const FeatureTable& t) {
    const auto train = t.take(fold_rows(t, spec, 0).first);
    baselines::BaselineSpec ridge;
    return predictor::scaler_hash(baselines::baseline_fit(ridge, train.x, *train.y, model::TaskKind::kRegression, 0)
                                      ->scaler());
  };
  CHECK(fit_hash(full) == fit_hash(reloaded));
}

TEST_CASE("worker count honours PFNF_THREADS") {
  CHECK(worker_count(3) == 3);
  setenv("PFNF_THREADS", "1", 1);
  CHECK(worker_count(0) == 1);
  unsetenv("PFNF_THREADS");
  CHECK(worker_count(0) >= 1);
}

TEST_CASE("results records round-trip through JSON") {
  CellResult r;
  r.key = {"d", "m", 3, 1};
  r.ok = true;
  r.score = 0.5;
  r.rmse = 0.5;
  r.subset = stats::SubsetScore{1.0, 0.25, 0.75};
  r.ids = {"a", "b"};
  r.y_true = {1.0, 2.0};
  r.point = {1.5, NAN};
  r.timing.fit_seconds = 0.1;
  const auto back = CellResult::from_json(r.to_json());
  CHECK(back.to_json().dump() == r.to_json().dump());
  auto j = r.to_json();
  j["schema_version"] = 99;
  CHECK_THROWS_AS(CellResult::from_json(j), ParseError);
}

namespace {

CellResult scored(const std::string& d, const std::string& m, std::uint64_t seed, double score) {
  CellResult r;
  r.key = {d, m, seed, 0};
  r.ok = true;
  r.score = score;
  r.rmse = score;
  r.timing = {0.0, 0.01 * static_cast<double>(m.size()), 0.01, 0.03, 90, 10};
  return r;
}

}  // namespace

TEST_CASE("report: two identical models both win everywhere") {
  std::vector<CellResult> cells;
  for (const std::string d : {"x", "y"}) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const double v = 1.0 + 0.1 * static_cast<double>(s) + (d == "y" ? 3.0 : 0.0);
      cells.push_back(scored(d, "a", s, v));
      cells.push_back(scored(d, "b", s, v));
    }
  }
  const auto b = build_report(cells);
  for (const auto& row : b.summary["table"]) {
    CHECK(row["win_rate"] == 100.0);
    CHECK(row["average_rank"] == 1.5);
  }
  CHECK(b.summary["cd"]["applicable"] == false);

  // Adding a third identical model makes the CD test applicable: one clique.
  for (const std::string d : {"x", "y"}) {
    for (std::uint64_t s = 0; s < 5; ++s) cells.push_back(scored(d, "c", s, cells[s * 2 + (d == "y" ? 10 : 0)].score));
  }
  const auto b3 = build_report(cells);
  CHECK(b3.summary["cd"]["applicable"] == true);
  CHECK(b3.summary["cd"]["cliques"] == nlohmann::json::parse(R"([["a","b","c"]])"));
}

TEST_CASE("report: single model ranks first with no CD") {
  std::vector<CellResult> cells;
  for (std::uint64_t s = 0; s < 3; ++s) cells.push_back(scored("x", "only", s, 1.0 + s));
  const auto b = build_report(cells);
  CHECK(b.summary["table"][0]["average_rank"] == 1.0);
  CHECK(b.summary["table"][0]["win_rate"] == 100.0);
  CHECK(b.summary["cd"]["applicable"] == false);
  CHECK(b.summary["cd"]["reason"].get<std::string>().find("3 models") != std::string::npos);
  CHECK(b.cd_svg.empty());
  CHECK_THROWS_AS(build_report({}), PreconditionError);
}

TEST_CASE("report matches the hand-computed fixture") {
  std::ifstream in(std::string(PFNF_FIXTURE_DIR) + "/report_hand.json");
  REQUIRE(in.good());
  const auto fx = nlohmann::json::parse(in);
  std::vector<CellResult> cells;
  const auto noise = fx["seed_noise"].get<std::vector<double>>();
  for (const auto& [dataset, by_model] : fx["means"].items()) {
    for (const auto& [model, mean] : by_model.items()) {
      for (std::uint64_t s = 0; s < noise.size(); ++s) cells.push_back(scored(dataset, model, s, mean.get<double>() + noise[s]));
    }
  }
  const auto b = build_report(cells);
  CHECK(b.summary["table"] == fx["expected"]["table"]);
  CHECK(b.summary["win_sets"] == fx["expected"]["win_sets"]);
  CHECK(b.summary["ranks"] == fx["expected"]["ranks"]);
}

TEST_CASE("report artifacts agree numerically and strip to a stable core") {
  std::vector<CellResult> cells;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  for (int d = 0; d < 5; ++d) {
    for (const std::string m : {"alpha", "beta", "gamma", "delta"}) {
      for (std::uint64_t s = 0; s < 5; ++s) {
        cells.push_back(scored("d" + std::to_string(d), m, s, 2.0 + 0.3 * n01(rng) + 0.2 * static_cast<double>(m.size())));
      }
    }
  }
  cells.push_back(scored("d9", "alpha", 0, 1.0));
  cells.back().ok = false;
  cells.back().error = "boom";
  const fs::path dir = scratch("report");
  ResultsStore store(dir);
  for (const auto& c : cells) store.append(c);
  const auto b = emit_report(store, dir / "report");
  for (const char* f : {"summary.json", "scores.csv", "table.csv", "cd_diagram.svg", "pareto.svg"}) {
    CHECK(fs::exists(dir / "report" / f));
  }
  const auto& s = b.summary;
  CHECK(s["excluded_datasets"].size() == 1);
  CHECK(s["failures"][0]["error"] == "boom");
  CHECK(s["caveat"].get<std::string>().find("stochasticity") != std::string::npos);

  // table.csv against the JSON table.
  std::istringstream table(b.table_csv);
  std::string line;
  std::getline(table, line);
  for (const auto& row : s["table"]) {
    std::getline(table, line);
    CHECK(line == row["model"].get<std::string>() + "," + row["win_count"].dump() + "," + row["win_rate"].dump() +
                      "," + row["average_rank"].dump());
  }
  // scores.csv against the JSON score lists.
  std::istringstream sc(b.scores_csv);
  std::getline(sc, line);
  std::size_t rows = 0;
  while (std::getline(sc, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    REQUIRE(f.size() == 6);
    CHECK(s["scores"][f[0]][f[1]][std::stoul(f[2])].dump() == f[5]);
    ++rows;
  }
  CHECK(rows == 100);
  // SVG annotations against the CD and Pareto JSON.
  const std::regex rank_re("data-name=\"([^\"]+)\" data-mean-rank=\"([^\"]+)\"");
  std::size_t ranks = 0;
  for (std::sregex_iterator it(b.cd_svg.begin(), b.cd_svg.end(), rank_re), end; it != end; ++it, ++ranks) {
    const auto& models = s["models"];
    const auto idx = std::find(models.begin(), models.end(), (*it)[1].str()) - models.begin();
    CHECK(s["cd"]["mean_ranks"][static_cast<std::size_t>(idx)].dump() == (*it)[2].str());
  }
  CHECK(ranks == 4);
  CHECK(b.cd_svg.find("data-cd=\"" + s["cd"]["cd"].dump() + "\"") != std::string::npos);
  const std::regex pt_re("data-model=\"([^\"]+)\" data-relative-gap=\"([^\"]+)\" data-runtime-per-1000=\"([^\"]+)\"");
  std::size_t points = 0;
  for (std::sregex_iterator it(b.pareto_svg.begin(), b.pareto_svg.end(), pt_re), end; it != end; ++it, ++points) {
    for (const auto& row : s["pareto"]["rows"]) {
      if (row["model"] != (*it)[1].str()) continue;
      CHECK(row["relative_gap"].dump() == (*it)[2].str());
      CHECK(row["runtime_per_1000"].dump() == (*it)[3].str());
    }
  }
  CHECK(points == 4);

  auto perturbed = cells;
  for (auto& c : perturbed) c.timing.fit_seconds *= 3.0;
  CHECK(strip_volatile(build_report(perturbed).summary) == strip_volatile(s));
  CHECK(!strip_volatile(s).contains("pareto"));
}

TEST_CASE("synthetic tables") {
  SynthSpec s;
  s.mechanism = "scm";
  s.n_rows = 120;
  s.n_features = 40;
  const auto t = synth_table(s);
  CHECK(t.n_columns() == 40);
  CHECK(std::count(t.split->begin(), t.split->end(), SplitLabel::kTest) == 24);
  CHECK(same_table(t, synth_table(s)));
  s.seed = 1;
  CHECK(!same_table(t, synth_table(s)));
  s.mechanism = "bogus";
  CHECK_THROWS_AS(synth_table(s), PreconditionError);
}
