#include "pfnf/harness/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "pfnf/error.hpp"
#include "pfnf/pretrain/pretrain.hpp"
#include "pfnf/util/ini.hpp"

namespace pfnf::harness {

namespace {

using model::TaskKind;

const std::set<std::string> kPfnKeys{"type",
                                     "checkpoint",
                                     "n_estimators",
                                     "softmax_temperature",
                                     "prediction_threshold",
                                     "outlier_threshold",
                                     "max_features_per_estimator",
                                     "feat_shuffle_method"};
const std::set<std::string> kBaselineKeys{"type",   "ridge_lambda", "logistic_lambda", "knn_k",    "n_trees",
                                          "min_leaf", "max_depth",  "split_features",  "bootstrap"};
const std::set<std::string> kDatasetKeys{"path", "task", "metric", "split", "folds"};

std::string as_string(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

std::vector<std::uint64_t> parse_seeds(const nlohmann::json& v) {
  std::vector<std::uint64_t> seeds;
  auto one = [&](const nlohmann::json& s) {
    if (!s.is_number_integer() || s.get<long long>() < 0) throw ParseError("seeds must be non-negative integers");
    seeds.push_back(s.get<std::uint64_t>());
  };
  if (v.is_array()) {
    for (const auto& s : v) one(s);
  } else {
    one(v);
  }
  return seeds;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

DatasetSpec dataset_from_section(const std::string& name, const nlohmann::json& s,
                                 const std::filesystem::path& base) {
  for (const auto& [k, v] : s.items()) {
    if (!kDatasetKeys.count(k)) throw ParseError("dataset." + name + ": unknown key '" + k + "'");
  }
  if (!s.contains("path")) throw ParseError("dataset." + name + ": missing 'path'");
  DatasetSpec d;
  d.name = name;
  d.path = resolve(base, as_string(s["path"]));
  d.kind = parse_task_kind(as_string(s.value("task", nlohmann::json("reg"))));
  const std::string default_metric = d.kind == TaskKind::kRegression ? "rmse" : "accuracy";
  d.metric = stats::parse_metric(as_string(s.value("metric", nlohmann::json(default_metric))));
  d.split = parse_split_mode(as_string(s.value("split", nlohmann::json("fixed"))));
  if (s.contains("folds")) {
    if (!s["folds"].is_number_integer() || s["folds"].get<long long>() < 2) {
      throw ParseError("dataset." + name + ": folds must be an integer >= 2");
    }
    d.folds = s["folds"].get<std::size_t>();
  }
  return d;
}

ModelSpec model_from_section(const std::string& name, nlohmann::json s, const std::filesystem::path& base) {
  if (!s.contains("type")) throw ParseError("model." + name + ": missing 'type'");
  const std::string type = as_string(s["type"]);
  ModelSpec m;
  m.name = name;
  m.is_pfn = type == "pfn";
  const auto& allowed = m.is_pfn ? kPfnKeys : kBaselineKeys;
  for (const auto& [k, v] : s.items()) {
    if (!allowed.count(k)) throw ParseError("model." + name + ": unknown key '" + k + "' for type " + type);
  }
  if (m.is_pfn) {
    if (!s.contains("checkpoint")) throw ParseError("model." + name + ": pfn models need 'checkpoint'");
    m.checkpoint = resolve(base, as_string(s["checkpoint"]));
    m.ensemble = predictor::EnsembleConfig::from_json(s);
  } else {
    s["kind"] = type;
    s.erase("type");
    m.baseline = baselines::BaselineSpec::from_json(s);
  }
  return m;
}

// Where fixed mode needs the split column.
const std::vector<SplitLabel>& require_split(const FeatureTable& t, const DatasetSpec& spec) {
  if (!t.split) throw PreconditionError("dataset " + spec.name + ": fixed split mode needs a 'split' column");
  return *t.split;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// A test-row group column whose values are all 0/1 defines the subset mask.
std::optional<std::vector<bool>> binary_mask(const FeatureTable& t, const std::vector<std::size_t>& rows) {
  if (!t.group) return std::nullopt;
  std::vector<bool> mask;
  for (std::size_t r : rows) {
    const std::string& g = (*t.group)[r];
    if (g != "0" && g != "1") return std::nullopt;
    mask.push_back(g == "1");
  }
  const auto in = std::count(mask.begin(), mask.end(), true);
  if (in == 0 || in == static_cast<long>(mask.size())) return std::nullopt;
  return mask;
}

}  // namespace

const char* split_mode_name(SplitMode m) {
  switch (m) {
    case SplitMode::kFixed: return "fixed";
    case SplitMode::kKFold: return "kfold";
    case SplitMode::kGroupKFold: return "group-kfold";
  }
  return "?";
}

SplitMode parse_split_mode(const std::string& name) {
  if (name == "fixed") return SplitMode::kFixed;
  if (name == "kfold") return SplitMode::kKFold;
  if (name == "group-kfold" || name == "group_kfold") return SplitMode::kGroupKFold;
  throw ParseError("unknown split mode '" + name + "'");
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "reg" || name == "regression") return TaskKind::kRegression;
  if (name == "cls" || name == "classification") return TaskKind::kClassification;
  throw ParseError("unknown task kind '" + name + "' (expected reg or cls)");
}

const char* task_kind_name(TaskKind kind) { return kind == TaskKind::kRegression ? "reg" : "cls"; }

void BenchConfig::validate() const {
  if (datasets.empty()) throw PreconditionError("bench config needs at least one dataset");
  if (models.empty()) throw PreconditionError("bench config needs at least one model");
  if (seeds.empty()) throw PreconditionError("bench config needs at least one seed");
  std::set<std::string> names;
  for (const auto& d : datasets) {
    if (!names.insert("d:" + d.name).second) throw PreconditionError("duplicate dataset " + d.name);
    if (d.kind == TaskKind::kRegression && stats::is_classification_metric(d.metric)) {
      throw PreconditionError("dataset " + d.name + ": metric " + stats::metric_name(d.metric) +
                              " needs a classification task");
    }
    if (d.kind == TaskKind::kClassification && !stats::is_classification_metric(d.metric)) {
      throw PreconditionError("dataset " + d.name + ": metric " + stats::metric_name(d.metric) +
                              " needs a regression task");
    }
  }
  for (const auto& m : models) {
    if (!names.insert("m:" + m.name).second) throw PreconditionError("duplicate model " + m.name);
  }
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw PreconditionError("duplicate seeds");
  }
}

BenchConfig BenchConfig::from_ini_text(const std::string& text, const std::filesystem::path& base_dir) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError("bench config: " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  BenchConfig c;
  c.output_dir = resolve(base_dir, "results");
  for (const auto& [section, node] : tree) {
    nlohmann::json s = nlohmann::json::object();
    for (const auto& [k, leaf] : node) s[k] = util::ini_value(leaf.data());
    if (section == "bench") {
      for (const auto& [k, v] : s.items()) {
        if (k == "seeds") {
          c.seeds = parse_seeds(v);
        } else if (k == "output") {
          c.output_dir = resolve(base_dir, as_string(v));
        } else {
          throw ParseError("bench: unknown key '" + k + "'");
        }
      }
    } else if (section.rfind("dataset.", 0) == 0) {
      c.datasets.push_back(dataset_from_section(section.substr(8), s, base_dir));
    } else if (section.rfind("model.", 0) == 0) {
      c.models.push_back(model_from_section(section.substr(6), s, base_dir));
    } else {
      throw ParseError("bench config: unknown section [" + section + "]");
    }
  }
  c.validate();
  return c;
}

BenchConfig BenchConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read bench config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_ini_text(buf.str(), path.parent_path());
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t cell_seed(std::uint64_t seed, const std::string& dataset, int fold, const std::string& model) {
  return fnv1a(std::to_string(seed) + '\x1f' + dataset + '\x1f' + std::to_string(fold) + '\x1f' + model);
}

std::vector<int> assign_folds(const FeatureTable& t, const DatasetSpec& spec) {
  const std::size_t n = t.n_rows();
  const auto f = static_cast<int>(spec.folds);
  switch (spec.split) {
    case SplitMode::kFixed:
      require_split(t, spec);
      return std::vector<int>(n, 0);
    case SplitMode::kKFold: {
      if (t.fold) {
        for (int v : *t.fold) {
          if (v >= f) {
            throw PreconditionError("dataset " + spec.name + ": fold index " + std::to_string(v) +
                                    " outside 0.." + std::to_string(f - 1));
          }
        }
        return *t.fold;
      }
      std::vector<int> folds(n);
      for (std::size_t i = 0; i < n; ++i) folds[i] = static_cast<int>(fnv1a(t.ids[i]) % spec.folds);
      return folds;
    }
    case SplitMode::kGroupKFold: {
      if (!t.group) throw PreconditionError("dataset " + spec.name + ": group-kfold needs a 'group' column");
      std::map<std::string, std::size_t> sizes;
      for (const auto& g : *t.group) ++sizes[g];
      std::vector<std::pair<std::uint64_t, std::string>> order;
      for (const auto& [g, count] : sizes) order.emplace_back(fnv1a(g), g);
      std::sort(order.begin(), order.end());
      std::vector<std::size_t> load(spec.folds, 0);
      std::map<std::string, int> fold_of;
      for (const auto& [h, g] : order) {
        const auto best = static_cast<int>(std::min_element(load.begin(), load.end()) - load.begin());
        fold_of[g] = best;
        load[static_cast<std::size_t>(best)] += sizes[g];
      }
      std::vector<int> folds(n);
      for (std::size_t i = 0; i < n; ++i) folds[i] = fold_of[(*t.group)[i]];
      return folds;
    }
  }
  return {};
}

std::vector<int> fold_ids(const FeatureTable& t, const DatasetSpec& spec) {
  const auto folds = assign_folds(t, spec);
  const std::set<int> ids(folds.begin(), folds.end());
  return {ids.begin(), ids.end()};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> fold_rows(const FeatureTable& t,
                                                                        const DatasetSpec& spec, int fold) {
  std::vector<std::size_t> train, test;
  if (spec.split == SplitMode::kFixed) {
    if (fold != 0) throw PreconditionError("fixed split mode has only fold 0");
    const auto& split = require_split(t, spec);
    for (std::size_t i = 0; i < t.n_rows(); ++i) (split[i] == SplitLabel::kTrain ? train : test).push_back(i);
    return {train, test};
  }
  const auto folds = assign_folds(t, spec);
  for (std::size_t i = 0; i < t.n_rows(); ++i) (folds[i] == fold ? test : train).push_back(i);
  return {train, test};
}

double TimingRecord::runtime_per_1000() const {
  if (n_train + n_test == 0) throw PreconditionError("timing record with no rows");
  return (fit_seconds + predict_seconds) * 1000.0 / static_cast<double>(n_train + n_test);
}

nlohmann::json TimingRecord::to_json() const {
  return {{"featurize_seconds", featurize_seconds}, {"fit_seconds", fit_seconds},
          {"predict_seconds", predict_seconds},     {"total_seconds", total_seconds},
          {"n_train", n_train},                     {"n_test", n_test}};
}

TimingRecord TimingRecord::from_json(const nlohmann::json& j) {
  TimingRecord t;
  t.featurize_seconds = j.value("featurize_seconds", 0.0);
  t.fit_seconds = j.value("fit_seconds", 0.0);
  t.predict_seconds = j.value("predict_seconds", 0.0);
  t.total_seconds = j.value("total_seconds", 0.0);
  t.n_train = j.value("n_train", std::size_t{0});
  t.n_test = j.value("n_test", std::size_t{0});
  return t;
}

TimingRecord time_phases(const std::function<void()>& fit, const std::function<void()>& predict,
                         double featurize_seconds, std::size_t n_train, std::size_t n_test) {
  TimingRecord t;
  t.featurize_seconds = featurize_seconds;
  t.n_train = n_train;
  t.n_test = n_test;
  const auto start = std::chrono::steady_clock::now();
  fit();
  t.fit_seconds = seconds_since(start);
  const auto mid = std::chrono::steady_clock::now();
  predict();
  t.predict_seconds = seconds_since(mid);
  t.total_seconds = seconds_since(start);
  return t;
}

std::string CellKey::str() const {
  return dataset + "/" + model + "/seed" + std::to_string(seed) + "/fold" + std::to_string(fold);
}

nlohmann::json CellResult::to_json(bool with_timing) const {
  auto nullable = [](const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
    return a;
  };
  nlohmann::json j = {{"schema_version", kSchemaVersion},
                      {"dataset", key.dataset},
                      {"model", key.model},
                      {"seed", key.seed},
                      {"fold", key.fold},
                      {"status", ok ? "ok" : "failed"},
                      {"task", task_kind_name(kind)},
                      {"metric", stats::metric_name(metric)}};
  if (!ok) {
    j["error"] = error;
  } else {
    j["score"] = score;
    j["rmse"] = rmse ? nlohmann::json(*rmse) : nlohmann::json(nullptr);
    if (subset) j["subset"] = {{"in", subset->in}, {"out", subset->out}, {"difference", subset->difference}};
    j["scaler_hash"] = scaler_hash;
    j["predictions"] = {{"ids", ids}, {"y_true", nullable(y_true)}, {"point", nullable(point)}};
    if (!probs.empty()) j["predictions"]["probs"] = probs;
  }
  j["timing"] = with_timing ? timing.to_json()
                            : nlohmann::json{{"n_train", timing.n_train}, {"n_test", timing.n_test}};
  return j;
}

CellResult CellResult::from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) {
      throw ParseError("unsupported results schema_version " + j.at("schema_version").dump());
    }
    CellResult r;
    r.key = {j.at("dataset").get<std::string>(), j.at("model").get<std::string>(), j.at("seed").get<std::uint64_t>(),
             j.at("fold").get<int>()};
    r.ok = j.at("status").get<std::string>() == "ok";
    r.kind = parse_task_kind(j.at("task").get<std::string>());
    r.metric = stats::parse_metric(j.at("metric").get<std::string>());
    r.timing = TimingRecord::from_json(j.at("timing"));
    if (!r.ok) {
      r.error = j.value("error", "");
      return r;
    }
    auto numbers = [](const nlohmann::json& a) {
      std::vector<double> v;
      for (const auto& x : a) v.push_back(x.is_null() ? std::nan("") : x.get<double>());
      return v;
    };
    r.score = j.at("score").get<double>();
    if (!j.at("rmse").is_null()) r.rmse = j.at("rmse").get<double>();
    if (j.contains("subset")) {
      const auto& s = j["subset"];
      r.subset = stats::SubsetScore{s.at("in").get<double>(), s.at("out").get<double>(),
                                    s.at("difference").get<double>()};
    }
    r.scaler_hash = j.at("scaler_hash").get<std::uint64_t>();
    const auto& p = j.at("predictions");
    r.ids = p.at("ids").get<std::vector<std::string>>();
    r.y_true = numbers(p.at("y_true"));
    r.point = numbers(p.at("point"));
    if (p.contains("probs")) r.probs = p["probs"].get<std::vector<std::vector<double>>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("results record: ") + e.what());
  }
}

ResultsStore::ResultsStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
  std::ifstream in(file());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ParseError(file().string() + ":" + std::to_string(line_no) + ": invalid JSON");
    CellResult r = CellResult::from_json(j);
    cells_[r.key] = std::move(r);
  }
}

bool ResultsStore::completed(const CellKey& key) const {
  const auto it = cells_.find(key);
  return it != cells_.end() && it->second.ok;
}

void ResultsStore::append(const CellResult& result) {
  std::ofstream out(file(), std::ios::app);
  if (!out) throw IoError("cannot append to " + file().string());
  out << result.to_json().dump() << '\n';
  out.flush();
  if (!out) throw IoError("failed writing " + file().string());
  cells_[result.key] = result;
}

std::vector<CellResult> ResultsStore::failures() const {
  std::vector<CellResult> out;
  for (const auto& [k, r] : cells_) {
    if (!r.ok) out.push_back(r);
  }
  return out;
}

std::size_t worker_count(std::size_t requested) {
  std::size_t n = requested;
  if (n == 0) {
    n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PFNF_THREADS")) {
      const long cap = std::strtol(env, nullptr, 10);
      if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
    }
  }
  return std::max<std::size_t>(n, 1);
}

CellResult run_cell(const CellKey& key, const DatasetSpec& dataset, const FeatureTable& table, const ModelSpec& spec,
                    const std::shared_ptr<const model::TabularModel<float>>& model) {
  CellResult r;
  r.key = key;
  r.kind = dataset.kind;
  r.metric = dataset.metric;
  try {
    const auto [train_rows, test_rows] = fold_rows(table, dataset, key.fold);
    if (train_rows.empty() || test_rows.empty()) throw PreconditionError("fold has an empty train or test side");
    if (!table.y) throw PreconditionError("dataset has no 'y' column");
    const FeatureTable train = table.take(train_rows), test = table.take(test_rows);
    for (double v : *train.y) {
      if (std::isnan(v)) throw PreconditionError("missing target in a training row");
    }
    for (double v : *test.y) {
      if (std::isnan(v)) throw PreconditionError("missing target in a test row; cannot score");
    }
    const std::uint64_t seed = cell_seed(key.seed, key.dataset, key.fold, key.model);

    std::optional<predictor::FittedPredictor> pfn;
    std::unique_ptr<baselines::FittedBaseline> base;
    std::vector<std::vector<double>> probs;
    std::vector<double> point;
    auto fit = [&] {
      if (spec.is_pfn) {
        pfn = predictor::FittedPredictor::fit(model, spec.ensemble, train.x, *train.y, dataset.kind, seed);
      } else {
        base = baselines::baseline_fit(spec.baseline, train.x, *train.y, dataset.kind, seed);
      }
    };
    auto predict = [&] {
      if (pfn) {
        const predictor::Prediction p = pfn->predict(test.x);
        point = p.point;
        if (dataset.kind == TaskKind::kClassification) {
          for (const auto& d : p.dists) probs.push_back(d.probs);
        }
      } else {
        baselines::BaselinePrediction p = base->predict(test.x);
        point = std::move(p.point);
        probs = std::move(p.probs);
      }
    };
    r.timing = time_phases(fit, predict, table.featurize_seconds(), train_rows.size(), test_rows.size());
    r.scaler_hash = predictor::scaler_hash(pfn ? pfn->scaler() : base->scaler());
    r.ids = test.ids;
    r.y_true = *test.y;
    r.point = point;
    r.probs = probs;
    if (dataset.kind == TaskKind::kRegression) {
      r.score = stats::metric(r.y_true, r.point, dataset.metric);
      r.rmse = stats::metric(r.y_true, r.point, stats::MetricKind::kRmse);
      if (const auto mask = binary_mask(table, test_rows)) {
        r.subset = stats::subset_metric(r.y_true, r.point, *mask, stats::MetricKind::kRmse);
      }
    } else {
      r.score = stats::metric(r.y_true, r.probs, dataset.metric);
    }
    if (!std::isfinite(r.score)) throw NonFiniteError("non-finite score");
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    r.ids.clear();
    r.y_true.clear();
    r.point.clear();
    r.probs.clear();
  }
  return r;
}

ResultsStore run_benchmark(const BenchConfig& config, const RunOptions& options) {
  config.validate();
  ResultsStore store(config.output_dir);

  struct Job {
    CellKey key;
    std::size_t dataset;
    std::size_t model;
  };
  std::vector<FeatureTable> tables(config.datasets.size());
  std::vector<std::string> load_errors(config.datasets.size());
  std::vector<std::vector<int>> folds(config.datasets.size());
  for (std::size_t d = 0; d < config.datasets.size(); ++d) {
    try {
      tables[d] = load_feature_table(config.datasets[d].path);
      folds[d] = fold_ids(tables[d], config.datasets[d]);
    } catch (const std::exception& e) {
      load_errors[d] = e.what();
      folds[d] = {0};
    }
  }
  std::vector<std::shared_ptr<const model::TabularModel<float>>> models(config.models.size());
  std::vector<std::string> model_errors(config.models.size());
  for (std::size_t m = 0; m < config.models.size(); ++m) {
    if (!config.models[m].is_pfn) continue;
    try {
      models[m] = std::make_shared<const model::TabularModel<float>>(
          pretrain::load_model(config.models[m].checkpoint));
    } catch (const std::exception& e) {
      model_errors[m] = e.what();
    }
  }

  std::vector<Job> jobs;
  for (std::size_t d = 0; d < config.datasets.size(); ++d) {
    for (int f : folds[d]) {
      for (std::size_t m = 0; m < config.models.size(); ++m) {
        for (std::uint64_t s : config.seeds) {
          CellKey key{config.datasets[d].name, config.models[m].name, s, f};
          if (options.force || !store.completed(key)) jobs.push_back({key, d, m});
        }
      }
    }
  }

  std::vector<CellResult> results(jobs.size());
  std::vector<bool> done(jobs.size(), false);
  std::size_t cursor = 0;
  std::atomic<std::size_t> next{0};
  std::mutex commit_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      CellResult r;
      if (!load_errors[job.dataset].empty() || !model_errors[job.model].empty()) {
        r.key = job.key;
        r.kind = config.datasets[job.dataset].kind;
        r.metric = config.datasets[job.dataset].metric;
        r.error = !load_errors[job.dataset].empty() ? load_errors[job.dataset] : model_errors[job.model];
      } else {
        r = run_cell(job.key, config.datasets[job.dataset], tables[job.dataset], config.models[job.model],
                     models[job.model]);
      }
      const std::lock_guard lock(commit_mutex);
      results[i] = std::move(r);
      done[i] = true;
      if (options.on_cell) options.on_cell(results[i]);
      // Commit in job order so the file does not depend on scheduling.
      while (cursor < jobs.size() && done[cursor]) store.append(results[cursor++]);
    }
  };
  const std::size_t n_workers = std::min(worker_count(options.threads), std::max<std::size_t>(jobs.size(), 1));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  }
  return store;
}

}  // namespace pfnf::harness
