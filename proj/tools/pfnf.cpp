// pfnf: pretrain, predict, synthesize tables, run benchmarks, build reports.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pfnf/error.hpp"
#include "pfnf/harness/bench.hpp"
#include "pfnf/harness/report.hpp"
#include "pfnf/harness/synth.hpp"
#include "pfnf/harness/table.hpp"
#include "pfnf/predictor/predictor.hpp"
#include "pfnf/pretrain/pretrain.hpp"

namespace fs = std::filesystem;
using namespace pfnf;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    std::size_t used = 0;
    const unsigned long long v = std::stoull(tok, &used);
    if (used != tok.size()) throw PreconditionError("bad seed '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw PreconditionError("no seeds given");
  return out;
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

// ---- pretrain

struct PretrainArgs {
  std::string config;
  std::string out;
  std::string log;
  std::optional<std::uint64_t> steps;
  std::optional<std::uint64_t> seed;
  bool reuse = false;
};

// A finished checkpoint from the same config can stand in for a fresh run.
bool reusable(const fs::path& ckpt, const pretrain::PretrainConfig& config) {
  if (!fs::exists(ckpt) || !fs::exists(pretrain::timing_path(ckpt))) return false;
  try {
    const nlohmann::json meta = pretrain::read_metadata(ckpt);
    return meta.value("complete", false) && meta.contains("final_eval") &&
           pretrain::PretrainConfig::from_json(meta.at("pretrain")) == config;
  } catch (const Error&) {
    return false;
  }
}

int run_pretrain(const PretrainArgs& a) {
  pretrain::PretrainConfig config = a.config.empty() ? pretrain::PretrainConfig{}
                                                     : pretrain::PretrainConfig::from_file(a.config);
  if (a.steps) config.total_steps = *a.steps;
  if (a.seed) config.seed = *a.seed;
  config.validate();

  if (a.reuse && reusable(a.out, config)) {
    std::cerr << "reusing " << a.out << " (complete, same config)\n";
    return 0;
  }
  const pretrain::PretrainResult r = pretrain::pretrain(config, a.out, a.log, [](const nlohmann::json& rec) {
    if (rec.contains("eval_nll")) std::cerr << "step " << rec["step"] << " eval_nll " << rec["eval_nll"] << '\n';
  });
  nlohmann::json summary{{"checkpoint", r.checkpoint.string()},
                         {"log", r.log.string()},
                         {"initial", r.initial.to_json()},
                         {"final", r.final.to_json()},
                         {"seconds", r.seconds}};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

// ---- predict

struct PredictArgs {
  std::string ckpt, train, test, task, out;
  std::uint64_t seed = 0;
  std::size_t n_estimators = 8;
  double temperature = 0.9;
  std::string shuffle = "shuffle";
};

int run_predict(const PredictArgs& a) {
  const model::TaskKind kind = harness::parse_task_kind(a.task);
  const harness::FeatureTable train = harness::load_feature_table(a.train);
  const harness::FeatureTable test = harness::load_feature_table(a.test);
  if (train.columns != test.columns) throw PreconditionError("train and test tables have different feature columns");
  if (!train.y) throw PreconditionError(a.train + ": no target column");
  for (double v : *train.y) {
    if (std::isnan(v)) throw PreconditionError(a.train + ": every training row needs a target");
  }

  predictor::EnsembleConfig ens;
  ens.n_estimators = a.n_estimators;
  ens.softmax_temperature = a.temperature;
  ens.feat_shuffle_method = predictor::parse_feature_shuffle(a.shuffle);
  ens.validate();

  auto model = std::make_shared<const model::TabularModel<float>>(pretrain::load_model(a.ckpt));
  const auto fitted = predictor::FittedPredictor::fit(model, ens, train.x, *train.y, kind, a.seed);
  const predictor::Prediction pred = fitted.predict(test.x);

  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < test.ids.size(); ++i) {
    nlohmann::json row{{"id", test.ids[i]}, {"point", pred.point[i]}};
    if (kind == model::TaskKind::kRegression) {
      row["bins"] = pred.dists[i].probs;
    } else {
      row["probs"] = pred.dists[i].probs;
      row["probability"] = pred.probability[i];
    }
    rows.push_back(std::move(row));
  }
  nlohmann::json j{{"schema_version", harness::kSchemaVersion},
                   {"task", harness::task_kind_name(kind)},
                   {"seed", a.seed},
                   {"ensemble", ens.to_json()},
                   {"rows", std::move(rows)}};
  if (kind == model::TaskKind::kRegression && !pred.dists.empty()) {
    std::vector<double> edges;
    for (double z : pred.dists.front().bin_edges) edges.push_back(predictor::inverse_target(fitted.scaler(), z));
    j["bin_edges"] = edges;
  }
  write_json(j, a.out);
  return 0;
}

// ---- synth

struct SynthArgs {
  harness::SynthSpec spec;
  std::string task = "reg";
  std::string out;
};

int run_synth(SynthArgs a) {
  a.spec.kind = harness::parse_task_kind(a.task);
  harness::write_table(harness::synth_table(a.spec), a.out);
  std::cerr << "wrote " << a.out << '\n';
  return 0;
}

// ---- bench / report

struct BenchArgs {
  std::string config, out, seeds;
  bool force = false;
  std::size_t threads = 0;
};

int run_bench(const BenchArgs& a) {
  harness::BenchConfig config = harness::BenchConfig::from_file(a.config);
  if (!a.out.empty()) config.output_dir = a.out;
  if (!a.seeds.empty()) config.seeds = parse_seeds(a.seeds);
  config.validate();

  harness::RunOptions opts;
  opts.force = a.force;
  opts.threads = a.threads;
  std::size_t n = 0;
  opts.on_cell = [&n](const harness::CellResult& r) {
    ++n;
    std::cerr << r.key.str() << (r.ok ? " ok " + harness::format_double(r.score) : " FAILED: " + r.error) << '\n';
  };
  const harness::ResultsStore store = harness::run_benchmark(config, opts);
  const auto failures = store.failures();
  std::cerr << n << " cells run, " << store.cells().size() << " in " << store.file().string() << ", "
            << failures.size() << " failed\n";
  for (const auto& f : failures) std::cerr << "  " << f.key.str() << ": " << f.error << '\n';
  // Failed cells are recorded; a rerun retries them.
  return failures.empty() ? 0 : 2;
}

struct ReportArgs {
  std::string results, out;
  double alpha = 0.05;
};

int run_report(const ReportArgs& a) {
  const harness::ResultsStore store(a.results);
  const fs::path out = a.out.empty() ? fs::path(a.results) / "report" : fs::path(a.out);
  const harness::ReportBundle b = harness::emit_report(store, out, a.alpha);
  std::cout << b.table_csv;
  for (const auto& e : b.summary["excluded_datasets"]) std::cerr << "excluded: " << e.dump() << '\n';
  std::cerr << "report written to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pfnf: prior-fitted tabular predictor and benchmark harness"};
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "train the network on synthetic prior tasks");
  pre->add_option("--config", pa.config, "INI or JSON config (defaults when omitted)")->check(CLI::ExistingFile);
  pre->add_option("--out", pa.out, "checkpoint path")->required();
  pre->add_option("--log", pa.log, "JSONL log path (default <out>.log.jsonl)");
  pre->add_option("--steps", pa.steps, "override total_steps");
  pre->add_option("--seed", pa.seed, "override the training seed");
  pre->add_flag("--reuse", pa.reuse, "skip when <out> is a complete checkpoint from the same config");

  PredictArgs pr;
  auto* pred = app.add_subcommand("predict", "in-context prediction from a checkpoint");
  pred->add_option("--ckpt", pr.ckpt)->required()->check(CLI::ExistingFile);
  pred->add_option("--train", pr.train, "context table (CSV or .ftbin) with targets")->required()->check(CLI::ExistingFile);
  pred->add_option("--test", pr.test, "query table")->required()->check(CLI::ExistingFile);
  pred->add_option("--task", pr.task)->required()->check(CLI::IsMember({"reg", "cls", "regression", "classification"}));
  pred->add_option("--seed", pr.seed);
  pred->add_option("--n-estimators", pr.n_estimators);
  pred->add_option("--temperature", pr.temperature);
  pred->add_option("--feature-shuffle", pr.shuffle)->check(CLI::IsMember({"shuffle", "latin"}));
  pred->add_option("--out", pr.out, "JSON output (stdout when omitted)");

  SynthArgs sa;
  auto* syn = app.add_subcommand("synth", "write a synthetic feature table");
  syn->add_option("--mechanism", sa.spec.mechanism)->check(CLI::IsMember({"linear", "scm", "mlp"}));
  syn->add_option("--task", sa.task)->check(CLI::IsMember({"reg", "cls", "regression", "classification"}));
  syn->add_option("--rows", sa.spec.n_rows);
  syn->add_option("--features", sa.spec.n_features);
  syn->add_option("--test-fraction", sa.spec.test_fraction);
  syn->add_option("--noise", sa.spec.noise);
  syn->add_option("--classes", sa.spec.classes);
  syn->add_option("--groups", sa.spec.groups);
  syn->add_option("--seed", sa.spec.seed);
  syn->add_option("--out", sa.out, "CSV or .ftbin path")->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "run every dataset x model x seed x fold cell");
  bench->add_option("--config", ba.config)->required()->check(CLI::ExistingFile);
  bench->add_option("--out", ba.out, "results directory (overrides the config)");
  bench->add_option("--seeds", ba.seeds, "comma-separated seeds (overrides the config)");
  bench->add_flag("--force", ba.force, "rerun completed cells");
  bench->add_option("--threads", ba.threads, "worker cap (0: PFNF_THREADS or hardware)");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "statistics and figures from a results directory");
  rep->add_option("--results", ra.results)->required()->check(CLI::ExistingDirectory);
  rep->add_option("--alpha", ra.alpha)->check(CLI::IsMember({0.05}));
  rep->add_option("--out", ra.out, "output directory (default <results>/report)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return run_pretrain(pa);
    if (*pred) return run_predict(pr);
    if (*syn) return run_synth(sa);
    if (*bench) return run_bench(ba);
    if (*rep) return run_report(ra);
  } catch (const std::exception& e) {
    std::cerr << "pfnf: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
