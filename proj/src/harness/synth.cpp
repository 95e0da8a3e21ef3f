#include "pfnf/harness/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "pfnf/error.hpp"
#include "pfnf/prior/prior.hpp"

namespace pfnf::harness {

FeatureTable synth_table(const SynthSpec& spec) {
  if (spec.n_features < 1) throw PreconditionError("synth needs at least one feature");
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0)) {
    throw PreconditionError("test_fraction must lie in (0, 1)");
  }
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(spec.n_rows)));
  if (n_test < 1 || n_test + 2 > spec.n_rows) throw PreconditionError("synth needs at least 2 train and 1 test row");
  const std::size_t n_train = spec.n_rows - n_test;
  const model::TaskSpec task = spec.kind == model::TaskKind::kRegression
                                   ? model::TaskSpec::regression()
                                   : model::TaskSpec::classification(spec.classes);
  if (spec.kind == model::TaskKind::kClassification && (spec.classes < 2 || spec.classes > n_train)) {
    throw PreconditionError("classes must lie in [2, n_train]");
  }

  prior::Rng rng = prior::task_rng(spec.seed, 0);
  prior::PriorConfig config;
  config.max_features = std::max(config.max_features, spec.n_features);
  config.max_samples = std::max(config.max_samples, spec.n_rows);
  prior::SyntheticTask t;
  if (spec.mechanism == "linear") {
    t = prior::sample_task(prior::linear_scm(spec.n_features, spec.noise, rng), n_train, n_test, task, rng);
  } else if (spec.mechanism == "scm") {
    t = prior::sample_task(prior::sample_scm(config, spec.n_features, rng), n_train, n_test, task, rng);
  } else if (spec.mechanism == "mlp") {
    t = prior::sample_task(prior::sample_function(config, spec.n_features, rng), n_train, n_test, task, rng);
  } else {
    throw PreconditionError("unknown mechanism '" + spec.mechanism + "' (expected linear, scm or mlp)");
  }

  FeatureTable out;
  const std::size_t d = spec.n_features;
  for (std::size_t j = 0; j < d; ++j) out.columns.push_back("f_" + std::to_string(j));
  out.x = Matrix({spec.n_rows, d});
  out.y.emplace();
  out.split.emplace();
  char id[32];
  for (std::size_t i = 0; i < spec.n_rows; ++i) {
    const bool train = i < n_train;
    const std::size_t r = train ? i : i - n_train;
    std::snprintf(id, sizeof(id), "r%05zu", i);
    out.ids.emplace_back(id);
    for (std::size_t j = 0; j < d; ++j) out.x.at(i, j) = train ? t.x_train.at(r, j) : t.x_test.at(r, j);
    out.y->push_back(train ? t.y_train[r] : t.y_test[r]);
    out.split->push_back(train ? SplitLabel::kTrain : SplitLabel::kTest);
  }
  if (spec.groups > 0) {
    out.group.emplace();
    std::uniform_int_distribution<std::size_t> pick(0, spec.groups - 1);
    for (std::size_t i = 0; i < spec.n_rows; ++i) out.group->push_back("g" + std::to_string(pick(rng)));
  }
  out.metadata = {{"scheme", "synthetic-" + spec.mechanism}, {"seed", spec.seed}, {"featurize_seconds", 0.0}};
  out.validate();
  return out;
}

}  // namespace pfnf::harness
