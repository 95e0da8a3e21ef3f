#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnf/model/model.hpp"
#include "pfnf/nn/tensor.hpp"

namespace pfnf::prior {

using Rng = std::mt19937_64;

enum class EdgeFunction : std::uint8_t { kLinear, kTanh, kSin, kAbs, kStep };

const char* edge_function_name(EdgeFunction f);
EdgeFunction parse_edge_function(const std::string& name);
double apply_edge(EdgeFunction f, double x);

// Hyperparameters of the synthetic task distribution.
struct PriorConfig {
  std::size_t max_features = 32;
  std::size_t max_samples = 256;
  // Row count lower bound; rows are drawn log-uniformly in
  // [min_samples, min(max_samples, max_cells / (d + 1))] so that the mean
  // table stays small enough for CPU pretraining.
  std::size_t min_samples = 8;
  std::size_t max_cells = 256;
  double train_fraction_min = 0.3;
  double train_fraction_max = 0.9;
  double scm_probability = 0.7;
  double edge_density_min = 0.1;
  double edge_density_max = 0.6;
  std::size_t max_hidden_nodes = 8;
  double noise_min = 1e-3;
  double noise_max = 0.3;
  std::vector<EdgeFunction> edge_functions{EdgeFunction::kLinear, EdgeFunction::kTanh, EdgeFunction::kSin,
                                           EdgeFunction::kAbs, EdgeFunction::kStep};
  double classification_probability = 0.3;
  std::size_t min_classes = 2;
  std::size_t max_classes = 4;
  std::size_t max_mlp_hidden = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static PriorConfig from_json(const nlohmann::json& j);
  friend bool operator==(const PriorConfig&, const PriorConfig&) = default;
};

struct ScmEdge {
  std::size_t parent = 0;
  EdgeFunction fn = EdgeFunction::kLinear;
  double weight = 0.0;
};

// Nodes are indexed in a topological order: every parent index is smaller
// than its child's. Node values are normalized by `offset`/`scale`, fitted
// on a pilot sample so long chains stay O(1).
struct ScmInstance {
  std::size_t node_count = 0;
  std::vector<std::vector<ScmEdge>> parents;
  std::vector<double> noise_scale;
  std::vector<double> offset;
  std::vector<double> scale;
  std::vector<std::size_t> feature_nodes;
  std::size_t target_node = 0;

  // Throws PreconditionError on dangling or backward edges, a target inside
  // the feature subset, or inconsistent sizes.
  void validate() const;
  // One ancestral sample of every node.
  std::vector<double> sample_nodes(Rng& rng) const;
};

// A random one-hidden-layer MLP over i.i.d. standard normal inputs.
struct FunctionInstance {
  std::size_t n_features = 0;
  std::size_t hidden = 0;
  std::vector<double> w_in;  // [n_features, hidden]
  std::vector<double> b_in;  // [hidden]
  std::vector<EdgeFunction> activation;  // per hidden unit
  std::vector<double> w_out;  // [hidden]
  double noise_scale = 0.0;
  double offset = 0.0;
  double scale = 1.0;

  double evaluate(const double* x) const;
};

struct SyntheticTask {
  nn::Tensor<double> x_train;  // [n_train, d]
  std::vector<double> y_train;
  nn::Tensor<double> x_test;   // [n_test, d]
  std::vector<double> y_test;
  model::TaskSpec task;

  std::size_t n_features() const { return x_train.dim(1); }
};

// Feature and row counts drawn from the configured size distribution.
struct TaskDims {
  std::size_t n_features = 1;
  std::size_t n_train = 2;
  std::size_t n_test = 1;
};
TaskDims sample_dims(const PriorConfig& config, std::size_t min_train, Rng& rng);

ScmInstance sample_scm(const PriorConfig& config, Rng& rng);
ScmInstance sample_scm(const PriorConfig& config, std::size_t n_features, Rng& rng);
FunctionInstance sample_function(const PriorConfig& config, std::size_t n_features, Rng& rng);

// Ancestral sampling of rows, then per-task standardization on the train
// rows. Classification targets come from quantile-binning the continuous
// target into `task.num_classes` classes on the train rows, with a random
// relabelling. Throws DegenerateTaskError when 100 redraws all give a target
// with variance below 1e-12.
SyntheticTask sample_task(const ScmInstance& scm, std::size_t n_train, std::size_t n_test,
                          model::TaskSpec task, Rng& rng);
SyntheticTask sample_task(const FunctionInstance& fn, std::size_t n_train, std::size_t n_test,
                          model::TaskSpec task, Rng& rng);
SyntheticTask sample_function_task(const PriorConfig& config, Rng& rng);

// One draw from the full prior: mechanism, task kind, sizes.
SyntheticTask sample_prior_task(const PriorConfig& config, Rng& rng);

// Independent substream for task `index` of a stream seeded with `seed`.
Rng task_rng(std::uint64_t seed, std::uint64_t index);

// y = w . x with standard normal features and weights; `noise` is the
// target's exogenous scale.
ScmInstance linear_scm(std::size_t n_features, double noise, Rng& rng);

// FNV-1a over shapes, values and task kind.
std::uint64_t task_hash(const SyntheticTask& task);

}  // namespace pfnf::prior
