#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnf/nn/graph.hpp"
#include "pfnf/nn/params.hpp"

namespace pfnf::model {

enum class TaskKind : std::uint8_t { kRegression, kClassification };

struct TaskSpec {
  TaskKind kind = TaskKind::kRegression;
  std::size_t num_classes = 0;  // classification only

  static TaskSpec regression() { return {TaskKind::kRegression, 0}; }
  static TaskSpec classification(std::size_t k) { return {TaskKind::kClassification, k}; }
};

enum class Activation : std::uint8_t { kGelu, kRelu };

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t n_blocks = 3;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t regression_bins = 64;
  double bin_lower = -4.0;
  double bin_upper = 4.0;
  std::size_t max_classes = 4;
  std::size_t max_features = 32;
  std::size_t max_samples = 256;
  Activation activation = Activation::kGelu;

  void validate() const;
  // Strictly increasing, regression_bins + 1 entries.
  std::vector<double> bin_edges() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Floor added to head probabilities before taking the log.
inline constexpr double kProbabilityFloor = 1e-9;

struct PredictiveDistribution {
  TaskKind kind = TaskKind::kRegression;
  std::vector<double> probs;
  std::vector<double> bin_edges;  // regression only, standardized target units

  void validate() const;
};

// Regression: expected value under the bin-midpoint density. Classification:
// see `class_point_estimate`.
double expected_value(const PredictiveDistribution& dist);

struct ClassPrediction {
  std::size_t label = 0;
  double probability = 0.0;  // P(class 1) for binary, P(label) otherwise
};
ClassPrediction class_point_estimate(const PredictiveDistribution& dist, double threshold = 0.5);

// Index of the bin holding `y` after clamping into the bin range.
std::size_t bin_index(const std::vector<double>& edges, double y);

// -log(p_true + floor) averaged over rows. Regression targets are
// standardized values; classification targets are labels.
double nll_loss(const std::vector<PredictiveDistribution>& dists, const std::vector<double>& targets,
                double floor = kProbabilityFloor);

// One in-context episode: labelled context rows and unlabelled query rows,
// all preprocessed (finite, standardized).
template <typename T>
struct Episode {
  nn::Tensor<T> x_context;  // [n_ctx, d]
  std::vector<T> y_context; // standardized value or class label
  nn::Tensor<T> x_query;    // [n_query, d]
  TaskSpec task;
};

// The desk-scale tabular model. Each cell of the table becomes a token;
// every block runs attention across the columns of a row, then attention
// across rows of a column (queries attend to context rows only), then an
// MLP. The target column token of each query row feeds the task head.
template <typename T>
class TabularModel {
 public:
  TabularModel(ModelConfig config, nn::ParameterSet<T> params);

  // Deterministic initialization for `seed`.
  static nn::ParameterSet<T> init_params(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const nn::ParameterSet<T>& params() const { return params_; }
  nn::ParameterSet<T>& mutable_params() { return params_; }

  struct Built {
    nn::Graph<T> graph;
    nn::NodeId grid{};    // [rows, columns, embed_dim] token grid after embedding
    nn::NodeId logits{};  // [n_query, classes-or-bins], before temperature
    nn::NodeId probs{};   // softmax(logits / temperature)
    nn::NodeId loss{};    // set by build_with_loss
  };

  // Builds and binds the graph for `episode`; the caller runs forward.
  Built build(const Episode<T>& episode, T temperature = T{1}) const;
  // As `build`, plus the NLL node against `targets` (one per query row).
  Built build_with_loss(const Episode<T>& episode, const std::vector<T>& targets) const;

  std::vector<PredictiveDistribution> predict(const Episode<T>& episode, T temperature = T{1}) const;

  // Token grid only (rows = context then query rows, columns = features then target).
  nn::Tensor<T> embed_table(const Episode<T>& episode) const;

  // Loss and per-parameter gradients (declaration order) for one episode.
  struct LossAndGrads {
    double loss = 0.0;
    std::vector<nn::Tensor<T>> grads;
  };
  LossAndGrads loss_and_grads(const Episode<T>& episode, const std::vector<T>& targets) const;

 private:
  void check_episode(const Episode<T>& episode) const;
  nn::NodeId build_grid(nn::Graph<T>& g, const Episode<T>& episode) const;

  ModelConfig config_;
  nn::ParameterSet<T> params_;
};

extern template class TabularModel<float>;
extern template class TabularModel<double>;

}  // namespace pfnf::model
