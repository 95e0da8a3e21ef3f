#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnf/model/model.hpp"
#include "pfnf/nn/tensor.hpp"

namespace pfnf::predictor {

// Row-major [rows, features]; NaN marks a missing value.
using Matrix = nn::Tensor<double>;

inline constexpr double kClampBound = 6.0;

// Per-feature statistics fitted on training rows only. Population std
// throughout; a (near) zero-variance column gets std 1, is flagged constant
// and always maps to 0.
struct Scaler {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<double> median;     // imputation value, raw units
  std::vector<bool> constant;
  std::vector<bool> all_missing;  // imputed to 0 after standardization
  double clamp = kClampBound;
  bool has_target = false;
  double target_mean = 0.0;
  double target_std = 1.0;
  std::vector<std::string> warnings;

  std::size_t n_features() const { return mean.size(); }
  friend bool operator==(const Scaler&, const Scaler&) = default;
};

// Throws PreconditionError on fewer than 2 rows or no features.
Scaler preprocess_fit(const Matrix& x_train, double clamp = kClampBound);
// Adds the regression target transform (training mean and population std).
void fit_target(Scaler& scaler, const std::vector<double>& y_train);
// Median imputation, standardization, clamp to [-clamp, clamp]. Throws
// ShapeError on a column-count mismatch.
Matrix preprocess_apply(const Scaler& scaler, const Matrix& x);
double transform_target(const Scaler& scaler, double y);
// Throws StateError when no target transform was fitted.
double inverse_target(const Scaler& scaler, double z);
// FNV-1a over the fitted numbers (warnings excluded).
std::uint64_t scaler_hash(const Scaler& scaler);

enum class FeatureShuffle : std::uint8_t { kShuffle, kLatin };
const char* feature_shuffle_name(FeatureShuffle m);
FeatureShuffle parse_feature_shuffle(const std::string& name);

struct EnsembleConfig {
  std::size_t n_estimators = 8;
  double softmax_temperature = 0.9;
  double prediction_threshold = 0.5;
  std::optional<double> outlier_threshold = 4.0;
  std::size_t max_features_per_estimator = 500;
  FeatureShuffle feat_shuffle_method = FeatureShuffle::kShuffle;

  void validate() const;
  nlohmann::json to_json() const;
  static EnsembleConfig from_json(const nlohmann::json& j);
  friend bool operator==(const EnsembleConfig&, const EnsembleConfig&) = default;
};

// One ordered feature index list per estimator. With d <= cap every list is
// a permutation of all features. Otherwise "shuffle" draws cap features
// without replacement per estimator, and "latin" assigns features so that
// coverage counts differ by at most one (every feature lands in at least
// floor(n_estimators * cap / d) estimators), then permutes each list.
std::vector<std::vector<std::size_t>> feature_subsets(std::size_t d, const EnsembleConfig& config,
                                                      std::uint64_t seed);

struct Prediction {
  model::TaskKind kind = model::TaskKind::kRegression;
  std::vector<model::PredictiveDistribution> dists;  // ensemble mixture per row
  // Regression: expected value in original units. Classification: label.
  std::vector<double> point;
  // Classification: P(class 1) for binary, P(label) otherwise.
  std::vector<double> probability;
};

// An in-context predictor: stores the preprocessed context and the
// per-estimator feature views; the checkpointed model is never updated.
class FittedPredictor {
 public:
  // y_train holds targets (regression) or labels 0..K-1 (classification,
  // K = largest label + 1). Throws PreconditionError when the training rows
  // or an estimator's feature view exceed the model limits.
  static FittedPredictor fit(std::shared_ptr<const model::TabularModel<float>> model, const EnsembleConfig& config,
                             const Matrix& x_train, const std::vector<double>& y_train, model::TaskKind kind,
                             std::uint64_t seed);

  Prediction predict(const Matrix& x_test) const;

  const Scaler& scaler() const { return scaler_; }
  const EnsembleConfig& config() const { return config_; }
  const model::TaskSpec& task() const { return task_; }
  const std::vector<std::vector<std::size_t>>& subsets() const { return subsets_; }
  const Matrix& context() const { return x_context_; }
  const std::vector<double>& context_targets() const { return y_context_; }
  // Model inputs for estimator `e` (subset, permutation, z-clip applied).
  Matrix estimator_view(std::size_t e, const Matrix& standardized) const;

 private:
  std::shared_ptr<const model::TabularModel<float>> model_;
  EnsembleConfig config_;
  model::TaskSpec task_;
  Scaler scaler_;
  std::vector<std::vector<std::size_t>> subsets_;
  Matrix x_context_;              // preprocessed
  std::vector<double> y_context_; // standardized target or label
};

}  // namespace pfnf::predictor
