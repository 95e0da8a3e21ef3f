#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnf/model/model.hpp"
#include "pfnf/predictor/predictor.hpp"

namespace pfnf::baselines {

using predictor::Matrix;

enum class BaselineKind : std::uint8_t { kRidge, kLogistic, kKnn, kRandomForest };
const char* baseline_name(BaselineKind k);
BaselineKind parse_baseline(const std::string& name);

struct BaselineSpec {
  BaselineKind kind = BaselineKind::kRidge;
  double ridge_lambda = 1.0;
  double logistic_lambda = 1.0;
  std::size_t knn_k = 5;
  std::size_t n_trees = 300;
  std::size_t min_leaf = 1;
  std::optional<std::size_t> max_depth;        // unlimited by default
  std::optional<std::size_t> split_features;   // default floor(sqrt(d)), at least 1
  bool bootstrap = true;

  void validate() const;
  nlohmann::json to_json() const;
  static BaselineSpec from_json(const nlohmann::json& j);
  friend bool operator==(const BaselineSpec&, const BaselineSpec&) = default;
};

struct BaselinePrediction {
  model::TaskKind kind = model::TaskKind::kRegression;
  std::vector<double> point;  // original units, or label
  // Classification: per-row class probabilities; `probability` is P(class 1)
  // for binary tasks and P(label) otherwise.
  std::vector<std::vector<double>> probs;
  std::vector<double> probability;
};

// One node of a regression or classification tree. Leaves have feature < 0;
// `value` is the standardized mean target (regression) or the class
// distribution (classification).
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;  // go left when x[feature] <= threshold
  int left = -1;
  int right = -1;
  std::vector<double> value;
};
using Tree = std::vector<TreeNode>;  // root at index 0

// Leaf reached by `x` (standardized features).
const std::vector<double>& tree_leaf(const Tree& tree, const double* x);

class FittedBaseline {
 public:
  virtual ~FittedBaseline() = default;
  virtual BaselinePrediction predict(const Matrix& x_test) const = 0;
  virtual const predictor::Scaler& scaler() const = 0;
};

// Preprocesses with the predictor's Scaler, then fits. Ridge takes
// regression tasks only, logistic classification only; kNN and the forest
// take both. Labels are integers 0..K-1.
std::unique_ptr<FittedBaseline> baseline_fit(const BaselineSpec& spec, const Matrix& x_train,
                                             const std::vector<double>& y_train, model::TaskKind kind,
                                             std::uint64_t seed);

// Concrete handles for tests and diagnostics.
class Ridge : public FittedBaseline {
 public:
  Ridge(const BaselineSpec& spec, const Matrix& x_train, const std::vector<double>& y_train);
  BaselinePrediction predict(const Matrix& x_test) const override;
  const predictor::Scaler& scaler() const override { return scaler_; }
  // Standardized-space solution: z_hat = intercept + x' w.
  const std::vector<double>& weights() const { return w_; }
  double intercept() const { return b_; }
  // max |(Xc' Xc + lambda I) w - Xc' yc| on the centred training design.
  double normal_equation_residual() const { return residual_; }

 private:
  predictor::Scaler scaler_;
  std::vector<double> w_;
  double b_ = 0.0;
  double residual_ = 0.0;
};

class Logistic : public FittedBaseline {
 public:
  Logistic(const BaselineSpec& spec, const Matrix& x_train, const std::vector<double>& y_train);
  BaselinePrediction predict(const Matrix& x_test) const override;
  const predictor::Scaler& scaler() const override { return scaler_; }

 private:
  predictor::Scaler scaler_;
  std::size_t classes_ = 2;
  // One binary model per class (one-vs-rest); a single one when K = 2.
  std::vector<std::vector<double>> w_;
  std::vector<double> b_;
};

class Knn : public FittedBaseline {
 public:
  Knn(const BaselineSpec& spec, const Matrix& x_train, const std::vector<double>& y_train, model::TaskKind kind);
  BaselinePrediction predict(const Matrix& x_test) const override;
  const predictor::Scaler& scaler() const override { return scaler_; }

 private:
  predictor::Scaler scaler_;
  model::TaskKind kind_;
  std::size_t k_;
  std::size_t classes_ = 0;
  Matrix x_;
  std::vector<double> y_;  // standardized target or label
};

class RandomForest : public FittedBaseline {
 public:
  RandomForest(const BaselineSpec& spec, const Matrix& x_train, const std::vector<double>& y_train,
               model::TaskKind kind, std::uint64_t seed);
  // Wraps already-built trees (standardized feature space).
  RandomForest(predictor::Scaler scaler, model::TaskKind kind, std::size_t classes, std::vector<Tree> trees);
  BaselinePrediction predict(const Matrix& x_test) const override;
  const predictor::Scaler& scaler() const override { return scaler_; }
  const std::vector<Tree>& trees() const { return trees_; }
  // Out-of-bag R^2 over rows left out by at least one tree (regression
  // with bootstrap only; NaN otherwise).
  double oob_r2() const { return oob_r2_; }

 private:
  predictor::Scaler scaler_;
  model::TaskKind kind_;
  std::size_t classes_ = 0;
  std::vector<Tree> trees_;
  double oob_r2_ = 0.0;
};

}  // namespace pfnf::baselines
