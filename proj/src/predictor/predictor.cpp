#include "pfnf/predictor/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pfnf/error.hpp"
#include "pfnf/prior/prior.hpp"

namespace pfnf::predictor {

namespace {

constexpr double kMinStd = 1e-12;

double median_of(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

void check_matrix(const Matrix& x, const char* what) {
  if (x.rank() != 2) throw ShapeError(std::string(what) + " must be a 2-D matrix");
}

}  // namespace

Scaler preprocess_fit(const Matrix& x_train, double clamp) {
  check_matrix(x_train, "training table");
  const std::size_t n = x_train.dim(0), d = x_train.dim(1);
  if (n < 2) throw PreconditionError("preprocess_fit needs at least 2 training rows");
  if (d < 1) throw PreconditionError("preprocess_fit needs at least 1 feature");
  if (!(clamp > 0.0)) throw PreconditionError("clamp bound must be positive");
  Scaler s;
  s.clamp = clamp;
  s.mean.resize(d);
  s.std.resize(d);
  s.median.resize(d);
  s.constant.resize(d);
  s.all_missing.resize(d);
  for (std::size_t c = 0; c < d; ++c) {
    std::vector<double> present;
    for (std::size_t r = 0; r < n; ++r) {
      if (!std::isnan(x_train.at(r, c))) present.push_back(x_train.at(r, c));
    }
    if (present.empty()) {
      s.all_missing[c] = true;
      s.constant[c] = true;
      s.median[c] = 0.0;
      s.mean[c] = 0.0;
      s.std[c] = 1.0;
      s.warnings.push_back("feature " + std::to_string(c) + " is missing on every training row; imputed to 0");
      continue;
    }
    s.median[c] = median_of(present);
    // Statistics of the imputed column.
    double sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double v = x_train.at(r, c);
      sum += std::isnan(v) ? s.median[c] : v;
    }
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double v = std::isnan(x_train.at(r, c)) ? s.median[c] : x_train.at(r, c);
      ss += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    s.mean[c] = mean;
    s.constant[c] = !(sd > kMinStd);
    s.std[c] = s.constant[c] ? 1.0 : sd;
  }
  return s;
}

void fit_target(Scaler& scaler, const std::vector<double>& y_train) {
  if (y_train.size() < 2) throw PreconditionError("target transform needs at least 2 values");
  double sum = 0.0;
  for (double y : y_train) {
    if (!std::isfinite(y)) throw PreconditionError("regression targets must be finite");
    sum += y;
  }
  const double mean = sum / static_cast<double>(y_train.size());
  double ss = 0.0;
  for (double y : y_train) ss += (y - mean) * (y - mean);
  const double sd = std::sqrt(ss / static_cast<double>(y_train.size()));
  scaler.has_target = true;
  scaler.target_mean = mean;
  scaler.target_std = sd > kMinStd ? sd : 1.0;
}

Matrix preprocess_apply(const Scaler& scaler, const Matrix& x) {
  check_matrix(x, "table");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (d != scaler.n_features()) {
    throw ShapeError("table has " + std::to_string(d) + " features, scaler was fitted on " +
                     std::to_string(scaler.n_features()));
  }
  Matrix out({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      if (scaler.constant[c]) continue;
      const double raw = std::isnan(x.at(r, c)) ? scaler.median[c] : x.at(r, c);
      const double z = (raw - scaler.mean[c]) / scaler.std[c];
      out.at(r, c) = std::clamp(z, -scaler.clamp, scaler.clamp);
    }
  }
  return out;
}

double transform_target(const Scaler& scaler, double y) {
  if (!scaler.has_target) throw StateError("no target transform fitted (classification scaler?)");
  return (y - scaler.target_mean) / scaler.target_std;
}

double inverse_target(const Scaler& scaler, double z) {
  if (!scaler.has_target) throw StateError("no target transform fitted (classification scaler?)");
  return z * scaler.target_std + scaler.target_mean;
}

std::uint64_t scaler_hash(const Scaler& scaler) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  auto mix_doubles = [&](const std::vector<double>& v) { mix(v.data(), v.size() * sizeof(double)); };
  mix_doubles(scaler.mean);
  mix_doubles(scaler.std);
  mix_doubles(scaler.median);
  for (std::size_t j = 0; j < scaler.constant.size(); ++j) {
    const unsigned char flags = (scaler.constant[j] ? 1 : 0) | (scaler.all_missing[j] ? 2 : 0);
    mix(&flags, 1);
  }
  const double tail[] = {scaler.clamp, scaler.has_target ? 1.0 : 0.0, scaler.target_mean, scaler.target_std};
  mix(tail, sizeof(tail));
  return h;
}

const char* feature_shuffle_name(FeatureShuffle m) { return m == FeatureShuffle::kLatin ? "latin" : "shuffle"; }

FeatureShuffle parse_feature_shuffle(const std::string& name) {
  if (name == "shuffle") return FeatureShuffle::kShuffle;
  if (name == "latin") return FeatureShuffle::kLatin;
  throw ParseError("unknown feat_shuffle_method '" + name + "'");
}

void EnsembleConfig::validate() const {
  if (n_estimators < 1) throw PreconditionError("n_estimators must be at least 1");
  if (!(softmax_temperature > 0.0) || !std::isfinite(softmax_temperature)) {
    throw PreconditionError("softmax_temperature must be positive");
  }
  if (!(prediction_threshold > 0.0 && prediction_threshold < 1.0)) {
    throw PreconditionError("prediction_threshold must lie in (0, 1)");
  }
  if (outlier_threshold && !(*outlier_threshold > 0.0)) throw PreconditionError("outlier_threshold must be positive");
  if (max_features_per_estimator < 1) throw PreconditionError("max_features_per_estimator must be at least 1");
}

nlohmann::json EnsembleConfig::to_json() const {
  return {{"n_estimators", n_estimators},
          {"softmax_temperature", softmax_temperature},
          {"prediction_threshold", prediction_threshold},
          {"outlier_threshold", outlier_threshold ? nlohmann::json(*outlier_threshold) : nlohmann::json(nullptr)},
          {"max_features_per_estimator", max_features_per_estimator},
          {"feat_shuffle_method", feature_shuffle_name(feat_shuffle_method)}};
}

EnsembleConfig EnsembleConfig::from_json(const nlohmann::json& j) {
  EnsembleConfig c;
  try {
    c.n_estimators = j.value("n_estimators", c.n_estimators);
    c.softmax_temperature = j.value("softmax_temperature", c.softmax_temperature);
    c.prediction_threshold = j.value("prediction_threshold", c.prediction_threshold);
    if (j.contains("outlier_threshold")) {
      const auto& t = j.at("outlier_threshold");
      if (t.is_null() || (t.is_string() && t.get<std::string>() == "none")) {
        c.outlier_threshold.reset();
      } else {
        c.outlier_threshold = t.get<double>();
      }
    }
    c.max_features_per_estimator = j.value("max_features_per_estimator", c.max_features_per_estimator);
    if (j.contains("feat_shuffle_method")) {
      c.feat_shuffle_method = parse_feature_shuffle(j.at("feat_shuffle_method").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("ensemble config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::vector<std::size_t>> feature_subsets(std::size_t d, const EnsembleConfig& config,
                                                      std::uint64_t seed) {
  config.validate();
  if (d < 1) throw PreconditionError("feature_subsets needs at least one feature");
  const std::size_t cap = config.max_features_per_estimator;
  const std::size_t n_est = config.n_estimators;
  std::vector<std::vector<std::size_t>> subsets(n_est);
  std::vector<std::size_t> coverage(d, 0);
  for (std::size_t e = 0; e < n_est; ++e) {
    prior::Rng rng = prior::task_rng(seed, e);
    std::vector<std::size_t> all(d);
    std::iota(all.begin(), all.end(), 0);
    std::vector<std::size_t>& subset = subsets[e];
    if (d <= cap) {
      subset = all;
    } else if (config.feat_shuffle_method == FeatureShuffle::kShuffle) {
      std::shuffle(all.begin(), all.end(), rng);
      subset.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cap));
    } else {
      // Least-covered features first, random tie-break.
      std::vector<std::uint64_t> key(d);
      for (auto& k : key) k = rng();
      std::sort(all.begin(), all.end(), [&](std::size_t a, std::size_t b) {
        return coverage[a] != coverage[b] ? coverage[a] < coverage[b] : key[a] < key[b];
      });
      subset.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cap));
      for (std::size_t f : subset) ++coverage[f];
    }
    std::shuffle(subset.begin(), subset.end(), rng);
  }
  return subsets;
}

FittedPredictor FittedPredictor::fit(std::shared_ptr<const model::TabularModel<float>> model,
                                     const EnsembleConfig& config, const Matrix& x_train,
                                     const std::vector<double>& y_train, model::TaskKind kind, std::uint64_t seed) {
  if (!model) throw PreconditionError("fit needs a model");
  config.validate();
  check_matrix(x_train, "training table");
  const model::ModelConfig& mc = model->config();
  const std::size_t n = x_train.dim(0), d = x_train.dim(1);
  if (y_train.size() != n) throw ShapeError("y_train length does not match the training rows");
  if (n + 1 > mc.max_samples) {
    throw PreconditionError("too many samples for the model: " + std::to_string(n) + " training rows, model takes " +
                            std::to_string(mc.max_samples - 1) + " plus one query");
  }

  FittedPredictor p;
  p.model_ = std::move(model);
  p.config_ = config;
  p.scaler_ = preprocess_fit(x_train, kClampBound);
  p.subsets_ = feature_subsets(d, config, seed);
  for (const auto& s : p.subsets_) {
    if (s.size() > mc.max_features) {
      throw PreconditionError("too many features for the model: estimator view has " + std::to_string(s.size()) +
                              " features, model takes " + std::to_string(mc.max_features) +
                              " (lower max_features_per_estimator)");
    }
  }

  if (kind == model::TaskKind::kRegression) {
    p.task_ = model::TaskSpec::regression();
    fit_target(p.scaler_, y_train);
    for (double y : y_train) p.y_context_.push_back(transform_target(p.scaler_, y));
  } else {
    double top = 0.0;
    for (double y : y_train) {
      if (!(y >= 0.0) || y != std::floor(y)) throw PreconditionError("class labels must be integers 0..K-1");
      top = std::max(top, y);
    }
    const auto k = static_cast<std::size_t>(top) + 1;
    if (k < 2) throw PreconditionError("classification needs at least two classes in the training labels");
    if (k > mc.max_classes) {
      throw PreconditionError(std::to_string(k) + " classes exceed the model's " + std::to_string(mc.max_classes));
    }
    p.task_ = model::TaskSpec::classification(k);
    p.y_context_ = y_train;
  }
  p.x_context_ = preprocess_apply(p.scaler_, x_train);
  return p;
}

Matrix FittedPredictor::estimator_view(std::size_t e, const Matrix& standardized) const {
  const std::vector<std::size_t>& subset = subsets_.at(e);
  const std::size_t n = standardized.dim(0);
  Matrix out({n, subset.size()});
  const double bound = config_.outlier_threshold ? std::min(*config_.outlier_threshold, scaler_.clamp) : scaler_.clamp;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < subset.size(); ++j) out.at(r, j) = std::clamp(standardized.at(r, subset[j]), -bound, bound);
  }
  return out;
}

Prediction FittedPredictor::predict(const Matrix& x_test) const {
  if (!model_) throw StateError("predictor is not fitted");
  check_matrix(x_test, "test table");
  const std::size_t n = x_test.dim(0);
  if (n < 1) throw PreconditionError("predict needs at least one test row");
  const Matrix z = preprocess_apply(scaler_, x_test);
  const std::size_t n_ctx = x_context_.dim(0);
  const std::size_t chunk = model_->config().max_samples - n_ctx;

  Prediction out;
  out.kind = task_.kind;
  out.dists.resize(n);
  const std::vector<float> y_ctx(y_context_.begin(), y_context_.end());
  for (std::size_t e = 0; e < subsets_.size(); ++e) {
    const nn::Tensor<float> ctx = estimator_view(e, x_context_).cast<float>();
    const Matrix view = estimator_view(e, z);
    const std::size_t width = subsets_[e].size();
    // Queries are independent, so long test sets go through in chunks.
    for (std::size_t r0 = 0; r0 < n; r0 += chunk) {
      const std::size_t rows = std::min(chunk, n - r0);
      nn::Tensor<float> q({rows, width});
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) q.at(r, j) = static_cast<float>(view.at(r0 + r, j));
      }
      const model::Episode<float> ep{ctx, y_ctx, std::move(q), task_};
      const auto dists = model_->predict(ep, static_cast<float>(config_.softmax_temperature));
      for (std::size_t r = 0; r < rows; ++r) {
        model::PredictiveDistribution& acc = out.dists[r0 + r];
        if (e == 0) {
          acc = dists[r];
        } else {
          for (std::size_t i = 0; i < acc.probs.size(); ++i) acc.probs[i] += dists[r].probs[i];
        }
      }
    }
  }
  for (model::PredictiveDistribution& d : out.dists) {
    const double total = std::accumulate(d.probs.begin(), d.probs.end(), 0.0);
    for (double& p : d.probs) p /= total;
    if (task_.kind == model::TaskKind::kRegression) {
      out.point.push_back(inverse_target(scaler_, model::expected_value(d)));
    } else {
      const model::ClassPrediction c = model::class_point_estimate(d, config_.prediction_threshold);
      out.point.push_back(static_cast<double>(c.label));
      out.probability.push_back(c.probability);
    }
  }
  return out;
}

}  // namespace pfnf::predictor
