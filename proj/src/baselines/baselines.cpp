#include "pfnf/baselines/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "pfnf/error.hpp"
#include "pfnf/prior/prior.hpp"

namespace pfnf::baselines {

namespace {

using predictor::Scaler;
using MatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const MatrixXd> as_eigen(const Matrix& m) {
  return {m.ptr(), static_cast<Eigen::Index>(m.dim(0)), static_cast<Eigen::Index>(m.dim(1))};
}

void check_training(const Matrix& x, const std::vector<double>& y) {
  if (x.rank() != 2) throw ShapeError("training table must be a 2-D matrix");
  if (x.dim(0) < 2) throw PreconditionError("baselines need at least 2 training rows");
  if (y.size() != x.dim(0)) throw ShapeError("y_train length does not match the training rows");
}

std::size_t count_classes(const std::vector<double>& y) {
  double top = 0.0;
  for (double v : y) {
    if (!(v >= 0.0) || v != std::floor(v)) throw PreconditionError("class labels must be integers 0..K-1");
    top = std::max(top, v);
  }
  const auto k = static_cast<std::size_t>(top) + 1;
  if (k < 2) throw PreconditionError("classification needs at least two classes in the training labels");
  return k;
}

std::vector<double> standardized_targets(Scaler& s, const std::vector<double>& y) {
  predictor::fit_target(s, y);
  std::vector<double> z;
  z.reserve(y.size());
  for (double v : y) z.push_back(predictor::transform_target(s, v));
  return z;
}

void finish_classification(BaselinePrediction& out, double threshold = 0.5) {
  for (const auto& p : out.probs) {
    if (p.size() == 2) {
      out.point.push_back(p[1] >= threshold ? 1.0 : 0.0);
      out.probability.push_back(p[1]);
    } else {
      const auto it = std::max_element(p.begin(), p.end());
      out.point.push_back(static_cast<double>(it - p.begin()));
      out.probability.push_back(*it);
    }
  }
}

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double log1p_exp(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

// L2-penalized binary logistic regression by damped Newton; the intercept
// (last coefficient) is unpenalized up to a tiny stabilizer.
Eigen::VectorXd fit_binary_logistic(const MatrixXd& xa, const Eigen::VectorXd& y, double lambda) {
  const Eigen::Index p = xa.cols();
  Eigen::VectorXd pen = Eigen::VectorXd::Constant(p, lambda);
  pen(p - 1) = 1e-10;
  auto objective = [&](const Eigen::VectorXd& beta) {
    const Eigen::VectorXd eta = xa * beta;
    double f = 0.5 * beta.cwiseProduct(pen).dot(beta);
    for (Eigen::Index i = 0; i < eta.size(); ++i) f += log1p_exp(eta(i)) - y(i) * eta(i);
    return f;
  };
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  double f = objective(beta);
  for (int iter = 0; iter < 100; ++iter) {
    const Eigen::VectorXd eta = xa * beta;
    Eigen::VectorXd prob(eta.size()), wts(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      prob(i) = sigmoid(eta(i));
      wts(i) = prob(i) * (1.0 - prob(i));
    }
    const Eigen::VectorXd grad = xa.transpose() * (prob - y) + pen.cwiseProduct(beta);
    if (grad.lpNorm<Eigen::Infinity>() < 1e-10) break;
    Eigen::MatrixXd hess = xa.transpose() * wts.asDiagonal() * xa;
    hess.diagonal() += pen;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    double t = 1.0;
    Eigen::VectorXd next = beta - step;
    double fn = objective(next);
    for (int halve = 0; halve < 40 && !(fn <= f); ++halve) {
      t *= 0.5;
      next = beta - t * step;
      fn = objective(next);
    }
    if (!(fn <= f)) break;
    const double moved = (next - beta).lpNorm<Eigen::Infinity>();
    beta = next;
    f = fn;
    if (moved < 1e-12) break;
  }
  return beta;
}

struct TreeBuilder {
  const Matrix& x;
  const std::vector<double>& y;  // standardized target or label
  bool classify;
  std::size_t classes;
  std::size_t min_leaf;
  std::size_t max_depth;
  std::size_t split_features;
  prior::Rng& rng;
  Tree tree;

  std::vector<double> leaf_value(const std::vector<std::size_t>& rows) const {
    if (!classify) {
      double s = 0.0;
      for (std::size_t r : rows) s += y[r];
      return {s / static_cast<double>(rows.size())};
    }
    std::vector<double> dist(classes, 0.0);
    for (std::size_t r : rows) dist[static_cast<std::size_t>(y[r])] += 1.0;
    for (double& v : dist) v /= static_cast<double>(rows.size());
    return dist;
  }

  bool pure(const std::vector<std::size_t>& rows) const {
    for (std::size_t r : rows) {
      if (y[r] != y[rows.front()]) return false;
    }
    return true;
  }

  // Equal scores go to the lower feature index; thresholds are visited in
  // ascending order, so the lowest threshold wins within a feature.
  static bool better_split(double score, std::size_t f, double best_score, int best_feature) {
    return score > best_score || (score == best_score && static_cast<int>(f) < best_feature);
  }

  int build(std::vector<std::size_t> rows, std::size_t depth) {
    const int id = static_cast<int>(tree.size());
    tree.push_back({});
    tree[id].value = leaf_value(rows);
    if (rows.size() < 2 * min_leaf || depth >= max_depth || pure(rows)) return id;

    const std::size_t d = x.dim(1), n = rows.size();
    std::vector<std::size_t> features(d);
    std::iota(features.begin(), features.end(), 0);
    std::shuffle(features.begin(), features.end(), rng);

    int best_feature = -1;
    double best_score = -std::numeric_limits<double>::infinity(), best_threshold = 0.0;
    std::size_t examined = 0;
    std::vector<std::pair<double, std::size_t>> order(n);
    for (std::size_t f : features) {
      if (examined >= split_features && best_feature >= 0) break;
      for (std::size_t i = 0; i < n; ++i) order[i] = {x.at(rows[i], f), rows[i]};
      std::sort(order.begin(), order.end());
      if (order.front().first == order.back().first) continue;  // constant here, keep looking
      ++examined;
      if (classify) {
        std::vector<double> left(classes, 0.0), right(classes, 0.0);
        for (const auto& [v, r] : order) right[static_cast<std::size_t>(y[r])] += 1.0;
        double sl = 0.0, sr = 0.0;
        for (double c : right) sr += c * c;
        for (std::size_t i = 0; i + 1 < n; ++i) {
          const auto c = static_cast<std::size_t>(y[order[i].second]);
          sl += 2.0 * left[c] + 1.0;
          sr -= 2.0 * right[c] - 1.0;
          left[c] += 1.0;
          right[c] -= 1.0;
          const std::size_t nl = i + 1, nr = n - nl;
          if (order[i].first == order[i + 1].first || nl < min_leaf || nr < min_leaf) continue;
          // Gini decrease up to constants.
          const double score = sl / static_cast<double>(nl) + sr / static_cast<double>(nr);
          if (better_split(score, f, best_score, best_feature)) {
            best_score = score;
            best_feature = static_cast<int>(f);
            best_threshold = 0.5 * (order[i].first + order[i + 1].first);
          }
        }
      } else {
        double total = 0.0;
        for (const auto& [v, r] : order) total += y[r];
        double sl = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i) {
          sl += y[order[i].second];
          const std::size_t nl = i + 1, nr = n - nl;
          if (order[i].first == order[i + 1].first || nl < min_leaf || nr < min_leaf) continue;
          // Variance reduction up to constants.
          const double sr = total - sl;
          const double score = sl * sl / static_cast<double>(nl) + sr * sr / static_cast<double>(nr);
          if (better_split(score, f, best_score, best_feature)) {
            best_score = score;
            best_feature = static_cast<int>(f);
            best_threshold = 0.5 * (order[i].first + order[i + 1].first);
          }
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> left_rows, right_rows;
    for (std::size_t r : rows) {
      (x.at(r, static_cast<std::size_t>(best_feature)) <= best_threshold ? left_rows : right_rows).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    const int l = build(std::move(left_rows), depth + 1);
    const int r = build(std::move(right_rows), depth + 1);
    tree[id].feature = best_feature;
    tree[id].threshold = best_threshold;
    tree[id].left = l;
    tree[id].right = r;
    return id;
  }
};

}  // namespace

const char* baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::kRidge: return "ridge";
    case BaselineKind::kLogistic: return "logistic";
    case BaselineKind::kKnn: return "knn";
    case BaselineKind::kRandomForest: return "random_forest";
  }
  return "?";
}

BaselineKind parse_baseline(const std::string& name) {
  for (BaselineKind k : {BaselineKind::kRidge, BaselineKind::kLogistic, BaselineKind::kKnn,
                         BaselineKind::kRandomForest}) {
    if (name == baseline_name(k)) return k;
  }
  throw ParseError("unknown baseline '" + name + "'");
}

void BaselineSpec::validate() const {
  if (!(ridge_lambda > 0.0)) throw PreconditionError("ridge lambda must be positive");
  if (!(logistic_lambda > 0.0)) throw PreconditionError("logistic lambda must be positive");
  if (knn_k < 1) throw PreconditionError("knn k must be at least 1");
  if (n_trees < 1) throw PreconditionError("forest needs at least one tree");
  if (min_leaf < 1) throw PreconditionError("min_leaf must be at least 1");
  if (split_features && *split_features < 1) throw PreconditionError("split_features must be at least 1");
}

nlohmann::json BaselineSpec::to_json() const {
  auto opt = [](const std::optional<std::size_t>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"kind", baseline_name(kind)},       {"ridge_lambda", ridge_lambda}, {"logistic_lambda", logistic_lambda},
          {"knn_k", knn_k},                    {"n_trees", n_trees},           {"min_leaf", min_leaf},
          {"max_depth", opt(max_depth)},       {"split_features", opt(split_features)},
          {"bootstrap", bootstrap}};
}

BaselineSpec BaselineSpec::from_json(const nlohmann::json& j) {
  BaselineSpec s;
  try {
    if (j.contains("kind")) s.kind = parse_baseline(j.at("kind").get<std::string>());
    s.ridge_lambda = j.value("ridge_lambda", s.ridge_lambda);
    s.logistic_lambda = j.value("logistic_lambda", s.logistic_lambda);
    s.knn_k = j.value("knn_k", s.knn_k);
    s.n_trees = j.value("n_trees", s.n_trees);
    s.min_leaf = j.value("min_leaf", s.min_leaf);
    if (j.contains("max_depth") && !j.at("max_depth").is_null()) s.max_depth = j.at("max_depth").get<std::size_t>();
    if (j.contains("split_features") && !j.at("split_features").is_null()) {
      s.split_features = j.at("split_features").get<std::size_t>();
    }
    s.bootstrap = j.value("bootstrap", s.bootstrap);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("baseline spec: ") + e.what());
  }
  s.validate();
  return s;
}

const std::vector<double>& tree_leaf(const Tree& tree, const double* x) {
  std::size_t at = 0;
  while (tree[at].feature >= 0) {
    const TreeNode& node = tree[at];
    at = static_cast<std::size_t>(x[node.feature] <= node.threshold ? node.left : node.right);
  }
  return tree[at].value;
}

Ridge::Ridge(const BaselineSpec& spec, const Matrix& x_train, const std::vector<double>& y_train) {
  check_training(x_train, y_train);
  scaler_ = predictor::preprocess_fit(x_train);
  const std::vector<double> z = standardized_targets(scaler_, y_train);
  const Matrix xs = predictor::preprocess_apply(scaler_, x_train);
  const auto x = as_eigen(xs);
  // Owned copy: Eigen's own storage is aligned, so reductions sum in a fixed
  // order whatever address the std::vector landed at.
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(z.data(), static_cast<Eigen::Index>(z.size()));
  const Eigen::RowVectorXd xbar = x.colwise().mean();
  const double ybar = y.mean();
  const Eigen::MatrixXd xc = x.rowwise() - xbar;
  const Eigen::VectorXd yc = y.array() - ybar;
  Eigen::MatrixXd a = xc.transpose() * xc;
  a.diagonal().array() += spec.ridge_lambda;
  const Eigen::VectorXd rhs = xc.transpose() * yc;
  const Eigen::VectorXd w = a.ldlt().solve(rhs);
  residual_ = (a * w - rhs).lpNorm<Eigen::Infinity>();
  w_.assign(w.data(), w.data() + w.size());
  b_ = ybar - xbar.dot(w);
}

BaselinePrediction Ridge::predict(const Matrix& x_test) const {
  const Matrix xs = predictor::preprocess_apply(scaler_, x_test);
  BaselinePrediction out;
  for (std::size_t r = 0; r < xs.dim(0); ++r) {
    double z = b_;
    for (std::size_t c = 0; c < w_.size(); ++c) z += w_[c] * xs.at(r, c);
    out.point.push_back(predictor::inverse_target(scaler_, z));
  }
  return out;
}

Logistic::Logistic(const BaselineSpec& spec, const Matrix& x_train, const std::vector<double>& y_train) {
  check_training(x_train, y_train);
  classes_ = count_classes(y_train);
  scaler_ = predictor::preprocess_fit(x_train);
  const Matrix xs = predictor::preprocess_apply(scaler_, x_train);
  const auto n = static_cast<Eigen::Index>(xs.dim(0)), d = static_cast<Eigen::Index>(xs.dim(1));
  MatrixXd xa(n, d + 1);
  xa.leftCols(d) = as_eigen(xs);
  xa.col(d).setOnes();
  const std::size_t models = classes_ == 2 ? 1 : classes_;
  for (std::size_t k = 0; k < models; ++k) {
    const double positive = classes_ == 2 ? 1.0 : static_cast<double>(k);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y(i) = y_train[static_cast<std::size_t>(i)] == positive ? 1.0 : 0.0;
    const Eigen::VectorXd beta = fit_binary_logistic(xa, y, spec.logistic_lambda);
    w_.emplace_back(beta.data(), beta.data() + d);
    b_.push_back(beta(d));
  }
}

BaselinePrediction Logistic::predict(const Matrix& x_test) const {
  const Matrix xs = predictor::preprocess_apply(scaler_, x_test);
  BaselinePrediction out;
  out.kind = model::TaskKind::kClassification;
  for (std::size_t r = 0; r < xs.dim(0); ++r) {
    std::vector<double> score(w_.size());
    for (std::size_t k = 0; k < w_.size(); ++k) {
      double eta = b_[k];
      for (std::size_t c = 0; c < w_[k].size(); ++c) eta += w_[k][c] * xs.at(r, c);
      score[k] = sigmoid(eta);
    }
    if (classes_ == 2) {
      out.probs.push_back({1.0 - score[0], score[0]});
    } else {
      const double total = std::accumulate(score.begin(), score.end(), 0.0);
      for (double& s : score) s = total > 0.0 ? s / total : 1.0 / static_cast<double>(classes_);
      out.probs.push_back(score);
    }
  }
  finish_classification(out);
  return out;
}

Knn::Knn(const BaselineSpec& spec, const Matrix& x_train, const std::vector<double>& y_train, model::TaskKind kind)
    : kind_(kind) {
  check_training(x_train, y_train);
  scaler_ = predictor::preprocess_fit(x_train);
  x_ = predictor::preprocess_apply(scaler_, x_train);
  k_ = std::min(spec.knn_k, x_train.dim(0));
  if (kind == model::TaskKind::kRegression) {
    y_ = standardized_targets(scaler_, y_train);
  } else {
    classes_ = count_classes(y_train);
    y_ = y_train;
  }
}

BaselinePrediction Knn::predict(const Matrix& x_test) const {
  const Matrix xs = predictor::preprocess_apply(scaler_, x_test);
  const std::size_t n = x_.dim(0), d = x_.dim(1);
  BaselinePrediction out;
  out.kind = kind_;
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t q = 0; q < xs.dim(0); ++q) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = xs.at(q, c) - x_.at(i, c);
        s += t * t;
      }
      dist[i] = {s, i};  // ties go to the lower training index
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_), dist.end());
    if (kind_ == model::TaskKind::kRegression) {
      double s = 0.0;
      for (std::size_t j = 0; j < k_; ++j) s += y_[dist[j].second];
      out.point.push_back(predictor::inverse_target(scaler_, s / static_cast<double>(k_)));
    } else {
      std::vector<double> votes(classes_, 0.0);
      for (std::size_t j = 0; j < k_; ++j) votes[static_cast<std::size_t>(y_[dist[j].second])] += 1.0;
      for (double& v : votes) v /= static_cast<double>(k_);
      out.probs.push_back(std::move(votes));
    }
  }
  if (kind_ == model::TaskKind::kClassification) finish_classification(out);
  return out;
}

RandomForest::RandomForest(const BaselineSpec& spec, const Matrix& x_train, const std::vector<double>& y_train,
                           model::TaskKind kind, std::uint64_t seed)
    : kind_(kind) {
  check_training(x_train, y_train);
  scaler_ = predictor::preprocess_fit(x_train);
  const Matrix xs = predictor::preprocess_apply(scaler_, x_train);
  const bool classify = kind == model::TaskKind::kClassification;
  std::vector<double> y;
  if (classify) {
    classes_ = count_classes(y_train);
    y = y_train;
  } else {
    y = standardized_targets(scaler_, y_train);
  }
  const std::size_t n = xs.dim(0), d = xs.dim(1);
  const std::size_t m = spec.split_features.value_or(
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(d))))));

  std::vector<double> oob_sum(n, 0.0);
  std::vector<std::size_t> oob_count(n, 0);
  for (std::size_t t = 0; t < spec.n_trees; ++t) {
    prior::Rng rng = prior::task_rng(seed, t);
    std::vector<std::size_t> rows(n);
    std::vector<bool> in_bag(n, !spec.bootstrap);
    if (spec.bootstrap) {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t& r : rows) {
        r = pick(rng);
        in_bag[r] = true;
      }
    } else {
      std::iota(rows.begin(), rows.end(), 0);
    }
    TreeBuilder builder{xs, y, classify, classes_, spec.min_leaf,
                        spec.max_depth.value_or(std::numeric_limits<std::size_t>::max()),
                        std::min(m, d), rng, {}};
    builder.build(std::move(rows), 0);
    trees_.push_back(std::move(builder.tree));
    if (!classify) {
      for (std::size_t r = 0; r < n; ++r) {
        if (in_bag[r]) continue;
        oob_sum[r] += tree_leaf(trees_.back(), xs.ptr() + r * d)[0];
        ++oob_count[r];
      }
    }
  }

  oob_r2_ = std::numeric_limits<double>::quiet_NaN();
  if (!classify && spec.bootstrap) {
    double mean = 0.0;
    std::size_t covered = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (oob_count[r] == 0) continue;
      mean += y[r];
      ++covered;
    }
    if (covered >= 2) {
      mean /= static_cast<double>(covered);
      double ss_res = 0.0, ss_tot = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        if (oob_count[r] == 0) continue;
        const double pred = oob_sum[r] / static_cast<double>(oob_count[r]);
        ss_res += (y[r] - pred) * (y[r] - pred);
        ss_tot += (y[r] - mean) * (y[r] - mean);
      }
      if (ss_tot > 0.0) oob_r2_ = 1.0 - ss_res / ss_tot;
    }
  }
}

RandomForest::RandomForest(predictor::Scaler scaler, model::TaskKind kind, std::size_t classes,
                           std::vector<Tree> trees)
    : scaler_(std::move(scaler)), kind_(kind), classes_(classes), trees_(std::move(trees)),
      oob_r2_(std::numeric_limits<double>::quiet_NaN()) {
  if (trees_.empty()) throw PreconditionError("forest needs at least one tree");
}

BaselinePrediction RandomForest::predict(const Matrix& x_test) const {
  const Matrix xs = predictor::preprocess_apply(scaler_, x_test);
  const std::size_t d = xs.dim(1);
  const auto n_trees = static_cast<double>(trees_.size());
  BaselinePrediction out;
  out.kind = kind_;
  for (std::size_t r = 0; r < xs.dim(0); ++r) {
    const double* row = xs.ptr() + r * d;
    if (kind_ == model::TaskKind::kRegression) {
      double s = 0.0;
      for (const Tree& t : trees_) s += tree_leaf(t, row)[0];
      out.point.push_back(predictor::inverse_target(scaler_, s / n_trees));
    } else {
      std::vector<double> p(classes_, 0.0);
      for (const Tree& t : trees_) {
        const std::vector<double>& leaf = tree_leaf(t, row);
        for (std::size_t c = 0; c < classes_; ++c) p[c] += leaf[c];
      }
      for (double& v : p) v /= n_trees;
      out.probs.push_back(std::move(p));
    }
  }
  if (kind_ == model::TaskKind::kClassification) finish_classification(out);
  return out;
}

std::unique_ptr<FittedBaseline> baseline_fit(const BaselineSpec& spec, const Matrix& x_train,
                                             const std::vector<double>& y_train, model::TaskKind kind,
                                             std::uint64_t seed) {
  spec.validate();
  const bool regression = kind == model::TaskKind::kRegression;
  switch (spec.kind) {
    case BaselineKind::kRidge:
      if (!regression) throw PreconditionError("ridge takes regression tasks; use logistic for classification");
      return std::make_unique<Ridge>(spec, x_train, y_train);
    case BaselineKind::kLogistic:
      if (regression) throw PreconditionError("logistic takes classification tasks; use ridge for regression");
      return std::make_unique<Logistic>(spec, x_train, y_train);
    case BaselineKind::kKnn:
      return std::make_unique<Knn>(spec, x_train, y_train, kind);
    case BaselineKind::kRandomForest:
      return std::make_unique<RandomForest>(spec, x_train, y_train, kind, seed);
  }
  throw PreconditionError("unknown baseline kind");
}

}  // namespace pfnf::baselines
