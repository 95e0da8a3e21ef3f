#include "pfnf/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace pfnf::model {

using nn::NodeId;
using nn::Shape;
using nn::Tensor;

void ModelConfig::validate() const {
  if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0) {
    throw PreconditionError("embed_dim must be a positive multiple of n_heads");
  }
  if (n_blocks == 0 || mlp_hidden == 0) throw PreconditionError("n_blocks and mlp_hidden must be positive");
  if (regression_bins < 2) throw PreconditionError("regression_bins must be at least 2");
  if (!std::isfinite(bin_lower) || !std::isfinite(bin_upper) || !(bin_lower < bin_upper)) {
    throw PreconditionError("bin range must be finite with lower < upper");
  }
  if (max_classes < 2) throw PreconditionError("max_classes must be at least 2");
  if (max_features == 0 || max_samples < 2) throw PreconditionError("max_features/max_samples too small");
}

std::vector<double> ModelConfig::bin_edges() const {
  std::vector<double> edges(regression_bins + 1);
  const double width = (bin_upper - bin_lower) / static_cast<double>(regression_bins);
  for (std::size_t i = 0; i <= regression_bins; ++i) edges[i] = bin_lower + width * static_cast<double>(i);
  edges.back() = bin_upper;
  return edges;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"embed_dim", embed_dim},
          {"n_blocks", n_blocks},
          {"n_heads", n_heads},
          {"mlp_hidden", mlp_hidden},
          {"regression_bins", regression_bins},
          {"bin_range", {bin_lower, bin_upper}},
          {"max_classes", max_classes},
          {"max_features", max_features},
          {"max_samples", max_samples},
          {"activation", activation == Activation::kGelu ? "gelu" : "relu"}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.regression_bins = j.value("regression_bins", c.regression_bins);
  if (j.contains("bin_range")) {
    c.bin_lower = j.at("bin_range").at(0).get<double>();
    c.bin_upper = j.at("bin_range").at(1).get<double>();
  }
  c.max_classes = j.value("max_classes", c.max_classes);
  c.max_features = j.value("max_features", c.max_features);
  c.max_samples = j.value("max_samples", c.max_samples);
  const std::string act = j.value("activation", std::string("gelu"));
  if (act == "gelu") {
    c.activation = Activation::kGelu;
  } else if (act == "relu") {
    c.activation = Activation::kRelu;
  } else {
    throw ParseError("unknown activation '" + act + "'");
  }
  c.validate();
  return c;
}

void PredictiveDistribution::validate() const {
  if (probs.empty()) throw PreconditionError("empty predictive distribution");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw PreconditionError("probabilities must be finite and >= 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw PreconditionError("probabilities do not sum to 1");
  if (kind == TaskKind::kRegression) {
    if (bin_edges.size() != probs.size() + 1) throw PreconditionError("bin_edges/probs size mismatch");
    for (std::size_t i = 1; i < bin_edges.size(); ++i) {
      if (!(bin_edges[i] > bin_edges[i - 1])) throw PreconditionError("bin_edges not strictly increasing");
    }
  }
}

double expected_value(const PredictiveDistribution& dist) {
  double ev = 0.0;
  for (std::size_t i = 0; i < dist.probs.size(); ++i) {
    ev += dist.probs[i] * 0.5 * (dist.bin_edges[i] + dist.bin_edges[i + 1]);
  }
  return ev;
}

ClassPrediction class_point_estimate(const PredictiveDistribution& dist, double threshold) {
  if (dist.probs.size() == 2) {
    const double p1 = dist.probs[1];
    return {p1 >= threshold ? std::size_t{1} : std::size_t{0}, p1};
  }
  const auto it = std::max_element(dist.probs.begin(), dist.probs.end());
  return {static_cast<std::size_t>(it - dist.probs.begin()), *it};
}

std::size_t bin_index(const std::vector<double>& edges, double y) {
  const std::size_t bins = edges.size() - 1;
  if (!(y > edges.front())) return 0;
  if (!(y < edges.back())) return bins - 1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), y);
  return std::min(static_cast<std::size_t>(it - edges.begin()) - 1, bins - 1);
}

double nll_loss(const std::vector<PredictiveDistribution>& dists, const std::vector<double>& targets,
                double floor) {
  if (dists.size() != targets.size() || dists.empty()) {
    throw PreconditionError("nll_loss: need one target per distribution");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const auto& d = dists[i];
    std::size_t at = 0;
    if (d.kind == TaskKind::kRegression) {
      at = bin_index(d.bin_edges, targets[i]);
    } else {
      const double label = targets[i];
      if (label < 0 || label >= static_cast<double>(d.probs.size()) || label != std::floor(label)) {
        throw PreconditionError("nll_loss: class label out of range");
      }
      at = static_cast<std::size_t>(label);
    }
    const double q = d.probs[at] + floor;
    if (!(q > 0.0)) throw NonFiniteError("nll_loss: zero probability at the true outcome without a floor");
    total -= std::log(q);
  }
  return total / static_cast<double>(dists.size());
}

namespace {

std::string block_name(std::size_t b, const char* part) { return "blocks." + std::to_string(b) + "." + part; }

std::vector<std::size_t> iota_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

template <typename T>
class Builder {
 public:
  Builder(nn::Graph<T>& g, const nn::ParameterSet<T>& params, const ModelConfig& config)
      : g_(g), params_(params), config_(config) {}

  NodeId p(const std::string& name) {
    const auto idx = params_.find(name);
    if (!idx) throw PreconditionError("model parameter '" + name + "' missing");
    return g_.parameter(name, params_[*idx]);
  }

  NodeId linear(NodeId x, const std::string& prefix) {
    return g_.linear(x, p(prefix + ".w"), p(prefix + ".b"));
  }

  NodeId norm(NodeId x, const std::string& prefix) {
    return g_.layernorm(x, p(prefix + ".gamma"), p(prefix + ".beta"));
  }

  NodeId act(NodeId x) { return config_.activation == Activation::kGelu ? g_.gelu(x) : g_.relu(x); }

  // Multi-head attention for a batch of sequences. queries [B, Sq, E] attend
  // to keys/values [B, Sk, E].
  NodeId attention(NodeId q_in, NodeId kv_in, const std::string& prefix) {
    const NodeId q = linear(q_in, prefix + ".q");
    const NodeId k = linear(kv_in, prefix + ".k");
    const NodeId v = linear(kv_in, prefix + ".v");
    return linear(g_.attention(q, k, v, config_.n_heads), prefix + ".o");
  }

  nn::Graph<T>& g_;
  const nn::ParameterSet<T>& params_;
  const ModelConfig& config_;
};

}  // namespace

template <typename T>
TabularModel<T>::TabularModel(ModelConfig config, nn::ParameterSet<T> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  const nn::ParameterSet<T> reference = init_params(config_, 0);
  if (reference.names() != params_.names()) {
    throw PreconditionError("parameter set does not match the model configuration");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (reference[i].shape() != params_[i].shape()) {
      throw ShapeError("parameter '" + params_.name(i) + "' has shape " + nn::shape_string(params_[i].shape()) +
                       ", expected " + nn::shape_string(reference[i].shape()));
    }
  }
}

template <typename T>
nn::ParameterSet<T> TabularModel<T>::init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  nn::ParameterSet<T> ps;
  const std::size_t e = config.embed_dim;
  auto gaussian = [&](Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(stddev * n01(rng));
    return t;
  };
  auto add_linear = [&](const std::string& prefix, std::size_t in, std::size_t out, double gain = 1.0) {
    ps.add(prefix + ".w", gaussian({in, out}, gain / std::sqrt(static_cast<double>(in))));
    ps.add(prefix + ".b", Tensor<T>({out}));
  };
  auto add_norm = [&](const std::string& prefix) {
    ps.add(prefix + ".gamma", Tensor<T>({e}, T{1}));
    ps.add(prefix + ".beta", Tensor<T>({e}));
  };
  const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_blocks));

  ps.add("embed.feature.w", gaussian({1, e}, 1.0));
  ps.add("embed.feature.b", gaussian({e}, 0.1));
  ps.add("embed.target.w", gaussian({1, e}, 1.0));
  ps.add("embed.target.b", gaussian({e}, 0.1));
  ps.add("embed.missing", gaussian({1, e}, 1.0));
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    for (const char* axis : {"col", "row"}) {
      const std::string prefix = block_name(b, axis);
      add_norm(prefix + ".norm");
      add_linear(prefix + ".q", e, e);
      add_linear(prefix + ".k", e, e);
      add_linear(prefix + ".v", e, e);
      add_linear(prefix + ".o", e, e, residual_gain);
    }
    add_norm(block_name(b, "mlp.norm"));
    add_linear(block_name(b, "mlp.in"), e, config.mlp_hidden);
    add_linear(block_name(b, "mlp.out"), config.mlp_hidden, e, residual_gain);
  }
  add_norm("head.norm");
  add_linear("head.reg.in", e, config.mlp_hidden);
  add_linear("head.reg.out", config.mlp_hidden, config.regression_bins, 0.1);
  add_linear("head.cls.in", e, config.mlp_hidden);
  add_linear("head.cls.out", config.mlp_hidden, config.max_classes, 0.1);
  return ps;
}

template <typename T>
void TabularModel<T>::check_episode(const Episode<T>& ep) const {
  if (ep.x_context.rank() != 2 || ep.x_query.rank() != 2) throw ShapeError("episode matrices must be 2-D");
  const std::size_t n_ctx = ep.x_context.dim(0), n_q = ep.x_query.dim(0);
  const std::size_t d = ep.x_context.dim(1);
  if (ep.x_query.dim(1) != d) {
    throw ShapeError("context has " + std::to_string(d) + " columns but query has " +
                     std::to_string(ep.x_query.dim(1)));
  }
  if (n_ctx < 1) throw PreconditionError("episode needs at least one context row");
  if (n_q < 1) throw PreconditionError("episode needs at least one query row");
  if (d < 1) throw PreconditionError("episode needs at least one feature");
  if (ep.y_context.size() != n_ctx) throw ShapeError("y_context length does not match context rows");
  if (d > config_.max_features) {
    throw PreconditionError(std::to_string(d) + " features exceed max_features " +
                            std::to_string(config_.max_features));
  }
  if (n_ctx + n_q > config_.max_samples) {
    throw PreconditionError(std::to_string(n_ctx + n_q) + " rows exceed max_samples " +
                            std::to_string(config_.max_samples));
  }
  if (ep.task.kind == TaskKind::kClassification) {
    if (ep.task.num_classes < 2 || ep.task.num_classes > config_.max_classes) {
      throw PreconditionError("class count outside [2, max_classes]");
    }
    for (T y : ep.y_context) {
      if (y < 0 || y >= static_cast<T>(ep.task.num_classes) || y != std::floor(y)) {
        throw PreconditionError("context label out of range");
      }
    }
  }
}

template <typename T>
NodeId TabularModel<T>::build_grid(nn::Graph<T>& g, const Episode<T>& ep) const {
  check_episode(ep);
  Builder<T> bld(g, params_, config_);
  const std::size_t n_ctx = ep.x_context.dim(0), n_q = ep.x_query.dim(0), d = ep.x_context.dim(1);
  const std::size_t rows = n_ctx + n_q, e = config_.embed_dim;

  Tensor<T> cells({rows * d, 1});
  std::copy(ep.x_context.data().begin(), ep.x_context.data().end(), cells.data().begin());
  std::copy(ep.x_query.data().begin(), ep.x_query.data().end(), cells.data().begin() + n_ctx * d);
  const NodeId cell_in = g.input("cells", {rows * d, 1});
  g.bind(cell_in, std::move(cells));
  NodeId features = g.linear(cell_in, bld.p("embed.feature.w"), bld.p("embed.feature.b"));
  features = g.reshape(features, {rows, d, e});

  Tensor<T> labels({n_ctx, 1}, std::vector<T>(ep.y_context.begin(), ep.y_context.end()));
  const NodeId label_in = g.input("labels", {n_ctx, 1});
  g.bind(label_in, std::move(labels));
  const NodeId ctx_target = g.linear(label_in, bld.p("embed.target.w"), bld.p("embed.target.b"));
  const NodeId ones = g.constant("query_ones", Tensor<T>({n_q, 1}, T{1}));
  const NodeId query_target = g.matmul(ones, bld.p("embed.missing"));
  NodeId target = g.concat({ctx_target, query_target}, 0);
  target = g.reshape(target, {rows, 1, e});
  return g.concat({features, target}, 1);  // [rows, d + 1, e]
}

template <typename T>
typename TabularModel<T>::Built TabularModel<T>::build(const Episode<T>& ep, T temperature) const {
  Built out;
  nn::Graph<T>& g = out.graph;
  Builder<T> bld(g, params_, config_);
  const std::size_t n_ctx = ep.x_context.dim(0);
  out.grid = build_grid(g, ep);
  const std::size_t n_q = ep.x_query.dim(0), cols = ep.x_context.dim(1) + 1;
  const std::size_t rows = n_ctx + n_q, e = config_.embed_dim;

  NodeId x = out.grid;  // [rows, cols, e]
  const std::vector<std::size_t> context_rows = iota_indices(0, n_ctx);
  for (std::size_t b = 0; b < config_.n_blocks; ++b) {
    // Attention across the columns of each row.
    NodeId a = bld.norm(x, block_name(b, "col.norm"));
    x = g.add(x, bld.attention(a, a, block_name(b, "col")));
    // Attention across rows of each column; keys are context rows only.
    x = g.permute(x, {1, 0, 2});  // [cols, rows, e]
    a = bld.norm(x, block_name(b, "row.norm"));
    const NodeId kv = g.gather(a, 1, context_rows);
    x = g.add(x, bld.attention(a, kv, block_name(b, "row")));
    a = bld.norm(x, block_name(b, "mlp.norm"));
    x = g.add(x, bld.linear(bld.act(bld.linear(a, block_name(b, "mlp.in"))), block_name(b, "mlp.out")));
    x = g.permute(x, {1, 0, 2});  // back to [rows, cols, e]
  }

  NodeId target = g.gather(x, 1, {cols - 1});  // [rows, 1, e]
  target = g.reshape(target, {rows, e});
  target = g.gather(target, 0, iota_indices(n_ctx, rows));
  target = bld.norm(target, "head.norm");
  if (ep.task.kind == TaskKind::kRegression) {
    out.logits = bld.linear(bld.act(bld.linear(target, "head.reg.in")), "head.reg.out");
  } else {
    const NodeId all = bld.linear(bld.act(bld.linear(target, "head.cls.in")), "head.cls.out");
    out.logits = g.gather(all, 1, iota_indices(0, ep.task.num_classes));
  }
  out.probs = g.softmax(out.logits, temperature);
  return out;
}

template <typename T>
typename TabularModel<T>::Built TabularModel<T>::build_with_loss(const Episode<T>& ep,
                                                               const std::vector<T>& targets) const {
  Built out = build(ep);
  if (targets.size() != ep.x_query.dim(0)) throw ShapeError("need one target per query row");
  std::vector<std::size_t> idx(targets.size());
  if (ep.task.kind == TaskKind::kRegression) {
    const std::vector<double> edges = config_.bin_edges();
    for (std::size_t i = 0; i < targets.size(); ++i) idx[i] = bin_index(edges, static_cast<double>(targets[i]));
  } else {
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] < 0 || targets[i] >= static_cast<T>(ep.task.num_classes)) {
        throw PreconditionError("query label out of range");
      }
      idx[i] = static_cast<std::size_t>(targets[i]);
    }
  }
  out.loss = out.graph.nll(out.probs, std::move(idx), T(kProbabilityFloor));
  return out;
}

template <typename T>
std::vector<PredictiveDistribution> TabularModel<T>::predict(const Episode<T>& ep, T temperature) const {
  Built b = build(ep, temperature);
  b.graph.forward();
  const Tensor<T>& probs = b.graph.value(b.probs);
  const std::size_t n_q = probs.dim(0), width = probs.dim(1);
  std::vector<PredictiveDistribution> out(n_q);
  const std::vector<double> edges =
      ep.task.kind == TaskKind::kRegression ? config_.bin_edges() : std::vector<double>{};
  for (std::size_t i = 0; i < n_q; ++i) {
    auto& d = out[i];
    d.kind = ep.task.kind;
    d.probs.resize(width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      d.probs[j] = static_cast<double>(probs.at(i, j));
      total += d.probs[j];
    }
    for (double& v : d.probs) v /= total;
    d.bin_edges = edges;
  }
  return out;
}

template <typename T>
Tensor<T> TabularModel<T>::embed_table(const Episode<T>& ep) const {
  nn::Graph<T> g;
  const NodeId grid = build_grid(g, ep);
  g.forward();
  return g.value(grid);
}

template <typename T>
typename TabularModel<T>::LossAndGrads TabularModel<T>::loss_and_grads(const Episode<T>& ep,
                                                                     const std::vector<T>& targets) const {
  Built b = build_with_loss(ep, targets);
  b.graph.forward();
  b.graph.backward(b.loss);
  LossAndGrads out;
  out.loss = static_cast<double>(b.graph.value(b.loss).item());
  out.grads.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) out.grads.emplace_back(params_[i].shape());
  // Map graph parameter nodes back to declaration order.
  for (NodeId id : b.graph.parameters()) {
    const auto idx = params_.find(b.graph.name(id));
    const Tensor<T>& gr = b.graph.gradient(id);
    if (!idx || gr.empty()) continue;
    auto& dst = out.grads[*idx];
    for (std::size_t j = 0; j < gr.size(); ++j) dst[j] += gr[j];
  }
  return out;
}

template class TabularModel<float>;
template class TabularModel<double>;

}  // namespace pfnf::model
