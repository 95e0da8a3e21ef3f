#include "pfnf/prior/prior.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "pfnf/error.hpp"

namespace pfnf::prior {

namespace {

constexpr std::size_t kPilotRows = 256;
constexpr int kMaxScmRejections = 1000;
constexpr int kMaxDegenerateRedraws = 100;
constexpr double kMinVariance = 1e-12;

double log_uniform(double lo, double hi, Rng& rng) {
  if (lo == hi) return lo;
  return std::exp(std::uniform_real_distribution<double>(std::log(lo), std::log(hi))(rng));
}

std::size_t uniform_index(std::size_t lo, std::size_t hi, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Mean and population std; std falls back to 1 for (near) constant columns.
std::pair<double, double> moments(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / n);
  return {mean, sd > std::sqrt(kMinVariance) ? sd : 1.0};
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Builds a task from a row generator returning the d features followed by
// the continuous target.
template <typename DrawRow>
SyntheticTask build_task(DrawRow&& draw_row, std::size_t d, std::size_t n_train, std::size_t n_test,
                         model::TaskSpec task, Rng& rng) {
  if (n_train < 2 || n_test < 1) throw PreconditionError("sample_task needs n_train >= 2 and n_test >= 1");
  if (task.kind == model::TaskKind::kClassification && (task.num_classes < 2 || n_train < task.num_classes)) {
    throw PreconditionError("classification needs 2 <= K <= n_train");
  }
  const std::size_t n = n_train + n_test;
  std::vector<double> x(n * d), t(n);
  for (int attempt = 0; attempt < kMaxDegenerateRedraws; ++attempt) {
    for (std::size_t r = 0; r < n; ++r) {
      const std::vector<double> row = draw_row(rng);
      std::copy(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(d), x.begin() + static_cast<std::ptrdiff_t>(r * d));
      t[r] = row[d];
    }
    const std::vector<double> t_train(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(n_train));
    const double t_mean = std::accumulate(t_train.begin(), t_train.end(), 0.0) / static_cast<double>(n_train);
    double t_var = 0.0;
    for (double v : t_train) t_var += (v - t_mean) * (v - t_mean);
    t_var /= static_cast<double>(n_train);
    if (!(t_var >= kMinVariance) || !std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); })) {
      continue;
    }

    SyntheticTask out;
    out.task = task;
    out.x_train = nn::Tensor<double>({n_train, d});
    out.x_test = nn::Tensor<double>({n_test, d});
    for (std::size_t c = 0; c < d; ++c) {
      std::vector<double> col(n_train);
      for (std::size_t r = 0; r < n_train; ++r) col[r] = x[r * d + c];
      const auto [mean, sd] = moments(col);
      for (std::size_t r = 0; r < n; ++r) {
        const double z = (x[r * d + c] - mean) / sd;
        if (r < n_train) {
          out.x_train.at(r, c) = z;
        } else {
          out.x_test.at(r - n_train, c) = z;
        }
      }
    }

    if (task.kind == model::TaskKind::kRegression) {
      const double sd = std::sqrt(t_var);
      for (std::size_t r = 0; r < n; ++r) {
        const double z = (t[r] - t_mean) / sd;
        (r < n_train ? out.y_train : out.y_test).push_back(z);
      }
      return out;
    }

    // Quantile binning by rank on the train rows: class c holds ranks
    // [c n / K, (c + 1) n / K), so class sizes differ by at most one.
    const std::size_t k = task.num_classes;
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return t[a] < t[b]; });
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    out.y_train.assign(n_train, 0.0);
    std::vector<double> thresholds;
    for (std::size_t c = 1; c < k; ++c) {
      const std::size_t at = c * n_train / k;
      thresholds.push_back(0.5 * (t[order[at - 1]] + t[order[at]]));
    }
    for (std::size_t rank = 0; rank < n_train; ++rank) {
      out.y_train[order[rank]] = static_cast<double>(perm[rank * k / n_train]);
    }
    for (std::size_t r = n_train; r < n; ++r) {
      const auto cls = static_cast<std::size_t>(
          std::upper_bound(thresholds.begin(), thresholds.end(), t[r]) - thresholds.begin());
      out.y_test.push_back(static_cast<double>(perm[cls]));
    }
    return out;
  }
  throw DegenerateTaskError("target variance below 1e-12 in " + std::to_string(kMaxDegenerateRedraws) +
                            " consecutive draws");
}

}  // namespace

const char* edge_function_name(EdgeFunction f) {
  switch (f) {
    case EdgeFunction::kLinear: return "linear";
    case EdgeFunction::kTanh: return "tanh";
    case EdgeFunction::kSin: return "sin";
    case EdgeFunction::kAbs: return "abs";
    case EdgeFunction::kStep: return "step";
  }
  return "?";
}

EdgeFunction parse_edge_function(const std::string& name) {
  for (EdgeFunction f : {EdgeFunction::kLinear, EdgeFunction::kTanh, EdgeFunction::kSin, EdgeFunction::kAbs,
                         EdgeFunction::kStep}) {
    if (name == edge_function_name(f)) return f;
  }
  throw ParseError("unknown edge function '" + name + "'");
}

double apply_edge(EdgeFunction f, double x) {
  switch (f) {
    case EdgeFunction::kLinear: return x;
    case EdgeFunction::kTanh: return std::tanh(x);
    case EdgeFunction::kSin: return std::sin(x);
    case EdgeFunction::kAbs: return std::abs(x);
    case EdgeFunction::kStep: return x > 0.0 ? 1.0 : 0.0;
  }
  return x;
}

void PriorConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw PreconditionError(std::string(name) + " must lie in [0, 1]");
  };
  if (max_features < 1) throw PreconditionError("max_features must be at least 1");
  if (max_samples < 4) throw PreconditionError("max_samples must be at least 4");
  if (min_samples < 3 || min_samples > max_samples) throw PreconditionError("min_samples must lie in [3, max_samples]");
  if (max_cells < 1) throw PreconditionError("max_cells must be positive");
  prob(scm_probability, "scm_probability");
  prob(classification_probability, "classification_probability");
  prob(edge_density_min, "edge_density_min");
  prob(edge_density_max, "edge_density_max");
  if (!(train_fraction_min > 0.0 && train_fraction_min <= train_fraction_max && train_fraction_max < 1.0)) {
    throw PreconditionError("train fraction range must be nonempty inside (0, 1)");
  }
  if (edge_density_min > edge_density_max) throw PreconditionError("edge density range is empty");
  if (!(noise_min > 0.0 && noise_min <= noise_max && std::isfinite(noise_max))) {
    throw PreconditionError("noise range must be nonempty and positive");
  }
  if (edge_functions.empty()) throw PreconditionError("edge function pool is empty");
  if (min_classes < 2 || min_classes > max_classes) throw PreconditionError("class count range must be inside [2, inf)");
  if (max_classes >= min_samples) throw PreconditionError("max_classes must be below min_samples");
  if (max_mlp_hidden < 1) throw PreconditionError("max_mlp_hidden must be positive");
}

nlohmann::json PriorConfig::to_json() const {
  std::vector<std::string> fns;
  for (EdgeFunction f : edge_functions) fns.emplace_back(edge_function_name(f));
  return {{"max_features", max_features},
          {"max_samples", max_samples},
          {"min_samples", min_samples},
          {"max_cells", max_cells},
          {"train_fraction", {train_fraction_min, train_fraction_max}},
          {"scm_probability", scm_probability},
          {"edge_density", {edge_density_min, edge_density_max}},
          {"max_hidden_nodes", max_hidden_nodes},
          {"noise_scale", {noise_min, noise_max}},
          {"edge_functions", fns},
          {"classification_probability", classification_probability},
          {"classes", {min_classes, max_classes}},
          {"max_mlp_hidden", max_mlp_hidden}};
}

PriorConfig PriorConfig::from_json(const nlohmann::json& j) {
  PriorConfig c;
  c.max_features = j.value("max_features", c.max_features);
  c.max_samples = j.value("max_samples", c.max_samples);
  c.min_samples = j.value("min_samples", c.min_samples);
  c.max_cells = j.value("max_cells", c.max_cells);
  auto range = [&](const char* key, auto& lo, auto& hi) {
    if (!j.contains(key)) return;
    lo = j.at(key).at(0).get<std::remove_reference_t<decltype(lo)>>();
    hi = j.at(key).at(1).get<std::remove_reference_t<decltype(hi)>>();
  };
  range("train_fraction", c.train_fraction_min, c.train_fraction_max);
  c.scm_probability = j.value("scm_probability", c.scm_probability);
  range("edge_density", c.edge_density_min, c.edge_density_max);
  c.max_hidden_nodes = j.value("max_hidden_nodes", c.max_hidden_nodes);
  range("noise_scale", c.noise_min, c.noise_max);
  if (j.contains("edge_functions")) {
    c.edge_functions.clear();
    const nlohmann::json& fns = j.at("edge_functions");
    if (fns.is_string()) {
      c.edge_functions.push_back(parse_edge_function(fns.get<std::string>()));
    } else {
      for (const auto& name : fns) c.edge_functions.push_back(parse_edge_function(name.get<std::string>()));
    }
  }
  c.classification_probability = j.value("classification_probability", c.classification_probability);
  range("classes", c.min_classes, c.max_classes);
  c.max_mlp_hidden = j.value("max_mlp_hidden", c.max_mlp_hidden);
  c.validate();
  return c;
}

void ScmInstance::validate() const {
  if (node_count == 0 || parents.size() != node_count || noise_scale.size() != node_count ||
      offset.size() != node_count || scale.size() != node_count) {
    throw PreconditionError("SCM arrays do not match node_count");
  }
  for (std::size_t j = 0; j < node_count; ++j) {
    for (const ScmEdge& e : parents[j]) {
      if (e.parent >= j) throw PreconditionError("SCM edge does not respect the topological order");
    }
  }
  if (feature_nodes.empty() || target_node >= node_count) throw PreconditionError("SCM needs features and a target");
  for (std::size_t f : feature_nodes) {
    if (f >= node_count) throw PreconditionError("feature node out of range");
    if (f == target_node) throw PreconditionError("target node is also a feature");
  }
}

std::vector<double> ScmInstance::sample_nodes(Rng& rng) const {
  std::normal_distribution<double> n01;
  std::vector<double> z(node_count);
  for (std::size_t j = 0; j < node_count; ++j) {
    double raw = 0.0;
    for (const ScmEdge& e : parents[j]) raw += e.weight * apply_edge(e.fn, z[e.parent]);
    raw += noise_scale[j] * n01(rng);
    z[j] = (raw - offset[j]) / scale[j];
  }
  return z;
}

double FunctionInstance::evaluate(const double* x) const {
  double out = 0.0;
  for (std::size_t h = 0; h < hidden; ++h) {
    double a = b_in[h];
    for (std::size_t i = 0; i < n_features; ++i) a += x[i] * w_in[i * hidden + h];
    out += w_out[h] * apply_edge(activation[h], a);
  }
  return (out - offset) / scale;
}

TaskDims sample_dims(const PriorConfig& config, std::size_t min_train, Rng& rng) {
  TaskDims dims;
  const double d_draw = log_uniform(1.0, static_cast<double>(config.max_features), rng);
  dims.n_features = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(d_draw)), 1, config.max_features);
  const std::size_t n_lo = std::min(std::max(config.min_samples, std::max<std::size_t>(min_train, 2) + 1),
                                    config.max_samples);
  const std::size_t n_hi = std::max(n_lo, std::min(config.max_samples, config.max_cells / (dims.n_features + 1)));
  const double n_draw = log_uniform(static_cast<double>(n_lo), static_cast<double>(n_hi), rng);
  const std::size_t n = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(n_draw)), n_lo, n_hi);
  const double frac = std::uniform_real_distribution<double>(config.train_fraction_min, config.train_fraction_max)(rng);
  dims.n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(frac * static_cast<double>(n))),
                                         std::max<std::size_t>(2, min_train), n - 1);
  dims.n_test = n - dims.n_train;
  return dims;
}

ScmInstance sample_scm(const PriorConfig& config, Rng& rng) {
  const double d_draw = log_uniform(1.0, static_cast<double>(config.max_features), rng);
  return sample_scm(config, std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(d_draw)), 1,
                                                    config.max_features),
                    rng);
}

ScmInstance sample_scm(const PriorConfig& config, std::size_t n_features, Rng& rng) {
  config.validate();
  if (n_features < 1 || n_features > config.max_features) throw PreconditionError("feature count outside [1, d_max]");
  std::normal_distribution<double> n01;
  for (int attempt = 0; attempt < kMaxScmRejections; ++attempt) {
    ScmInstance scm;
    scm.node_count = n_features + 1 + uniform_index(0, config.max_hidden_nodes, rng);
    const std::size_t nodes = scm.node_count;
    const double density = std::uniform_real_distribution<double>(config.edge_density_min, config.edge_density_max)(rng);
    std::bernoulli_distribution edge(density);
    scm.parents.assign(nodes, {});
    scm.noise_scale.assign(nodes, 1.0);
    for (std::size_t j = 0; j < nodes; ++j) {
      for (std::size_t i = 0; i < j; ++i) {
        if (!edge(rng)) continue;
        const EdgeFunction fn = config.edge_functions[uniform_index(0, config.edge_functions.size() - 1, rng)];
        scm.parents[j].push_back({i, fn, n01(rng)});
      }
      // Root nodes are the exogenous sources; the rest get small noise.
      if (!scm.parents[j].empty()) scm.noise_scale[j] = log_uniform(config.noise_min, config.noise_max, rng);
    }

    std::vector<std::size_t> with_parents;
    for (std::size_t j = 0; j < nodes; ++j) {
      if (!scm.parents[j].empty()) with_parents.push_back(j);
    }
    scm.target_node = with_parents.empty() ? uniform_index(0, nodes - 1, rng)
                                           : with_parents[uniform_index(0, with_parents.size() - 1, rng)];
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < nodes; ++j) {
      if (j != scm.target_node) others.push_back(j);
    }
    std::shuffle(others.begin(), others.end(), rng);
    scm.feature_nodes.assign(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(n_features));

    // Pilot pass, node by node, to fit the per-node normalization.
    Rng pilot(rng());
    scm.offset.assign(nodes, 0.0);
    scm.scale.assign(nodes, 1.0);
    std::vector<std::vector<double>> z(nodes, std::vector<double>(kPilotRows));
    bool finite = true;
    for (std::size_t j = 0; j < nodes && finite; ++j) {
      std::vector<double>& col = z[j];
      for (std::size_t r = 0; r < kPilotRows; ++r) {
        double raw = 0.0;
        for (const ScmEdge& e : scm.parents[j]) raw += e.weight * apply_edge(e.fn, z[e.parent][r]);
        col[r] = raw + scm.noise_scale[j] * n01(pilot);
      }
      const auto [mean, sd] = moments(col);
      if (!std::isfinite(mean) || !std::isfinite(sd)) finite = false;
      scm.offset[j] = mean;
      scm.scale[j] = sd;
      for (double& v : col) v = (v - mean) / sd;
    }
    if (!finite) continue;
    scm.validate();
    return scm;
  }
  throw DegenerateTaskError("no valid SCM after " + std::to_string(kMaxScmRejections) + " rejections");
}

FunctionInstance sample_function(const PriorConfig& config, std::size_t n_features, Rng& rng) {
  config.validate();
  if (n_features < 1 || n_features > config.max_features) throw PreconditionError("feature count outside [1, d_max]");
  std::normal_distribution<double> n01;
  FunctionInstance fn;
  fn.n_features = n_features;
  fn.hidden = uniform_index(1, config.max_mlp_hidden, rng);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(n_features));
  fn.w_in.resize(n_features * fn.hidden);
  for (double& w : fn.w_in) w = in_scale * n01(rng);
  fn.b_in.resize(fn.hidden);
  for (double& b : fn.b_in) b = 0.5 * n01(rng);
  for (std::size_t h = 0; h < fn.hidden; ++h) {
    fn.activation.push_back(config.edge_functions[uniform_index(0, config.edge_functions.size() - 1, rng)]);
  }
  fn.w_out.resize(fn.hidden);
  for (double& w : fn.w_out) w = n01(rng);
  fn.noise_scale = log_uniform(config.noise_min, config.noise_max, rng);

  Rng pilot(rng());
  std::vector<double> x(n_features), out(kPilotRows);
  for (double& o : out) {
    for (double& v : x) v = n01(pilot);
    o = fn.evaluate(x.data());
  }
  const auto [mean, sd] = moments(out);
  fn.offset = mean;
  fn.scale = sd;
  return fn;
}

SyntheticTask sample_task(const ScmInstance& scm, std::size_t n_train, std::size_t n_test, model::TaskSpec task,
                          Rng& rng) {
  scm.validate();
  const std::size_t d = scm.feature_nodes.size();
  return build_task(
      [&](Rng& r) {
        const std::vector<double> z = scm.sample_nodes(r);
        std::vector<double> row(d + 1);
        for (std::size_t i = 0; i < d; ++i) row[i] = z[scm.feature_nodes[i]];
        row[d] = z[scm.target_node];
        return row;
      },
      d, n_train, n_test, task, rng);
}

SyntheticTask sample_task(const FunctionInstance& fn, std::size_t n_train, std::size_t n_test, model::TaskSpec task,
                          Rng& rng) {
  const std::size_t d = fn.n_features;
  return build_task(
      [&](Rng& r) {
        std::normal_distribution<double> n01;
        std::vector<double> row(d + 1);
        for (std::size_t i = 0; i < d; ++i) row[i] = n01(r);
        row[d] = fn.evaluate(row.data()) + fn.noise_scale * n01(r);
        return row;
      },
      d, n_train, n_test, task, rng);
}

namespace {

model::TaskSpec sample_task_kind(const PriorConfig& config, Rng& rng) {
  if (std::bernoulli_distribution(config.classification_probability)(rng)) {
    return model::TaskSpec::classification(uniform_index(config.min_classes, config.max_classes, rng));
  }
  return model::TaskSpec::regression();
}

}  // namespace

SyntheticTask sample_function_task(const PriorConfig& config, Rng& rng) {
  config.validate();
  const model::TaskSpec task = sample_task_kind(config, rng);
  const TaskDims dims = sample_dims(config, task.num_classes, rng);
  const FunctionInstance fn = sample_function(config, dims.n_features, rng);
  return sample_task(fn, dims.n_train, dims.n_test, task, rng);
}

SyntheticTask sample_prior_task(const PriorConfig& config, Rng& rng) {
  config.validate();
  const bool use_scm = std::bernoulli_distribution(config.scm_probability)(rng);
  const model::TaskSpec task = sample_task_kind(config, rng);
  const TaskDims dims = sample_dims(config, task.num_classes, rng);
  if (use_scm) {
    const ScmInstance scm = sample_scm(config, dims.n_features, rng);
    return sample_task(scm, dims.n_train, dims.n_test, task, rng);
  }
  const FunctionInstance fn = sample_function(config, dims.n_features, rng);
  return sample_task(fn, dims.n_train, dims.n_test, task, rng);
}

Rng task_rng(std::uint64_t seed, std::uint64_t index) {
  return Rng(splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
}

ScmInstance linear_scm(std::size_t n_features, double noise, Rng& rng) {
  if (n_features < 1) throw PreconditionError("linear_scm needs at least one feature");
  std::normal_distribution<double> n01;
  ScmInstance scm;
  scm.node_count = n_features + 1;
  scm.parents.assign(scm.node_count, {});
  scm.noise_scale.assign(scm.node_count, 1.0);
  scm.offset.assign(scm.node_count, 0.0);
  scm.scale.assign(scm.node_count, 1.0);
  for (std::size_t i = 0; i < n_features; ++i) {
    scm.parents[n_features].push_back({i, EdgeFunction::kLinear, n01(rng)});
    scm.feature_nodes.push_back(i);
  }
  scm.noise_scale[n_features] = noise;
  scm.target_node = n_features;
  return scm;
}

std::uint64_t task_hash(const SyntheticTask& task) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  auto mix_values = [&](std::span<const double> v) { mix(v.data(), v.size() * sizeof(double)); };
  const std::uint64_t header[4] = {task.x_train.dim(0), task.x_test.dim(0), task.n_features(),
                                   static_cast<std::uint64_t>(task.task.kind) << 32 | task.task.num_classes};
  mix(header, sizeof(header));
  mix_values(task.x_train.data());
  mix_values(task.y_train);
  mix_values(task.x_test.data());
  mix_values(task.y_test);
  return h;
}

}  // namespace pfnf::prior
