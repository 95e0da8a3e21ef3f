#include "pfnf/pretrain/pretrain.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "pfnf/error.hpp"
#include "pfnf/nn/checkpoint.hpp"
#include "pfnf/util/ini.hpp"

namespace pfnf::pretrain {

namespace {

constexpr std::uint64_t kTrainingStream = 0;
constexpr std::uint64_t kEvalStream = 1;

// Graphs are rebuilt per episode, so the same few hundred KB blocks get
// allocated and freed every step. Keeping them on the heap instead of
// round-tripping through mmap saves roughly a quarter of the step time.
void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

void check_compatible(const model::ModelConfig& m, const prior::PriorConfig& p) {
  if (p.max_features > m.max_features) throw PreconditionError("prior max_features exceeds the model's");
  if (p.max_samples > m.max_samples) throw PreconditionError("prior max_samples exceeds the model's");
  if (p.max_classes > m.max_classes) throw PreconditionError("prior max_classes exceeds the model's");
}

template <typename F>
auto parse_guard(F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
}

}  // namespace

void PretrainConfig::validate() const {
  if (total_steps < 1) throw PreconditionError("total_steps must be at least 1");
  if (tasks_per_batch < 1) throw PreconditionError("tasks_per_batch must be at least 1");
  if (!(adam.lr > 0.0) || !std::isfinite(adam.lr)) throw PreconditionError("learning rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
    throw PreconditionError("Adam betas must lie in [0, 1) and eps must be positive");
  }
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw PreconditionError("warmup_fraction must lie in [0, 1]");
  if (!(clip_norm > 0.0)) throw PreconditionError("clip_norm must be positive");
  if (eval_tasks < 1) throw PreconditionError("eval_tasks must be at least 1");
  prior.validate();
  model.validate();
  check_compatible(model, prior);
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"pretrain",
           {{"total_steps", total_steps},
            {"tasks_per_batch", tasks_per_batch},
            {"warmup_fraction", warmup_fraction},
            {"clip_norm", clip_norm},
            {"checkpoint_every", checkpoint_every},
            {"eval_every", eval_every},
            {"eval_tasks", eval_tasks},
            {"eval_seed", eval_seed},
            {"seed", seed}}},
          {"optimizer", {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
          {"prior", prior.to_json()},
          {"model", model.to_json()}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  return parse_guard([&] {
    PretrainConfig c;
    const nlohmann::json empty = nlohmann::json::object();
    const nlohmann::json& p = j.contains("pretrain") ? j.at("pretrain") : empty;
    c.total_steps = p.value("total_steps", c.total_steps);
    c.tasks_per_batch = p.value("tasks_per_batch", c.tasks_per_batch);
    c.warmup_fraction = p.value("warmup_fraction", c.warmup_fraction);
    c.clip_norm = p.value("clip_norm", c.clip_norm);
    c.checkpoint_every = p.value("checkpoint_every", c.checkpoint_every);
    c.eval_every = p.value("eval_every", c.eval_every);
    c.eval_tasks = p.value("eval_tasks", c.eval_tasks);
    c.eval_seed = p.value("eval_seed", c.eval_seed);
    c.seed = p.value("seed", c.seed);
    if (j.contains("optimizer")) {
      const nlohmann::json& o = j.at("optimizer");
      c.adam.lr = o.value("lr", c.adam.lr);
      c.adam.beta1 = o.value("beta1", c.adam.beta1);
      c.adam.beta2 = o.value("beta2", c.adam.beta2);
      c.adam.eps = o.value("eps", c.adam.eps);
    }
    if (j.contains("prior")) c.prior = prior::PriorConfig::from_json(j.at("prior"));
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j.at("model"));
    c.validate();
    return c;
  });
}

PretrainConfig PretrainConfig::from_file(const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    const nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParseError(path.string() + " is not valid JSON");
    return from_json(j);
  }
  return from_json(util::read_ini(path));
}

bool operator==(const PretrainConfig& a, const PretrainConfig& b) { return a.to_json() == b.to_json(); }

prior::Rng training_task_rng(std::uint64_t seed, std::uint64_t index) {
  return prior::task_rng(2 * seed + kTrainingStream, index);
}

std::vector<prior::SyntheticTask> make_eval_corpus(const prior::PriorConfig& config, std::size_t n_tasks,
                                                   std::uint64_t eval_seed) {
  std::vector<prior::SyntheticTask> corpus;
  corpus.reserve(n_tasks);
  for (std::size_t i = 0; i < n_tasks; ++i) {
    prior::Rng rng = prior::task_rng(2 * eval_seed + kEvalStream, i);
    corpus.push_back(prior::sample_prior_task(config, rng));
  }
  return corpus;
}

template <typename T>
model::Episode<T> to_episode(const prior::SyntheticTask& task) {
  model::Episode<T> ep{task.x_train.cast<T>(), {}, task.x_test.cast<T>(), task.task};
  ep.y_context.assign(task.y_train.begin(), task.y_train.end());
  return ep;
}

template model::Episode<float> to_episode(const prior::SyntheticTask&);
template model::Episode<double> to_episode(const prior::SyntheticTask&);

nlohmann::json HoldoutMetrics::to_json() const {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"mean_nll", num(mean_nll)},
          {"regression_nll", num(regression_nll)},
          {"classification_nll", num(classification_nll)},
          {"mean_rmse", num(mean_rmse)},
          {"mean_accuracy", num(mean_accuracy)},
          {"n_regression", n_regression},
          {"n_classification", n_classification}};
}

HoldoutMetrics evaluate_holdout(const model::TabularModel<float>& model,
                                const std::vector<prior::SyntheticTask>& corpus) {
  if (corpus.empty()) throw PreconditionError("evaluation corpus is empty");
  HoldoutMetrics m;
  double nll_sum = 0.0, reg_nll = 0.0, cls_nll = 0.0, rmse = 0.0, acc = 0.0;
  for (const prior::SyntheticTask& task : corpus) {
    const auto dists = model.predict(to_episode<float>(task));
    const double nll = model::nll_loss(dists, task.y_test);
    nll_sum += nll;
    if (task.task.kind == model::TaskKind::kRegression) {
      double se = 0.0;
      for (std::size_t i = 0; i < dists.size(); ++i) {
        const double r = model::expected_value(dists[i]) - task.y_test[i];
        se += r * r;
      }
      rmse += std::sqrt(se / static_cast<double>(dists.size()));
      reg_nll += nll;
      ++m.n_regression;
    } else {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < dists.size(); ++i) {
        hits += static_cast<double>(model::class_point_estimate(dists[i]).label) == task.y_test[i];
      }
      acc += static_cast<double>(hits) / static_cast<double>(dists.size());
      cls_nll += nll;
      ++m.n_classification;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const auto nr = static_cast<double>(m.n_regression), nc = static_cast<double>(m.n_classification);
  m.mean_nll = nll_sum / static_cast<double>(corpus.size());
  m.regression_nll = m.n_regression ? reg_nll / nr : nan;
  m.mean_rmse = m.n_regression ? rmse / nr : nan;
  m.classification_nll = m.n_classification ? cls_nll / nc : nan;
  m.mean_accuracy = m.n_classification ? acc / nc : nan;
  return m;
}

nlohmann::json read_metadata(const std::filesystem::path& checkpoint) {
  return nn::load_checkpoint(checkpoint).metadata;
}

std::filesystem::path timing_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".timing.json";
}

model::TabularModel<float> load_model(const std::filesystem::path& checkpoint) {
  nn::Checkpoint ckpt = nn::load_checkpoint(checkpoint);
  if (!ckpt.metadata.contains("model")) throw ParseError(checkpoint.string() + " has no model config");
  const model::ModelConfig config = parse_guard([&] { return model::ModelConfig::from_json(ckpt.metadata.at("model")); });
  const nn::ParameterSet<float> expected = model::TabularModel<float>::init_params(config, 0);
  if (expected.names() != ckpt.params.names()) {
    throw ShapeError(checkpoint.string() + ": parameter list does not match the model config");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].shape() != ckpt.params[i].shape()) {
      throw ShapeError(checkpoint.string() + ": shape mismatch for " + expected.name(i));
    }
  }
  return model::TabularModel<float>(config, std::move(ckpt.params));
}

HoldoutMetrics evaluate_holdout(const std::filesystem::path& checkpoint,
                                const std::vector<prior::SyntheticTask>& corpus) {
  const model::TabularModel<float> model = load_model(checkpoint);
  for (const prior::SyntheticTask& task : corpus) {
    if (task.n_features() > model.config().max_features ||
        task.x_train.dim(0) + task.x_test.dim(0) > model.config().max_samples ||
        (task.task.kind == model::TaskKind::kClassification && task.task.num_classes > model.config().max_classes)) {
      throw PreconditionError("evaluation corpus does not fit the checkpoint's model");
    }
  }
  return evaluate_holdout(model, corpus);
}

PretrainResult pretrain(const PretrainConfig& config, const std::filesystem::path& out,
                        const std::filesystem::path& log_path, const LogObserver& observer) {
  config.validate();
  tune_allocator();
  const auto t0 = std::chrono::steady_clock::now();

  PretrainResult result;
  result.checkpoint = out;
  result.log = log_path.empty() ? std::filesystem::path(out.string() + ".log.jsonl") : log_path;
  if (result.log.has_parent_path()) std::filesystem::create_directories(result.log.parent_path());
  std::ofstream log(result.log, std::ios::trunc);
  if (!log) throw IoError("cannot open " + result.log.string() + " for writing");

  const std::vector<prior::SyntheticTask> corpus = make_eval_corpus(config.prior, config.eval_tasks, config.eval_seed);
  model::TabularModel<float> model(config.model, model::TabularModel<float>::init_params(config.model, config.seed));
  nn::AdamState<float> adam = nn::make_adam_state<float>(model.params().tensors(), config.adam);
  const auto warmup = static_cast<std::uint64_t>(std::llround(config.warmup_fraction * static_cast<double>(config.total_steps)));
  const std::size_t n_params = model.params().size();

  auto metadata = [&](std::uint64_t step) {
    nlohmann::json m{{"format", "pfnf-model"},
                     {"model", config.model.to_json()},
                     {"pretrain", config.to_json()},
                     {"step", step},
                     {"complete", step == config.total_steps}};
    if (step == config.total_steps) {
      m["initial_eval"] = result.initial.to_json();
      m["final_eval"] = result.final.to_json();
    }
    return m;
  };
  auto save = [&](std::uint64_t step) {
    // Write then rename so an interrupted run never leaves a torn checkpoint.
    const std::filesystem::path tmp = out.string() + ".tmp";
    nn::save_checkpoint(tmp, metadata(step), model.params());
    std::error_code ec;
    std::filesystem::rename(tmp, out, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + out.string() + ": " + ec.message());
  };

  std::vector<nn::Tensor<float>> grads;
  for (std::size_t i = 0; i < n_params; ++i) grads.emplace_back(model.params()[i].shape());
  for (std::uint64_t step = 0;; ++step) {
    // Batch `step` under the parameters after `step` updates.
    for (auto& g : grads) std::fill(g.data().begin(), g.data().end(), 0.0f);
    double loss = 0.0;
    const bool last = step == config.total_steps;
    const float inv_batch = 1.0f / static_cast<float>(config.tasks_per_batch);
    try {
      for (std::size_t b = 0; b < config.tasks_per_batch; ++b) {
        prior::Rng rng = training_task_rng(config.seed, step * config.tasks_per_batch + b);
        const prior::SyntheticTask task = prior::sample_prior_task(config.prior, rng);
        const model::Episode<float> ep = to_episode<float>(task);
        const std::vector<float> targets(task.y_test.begin(), task.y_test.end());
        if (last) {
          auto built = model.build_with_loss(ep, targets);
          built.graph.forward();
          loss += static_cast<double>(built.graph.value(built.loss).item());
          continue;
        }
        auto lg = model.loss_and_grads(ep, targets);
        loss += lg.loss;
        for (std::size_t i = 0; i < n_params; ++i) {
          float* dst = grads[i].ptr();
          const float* src = lg.grads[i].ptr();
          for (std::size_t j = 0; j < grads[i].size(); ++j) dst[j] += inv_batch * src[j];
        }
      }
    } catch (const NonFiniteError& e) {
      // Graph-level checks fire before the loss is summed; name the step here.
      throw NonFiniteError("non-finite value at step " + std::to_string(step) + ": " + e.what());
    }
    loss /= static_cast<double>(config.tasks_per_batch);
    if (!std::isfinite(loss)) throw NonFiniteError("non-finite training loss at step " + std::to_string(step));

    nlohmann::json record{{"step", step}, {"loss", loss}};
    if (step == 0 || last || (config.eval_every > 0 && step % config.eval_every == 0)) {
      const HoldoutMetrics m = evaluate_holdout(model, corpus);
      record["eval_nll"] = m.mean_nll;
      if (step == 0) result.initial = m;
      if (last) result.final = m;
    }
    log << record.dump() << '\n';
    log.flush();
    if (!log) throw IoError("failed writing " + result.log.string());
    if (observer) observer(record);
    if (last) break;

    nn::clip_global_norm<float>(grads, config.clip_norm);
    nn::adam_step<float>(model.mutable_params().tensors(), grads, adam,
                         nn::warmup_lr(config.adam.lr, step + 1, warmup));
    for (const auto& p : model.params().tensors()) {
      for (float v : p.data()) {
        if (!std::isfinite(v)) throw NonFiniteError("non-finite parameter after step " + std::to_string(step));
      }
    }
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.total_steps) {
      save(step + 1);
    }
  }
  save(config.total_steps);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream timing(timing_path(out));
  timing << nlohmann::json{{"seconds", result.seconds}}.dump() << '\n';
  if (!timing) throw IoError("failed writing " + timing_path(out).string());
  return result;
}

}  // namespace pfnf::pretrain
