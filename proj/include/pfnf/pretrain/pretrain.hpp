#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnf/model/model.hpp"
#include "pfnf/nn/adam.hpp"
#include "pfnf/prior/prior.hpp"

namespace pfnf::pretrain {

struct PretrainConfig {
  std::uint64_t total_steps = 50000;
  std::size_t tasks_per_batch = 8;
  prior::PriorConfig prior;
  model::ModelConfig model;
  nn::AdamConfig adam{.lr = 3e-4};
  double warmup_fraction = 0.05;
  double clip_norm = 1.0;
  // 0 disables the periodic write; the final checkpoint is always written.
  std::uint64_t checkpoint_every = 5000;
  std::uint64_t eval_every = 2500;
  std::size_t eval_tasks = 256;
  std::uint64_t eval_seed = 20240601;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults. Sections: pretrain, optimizer, prior, model.
  static PretrainConfig from_json(const nlohmann::json& j);
  static PretrainConfig from_file(const std::filesystem::path& path);  // .ini or .json
  friend bool operator==(const PretrainConfig&, const PretrainConfig&);
};

// Training tasks and eval tasks come from disjoint substream families, so the
// eval corpus is never trained on whatever the two seeds are.
prior::Rng training_task_rng(std::uint64_t seed, std::uint64_t index);
std::vector<prior::SyntheticTask> make_eval_corpus(const prior::PriorConfig& config, std::size_t n_tasks,
                                                   std::uint64_t eval_seed);

template <typename T>
model::Episode<T> to_episode(const prior::SyntheticTask& task);

struct HoldoutMetrics {
  double mean_nll = 0.0;             // all tasks
  double regression_nll = 0.0;
  double classification_nll = 0.0;
  double mean_rmse = 0.0;            // regression tasks, standardized units
  double mean_accuracy = 0.0;        // classification tasks
  std::size_t n_regression = 0;
  std::size_t n_classification = 0;

  nlohmann::json to_json() const;
  friend bool operator==(const HoldoutMetrics&, const HoldoutMetrics&) = default;
};

// Per-task NLL, RMSE and accuracy averaged over the corpus. Metrics for a
// kind with no tasks are NaN.
HoldoutMetrics evaluate_holdout(const model::TabularModel<float>& model,
                                const std::vector<prior::SyntheticTask>& corpus);
HoldoutMetrics evaluate_holdout(const std::filesystem::path& checkpoint,
                                const std::vector<prior::SyntheticTask>& corpus);

// Rebuilds the model stored by `pretrain` (config from the metadata).
model::TabularModel<float> load_model(const std::filesystem::path& checkpoint);
nlohmann::json read_metadata(const std::filesystem::path& checkpoint);
// Wall time of a finished run, {"seconds": ...}. Kept out of the checkpoint so
// that identical seeds still give identical checkpoint bytes.
std::filesystem::path timing_path(const std::filesystem::path& checkpoint);

struct PretrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  HoldoutMetrics initial;
  HoldoutMetrics final;
  double seconds = 0.0;
};

// Called with every log record as it is written.
using LogObserver = std::function<void(const nlohmann::json&)>;

// Record k describes the parameters after k updates: "loss" is the mean
// training NLL of batch k under them, "eval_nll" the held-out mean NLL when
// k is an eval step (0, every eval_every, and total_steps). Throws
// NonFiniteError naming the step on a non-finite loss and IoError on write
// failures.
PretrainResult pretrain(const PretrainConfig& config, const std::filesystem::path& out,
                        const std::filesystem::path& log_path = {}, const LogObserver& observer = {});

}  // namespace pfnf::pretrain
