#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "par/model.hpp"

namespace par::trainer {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  double learning_rate = 0.01;
  double adagrad_epsilon = 1e-8;
  std::uint64_t seed = 42;
  double l2_weight = 0.0;
  bool shuffle = true;
  std::size_t workers = 1;

  void validate() const;  // throws ValidationError
};

// Per-parameter accumulator of squared gradients; coordinatewise
// non-negative and non-decreasing.
struct AdagradState {
  std::vector<model::Tensor> accum;  // aligned with ParParams::named()

  static AdagradState zeros_like(const model::ParParams& params);
  std::vector<model::NamedTensor> named(const model::ParParams& params);
  // Tensors are not modified through the const variant.
  std::vector<model::NamedTensor> named(const model::ParParams& params) const;
};

// G += g^2;  theta -= lr * g / (sqrt(G) + eps).
void adagrad_step(std::span<const model::NamedTensor> params,
                  const model::GradSet& grads, AdagradState& state,
                  double learning_rate, double epsilon);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based, number of completed epochs
  double loss = 0;
  std::optional<double> dev_accuracy;
  std::size_t skipped = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  // by dev accuracy when a dev set is given
};

// Called after every epoch, e.g. to write checkpoints.
using EpochCallback =
    std::function<void(const EpochLog&, const model::ParParams&, const AdagradState&)>;

// Mini-batch training with per-instance gradient accumulation (variable
// lengths, no padding). Batch gradients are reduced in instance order and
// every random draw is derived from (seed, epoch, position), so the loss
// trajectory is identical for any worker count. Instances that violate
// contracts are skipped with a warning, never aborting the epoch.
TrainResult train(model::ParParams& params, const model::ParConfig& config,
                  const corpus::Vocabulary& vocab,
                  std::span<const cloze::ClozeInstance> train_set,
                  std::span<const cloze::ClozeInstance> dev_set,
                  const TrainConfig& train_config, std::size_t start_epoch = 0,
                  AdagradState* state = nullptr,
                  const EpochCallback& on_epoch = {});

std::string epoch_log_json(const EpochLog& log);

// ---------------------------------------------------------------------------
// Run configuration: one JSON object {"model": {...}, "train": {...}}
// mirroring ParConfig + TrainConfig. Unknown keys are rejected.

struct RunConfig {
  model::ParConfig model;
  TrainConfig train;
};

RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_json(const RunConfig& config);

}  // namespace par::trainer
