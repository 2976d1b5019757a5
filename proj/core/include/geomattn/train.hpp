#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "geomattn/data.hpp"
#include "geomattn/losses.hpp"
#include "geomattn/model.hpp"
#include "geomattn/optim.hpp"

namespace geomattn {

struct TrainConfig {
  std::size_t p = 4;
  std::size_t k = 4;
  /// 0 means ceil(train images / (P*K)).
  std::size_t steps_per_epoch = 0;
  LossWeights weights;
  double label_smoothing = 0.1;
  bool mixed_triplet_pool = false;
  AugmentConfig augment;
  /// Fill erased rectangles with the training set's per-channel mean instead of augment.fill.
  bool erase_with_dataset_mean = true;
  /// Feed all four rotations of every image to the rotation head instead of one random one.
  bool rotation_all_four = false;
  std::uint64_t seed = 7;
  /// When set, a failing step writes its batch (images and labels) here before rethrowing.
  std::optional<std::filesystem::path> failure_dump;

  void validate() const;
};

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double tri_gb = 0.0;
  double sce_gb = 0.0;
  double tri_ab = 0.0;
  double sce_ab = 0.0;
  double rot = 0.0;
  double total = 0.0;
};

/// One JSON object without a trailing newline.
std::string to_json_line(const StepLog& log);

struct EpochLog {
  std::size_t epoch = 0;
  std::vector<StepLog> steps;
  double mean_total() const;
};

/// Owns the optimizer state and the sampling RNG; the model is updated in place.
class Trainer {
 public:
  Trainer(ReidModel& model, const Dataset& train, TrainConfig config, OptimConfig optim);

  using StepSink = std::function<void(const StepLog&)>;
  EpochLog train_epoch(std::size_t epoch, const StepSink& sink = {});

  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  const LabelMap& labels() const { return labels_; }
  const Adam& optimizer() const { return adam_; }

 private:
  StepLog train_step(std::size_t epoch, std::size_t step, double lr);

  ReidModel& model_;
  const Dataset& train_;
  TrainConfig config_;
  OptimConfig optim_;
  LabelMap labels_;
  Adam adam_;
  std::mt19937_64 rng_;
  std::size_t steps_per_epoch_ = 0;
};

/// Gradient-free train-mode passes over P*K batches so that eval-mode batch norm has running
/// statistics. Used for models that have not been trained.
void calibrate_batch_norm(ReidModel& model, const Dataset& data, std::size_t batches, std::size_t p,
                          std::size_t k, std::uint64_t seed);

/// Stacks the images of `samples[indices]` into [n,3,H,W].
Tensor stack_batch(const Dataset& samples, std::span<const std::size_t> indices);

}  // namespace geomattn
