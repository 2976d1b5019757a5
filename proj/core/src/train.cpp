#include "geomattn/train.hpp"

#include <numeric>

#include "geomattn/checkpoint.hpp"
#include "geomattn/error.hpp"
#include "geomattn/image.hpp"
#include "json.hpp"

namespace geomattn {

void TrainConfig::validate() const {
  if (p < 2) throw ConfigError("train.p must be at least 2 (triplets need negatives)");
  if (k < 2) throw ConfigError("train.k must be at least 2 (triplets need positives)");
  weights.validate();
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label smoothing must lie in [0,1)");
}

std::string to_json_line(const StepLog& s) {
  nlohmann::ordered_json j;
  j["epoch"] = s.epoch;
  j["step"] = s.step;
  j["lr"] = s.lr;
  j["L_tri_gb"] = s.tri_gb;
  j["L_sce_gb"] = s.sce_gb;
  j["L_tri_ab"] = s.tri_ab;
  j["L_sce_ab"] = s.sce_ab;
  j["L_rot"] = s.rot;
  j["total"] = s.total;
  return j.dump();
}

double EpochLog::mean_total() const {
  if (steps.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : steps) sum += s.total;
  return sum / static_cast<double>(steps.size());
}

Tensor stack_batch(const Dataset& samples, std::span<const std::size_t> indices) {
  std::vector<Tensor> images;
  images.reserve(indices.size());
  for (std::size_t i : indices) images.push_back(samples.at(i).image);
  return stack_images(images);
}

Trainer::Trainer(ReidModel& model, const Dataset& train, TrainConfig config, OptimConfig optim)
    : model_(model),
      train_(train),
      config_(std::move(config)),
      optim_(std::move(optim)),
      labels_(train),
      adam_(optim_),
      rng_(config_.seed) {
  config_.validate();
  if (labels_.size() != model_.config().num_identities) {
    throw ConfigError("model has " + std::to_string(model_.config().num_identities) +
                      " identity classes but the training set has " + std::to_string(labels_.size()));
  }
  if (labels_.size() < config_.p) {
    throw DataError("training set has " + std::to_string(labels_.size()) + " identities, P = " +
                    std::to_string(config_.p));
  }
  if (config_.erase_with_dataset_mean) config_.augment.fill = channel_mean(train_);
  const std::size_t batch = config_.p * config_.k;
  steps_per_epoch_ = config_.steps_per_epoch ? config_.steps_per_epoch : (train_.size() + batch - 1) / batch;
}

EpochLog Trainer::train_epoch(std::size_t epoch, const StepSink& sink) {
  EpochLog log;
  log.epoch = epoch;
  const double lr = learning_rate(epoch, optim_);
  for (std::size_t step = 0; step < steps_per_epoch_; ++step) {
    log.steps.push_back(train_step(epoch, step, lr));
    if (sink) sink(log.steps.back());
  }
  return log;
}

StepLog Trainer::train_step(std::size_t epoch, std::size_t step, double lr) {
  const std::vector<std::size_t> batch = pk_sample_batch(train_, config_.p, config_.k, rng_);
  std::vector<Tensor> images;
  std::vector<int> labels;
  images.reserve(batch.size());
  for (std::size_t i : batch) {
    images.push_back(augment(train_[i].image, rng_, config_.augment));
    labels.push_back(labels_(train_[i].identity));
  }
  const bool run_rotation = config_.weights.rot > 0.0;
  std::vector<Tensor> rotated;
  std::vector<int> rotation_labels;
  if (run_rotation) {
    for (std::size_t i : batch) {
      if (config_.rotation_all_four) {
        for (int r = 0; r < 4; ++r) {
          rotated.push_back(rotate_image(train_[i].image, r));
          rotation_labels.push_back(r);
        }
      } else {
        RotationSample rs = make_rotation_sample(train_[i], rng_);
        rotated.push_back(std::move(rs.image_rot));
        rotation_labels.push_back(rs.pseudo_label);
      }
    }
  }

  const std::vector<NamedTensor> params = model_.parameters();
  for (const auto& p : params) Tensor(p.tensor).clear_grad();

  try {
    const Tensor x = stack_images(images);
    ReidModel::GlobalResult global = model_.global_branch(x, Mode::train);
    std::optional<BranchOutput> attention;
    if (model_.config().attention_branch) {
      attention = model_.attention_branch(x, global.shallow, Mode::train).out;
    }
    std::optional<Tensor> rotation_logits;
    if (run_rotation) rotation_logits = model_.ssl_branch(stack_images(rotated), Mode::train);

    LossOptions options;
    options.margin = optim_.margin;
    options.label_smoothing = config_.label_smoothing;
    options.mixed_triplet_pool = config_.mixed_triplet_pool;
    LossBreakdown loss =
        overall_loss(global.out, attention, rotation_logits, labels, rotation_labels, config_.weights, options);
    loss.total.backward();
    adam_.step(params, lr);
    return {epoch, step, lr, loss.tri_gb, loss.sce_gb, loss.tri_ab, loss.sce_ab, loss.rot, loss.total.item()};
  } catch (const NumericError&) {
    if (config_.failure_dump) {
      std::vector<NamedTensor> dump{{"images", stack_images(images)}};
      std::vector<double> ids(labels.begin(), labels.end());
      dump.push_back({"labels", Tensor({ids.size()}, ids)});
      std::vector<double> idx(batch.begin(), batch.end());
      dump.push_back({"dataset_indices", Tensor({idx.size()}, idx)});
      write_container(*config_.failure_dump, dump);
    }
    throw;
  }
}

void calibrate_batch_norm(ReidModel& model, const Dataset& data, std::size_t batches, std::size_t p,
                          std::size_t k, std::uint64_t seed) {
  NoGradGuard no_grad;
  std::mt19937_64 rng(seed);
  for (std::size_t b = 0; b < batches; ++b) {
    const std::vector<std::size_t> idx = pk_sample_batch(data, p, k, rng);
    const Tensor x = stack_batch(data, idx);
    ReidModel::GlobalResult global = model.global_branch(x, Mode::train);
    if (model.config().attention_branch) model.attention_branch(x, global.shallow, Mode::train);
    std::vector<Tensor> rotated;
    for (std::size_t i : idx) rotated.push_back(make_rotation_sample(data[i], rng).image_rot);
    model.ssl_branch(stack_images(rotated), Mode::train);
  }
}

}  // namespace geomattn
