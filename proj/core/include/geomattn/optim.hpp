#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "geomattn/tensor.hpp"

namespace geomattn {

enum class Schedule { multistep, warmup_cosine };

Schedule parse_schedule(const std::string& name);
std::string to_string(Schedule s);

struct OptimConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  /// AdamW-style decay applied to the weights instead of added to the gradient.
  bool decoupled_weight_decay = false;
  /// Whether batch-norm scales and shifts are decayed.
  bool decay_norm_params = true;
  double margin = 0.5;
  std::size_t epochs = 80;
  Schedule schedule = Schedule::multistep;
  std::vector<std::size_t> milestones{20, 40, 60};
  double step_factor = 0.1;
  std::size_t warmup_epochs = 10;
  std::size_t cosine_end_epoch = 100;
  double min_lr = 1e-7;

  void validate() const;
};

/// lr0 * factor^(number of milestones <= epoch).
double lr_multistep(std::size_t epoch, const OptimConfig& cfg);

/// Linear 0 -> lr0 on [0, warmup), cosine lr0 -> min_lr on [warmup, cosine_end], then linear
/// min_lr -> 0 at `epochs`.
double lr_warmup_cosine(double epoch, const OptimConfig& cfg);

double learning_rate(std::size_t epoch, const OptimConfig& cfg);

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One bias-corrected Adam update of `theta` in place at step t (1-based).
void adam_update(std::span<double> theta, std::span<const double> grad, AdamMoments& moments, std::size_t t,
                 double lr, const OptimConfig& cfg, bool apply_decay);

/// Adam over named parameters. Parameters without an accumulated gradient are skipped.
class Adam {
 public:
  explicit Adam(OptimConfig config);

  /// Validates every gradient first; a non-finite entry throws NumericError naming the parameter
  /// and leaves all parameters untouched.
  void step(const std::vector<NamedTensor>& params, double lr);

  std::size_t steps() const { return t_; }
  const OptimConfig& config() const { return config_; }
  const std::map<std::string, AdamMoments>& moments() const { return moments_; }

 private:
  bool decays(const std::string& name) const;

  OptimConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, AdamMoments> moments_;
};

}  // namespace geomattn
