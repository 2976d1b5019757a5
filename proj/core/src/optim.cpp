#include "geomattn/optim.hpp"

#include <cmath>
#include <numbers>

#include "geomattn/error.hpp"

namespace geomattn {

Schedule parse_schedule(const std::string& name) {
  if (name == "multistep") return Schedule::multistep;
  if (name == "warmup_cosine") return Schedule::warmup_cosine;
  throw ConfigError("unknown schedule '" + name + "' (expected multistep or warmup_cosine)");
}

std::string to_string(Schedule s) { return s == Schedule::multistep ? "multistep" : "warmup_cosine"; }

void OptimConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("optim.lr0 must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1 must lie in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2 must lie in [0,1)");
  if (!(eps > 0.0)) throw ConfigError("optim.eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
  if (!(margin >= 0.0)) throw ConfigError("optim.margin must be non-negative");
  if (epochs == 0) throw ConfigError("optim.epochs must be positive");
  if (schedule == Schedule::warmup_cosine &&
      !(warmup_epochs < cosine_end_epoch && cosine_end_epoch <= epochs)) {
    throw ConfigError("warmup_cosine needs warmup_epochs < cosine_end_epoch <= epochs");
  }
  if (!(min_lr >= 0.0 && min_lr <= lr0)) throw ConfigError("optim.min_lr must lie in [0, lr0]");
}

double lr_multistep(std::size_t epoch, const OptimConfig& cfg) {
  double lr = cfg.lr0;
  for (std::size_t m : cfg.milestones) {
    if (m <= epoch) lr *= cfg.step_factor;
  }
  return lr;
}

double lr_warmup_cosine(double epoch, const OptimConfig& cfg) {
  const auto warm = static_cast<double>(cfg.warmup_epochs);
  const auto end = static_cast<double>(cfg.cosine_end_epoch);
  const auto total = static_cast<double>(cfg.epochs);
  if (epoch < warm) return cfg.lr0 * epoch / warm;
  if (epoch <= end) {
    const double t = (epoch - warm) / (end - warm);
    return cfg.min_lr + (cfg.lr0 - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  if (epoch >= total) return 0.0;
  return cfg.min_lr * (total - epoch) / (total - end);
}

double learning_rate(std::size_t epoch, const OptimConfig& cfg) {
  return cfg.schedule == Schedule::multistep ? lr_multistep(epoch, cfg)
                                             : lr_warmup_cosine(static_cast<double>(epoch), cfg);
}

void adam_update(std::span<double> theta, std::span<const double> grad, AdamMoments& mo, std::size_t t,
                 double lr, const OptimConfig& cfg, bool apply_decay) {
  if (grad.size() != theta.size()) throw ShapeError("adam: gradient size differs from parameter size");
  if (mo.m.size() != theta.size()) {
    mo.m.assign(theta.size(), 0.0);
    mo.v.assign(theta.size(), 0.0);
  }
  const double wd = apply_decay ? cfg.weight_decay : 0.0;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double g = grad[i];
    if (!cfg.decoupled_weight_decay) g += wd * theta[i];
    mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
    mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = mo.m[i] / c1;
    const double v_hat = mo.v[i] / c2;
    if (cfg.decoupled_weight_decay) theta[i] -= lr * wd * theta[i];
    theta[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

Adam::Adam(OptimConfig config) : config_(std::move(config)) { config_.validate(); }

bool Adam::decays(const std::string& name) const {
  if (config_.decay_norm_params) return true;
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return !(ends_with("/gamma") || ends_with("/beta"));
}

void Adam::step(const std::vector<NamedTensor>& params, double lr) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto g = p.tensor.grad_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("non-finite gradient in '" + p.name + "' at index " + std::to_string(i));
      }
    }
  }
  ++t_;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    adam_update(t.mutable_data(), t.grad_data(), moments_[p.name], t_, lr, config_, decays(p.name));
  }
}

}  // namespace geomattn
