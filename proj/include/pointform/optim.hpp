#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "pointform/error.hpp"
#include "pointform/model.hpp"

namespace pointform {

/// Linear warmup from `initial` to `peak`, then per-step cosine decay to 0 at
/// the final step.
struct LRPolicy {
  double peak = 5e-4;
  double initial = 1e-6;
  std::size_t warmup_epochs = 10;
  std::size_t total_epochs = 300;
  std::size_t steps_per_epoch = 1;
  double weight_decay = 0.05;

  static LRPolicy finetune() { return {}; }

  static LRPolicy pretrain() {
    LRPolicy p;
    p.peak = 1e-3;
    return p;
  }

  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }

  void validate() const {
    if (!(peak > 0.0)) fail(ErrorKind::Config, "lr: peak must be positive");
    if (!(initial >= 0.0)) fail(ErrorKind::Config, "lr: initial must be non-negative");
    if (steps_per_epoch == 0) fail(ErrorKind::Config, "lr: steps per epoch must be >= 1");
    if (warmup_epochs > total_epochs) fail(ErrorKind::Config, "lr: warmup longer than training");
    if (!(weight_decay >= 0.0)) fail(ErrorKind::Config, "lr: weight decay must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const LRPolicy& p) {
  j = nlohmann::json{{"peak", p.peak},
                     {"initial", p.initial},
                     {"warmup_epochs", p.warmup_epochs},
                     {"total_epochs", p.total_epochs},
                     {"steps_per_epoch", p.steps_per_epoch},
                     {"weight_decay", p.weight_decay}};
}

inline double lr_at(const LRPolicy& p, std::size_t step) {
  const std::size_t warm = p.warmup_steps();
  if (step < warm) {
    return p.initial + (p.peak - p.initial) * static_cast<double>(step) / static_cast<double>(warm);
  }
  const std::size_t total = p.total_steps();
  if (total == 0 || total - 1 <= warm) return p.peak;
  const double progress =
      std::clamp(static_cast<double>(step - warm) / static_cast<double>(total - 1 - warm), 0.0, 1.0);
  return p.peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled weight decay Adam. Moments are keyed by parameter name and
/// created on first update, so parameters unfrozen later start from zero.
class AdamW {
 public:
  struct Slot {
    std::vector<double> m, v;
    std::size_t t = 0;
  };

  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }

  /// Updates every trainable parameter that holds a gradient. Decay applies
  /// only to entries flagged for it.
  void step(ParamRegistry& params, double lr, double weight_decay) {
    const double b1 = config_.beta1, b2 = config_.beta2;
    for (auto& e : params.entries()) {
      Tensor& p = e.tensor;
      if (!p.requires_grad() || !p.has_grad()) continue;
      auto& slot = slots_[e.name];
      if (slot.m.empty()) {
        slot.m.assign(p.numel(), 0.0);
        slot.v.assign(p.numel(), 0.0);
      }
      ++slot.t;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(slot.t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(slot.t));
      const double decay = e.decay ? lr * weight_decay : 0.0;
      auto g = p.grad();
      auto w = p.mutable_values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
        const double mhat = slot.m[i] / c1, vhat = slot.v[i] / c2;
        w[i] -= decay * w[i];
        w[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

  const Slot* slot(const std::string& name) const {
    auto it = slots_.find(name);
    return it == slots_.end() ? nullptr : &it->second;
  }

 private:
  AdamWConfig config_;
  std::unordered_map<std::string, Slot> slots_;
};

}  // namespace pointform
