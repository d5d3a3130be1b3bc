#include "dynq/tensorcore/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "dynq/tensorcore/errors.hpp"

namespace dynq {

std::size_t LrSchedule::warmup_steps() const {
  if (kind == ScheduleKind::kConstant) return 0;
  return static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
}

double LrSchedule::lr_at(std::size_t step) const {
  if (kind == ScheduleKind::kConstant) return base_lr;
  const std::size_t warm = warmup_steps();
  if (step < warm) {
    return warmup_start +
           (base_lr - warmup_start) * static_cast<double>(step) / static_cast<double>(warm);
  }
  if (step >= total_steps) return 0.0;
  const double span = static_cast<double>(total_steps - warm);
  const double progress = static_cast<double>(step - warm) / span;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(ParameterSet& params) {
  for (auto& [name, p] : params) {
    if (!p.frozen && !p.grad_ready) {
      throw StateError("optimizer_step: no gradient populated for trainable parameter '" + name +
                       "'");
    }
  }
  const double lr = schedule_.lr_at(step_);
  const double t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (auto& [name, p] : params) {
    if (p.frozen) continue;
    auto it = moments_.find(name);
    if (it == moments_.end()) {
      it = moments_.emplace(name, Moments{Tensor(p.value.shape(), 0.0), Tensor(p.value.shape(), 0.0)})
               .first;
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * p.value[i]);
    }
  }
  ++step_;
  params.zero_grad();
}

}  // namespace dynq
