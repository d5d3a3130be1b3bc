#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "dynq/tensorcore/params.hpp"

namespace dynq {

enum class ScheduleKind { kConstant, kCosine };

// Linear warmup from warmup_start to base_lr over the first
// floor(warmup_fraction * total_steps) steps, then half-cosine decay to 0
// at total_steps.
struct LrSchedule {
  ScheduleKind kind = ScheduleKind::kCosine;
  double base_lr = 1e-3;
  double warmup_start = 1e-5;
  double warmup_fraction = 0.05;
  std::size_t total_steps = 1000;

  std::size_t warmup_steps() const;
  double lr_at(std::size_t step) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct Moments {
  Tensor m;
  Tensor v;
};

class AdamW {
 public:
  AdamW(AdamWConfig config, LrSchedule schedule) : config_(config), schedule_(schedule) {}

  /// Applies one decoupled-weight-decay update to every trainable parameter,
  /// then clears all gradients. Throws StateError naming the first trainable
  /// parameter whose gradient was never populated.
  void step(ParameterSet& params);

  std::size_t step_count() const { return step_; }
  double current_lr() const { return schedule_.lr_at(step_); }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  const AdamWConfig& config() const { return config_; }
  const LrSchedule& schedule() const { return schedule_; }

 private:
  AdamWConfig config_;
  LrSchedule schedule_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace dynq
