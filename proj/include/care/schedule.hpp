#pragma once

#include <cstddef>

#include "care/nn.hpp"

namespace care::sched {

// 0.05 per 256 samples, scaled linearly.
double base_lr_for(std::size_t batch_size);

// Linear warmup from floor_lr to base_lr, then cosine decay to zero.
struct LrSchedule {
  double base_lr = 0.05;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double floor_lr = 1e-6;

  void validate() const;
};

// Cosine ramp of the moving-average coefficient from tau_base to 1.
struct TauSchedule {
  double tau_base = 0.99;
  std::size_t total_steps = 1;

  void validate() const;
};

double lr_at(const LrSchedule& sched, std::size_t t);
double tau_at(const TauSchedule& sched, std::size_t t);

// m <- tau * m + (1 - tau) * o for every entry, buffers included. Entries are
// paired by position; names must agree after their first dotted component.
void ema_update(const nn::ParamList& online, const nn::ParamList& momentum, double tau);

}  // namespace care::sched
