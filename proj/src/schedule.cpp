#include "care/schedule.hpp"

#include <cmath>
#include <numbers>

#include "care/errors.hpp"

namespace care::sched {

namespace {

std::string_view strip_root(std::string_view name) {
  const auto dot = name.find('.');
  return dot == std::string_view::npos ? std::string_view{} : name.substr(dot);
}

void check_step(std::size_t t, std::size_t total, const char* what) {
  if (t > total) {
    throw ContractError(std::string(what) + ": step " + std::to_string(t) + " outside [0, " +
                        std::to_string(total) + "]");
  }
}

}  // namespace

double base_lr_for(std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  return 0.05 * static_cast<double>(batch_size) / 256.0;
}

void LrSchedule::validate() const {
  if (total_steps == 0 || warmup_steps >= total_steps) {
    throw ConfigError("lr schedule: need 0 <= warmup_steps < total_steps, got warmup " +
                      std::to_string(warmup_steps) + " of " + std::to_string(total_steps));
  }
  if (!(base_lr > floor_lr)) throw ConfigError("lr schedule: base_lr must exceed the warmup floor");
}

void TauSchedule::validate() const {
  if (!(tau_base >= 0.0 && tau_base <= 1.0)) {
    throw ConfigError("tau_base must lie in [0, 1], got " + std::to_string(tau_base));
  }
  if (total_steps == 0) throw ConfigError("tau schedule: total_steps must be positive");
}

double lr_at(const LrSchedule& s, std::size_t t) {
  check_step(t, s.total_steps, "lr_at");
  if (t < s.warmup_steps) {
    return s.floor_lr + (s.base_lr - s.floor_lr) * static_cast<double>(t) /
                            static_cast<double>(s.warmup_steps);
  }
  const double progress = static_cast<double>(t - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.base_lr * (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

double tau_at(const TauSchedule& s, std::size_t t) {
  check_step(t, s.total_steps, "tau_at");
  const double progress = static_cast<double>(t) / static_cast<double>(s.total_steps);
  return 1.0 - (1.0 - s.tau_base) * (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

void ema_update(const nn::ParamList& online, const nn::ParamList& momentum, double tau) {
  if (online.size() != momentum.size()) {
    throw StructuralError("ema_update: online tree has " + std::to_string(online.size()) +
                          " entries, momentum tree " + std::to_string(momentum.size()));
  }
  for (std::size_t i = 0; i < online.size(); ++i) {
    const auto& o = online[i];
    const auto& m = momentum[i];
    if (strip_root(o.name) != strip_root(m.name) || o.tensor.shape() != m.tensor.shape()) {
      throw StructuralError("ema_update: entry " + std::to_string(i) + " pairs " + o.name + " " +
                            shape_str(o.tensor.shape()) + " with " + m.name + " " +
                            shape_str(m.tensor.shape()));
    }
  }
  const double keep = tau, blend = 1.0 - tau;
  for (std::size_t i = 0; i < online.size(); ++i) {
    const auto src = online[i].tensor.data();
    Tensor dst_tensor = momentum[i].tensor;
    auto dst = dst_tensor.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) {
      dst[j] = static_cast<float>(keep * dst[j] + blend * src[j]);
    }
  }
}

}  // namespace care::sched
