#pragma once

#include <cstdint>
#include <string>

#include "care/config.hpp"

namespace care::selftest {

struct Outcome {
  bool passed = false;
  std::string detail;
};

// Finite-difference checks of every differentiable op at `configs` random settings.
Outcome gradient_suite(int configs, std::uint64_t seed);
// Cosine-loss range [0,4], zero on identical rows, 4 on negated rows.
Outcome loss_contracts(int pairs, std::uint64_t seed);
// Fixed endpoint and midpoint values of the lr and tau schedules.
Outcome schedule_exactness();
// Attention rows sum to one for every positional encoding and depths lo..hi.
Outcome attention_rows(std::size_t depth_lo, std::size_t depth_hi, std::uint64_t seed);
// After one step on a small batch: no momentum gradients, no L_t gradient in
// encoder1, no L_att gradient in transformer1.
Outcome update_partition(const Config& config, std::size_t batch, std::uint64_t seed);

}  // namespace care::selftest
