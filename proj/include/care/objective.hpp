#pragma once

#include "care/tensor.hpp"

namespace care::ssl {

// f1, f3: online outputs (C- and T-stream); f2, f4: momentum outputs. All [b, d].
struct StreamOutputs {
  Tensor f1;
  Tensor f2;
  Tensor f3;
  Tensor f4;
};

struct LossBreakdown {
  double l_c = 0.0;
  double l_t = 0.0;
  double l_att = 0.0;
  double l_total = 0.0;
  double lambda = 0.0;
};

struct LossTensors {
  Tensor l_c;
  Tensor l_t;
  Tensor l_att;
  Tensor l_total;
  double lambda = 0.0;

  LossBreakdown values() const;
};

inline constexpr double kDefaultLambda = 100.0;

// Batch mean of 2 - 2 cos(a_i, b_i). Throws DegenerateError on a zero row.
Tensor cosine_loss(const Tensor& a, const Tensor& b);
inline Tensor loss_c(const Tensor& f1, const Tensor& f2) { return cosine_loss(f1, f2); }
inline Tensor loss_t(const Tensor& f3, const Tensor& f4) { return cosine_loss(f3, f4); }

// Batch mean of |f1 - sg(f3)| + |f2 - f4|; with normalize, every operand is
// l2-normalized first.
Tensor loss_att(const Tensor& f1, const Tensor& f2, const Tensor& f3, const Tensor& f4,
                bool normalize = false);

// l_total = l_c + l_t + lambda * l_att. Throws ConfigError for lambda < 0.
LossTensors loss_total(const StreamOutputs& out, double lambda = kDefaultLambda,
                       bool normalize_att = false);
LossBreakdown combine(double l_c, double l_t, double l_att, double lambda);

}  // namespace care::ssl
