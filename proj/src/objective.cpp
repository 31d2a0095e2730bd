#include "care/objective.hpp"

#include "care/errors.hpp"
#include "care/ops.hpp"

namespace care::ssl {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": operands " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " must be equal [b, d] shapes");
  }
}

void check_lambda(double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative, got " + std::to_string(lambda));
}

}  // namespace

LossBreakdown LossTensors::values() const {
  return {l_c.item(), l_t.item(), l_att.item(), l_total.item(), lambda};
}

Tensor cosine_loss(const Tensor& a, const Tensor& b) {
  check_pair(a, b, "cosine loss");
  const Tensor cos = sum_last(mul(l2_normalize(a), l2_normalize(b)));
  return add_scalar(scale(mean(cos), -2.0F), 2.0F);
}

Tensor loss_att(const Tensor& f1, const Tensor& f2, const Tensor& f3, const Tensor& f4,
                bool normalize) {
  check_pair(f1, f3, "attention loss");
  check_pair(f2, f4, "attention loss");
  check_pair(f1, f2, "attention loss");
  auto prep = [normalize](const Tensor& t) { return normalize ? l2_normalize(t) : t; };
  const Tensor online = row_norm(sub(prep(f1), stop_gradient(prep(f3))));
  const Tensor momentum = row_norm(sub(prep(f2), prep(f4)));
  return mean(add(online, momentum));
}

LossTensors loss_total(const StreamOutputs& out, double lambda, bool normalize_att) {
  check_lambda(lambda);
  LossTensors l;
  l.lambda = lambda;
  l.l_c = loss_c(out.f1, out.f2);
  l.l_t = loss_t(out.f3, out.f4);
  l.l_att = loss_att(out.f1, out.f2, out.f3, out.f4, normalize_att);
  l.l_total = add(add(l.l_c, l.l_t), scale(l.l_att, static_cast<float>(lambda)));
  return l;
}

LossBreakdown combine(double l_c, double l_t, double l_att, double lambda) {
  check_lambda(lambda);
  return {l_c, l_t, l_att, l_c + l_t + lambda * l_att, lambda};
}

}  // namespace care::ssl
