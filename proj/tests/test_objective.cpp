#include <cmath>

#include "care/errors.hpp"
#include "care/objective.hpp"
#include "care/ops.hpp"
#include "care/rng.hpp"
#include "doctest.h"

using namespace care;
using namespace care::ssl;

namespace {

Tensor random_tensor(SeededRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Reference: per-row cosine in double.
double brute_cosine_loss(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.dim(0), d = a.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t t = 0; t < d; ++t) {
      const double x = a.at({i, t}), y = b.at({i, t});
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    total += 2.0 - 2.0 * ab / std::sqrt(aa * bb);
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("cosine loss closed forms") {
  const Tensor a({2, 2}, {1, 0, 0, 3});
  const Tensor neg({2, 2}, {-1, 0, 0, -3});
  const Tensor orth({2, 2}, {0, 5, 2, 0});
  CHECK(loss_c(a, a).item() == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(loss_c(a, neg).item() == doctest::Approx(4.0).epsilon(1e-7));
  CHECK(loss_t(a, orth).item() == doctest::Approx(2.0).epsilon(1e-7));
  CHECK_THROWS_AS(loss_c(a, Tensor({2, 2})), DegenerateError);
  CHECK_THROWS_AS(loss_c(a, Tensor({2, 3}, 1.0F)), DimensionError);
}

TEST_CASE("cosine loss range, symmetry and scale invariance") {
  SeededRng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor a = random_tensor(rng, {3, 5}), b = random_tensor(rng, {3, 5});
    const double l = loss_c(a, b).item();
    CHECK(l >= -1e-6);
    CHECK(l <= 4.0 + 1e-6);
    CHECK(std::abs(l - brute_cosine_loss(a, b)) < 1e-5);
    CHECK(std::abs(l - loss_c(b, a).item()) < 1e-6);
    CHECK(std::abs(loss_t(scale(a, 3.5F), b).item() - loss_t(a, b).item()) < 1e-5);
  }
}

TEST_CASE("attention loss values") {
  SeededRng rng(2);
  const Tensor f = random_tensor(rng, {4, 6});
  CHECK(loss_att(f, f, f, f).item() == 0.0F);

  Tensor f1 = f.clone();
  for (std::size_t i = 0; i < 4; ++i) f1.mutable_data()[i * 6 + i] += 1.0F;
  CHECK(loss_att(f1, f, f, f).item() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(loss_att(f, f, Tensor({4, 5}, 1.0F), f), DimensionError);
}

TEST_CASE("attention loss gradient flows only into f1") {
  SeededRng rng(3);
  Tensor f1 = random_tensor(rng, {1, 5}), f3 = random_tensor(rng, {1, 5});
  const Tensor f2 = random_tensor(rng, {1, 5}), f4 = random_tensor(rng, {1, 5});
  f1.set_requires_grad(true);
  f3.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    backward(loss_att(f1, f2, f3, f4));
  }
  CHECK_FALSE(f3.has_grad());
  double norm = 0.0;
  for (std::size_t t = 0; t < 5; ++t) norm += std::pow(f1.data()[t] - f3.data()[t], 2);
  norm = std::sqrt(norm);
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(f1.grad()[t] == doctest::Approx((f1.data()[t] - f3.data()[t]) / norm).epsilon(1e-6));
  }
}

TEST_CASE("normalized attention loss is scale invariant") {
  SeededRng rng(4);
  const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
  const Tensor c = random_tensor(rng, {3, 4}), d = random_tensor(rng, {3, 4});
  const float base = loss_att(a, b, c, d, true).item();
  CHECK(loss_att(scale(a, 7.0F), b, scale(c, 0.1F), d, true).item() == doctest::Approx(base).epsilon(1e-5));
  CHECK(loss_att(scale(a, 7.0F), b, c, d, false).item() != doctest::Approx(loss_att(a, b, c, d, false).item()));
}

TEST_CASE("total loss composition") {
  const LossBreakdown b = combine(1.0, 2.0, 0.5, 10.0);
  CHECK(b.l_total == 8.0);
  CHECK(b.lambda == 10.0);
  CHECK_THROWS_AS(combine(1, 1, 1, -1.0), ConfigError);

  SeededRng rng(5);
  StreamOutputs out{random_tensor(rng, {4, 6}), random_tensor(rng, {4, 6}), random_tensor(rng, {4, 6}),
                    random_tensor(rng, {4, 6})};
  const LossBreakdown dflt = loss_total(out).values();
  CHECK(dflt.lambda == 100.0);
  CHECK(dflt.l_total == doctest::Approx(dflt.l_c + dflt.l_t + 100.0 * dflt.l_att).epsilon(1e-6));
  const LossBreakdown off = loss_total(out, 0.0).values();
  CHECK(off.l_total == doctest::Approx(off.l_c + off.l_t).epsilon(1e-7));
  CHECK_THROWS_AS(loss_total(out, -0.1), ConfigError);

  // Raising any component never lowers the total.
  for (double d : {0.0, 0.1, 1.0}) {
    CHECK(combine(1.0 + d, 2.0, 0.5, 3.0).l_total >= b.l_c + 2.0 + 1.5 - 1e-12);
    CHECK(combine(1.0, 2.0, 0.5 + d, 3.0).l_total >= combine(1.0, 2.0, 0.5, 3.0).l_total);
  }
}
