#include <cmath>

#include "care/errors.hpp"
#include "care/nn.hpp"
#include "care/schedule.hpp"
#include "doctest.h"

using namespace care;
using namespace care::sched;

namespace {

double gap(const nn::ParamList& a, const nn::ParamList& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) {
      acc += std::pow(static_cast<double>(a[i].tensor.data()[j]) - b[i].tensor.data()[j], 2);
    }
  }
  return std::sqrt(acc);
}

nn::ParamList head_params(nn::MlpHead& h, const std::string& root) {
  nn::ParamList p;
  nn::collect(h, root, p);
  return p;
}

}  // namespace

TEST_CASE("base learning rate scales with batch size") {
  CHECK(base_lr_for(256) == 0.05);
  CHECK(base_lr_for(1024) == 0.2);
  CHECK(base_lr_for(128) == 0.025);
  CHECK_THROWS_AS(base_lr_for(0), ConfigError);
}

TEST_CASE("lr schedule endpoints and continuity") {
  const LrSchedule s{0.1, 10, 100};
  s.validate();
  CHECK(lr_at(s, 0) == 1e-6);
  CHECK(lr_at(s, 10) == 0.1);
  CHECK(std::abs(lr_at(s, 100)) < 1e-18);
  CHECK(std::abs(lr_at(s, 9) - 0.1) < 0.011);
  CHECK(lr_at(s, 55) == doctest::Approx(0.05));
  for (std::size_t t = 10; t < 100; ++t) CHECK(lr_at(s, t + 1) <= lr_at(s, t));
  for (std::size_t t = 0; t < 10; ++t) CHECK(lr_at(s, t + 1) > lr_at(s, t));
  CHECK_THROWS_AS(lr_at(s, 101), ContractError);
  CHECK_THROWS_AS((LrSchedule{0.1, 100, 100}.validate()), ConfigError);
}

TEST_CASE("tau schedule") {
  const TauSchedule s{0.99, 1000};
  CHECK(std::abs(tau_at(s, 0) - 0.99) < 1e-12);
  CHECK(std::abs(tau_at(s, 1000) - 1.0) < 1e-12);
  CHECK(std::abs(tau_at(s, 500) - 0.995) < 1e-12);
  for (std::size_t t = 0; t < 1000; ++t) CHECK(tau_at(s, t + 1) >= tau_at(s, t));
  CHECK_THROWS_AS(tau_at(s, 1001), ContractError);
  CHECK_THROWS_AS((TauSchedule{1.5, 10}.validate()), ConfigError);
}

TEST_CASE("ema update arithmetic") {
  nn::ParamList online{{"o.w", Tensor({3}, 2.0F), true}};
  nn::ParamList momentum{{"m.w", Tensor({3}, 0.0F), true}};
  ema_update(online, momentum, 0.5);
  for (float v : momentum[0].tensor.data()) CHECK(v == 1.0F);
  ema_update(online, momentum, 1.0);
  for (float v : momentum[0].tensor.data()) CHECK(v == 1.0F);
  ema_update(online, momentum, 0.0);
  for (float v : momentum[0].tensor.data()) CHECK(v == 2.0F);
}

TEST_CASE("ema update over a head converges geometrically") {
  nn::MlpHead o = nn::init_head({}, 1), m = nn::init_head({}, 2);
  const auto po = head_params(o, "online"), pm = head_params(m, "momentum");
  std::vector<const float*> storage;
  for (const auto& p : pm) storage.push_back(p.tensor.data().data());
  double prev = gap(po, pm);
  for (int step = 0; step < 5; ++step) {
    ema_update(po, pm, 0.9);
    const double now = gap(po, pm);
    CHECK(now == doctest::Approx(0.9 * prev).epsilon(1e-4));
    prev = now;
  }
  for (std::size_t i = 0; i < pm.size(); ++i) CHECK(pm[i].tensor.data().data() == storage[i]);
}

TEST_CASE("ema update rejects mismatched trees") {
  nn::MlpHead a = nn::init_head({}, 1), b = nn::init_head({128, 128, 64}, 2);
  CHECK_THROWS_AS(ema_update(head_params(a, "x"), head_params(b, "y"), 0.9), StructuralError);
  auto pa = head_params(a, "x");
  auto short_list = pa;
  short_list.pop_back();
  CHECK_THROWS_AS(ema_update(pa, short_list, 0.9), StructuralError);
  auto renamed = head_params(a, "y");
  renamed[0].name = "y.other";
  CHECK_THROWS_AS(ema_update(pa, renamed, 0.9), StructuralError);
}
