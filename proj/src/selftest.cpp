#include "care/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "care/gradcheck.hpp"
#include "care/objective.hpp"
#include "care/ops.hpp"
#include "care/rng.hpp"
#include "care/schedule.hpp"
#include "care/train.hpp"

namespace care::selftest {

namespace {

Tensor normal_tensor(SeededRng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(scale * rng.normal());
  return t;
}

// Names of entries under `root` whose gradient buffer has a nonzero value.
std::vector<std::string> with_gradient(const nn::ParamList& params, const std::string& root) {
  std::vector<std::string> names;
  for (const auto& p : params) {
    if (!root.empty() && p.name.rfind(root + ".", 0) != 0) continue;
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    if (std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0F; })) names.push_back(p.name);
  }
  return names;
}

void clear_all(const nn::ParamList& params) {
  for (auto p : params) p.tensor.clear_grad();
}

}  // namespace

Outcome gradient_suite(int configs, std::uint64_t seed) {
  const auto results = check::tensor_op_suite(configs, seed);
  std::size_t failed = 0;
  double worst = 0.0;
  std::string worst_name, failures;
  for (const auto& r : results) {
    if (r.rel_error >= worst) {
      worst = r.rel_error;
      worst_name = r.name;
    }
    if (!r.passed) {
      ++failed;
      if (failed <= 5) failures += " " + r.name;
    }
  }
  std::ostringstream os;
  os << results.size() << " checks, worst rel err " << worst << " (" << worst_name << ")";
  if (failed > 0) os << ", " << failed << " failed:" << failures;
  return {failed == 0 && !results.empty(), os.str()};
}

Outcome loss_contracts(int pairs, std::uint64_t seed) {
  SeededRng rng(seed);
  double lo = 4.0, hi = 0.0, same_err = 0.0, neg_err = 0.0;
  for (int i = 0; i < pairs; ++i) {
    const std::size_t d = 1 + rng.below(64);
    const double sa = std::exp(rng.uniform(-3.0, 3.0)), sb = std::exp(rng.uniform(-3.0, 3.0));
    const Tensor a = normal_tensor(rng, {1, d}, sa), b = normal_tensor(rng, {1, d}, sb);
    for (const double v : {ssl::loss_c(a, b).item(), ssl::loss_t(b, a).item()}) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    same_err = std::max(same_err, std::abs(static_cast<double>(ssl::loss_c(a, a).item())));
    neg_err = std::max(neg_err, std::abs(ssl::loss_t(a, scale(a, -1.0F)).item() - 4.0));
  }
  std::ostringstream os;
  os << pairs << " pairs, range [" << lo << ", " << hi << "], identical " << same_err << ", negated |l-4| "
     << neg_err;
  const bool ok = lo >= -1e-6 && hi <= 4.0 + 1e-6 && same_err <= 1e-6 && neg_err <= 1e-6;
  return {ok, os.str()};
}

Outcome schedule_exactness() {
  const std::size_t T = 1000, warmup = 100;
  const double base = sched::base_lr_for(256);
  const sched::LrSchedule lr{base, warmup, T};
  const sched::TauSchedule tau{0.99, T};
  std::ostringstream os;
  bool ok = true;
  auto expect = [&](const char* what, double got, double want, double tol) {
    const bool pass = std::abs(got - want) <= tol;
    if (!pass) os << what << "=" << got << " (want " << want << ") ";
    ok = ok && pass;
  };
  expect("tau(0)", sched::tau_at(tau, 0), 0.99, 1e-12);
  expect("tau(T)", sched::tau_at(tau, T), 1.0, 1e-12);
  expect("tau(T/2)", sched::tau_at(tau, T / 2), 0.995, 1e-12);
  expect("lr(0)", sched::lr_at(lr, 0), 1e-6, 0.0);
  expect("lr(warmup)", sched::lr_at(lr, warmup), base, 0.0);
  expect("base_lr(1024)", sched::base_lr_for(1024), 0.2, 0.0);
  if (ok) os << "tau 0.99/0.995/1, lr 1e-6 then " << base << ", base_lr(1024)=0.2";
  return {ok, os.str()};
}

Outcome attention_rows(std::size_t depth_lo, std::size_t depth_hi, std::uint64_t seed) {
  SeededRng rng(seed);
  double worst = 0.0;
  std::size_t rows = 0;
  bool ok = true;
  for (const attn::PosKind kind :
       {attn::PosKind::none, attn::PosKind::sincos_abs, attn::PosKind::learn_abs, attn::PosKind::learn_rel}) {
    for (std::size_t n = depth_lo; n <= depth_hi; ++n) {
      attn::TransformerConfig cfg;
      cfg.n_blocks = n;
      cfg.pos = kind;
      const attn::Transformer t = attn::init_transformer(cfg, rng.next_u64());
      const Tensor fm = normal_tensor(rng, {2, cfg.channels, cfg.grid_h, cfg.grid_w});
      attn::AttentionTrace trace;
      const Tensor out = attn::transformer_forward(t, fm, &trace);
      ok = ok && trace.size() == n && all_finite(out);
      for (const Tensor& a : trace) {
        const std::size_t len = a.dim(2);
        for (std::size_t r = 0; r < a.numel() / len; ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < len; ++j) s += a.data()[r * len + j];
          worst = std::max(worst, std::abs(s - 1.0));
          ++rows;
        }
      }
    }
  }
  std::ostringstream os;
  os << rows << " rows over 4 encodings x depths " << depth_lo << ".." << depth_hi << ", max |sum-1| " << worst;
  return {ok && rows > 0 && worst <= 1e-6, os.str()};
}

Outcome update_partition(const Config& config, std::size_t batch, std::uint64_t seed) {
  train::DualStreamParams params = train::init_dual_stream(config, seed);
  train::TrainState state = train::make_train_state(config, 1);
  const auto images = data::synth_shapes(batch, seed);
  std::vector<std::size_t> idx(batch);
  for (std::size_t i = 0; i < batch; ++i) idx[i] = i;
  data::AugmentConfig aug = config.augment;
  aug.out_resolution = config.encoder.input_resolution;
  const auto [v1, v2] = train::make_batch(images, idx, aug, seed, 0);

  auto grads_from = [&](auto pick) {
    {
      Tape tape;
      TapeScope scope(tape);
      backward(pick(train::forward_losses(params, state, v1, v2)));
    }
  };
  const nn::ParamList online = params.online_params();
  std::ostringstream os;
  bool ok = true;

  grads_from([](const ssl::LossTensors& l) { return l.l_t; });
  const auto lt_enc = with_gradient(online, "encoder1");
  const bool lt_reaches_t = !with_gradient(online, "transformer1").empty();
  clear_all(params.all_params());
  grads_from([](const ssl::LossTensors& l) { return l.l_att; });
  const auto latt_t = with_gradient(online, "transformer1");
  const bool latt_reaches_enc = !with_gradient(online, "encoder1").empty();
  clear_all(params.all_params());
  if (!lt_enc.empty()) os << "dL_t reaches " << lt_enc.front() << "; ";
  if (!latt_t.empty()) os << "dL_att reaches " << latt_t.front() << "; ";
  if (!lt_reaches_t || !latt_reaches_enc) os << "expected gradient paths missing; ";
  ok = lt_enc.empty() && latt_t.empty() && lt_reaches_t && latt_reaches_enc;

  // Check the momentum buffers just before the optimizer consumes the online ones.
  grads_from([](const ssl::LossTensors& l) { return l.l_total; });
  const auto momentum_grads = with_gradient(params.momentum_params(), "");
  std::size_t online_groups = 0;
  for (const char* g : {"encoder1", "projector1", "predictor1", "transformer1", "projector2", "predictor2"})
    online_groups += !with_gradient(online, g).empty();
  clear_all(params.all_params());
  train::train_step(state, params, v1, v2);
  std::size_t momentum_buffers = 0;
  for (const auto& p : params.momentum_params()) momentum_buffers += p.tensor.has_grad();
  if (!momentum_grads.empty()) os << "momentum gradient in " << momentum_grads.front() << "; ";
  ok = ok && momentum_grads.empty() && momentum_buffers == 0 && online_groups == 6;
  os << online_groups << "/6 online groups receive gradients, " << momentum_buffers
     << " momentum buffers after step, batch " << batch;
  return {ok, os.str()};
}

}  // namespace care::selftest
