#include "care/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "care/ops.hpp"
#include "care/rng.hpp"

namespace care::check {

namespace {

double projected(const Tensor& out, const std::vector<double>& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += static_cast<double>(out.data()[i]) * w[i];
  return acc;
}

Tensor random_tensor(SeededRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(shape);
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor(std::move(shape), std::move(v));
}

// Values bounded away from zero, for inputs that feed a kink.
Tensor margin_tensor(SeededRng& rng, Shape shape, double margin = 0.1) {
  Tensor t = random_tensor(rng, std::move(shape), margin, 1.0);
  for (float& x : t.mutable_data()) {
    if (rng.bernoulli(0.5)) x = -x;
  }
  return t;
}

std::size_t dim_in(SeededRng& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.below(hi - lo + 1);
}

Tensor param(Tensor t) { return t.set_requires_grad(true), t; }

}  // namespace

GradCheckResult gradient_check(std::string name, const Forward& forward, std::vector<Tensor> inputs,
                               const GradCheckOptions& opt) {
  GradCheckResult result{std::move(name), 0.0, true};
  SeededRng rng(opt.seed);

  Tensor probe = forward(inputs);
  std::vector<double> weights(probe.numel());
  for (double& w : weights) w = rng.uniform(-1.0, 1.0);
  std::vector<float> wf(weights.begin(), weights.end());
  const Tensor w_tensor(probe.shape(), wf);

  for (Tensor& t : inputs) t.clear_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = forward(inputs);
    backward(sum(mul(out, w_tensor)));
  }

  double diff2 = 0.0;
  double a2 = 0.0;
  double n2 = 0.0;
  for (Tensor& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float orig = data[i];
      const auto plus = static_cast<float>(orig + opt.step);
      const auto minus = static_cast<float>(orig - opt.step);
      data[i] = plus;
      const double fp = projected(forward(inputs), weights);
      data[i] = minus;
      const double fm = projected(forward(inputs), weights);
      data[i] = orig;
      const double numeric = (fp - fm) / (static_cast<double>(plus) - static_cast<double>(minus));
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
  }
  const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
  result.rel_error = scale < 1e-9 ? std::sqrt(diff2) : std::sqrt(diff2) / scale;
  result.passed = result.rel_error < opt.tolerance;
  return result;
}

std::vector<GradCheckResult> tensor_op_suite(int configs, std::uint64_t seed) {
  std::vector<GradCheckResult> results;
  SeededRng rng(seed);
  auto run = [&](std::string name, const Forward& f, std::vector<Tensor> inputs) {
    GradCheckOptions opt;
    opt.seed = rng.next_u64();
    results.push_back(gradient_check(std::move(name), f, std::move(inputs), opt));
  };

  for (int c = 0; c < configs; ++c) {
    const std::string tag = "#" + std::to_string(c);
    {
      const std::size_t m = dim_in(rng, 1, 4), k = dim_in(rng, 1, 5), n = dim_in(rng, 1, 4);
      run("matmul" + tag, [](std::span<const Tensor> in) { return matmul(in[0], in[1]); },
          {param(random_tensor(rng, {m, k})), param(random_tensor(rng, {k, n}))});
      const std::size_t g = dim_in(rng, 1, 3);
      run("matmul_batched" + tag, [](std::span<const Tensor> in) { return matmul(in[0], in[1]); },
          {param(random_tensor(rng, {g, m, k})), param(random_tensor(rng, {g, k, n}))});
    }
    {
      const Shape s{dim_in(rng, 1, 3), dim_in(rng, 1, 4)};
      run("add_sub_mul" + tag,
          [](std::span<const Tensor> in) {
            return mul(sub(add(in[0], in[1]), scale(in[1], 0.5F)), add_scalar(in[0], 0.25F));
          },
          {param(random_tensor(rng, s)), param(random_tensor(rng, s))});
      run("add_bias" + tag, [](std::span<const Tensor> in) { return add_bias(in[0], in[1]); },
          {param(random_tensor(rng, s)), param(random_tensor(rng, {s[1]}))});
      run("relu" + tag, [](std::span<const Tensor> in) { return relu(in[0]); },
          {param(margin_tensor(rng, s))});
      run("sum_mean" + tag,
          [](std::span<const Tensor> in) { return add(sum(in[0]), scale(mean(in[0]), 3.0F)); },
          {param(random_tensor(rng, s))});
      run("sum_last" + tag, [](std::span<const Tensor> in) { return sum_last(in[0]); },
          {param(random_tensor(rng, s))});
      run("row_norm" + tag, [](std::span<const Tensor> in) { return row_norm(in[0]); },
          {param(margin_tensor(rng, s, 0.3))});
      run("l2_normalize" + tag, [](std::span<const Tensor> in) { return l2_normalize(in[0]); },
          {param(margin_tensor(rng, s, 0.3))});
      run("softmax_rows" + tag, [](std::span<const Tensor> in) { return softmax_rows(in[0]); },
          {param(random_tensor(rng, s, -2.0, 2.0))});
      std::vector<int> labels(s[0]);
      for (int& l : labels) l = static_cast<int>(rng.below(s[1]));
      run("cross_entropy" + tag,
          [labels](std::span<const Tensor> in) { return cross_entropy(in[0], labels); },
          {param(random_tensor(rng, s, -2.0, 2.0))});
    }
    {
      const Shape s{dim_in(rng, 1, 3), dim_in(rng, 1, 3), dim_in(rng, 1, 3)};
      run("permute" + tag,
          [](std::span<const Tensor> in) { return permute(in[0], {2, 0, 1}); },
          {param(random_tensor(rng, s))});
      run("transpose_reshape" + tag,
          [s](std::span<const Tensor> in) { return reshape(transpose(in[0]), {shape_numel(s)}); },
          {param(random_tensor(rng, s))});
      const Shape s2{s[0], dim_in(rng, 1, 3), s[2]};
      run("concat" + tag,
          [](std::span<const Tensor> in) { return concat(in.subspan(0, 2), 1); },
          {param(random_tensor(rng, s)), param(random_tensor(rng, s2))});
    }
    {
      const std::size_t r = dim_in(rng, 2, 5), d = dim_in(rng, 1, 3);
      std::vector<std::size_t> rows(dim_in(rng, 1, 6));
      for (auto& x : rows) x = rng.below(r);
      run("gather_rows" + tag,
          [rows](std::span<const Tensor> in) { return gather_rows(in[0], rows); },
          {param(random_tensor(rng, {r, d}))});
      // Repeated indices exercise the scatter-add.
      std::vector<std::size_t> flat(dim_in(rng, 2, 8));
      for (auto& x : flat) x = rng.below(r * d);
      run("gather" + tag,
          [flat](std::span<const Tensor> in) { return gather(in[0], flat, {flat.size()}); },
          {param(random_tensor(rng, {r, d}))});
    }
    {
      const Shape s{dim_in(rng, 1, 2), dim_in(rng, 1, 3), dim_in(rng, 1, 3), dim_in(rng, 1, 3)};
      run("mean_pool_2d" + tag, [](std::span<const Tensor> in) { return mean_pool_2d(in[0]); },
          {param(random_tensor(rng, s))});
    }
    {
      const std::size_t stride = dim_in(rng, 1, 2), pad = dim_in(rng, 0, 1);
      const std::size_t kh = dim_in(rng, 1, 3), kw = dim_in(rng, 1, 3);
      const std::size_t oh = dim_in(rng, 1, 3), ow = dim_in(rng, 1, 3);
      const std::size_t h = std::max<std::size_t>((oh - 1) * stride + kh, 2 * pad + 1) - 2 * pad;
      const std::size_t w = std::max<std::size_t>((ow - 1) * stride + kw, 2 * pad + 1) - 2 * pad;
      const std::size_t b = dim_in(rng, 1, 2), ci = dim_in(rng, 1, 3), co = dim_in(rng, 1, 3);
      // Heights where stride does not divide evenly fall back to stride 1.
      const std::size_t st = ((h + 2 * pad - kh) % stride == 0 && (w + 2 * pad - kw) % stride == 0)
                                 ? stride
                                 : 1;
      run("conv2d" + tag,
          [st, pad](std::span<const Tensor> in) {
            return conv2d(in[0], in[1], Conv2dOptions{st, pad});
          },
          {param(random_tensor(rng, {b, ci, h, w})), param(random_tensor(rng, {co, ci, kh, kw}))});
    }
    {
      // At least four samples per channel: with fewer, the normalized output is
      // nearly input-independent and the check degenerates to comparing noise.
      const std::size_t ch = dim_in(rng, 1, 3);
      const bool spatial = rng.bernoulli(0.5);
      const Shape s = spatial ? Shape{dim_in(rng, 1, 3), ch, 2, dim_in(rng, 2, 3)}
                              : Shape{dim_in(rng, 4, 6), ch};
      Tensor rm = random_tensor(rng, {ch}, -0.5, 0.5);
      Tensor rv = random_tensor(rng, {ch}, 0.5, 1.5);
      for (BnMode mode : {BnMode::train, BnMode::eval}) {
        run(std::string(mode == BnMode::train ? "batchnorm_train" : "batchnorm_eval") + tag,
            [rm, rv, mode](std::span<const Tensor> in) mutable {
              BatchNormOptions opt;
              opt.mode = mode;
              opt.update_running = false;
              return batchnorm(in[0], in[1], in[2], rm, rv, opt);
            },
            {param(random_tensor(rng, s, -2.0, 2.0)), param(random_tensor(rng, {ch}, 0.5, 1.5)),
             param(random_tensor(rng, {ch}))});
      }
    }
  }
  return results;
}

}  // namespace care::check
