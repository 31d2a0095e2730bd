#include "care/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "care/errors.hpp"
#include "care/ops.hpp"
#include "care/optim.hpp"
#include "care/rng.hpp"

namespace care::train {

namespace {

constexpr double kSgdMomentum = 0.9;

// Sub-seed streams derived from the run seed.
enum SeedStream : std::uint64_t { kInitSeed = 1, kShuffleSeed = 2, kAugmentSeed = 3 };

void freeze(nn::ParamList params) {
  for (auto& p : params) p.tensor.set_requires_grad(false);
}

struct LossesAndOutputs {
  ssl::LossTensors losses;
  std::vector<std::pair<const char*, Tensor>> watched;
};

LossesAndOutputs compute_losses(DualStreamParams& params, const TrainState& state, const Tensor& v1,
                                const Tensor& v2) {
  LossesAndOutputs r;
  StreamForward a = forward_once(params, v1, v2);
  r.watched = {{"map1", a.map1}, {"map2", a.map2}, {"f1", a.out.f1},
               {"f2", a.out.f2}, {"f3", a.out.f3}, {"f4", a.out.f4}};
  r.losses = ssl::loss_total(a.out, state.lambda, state.normalize_att);
  if (state.symmetrize) {
    StreamForward b = forward_once(params, v2, v1);
    const ssl::LossTensors lb = ssl::loss_total(b.out, state.lambda, state.normalize_att);
    auto avg = [](const Tensor& x, const Tensor& y) { return scale(add(x, y), 0.5F); };
    r.losses.l_c = avg(r.losses.l_c, lb.l_c);
    r.losses.l_t = avg(r.losses.l_t, lb.l_t);
    r.losses.l_att = avg(r.losses.l_att, lb.l_att);
    r.losses.l_total = avg(r.losses.l_total, lb.l_total);
  }
  r.watched.insert(r.watched.end(), {{"l_c", r.losses.l_c}, {"l_t", r.losses.l_t},
                                     {"l_att", r.losses.l_att}, {"l_total", r.losses.l_total}});
  return r;
}

float bilinear_sample(const std::vector<float>& src, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double wy = y - static_cast<double>(y0), wx = x - static_cast<double>(x0);
  const double top = (1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
  const double bot = (1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
  return static_cast<float>((1 - wy) * top + wy * bot);
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  SeededRng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

}  // namespace

nn::ParamList DualStreamParams::online_params() {
  nn::ParamList p;
  nn::collect(online.encoder1, "encoder1", p);
  nn::collect(online.projector1, "projector1", p);
  nn::collect(online.predictor1, "predictor1", p);
  attn::collect(online.transformer1, "transformer1", p);
  nn::collect(online.projector2, "projector2", p);
  nn::collect(online.predictor2, "predictor2", p);
  return p;
}

nn::ParamList DualStreamParams::momentum_params() {
  nn::ParamList p;
  nn::collect(momentum.encoder2, "encoder2", p);
  nn::collect(momentum.m_projector1, "m_projector1", p);
  attn::collect(momentum.m_transformer, "m_transformer", p);
  nn::collect(momentum.m_projector2, "m_projector2", p);
  return p;
}

nn::ParamList DualStreamParams::mirrored_online_params() {
  nn::ParamList p;
  nn::collect(online.encoder1, "encoder1", p);
  nn::collect(online.projector1, "projector1", p);
  attn::collect(online.transformer1, "transformer1", p);
  nn::collect(online.projector2, "projector2", p);
  return p;
}

nn::ParamList DualStreamParams::all_params() {
  nn::ParamList p = online_params();
  nn::ParamList m = momentum_params();
  p.insert(p.end(), m.begin(), m.end());
  return p;
}

DualStreamParams init_dual_stream(const Config& config, std::uint64_t seed) {
  config.validate();
  const std::uint64_t base = mix_seed(seed, kInitSeed);
  const auto s = [base](std::uint64_t k) { return mix_seed(base, k); };
  DualStreamParams d;
  d.online.encoder1 = nn::init_encoder(config.encoder, s(1));
  d.online.projector1 = nn::init_head(config.projector1_config(), s(2));
  d.online.predictor1 = nn::init_head(config.predictor_config(), s(3));
  d.online.transformer1 = attn::init_transformer(config.transformer_config(), s(4));
  d.online.projector2 = nn::init_head(config.projector2_config(), s(5));
  d.online.predictor2 = nn::init_head(config.predictor_config(), s(6));
  // Same seeds, so the momentum groups begin bitwise equal to the online ones.
  d.momentum.encoder2 = nn::init_encoder(config.encoder, s(1));
  d.momentum.m_projector1 = nn::init_head(config.projector1_config(), s(2));
  d.momentum.m_transformer = attn::init_transformer(config.transformer_config(), s(4));
  d.momentum.m_projector2 = nn::init_head(config.projector2_config(), s(5));
  freeze(d.momentum_params());
  for (const auto& p : d.online_params()) {
    if (p.trainable) d.velocity.emplace_back(p.tensor.shape());
  }
  return d;
}

StreamForward forward_once(DualStreamParams& params, const Tensor& v1, const Tensor& v2,
                           const ForwardModes& modes) {
  auto& on = params.online;
  auto& mo = params.momentum;
  StreamForward r;
  r.map1 = nn::encoder_forward(on.encoder1, v1, modes.online);
  r.pooled1 = mean_pool_2d(r.map1);
  r.out.f1 = nn::project_and_predict(on.projector1, &on.predictor1, r.pooled1, modes.online);
  const Tensor t1 = attn::transformer_forward(on.transformer1, stop_gradient(r.map1), &r.attention);
  r.out.f3 = nn::project_and_predict(on.projector2, &on.predictor2, t1, modes.online);

  r.map2 = nn::encoder_forward(mo.encoder2, v2, modes.momentum);
  r.out.f2 = nn::project_and_predict(mo.m_projector1, nullptr, mean_pool_2d(r.map2), modes.momentum);
  const Tensor t2 = attn::transformer_forward(mo.m_transformer, r.map2);
  r.out.f4 = nn::project_and_predict(mo.m_projector2, nullptr, t2, modes.momentum);
  return r;
}

TrainState make_train_state(const Config& config, std::size_t spe) {
  TrainState s;
  s.step = 0;
  s.total_steps = config.epochs * spe;
  s.lr.base_lr = config.base_lr > 0.0 ? config.base_lr : sched::base_lr_for(config.batch_size);
  s.lr.warmup_steps = config.warmup_epochs * spe;
  s.lr.total_steps = s.total_steps;
  s.lr.validate();
  s.tau.tau_base = config.tau_base;
  s.tau.total_steps = s.total_steps;
  s.tau.validate();
  s.lambda = config.lambda;
  s.normalize_att = config.normalize_att;
  s.symmetrize = config.symmetrize;
  s.weight_decay = config.weight_decay;
  return s;
}

ssl::LossTensors forward_losses(DualStreamParams& params, const TrainState& state,
                                const Tensor& v1, const Tensor& v2) {
  return compute_losses(params, state, v1, v2).losses;
}

StepRecord train_step(TrainState& state, DualStreamParams& params, const Tensor& v1,
                      const Tensor& v2) {
  if (state.step >= state.total_steps) {
    throw ContractError("train_step: step " + std::to_string(state.step) + " is past the last step " +
                        std::to_string(state.total_steps));
  }
  StepRecord rec;
  rec.step = state.step;
  rec.lr = sched::lr_at(state.lr, state.step);
  rec.tau = state.forced_tau ? *state.forced_tau : sched::tau_at(state.tau, state.step);

  nn::ParamList online = params.online_params();
  {
    Tape tape;
    TapeScope scope(tape);
    LossesAndOutputs lo;
    try {
      lo = compute_losses(params, state, v1, v2);
    } catch (const NumericError& e) {
      // Debug builds check every op output and stop at the first bad one.
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(state.step));
    }
    for (const auto& [name, t] : lo.watched) {
      if (!all_finite(t)) {
        throw NumericError("non-finite values in " + std::string(name) + " at step " +
                           std::to_string(state.step) + " (lr " + std::to_string(rec.lr) + ")");
      }
    }
    rec.loss = lo.losses.values();
    backward(lo.losses.l_total);
  }

  std::size_t vi = 0;
  for (auto& p : online) {
    if (!p.trainable) continue;
    const std::span<const float> g = p.tensor.has_grad() ? p.tensor.grad() : std::span<const float>{};
    sgd_momentum_step(p.tensor, g, params.velocity.at(vi++), static_cast<float>(rec.lr),
                      static_cast<float>(kSgdMomentum), static_cast<float>(state.weight_decay));
    p.tensor.clear_grad();
  }
  sched::ema_update(params.mirrored_online_params(), params.momentum_params(), rec.tau);

  ++state.step;
  state.loss_sum += rec.loss.l_total;
  ++state.loss_count;
  return rec;
}

std::pair<Tensor, Tensor> make_batch(std::span<const data::ImageRecord> images,
                                     std::span<const std::size_t> indices,
                                     const data::AugmentConfig& augment, std::uint64_t seed,
                                     std::size_t step) {
  std::vector<data::ImageRecord> first, second;
  first.reserve(indices.size());
  second.reserve(indices.size());
  const std::uint64_t step_seed = mix_seed(mix_seed(seed, kAugmentSeed), step);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    SeededRng rng(mix_seed(step_seed, j));
    data::ViewPair pair = data::make_view_pair(images[indices[j]], augment, rng);
    first.push_back(std::move(pair.first));
    second.push_back(std::move(pair.second));
  }
  return {data::stack_images(first), data::stack_images(second)};
}

std::size_t steps_per_epoch(std::size_t dataset_size, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  return (dataset_size + batch_size - 1) / batch_size;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch,
                                                    std::uint64_t seed, std::size_t epoch) {
  if (n < 2) throw DataError("pretraining needs at least two images");
  const auto perm = permutation(n, mix_seed(mix_seed(seed, kShuffleSeed), epoch));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (out.back().size() == 1) out.back().push_back(perm.front());
  return out;
}

std::string metrics_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.12g,%.9g,%.9g,%.9g,%.9g", r.step, r.lr, r.tau, r.loss.l_c,
                r.loss.l_t, r.loss.l_att, r.loss.l_total);
  return buf;
}

PretrainResult pretrain(const Config& config, const std::vector<data::ImageRecord>& images,
                        const std::string& metrics_path, const ProgressFn& progress) {
  config.validate();
  const std::size_t spe = steps_per_epoch(images.size(), config.batch_size);
  PretrainResult result;
  result.params = init_dual_stream(config, config.seed);
  TrainState state = make_train_state(config, spe);
  data::AugmentConfig augment = config.augment;
  augment.out_resolution = config.encoder.input_resolution;

  std::ofstream metrics;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot open metrics file " + metrics_path);
    metrics << kMetricsHeader << '\n';
  }
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(images.size(), config.batch_size, config.seed, epoch)) {
      const auto [v1, v2] = make_batch(images, batch, augment, config.seed, state.step);
      const StepRecord rec = train_step(state, result.params, v1, v2);
      result.records.push_back(rec);
      if (metrics.is_open()) metrics << metrics_row(rec) << '\n';
      if (progress) progress(rec);
    }
  }
  if (metrics.is_open()) {
    metrics.flush();
    if (!metrics) throw IoError("write failed: " + metrics_path);
  }
  result.checkpoint = make_checkpoint(result.params, config, state.step);
  return result;
}

PretrainResult pretrain(const Config& config, const std::string& metrics_path,
                        const ProgressFn& progress) {
  return pretrain(config, data::load_dataset(config.dataset), metrics_path, progress);
}

io::Checkpoint make_checkpoint(DualStreamParams& params, const Config& config, std::size_t step) {
  io::Checkpoint ckpt;
  for (const auto& p : params.all_params()) ckpt.entries.push_back({p.name, p.tensor.detach()});
  ckpt.meta.step = step;
  ckpt.meta.config_hash = config_hash(config);
  ckpt.meta.exported = "encoder1";
  ckpt.meta.config_text = config.canonical_text();
  return ckpt;
}

void restore(nn::ParamList params, const io::Checkpoint& ckpt) {
  for (auto& p : params) {
    const Tensor* src = ckpt.find(p.name);
    if (src == nullptr) throw FormatError("checkpoint has no entry " + p.name);
    if (src->shape() != p.tensor.shape()) {
      throw FormatError("checkpoint entry " + p.name + " has shape " + shape_str(src->shape()) +
                        ", expected " + shape_str(p.tensor.shape()));
    }
    std::copy(src->data().begin(), src->data().end(), p.tensor.mutable_data().begin());
  }
}

nn::Encoder load_exported_encoder(const io::Checkpoint& ckpt) {
  if (ckpt.meta.config_text.empty()) throw FormatError("checkpoint carries no configuration");
  const Config config = parse_config(ckpt.meta.config_text);
  nn::Encoder enc = nn::init_encoder(config.encoder, 0);
  nn::ParamList p;
  nn::collect(enc, ckpt.meta.exported, p);
  restore(p, ckpt);
  freeze(p);
  return enc;
}

Tensor encode(nn::Encoder& encoder, std::span<const data::ImageRecord> images, std::size_t batch) {
  if (images.empty()) throw DataError("encode: no images");
  const std::size_t c = encoder.config.feature_channels();
  Tensor out({images.size(), c});
  auto dst = out.mutable_data();
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    const Tensor pooled = mean_pool_2d(
        nn::encoder_forward(encoder, data::stack_images(images.subspan(start, end - start)), nn::ForwardMode::eval()));
    std::copy(pooled.data().begin(), pooled.data().end(), dst.begin() + static_cast<std::ptrdiff_t>(start * c));
  }
  return out;
}

double embedding_variance(const Tensor& features) {
  const std::size_t n = features.dim(0), d = features.dim(1);
  std::vector<double> mean(d, 0.0), sq(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t t = 0; t < d; ++t) norm += std::pow(features.data()[i * d + t], 2);
    norm = std::max(std::sqrt(norm), 1e-12);
    for (std::size_t t = 0; t < d; ++t) {
      const double v = features.data()[i * d + t] / norm;
      mean[t] += v;
      sq[t] += v * v;
    }
  }
  double total = 0.0;
  for (std::size_t t = 0; t < d; ++t) {
    const double m = mean[t] / static_cast<double>(n);
    total += sq[t] / static_cast<double>(n) - m * m;
  }
  return total / static_cast<double>(d);
}

ProbeResult probe_features(const Tensor& features, std::span<const int> labels,
                           std::span<const std::size_t> train_rows,
                           std::span<const std::size_t> test_rows, std::size_t classes,
                           const ProbeConfig& config) {
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (labels.size() != n) throw DimensionError("probe: label count differs from feature rows");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw DataError("probe: label " + std::to_string(labels[i]) + " of row " + std::to_string(i) +
                      " is outside [0, " + std::to_string(classes) + ")");
    }
  }
  if (train_rows.empty()) throw DataError("probe: empty training split");

  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t r : train_rows)
    for (std::size_t t = 0; t < d; ++t) mu[t] += features.data()[r * d + t];
  for (double& m : mu) m /= static_cast<double>(train_rows.size());
  for (std::size_t r : train_rows)
    for (std::size_t t = 0; t < d; ++t) sd[t] += std::pow(features.data()[r * d + t] - mu[t], 2);
  for (double& s : sd) {
    s = std::sqrt(s / static_cast<double>(train_rows.size()));
    if (s < 1e-8) s = 1.0;
  }
  auto rows_tensor = [&](std::span<const std::size_t> rows) {
    Tensor x({rows.size(), d});
    auto dst = x.mutable_data();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t t = 0; t < d; ++t)
        dst[i * d + t] = static_cast<float>((features.data()[rows[i] * d + t] - mu[t]) / sd[t]);
    return x;
  };

  Tensor w({d, classes}), b({classes});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  Tensor vw({d, classes}), vb({classes});
  const std::size_t spe = (train_rows.size() + config.batch - 1) / config.batch;
  const std::size_t total = spe * config.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto perm = permutation(train_rows.size(), mix_seed(config.seed, epoch));
    for (std::size_t start = 0; start < perm.size(); start += config.batch) {
      const std::size_t end = std::min(perm.size(), start + config.batch);
      std::vector<std::size_t> rows;
      std::vector<int> y;
      for (std::size_t k = start; k < end; ++k) {
        rows.push_back(train_rows[perm[k]]);
        y.push_back(labels[train_rows[perm[k]]]);
      }
      const Tensor x = rows_tensor(rows);
      {
        Tape tape;
        TapeScope scope(tape);
        backward(cross_entropy(add_bias(matmul(x, w), b), y));
      }
      const double lr = config.lr * (std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)) + 1.0) / 2.0;
      sgd_momentum_step(w, w.grad(), vw, static_cast<float>(lr), static_cast<float>(config.momentum));
      sgd_momentum_step(b, b.grad(), vb, static_cast<float>(lr), static_cast<float>(config.momentum));
      w.clear_grad();
      b.clear_grad();
      ++step;
    }
  }

  auto accuracy = [&](std::span<const std::size_t> rows) {
    if (rows.empty()) return 0.0;
    const Tensor logits = add_bias(matmul(rows_tensor(rows), w), b);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const float* row = logits.data().data() + i * classes;
      const auto pred = static_cast<int>(std::max_element(row, row + classes) - row);
      if (pred == labels[rows[i]]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(rows.size());
  };
  return {accuracy(train_rows), accuracy(test_rows), train_rows.size(), test_rows.size()};
}

ProbeResult linear_probe(nn::Encoder& encoder, std::span<const data::ImageRecord> images,
                         const ProbeConfig& config) {
  const Tensor features = encode(encoder, images);
  std::vector<int> labels;
  int max_label = 0;
  for (const auto& img : images) {
    if (img.label < 0) throw DataError("probe: negative label");
    labels.push_back(img.label);
    max_label = std::max(max_label, img.label);
  }
  const auto perm = permutation(images.size(), mix_seed(config.seed, 0x9e37));
  const auto n_train = static_cast<std::size_t>(std::lround(config.train_fraction * static_cast<double>(images.size())));
  if (n_train == 0 || n_train >= images.size()) throw DataError("probe: split leaves an empty side");
  const std::vector<std::size_t> train_rows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<std::size_t> test_rows(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  return probe_features(features, labels, train_rows, test_rows, static_cast<std::size_t>(max_label) + 1, config);
}

ProbeConfig probe_config_from(const Config& config) {
  ProbeConfig p;
  p.epochs = config.probe_epochs;
  p.lr = config.probe_lr;
  p.batch = config.probe_batch;
  p.train_fraction = config.probe_train_fraction;
  p.seed = config.seed;
  return p;
}

Heatmap attention_map(nn::Encoder& encoder, const data::ImageRecord& image, std::ostream* warnings) {
  const data::ImageRecord* one[] = {&image};
  Tensor map = nn::encoder_forward(encoder, data::stack_images(std::span<const data::ImageRecord* const>(one)),
                                   nn::ForwardMode::eval())
                   .detach();
  map.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor pooled = mean_pool_2d(map);
    backward(sum(mul(pooled, pooled)));
  }
  const std::size_t c = map.dim(1), h = map.dim(2), w = map.dim(3), plane = h * w;
  const auto grad = map.grad();
  const auto act = map.data();
  std::vector<float> cam(plane, 0.0F);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double weight = 0.0;
    for (std::size_t p = 0; p < plane; ++p) weight += grad[ch * plane + p];
    weight /= static_cast<double>(plane);
    for (std::size_t p = 0; p < plane; ++p) cam[p] += static_cast<float>(weight * act[ch * plane + p]);
  }
  for (float& v : cam) v = std::max(v, 0.0F);
  const auto [lo, hi] = std::minmax_element(cam.begin(), cam.end());
  const float mn = *lo, range = *hi - *lo;

  Heatmap out;
  out.height = image.height;
  out.width = image.width;
  out.values.assign(out.height * out.width, 0.0F);
  if (!(range > 1e-12F * std::max(1.0F, std::abs(*hi)))) {
    out.degenerate = true;
    if (warnings != nullptr) *warnings << "warning: attention map has zero range; writing an all-zero heatmap\n";
    return out;
  }
  for (float& v : cam) v = (v - mn) / range;
  const double sy = static_cast<double>(h) / static_cast<double>(out.height);
  const double sx = static_cast<double>(w) / static_cast<double>(out.width);
  for (std::size_t r = 0; r < out.height; ++r) {
    for (std::size_t col = 0; col < out.width; ++col) {
      const float v = bilinear_sample(cam, h, w, (static_cast<double>(r) + 0.5) * sy - 0.5,
                                      (static_cast<double>(col) + 0.5) * sx - 0.5);
      out.values[r * out.width + col] = std::clamp(v, 0.0F, 1.0F);
    }
  }
  return out;
}

}  // namespace care::train
