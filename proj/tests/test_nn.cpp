#include <set>

#include "care/errors.hpp"
#include "care/nn.hpp"
#include "care/rng.hpp"
#include "doctest.h"

using namespace care;
using namespace care::nn;

namespace {

Tensor gaussian(SeededRng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.normal());
  return t;
}

bool params_equal(ParamList a, ParamList b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || !bitwise_equal(a[i].tensor, b[i].tensor)) return false;
  }
  return true;
}

// Mean of relu(z)^2; He scaling keeps this near the unit input variance.
double relu_second_moment(const Tensor& z) {
  double acc = 0.0;
  for (float v : z.data()) acc += v > 0.0F ? static_cast<double>(v) * v : 0.0;
  return acc / static_cast<double>(z.numel());
}

}  // namespace

TEST_CASE("default encoder produces a 128x4x4 map") {
  Encoder enc = init_encoder({}, 3);
  SeededRng rng(1);
  const Tensor out = encoder_forward(enc, gaussian(rng, {2, 3, 32, 32}), ForwardMode::train());
  CHECK(out.shape() == Shape{2, 128, 4, 4});
  CHECK(enc.config.feature_resolution() == 4);
  CHECK(enc.config.feature_channels() == 128);
}

TEST_CASE("encoder parameter count for the default config") {
  Encoder enc = init_encoder({}, 3);
  ParamList params;
  collect(enc, "enc", params);
  // stem 3*32*9 + BN, then per stage: 4x4 entry conv, 2x2 shortcut, three 3x3 convs, five BNs.
  const std::size_t stem = 864 + 64;
  const std::size_t stage1 = (16384 + 9216 + 4096 + 2 * 9216) + 5 * 64;
  const std::size_t stage2 = (32768 + 36864 + 8192 + 2 * 36864) + 5 * 128;
  const std::size_t stage3 = (131072 + 147456 + 32768 + 2 * 147456) + 5 * 256;
  CHECK(trainable_count(params) == stem + stage1 + stage2 + stage3);
  CHECK(trainable_count(params) == 809056);

  std::set<std::string> names;
  for (const auto& p : params) names.insert(p.name);
  CHECK(names.size() == params.size());
}

TEST_CASE("encoder rejects mismatched resolution and bad configs") {
  Encoder enc = init_encoder({}, 3);
  CHECK_THROWS_AS(encoder_forward(enc, Tensor({1, 3, 28, 28}), ForwardMode::train()), ConfigError);
  CHECK_THROWS_AS(encoder_forward(enc, Tensor({1, 1, 32, 32}), ForwardMode::train()), ConfigError);

  EncoderConfig tiny;
  tiny.input_resolution = 8;
  CHECK_THROWS_AS(init_encoder(tiny, 1), ConfigError);
  EncoderConfig zero;
  zero.stage_channels = {32, 0, 128};
  CHECK_THROWS_AS(init_encoder(zero, 1), ConfigError);
  EncoderConfig ragged;
  ragged.blocks_per_stage = {2, 2};
  CHECK_THROWS_AS(init_encoder(ragged, 1), ConfigError);
}

TEST_CASE("encoder on zero input is finite") {
  Encoder enc = init_encoder({}, 5);
  CHECK(all_finite(encoder_forward(enc, Tensor({2, 3, 32, 32}), ForwardMode::train())));
  CHECK(all_finite(encoder_forward(enc, Tensor({2, 3, 32, 32}), ForwardMode::eval())));
}

TEST_CASE("identical images give identical maps in eval mode") {
  Encoder enc = init_encoder({}, 7);
  SeededRng rng(2);
  const Tensor one = gaussian(rng, {1, 3, 32, 32});
  Tensor batch({2, 3, 32, 32});
  auto dst = batch.mutable_data();
  std::copy(one.data().begin(), one.data().end(), dst.begin());
  std::copy(one.data().begin(), one.data().end(), dst.begin() + static_cast<long>(one.numel()));
  const Tensor out = encoder_forward(enc, batch, ForwardMode::eval());
  const std::size_t half = out.numel() / 2;
  for (std::size_t i = 0; i < half; ++i) REQUIRE(out.data()[i] == out.data()[half + i]);

  const Tensor again = encoder_forward(enc, batch, ForwardMode::eval());
  CHECK(bitwise_equal(out, again));
}

TEST_CASE("init is deterministic in the seed") {
  Encoder a = init_encoder({}, 11), b = init_encoder({}, 11), c = init_encoder({}, 12);
  ParamList pa, pb, pc;
  collect(a, "e", pa);
  collect(b, "e", pb);
  collect(c, "e", pc);
  CHECK(params_equal(pa, pb));
  CHECK_FALSE(params_equal(pa, pc));

  MlpHead h1 = init_head({}, 4), h2 = init_head({}, 4);
  ParamList q1, q2;
  collect(h1, "h", q1);
  collect(h2, "h", q2);
  CHECK(params_equal(q1, q2));
}

TEST_CASE("heads start with unit BN scale and zero shift and bias") {
  MlpHead head = init_head({}, 9);
  for (float v : head.bn.gamma.data()) CHECK(v == 1.0F);
  for (float v : head.bn.beta.data()) CHECK(v == 0.0F);
  for (float v : head.fc1.bias.data()) CHECK(v == 0.0F);
}

TEST_CASE("per-layer activation scale on unit Gaussian input") {
  Encoder enc = init_encoder({}, 21);
  MlpHead head = init_head({}, 22);
  SeededRng rng(3);
  std::vector<Tensor> conv_weights{enc.stem.weight};
  for (auto& block : enc.blocks) {
    conv_weights.push_back(block.conv1.weight);
    conv_weights.push_back(block.conv2.weight);
    if (block.shortcut) conv_weights.push_back(block.shortcut->weight);
  }
  for (const Tensor& w : conv_weights) {
    const std::size_t k = w.dim(2);
    // No padding so every output sees a full window of Gaussian inputs.
    const Tensor x = gaussian(rng, {4, w.dim(1), k + 3, k + 3});
    const Tensor z = conv2d(x, w.detach(), {1, 0});
    REQUIRE(z.numel() >= 1000);
    const double m = relu_second_moment(z);
    CHECK(m >= 0.5);
    CHECK(m <= 2.0);
  }
  for (const Linear* fc : {&head.fc1, &head.fc2}) {
    const Tensor x = gaussian(rng, {1000, fc->weight.dim(0)});
    const double m = relu_second_moment(linear_forward(*fc, x));
    CHECK(m >= 0.5);
    CHECK(m <= 2.0);
  }
}

TEST_CASE("projector and predictor shapes") {
  MlpHead projector = init_head({128, 256, 64}, 1);
  MlpHead predictor = init_head({64, 256, 64}, 2);
  CHECK(same_head_architecture(projector, predictor));
  MlpHead wide = init_head({64, 512, 64}, 2);
  CHECK_FALSE(same_head_architecture(projector, wide));

  SeededRng rng(4);
  const Tensor feat = gaussian(rng, {5, 128});
  CHECK(project_and_predict(projector, nullptr, feat, ForwardMode::train()).shape() == Shape{5, 64});
  CHECK(project_and_predict(projector, &predictor, feat, ForwardMode::train()).shape() ==
        Shape{5, 64});
  CHECK_THROWS_AS(project_and_predict(projector, nullptr, gaussian(rng, {5, 100}),
                                      ForwardMode::train()),
                  ConfigError);
  CHECK_THROWS_AS(init_head({0, 256, 64}, 1), ConfigError);
}

TEST_CASE("zero weights give zero output") {
  MlpHead head = init_head({}, 3);
  for (Tensor* t : {&head.fc1.weight, &head.fc2.weight}) {
    for (float& v : t->mutable_data()) v = 0.0F;
  }
  SeededRng rng(5);
  const Tensor out = head_forward(head, gaussian(rng, {4, 128}), ForwardMode::train());
  for (float v : out.data()) CHECK(v == 0.0F);
}

TEST_CASE("identical rows give identical head outputs in eval mode") {
  MlpHead head = init_head({}, 3);
  SeededRng rng(6);
  const Tensor row = gaussian(rng, {1, 128});
  Tensor batch({3, 128});
  for (std::size_t r = 0; r < 3; ++r) {
    std::copy(row.data().begin(), row.data().end(), batch.mutable_data().begin() + r * 128);
  }
  const Tensor out = head_forward(head, batch, ForwardMode::eval());
  for (std::size_t j = 0; j < 64; ++j) {
    CHECK(out.at({0, j}) == out.at({1, j}));
    CHECK(out.at({0, j}) == out.at({2, j}));
  }
}

TEST_CASE("frozen-stat train mode leaves running buffers alone") {
  Encoder enc = init_encoder({}, 8);
  const Tensor before = enc.stem.bn.running_mean.clone();
  SeededRng rng(7);
  encoder_forward(enc, gaussian(rng, {2, 3, 32, 32}), ForwardMode::train_frozen_stats());
  CHECK(bitwise_equal(before, enc.stem.bn.running_mean));
  encoder_forward(enc, gaussian(rng, {2, 3, 32, 32}), ForwardMode::train());
  CHECK_FALSE(bitwise_equal(before, enc.stem.bn.running_mean));
}
