#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "care/ops.hpp"
#include "care/tensor.hpp"

namespace care::nn {

// Named handle to a parameter or buffer. Buffers (BN running statistics) are
// not trained but are serialized and moving-averaged with the rest.
struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using ParamList = std::vector<ParamEntry>;

std::size_t trainable_count(const ParamList& params);

struct ForwardMode {
  BnMode bn = BnMode::train;
  bool update_running = true;

  static ForwardMode train() { return {}; }
  // Batch statistics without touching the running buffers.
  static ForwardMode train_frozen_stats() { return {BnMode::train, false}; }
  static ForwardMode eval() { return {BnMode::eval, false}; }
};

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct ConvBn {
  Tensor weight;  // [out, in, kh, kw]
  BatchNorm bn;
  Conv2dOptions opt;
};

struct ResidualBlock {
  ConvBn conv1;
  ConvBn conv2;
  std::optional<ConvBn> shortcut;
};

struct EncoderConfig {
  std::size_t stem_channels = 32;
  std::vector<std::size_t> stage_channels{32, 64, 128};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2};
  std::size_t input_resolution = 32;

  // Throws ConfigError unless the final map is at least 2x2 and all channel
  // counts are positive.
  void validate() const;
  std::size_t feature_channels() const { return stage_channels.back(); }
  std::size_t feature_resolution() const;
};

// Residual CNN: 3x3 stem, then one stride-2 stage per entry of stage_channels.
struct Encoder {
  EncoderConfig config;
  ConvBn stem;
  std::vector<ResidualBlock> blocks;
};

struct MlpHeadConfig {
  std::size_t in_dim = 128;
  std::size_t hidden_dim = 256;
  std::size_t out_dim = 64;

  void validate() const;
};

// FC -> BN -> ReLU -> FC. Used for both projectors and predictors.
struct MlpHead {
  MlpHeadConfig config;
  Linear fc1;
  BatchNorm bn;
  Linear fc2;
};

Tensor linear_forward(const Linear& layer, const Tensor& x);
Tensor batchnorm_forward(BatchNorm& bn, const Tensor& x, ForwardMode mode);

Encoder init_encoder(const EncoderConfig& config, std::uint64_t seed);
MlpHead init_head(const MlpHeadConfig& config, std::uint64_t seed);
Linear init_linear(std::size_t in, std::size_t out, std::uint64_t seed);

// image [b,3,H,W] with H == W == input_resolution -> last-stage map [b,C,h,w].
Tensor encoder_forward(Encoder& encoder, const Tensor& image, ForwardMode mode);
Tensor head_forward(MlpHead& head, const Tensor& x, ForwardMode mode);

// Projector output, followed by the predictor when one is given (online
// branches). feat is [b, in_dim].
Tensor project_and_predict(MlpHead& projector, MlpHead* predictor, const Tensor& feat,
                           ForwardMode mode);

// Structural equality of layer kinds and hidden/output widths.
bool same_head_architecture(const MlpHead& a, const MlpHead& b);

void collect(Encoder& encoder, const std::string& prefix, ParamList& out);
void collect(MlpHead& head, const std::string& prefix, ParamList& out);
void collect(Linear& layer, const std::string& prefix, ParamList& out);
void collect(BatchNorm& bn, const std::string& prefix, ParamList& out);

// He-uniform fan-in initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor he_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed);

}  // namespace care::nn
