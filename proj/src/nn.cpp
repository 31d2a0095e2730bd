#include "care/nn.hpp"

#include <cmath>

#include "care/errors.hpp"
#include "care/rng.hpp"

namespace care::nn {

namespace {

// Hands out an independent seed for each tensor in initialization order.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t seed) : seed_(seed) {}
  std::uint64_t next() { return mix_seed(seed_, counter_++); }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

BatchNorm make_batchnorm(std::size_t channels) {
  BatchNorm bn;
  bn.gamma = Tensor({channels}, 1.0F);
  bn.beta = Tensor({channels}, 0.0F);
  bn.running_mean = Tensor({channels}, 0.0F);
  bn.running_var = Tensor({channels}, 1.0F);
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
  return bn;
}

ConvBn make_conv_bn(std::size_t in, std::size_t out, std::size_t k, Conv2dOptions opt,
                    SeedStream& seeds) {
  ConvBn layer;
  layer.weight = he_uniform({out, in, k, k}, in * k * k, seeds.next());
  layer.bn = make_batchnorm(out);
  layer.opt = opt;
  return layer;
}

Tensor conv_bn_forward(ConvBn& layer, const Tensor& x, ForwardMode mode) {
  return batchnorm_forward(layer.bn, conv2d(x, layer.weight, layer.opt), mode);
}

Tensor block_forward(ResidualBlock& block, const Tensor& x, ForwardMode mode) {
  Tensor h = relu(conv_bn_forward(block.conv1, x, mode));
  h = conv_bn_forward(block.conv2, h, mode);
  const Tensor skip = block.shortcut ? conv_bn_forward(*block.shortcut, x, mode) : x;
  return relu(add(h, skip));
}

void collect(ConvBn& layer, const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", layer.weight, true});
  collect(layer.bn, prefix + ".bn", out);
}

void check_features(const Tensor& x, std::size_t dim, const char* what) {
  if (x.rank() != 2 || x.dim(1) != dim) {
    throw ConfigError(std::string(what) + ": expected [b, " + std::to_string(dim) + "] input, got " +
                      shape_str(x.shape()));
  }
}

}  // namespace

std::size_t trainable_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.trainable) n += p.tensor.numel();
  }
  return n;
}

Tensor he_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  SeededRng rng(seed);
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

void EncoderConfig::validate() const {
  if (stem_channels == 0) throw ConfigError("encoder: stem_channels must be positive");
  if (stage_channels.empty()) throw ConfigError("encoder: at least one stage is required");
  if (stage_channels.size() != blocks_per_stage.size()) {
    throw ConfigError("encoder: stage_channels and blocks_per_stage differ in length");
  }
  for (std::size_t s = 0; s < stage_channels.size(); ++s) {
    if (stage_channels[s] == 0) throw ConfigError("encoder: stage channel counts must be positive");
    if (blocks_per_stage[s] == 0) throw ConfigError("encoder: every stage needs at least one block");
  }
  const std::size_t factor = std::size_t{1} << stage_channels.size();
  if (input_resolution % factor != 0 || input_resolution / factor < 2) {
    throw ConfigError("encoder: input resolution " + std::to_string(input_resolution) +
                      " does not reduce to a map of at least 2x2 over " +
                      std::to_string(stage_channels.size()) + " stride-2 stages");
  }
}

std::size_t EncoderConfig::feature_resolution() const {
  return input_resolution >> stage_channels.size();
}

void MlpHeadConfig::validate() const {
  if (in_dim == 0 || hidden_dim == 0 || out_dim == 0) {
    throw ConfigError("mlp head: all dimensions must be positive");
  }
}

Linear init_linear(std::size_t in, std::size_t out, std::uint64_t seed) {
  Linear layer;
  layer.weight = he_uniform({in, out}, in, seed);
  layer.bias = Tensor({out}, 0.0F);
  layer.bias.set_requires_grad(true);
  return layer;
}

Encoder init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  SeedStream seeds(seed);
  Encoder enc;
  enc.config = config;
  enc.stem = make_conv_bn(3, config.stem_channels, 3, {1, 1}, seeds);
  std::size_t in = config.stem_channels;
  for (std::size_t s = 0; s < config.stage_channels.size(); ++s) {
    const std::size_t out = config.stage_channels[s];
    for (std::size_t b = 0; b < config.blocks_per_stage[s]; ++b) {
      ResidualBlock block;
      if (b == 0) {
        // 4x4/s2/p1 halves even sizes exactly; the 2x2/s2 shortcut matches it.
        block.conv1 = make_conv_bn(in, out, 4, {2, 1}, seeds);
        block.shortcut = make_conv_bn(in, out, 2, {2, 0}, seeds);
      } else {
        block.conv1 = make_conv_bn(in, out, 3, {1, 1}, seeds);
      }
      block.conv2 = make_conv_bn(out, out, 3, {1, 1}, seeds);
      enc.blocks.push_back(std::move(block));
      in = out;
    }
  }
  return enc;
}

MlpHead init_head(const MlpHeadConfig& config, std::uint64_t seed) {
  config.validate();
  SeedStream seeds(seed);
  MlpHead head;
  head.config = config;
  head.fc1 = init_linear(config.in_dim, config.hidden_dim, seeds.next());
  head.bn = make_batchnorm(config.hidden_dim);
  head.fc2 = init_linear(config.hidden_dim, config.out_dim, seeds.next());
  return head;
}

Tensor linear_forward(const Linear& layer, const Tensor& x) {
  return add_bias(matmul(x, layer.weight), layer.bias);
}

Tensor batchnorm_forward(BatchNorm& bn, const Tensor& x, ForwardMode mode) {
  BatchNormOptions opt;
  opt.mode = mode.bn;
  opt.update_running = mode.update_running;
  return batchnorm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, opt);
}

Tensor encoder_forward(Encoder& encoder, const Tensor& image, ForwardMode mode) {
  const std::size_t r = encoder.config.input_resolution;
  if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != r || image.dim(3) != r) {
    throw ConfigError("encoder: expected [b, 3, " + std::to_string(r) + ", " + std::to_string(r) +
                      "] input, got " + shape_str(image.shape()));
  }
  Tensor h = relu(conv_bn_forward(encoder.stem, image, mode));
  for (auto& block : encoder.blocks) h = block_forward(block, h, mode);
  return h;
}

Tensor head_forward(MlpHead& head, const Tensor& x, ForwardMode mode) {
  check_features(x, head.config.in_dim, "mlp head");
  const Tensor h = relu(batchnorm_forward(head.bn, linear_forward(head.fc1, x), mode));
  return linear_forward(head.fc2, h);
}

Tensor project_and_predict(MlpHead& projector, MlpHead* predictor, const Tensor& feat,
                           ForwardMode mode) {
  Tensor z = head_forward(projector, feat, mode);
  if (predictor != nullptr) z = head_forward(*predictor, z, mode);
  return z;
}

bool same_head_architecture(const MlpHead& a, const MlpHead& b) {
  auto layers = [](const MlpHead& h) {
    return std::vector<Shape>{h.fc1.bias.shape(), h.bn.gamma.shape(), h.fc2.bias.shape()};
  };
  return a.config.hidden_dim == b.config.hidden_dim && a.config.out_dim == b.config.out_dim &&
         layers(a) == layers(b);
}

void collect(BatchNorm& bn, const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gamma", bn.gamma, true});
  out.push_back({prefix + ".beta", bn.beta, true});
  out.push_back({prefix + ".running_mean", bn.running_mean, false});
  out.push_back({prefix + ".running_var", bn.running_var, false});
}

void collect(Linear& layer, const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", layer.weight, true});
  out.push_back({prefix + ".bias", layer.bias, true});
}

void collect(Encoder& encoder, const std::string& prefix, ParamList& out) {
  collect(encoder.stem, prefix + ".stem", out);
  for (std::size_t i = 0; i < encoder.blocks.size(); ++i) {
    auto& block = encoder.blocks[i];
    const std::string p = prefix + ".block" + std::to_string(i);
    collect(block.conv1, p + ".conv1", out);
    collect(block.conv2, p + ".conv2", out);
    if (block.shortcut) collect(*block.shortcut, p + ".shortcut", out);
  }
}

void collect(MlpHead& head, const std::string& prefix, ParamList& out) {
  collect(head.fc1, prefix + ".fc1", out);
  collect(head.bn, prefix + ".bn", out);
  collect(head.fc2, prefix + ".fc2", out);
}

}  // namespace care::nn
