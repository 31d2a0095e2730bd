#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "care/attention.hpp"
#include "care/data.hpp"
#include "care/nn.hpp"

namespace care {

// Every tunable of a run. Text form is flat `key = value` lines with `#`
// comments; keys not listed in canonical_text() are rejected.
struct Config {
  // desk: n_blocks 2, 20 epochs, 2 warmup epochs, 30 probe epochs.
  // full: n_blocks 5, 100 epochs, 10 warmup epochs, 80 probe epochs.
  std::string preset = "desk";

  std::string dataset = "synth:2000:1";
  std::size_t epochs = 20;
  std::size_t warmup_epochs = 2;
  std::size_t batch_size = 64;
  // 0 selects the batch-scaled default.
  double base_lr = 0.0;
  double weight_decay = 0.0;
  double tau_base = 0.99;
  std::uint64_t seed = 1;

  double lambda = 100.0;
  bool normalize_att = false;
  bool symmetrize = false;

  std::size_t n_blocks = 2;
  attn::PosKind pos_encoding = attn::PosKind::learn_rel;
  std::size_t heads = 4;
  std::size_t token_dim = 64;

  nn::EncoderConfig encoder;
  std::size_t proj_hidden = 256;
  std::size_t proj_out = 64;

  data::AugmentConfig augment;

  std::size_t probe_epochs = 30;
  double probe_lr = 0.2;
  std::size_t probe_batch = 256;
  double probe_train_fraction = 0.75;

  std::string out;
  std::string metrics;

  attn::TransformerConfig transformer_config() const;
  nn::MlpHeadConfig projector1_config() const;
  nn::MlpHeadConfig projector2_config() const;
  nn::MlpHeadConfig predictor_config() const;

  // Range checks across all fields; throws ConfigError.
  void validate() const;
  // Every key with its materialized value, one per line, in a fixed order.
  std::string canonical_text() const;
};

void apply_preset(Config& config, std::string_view preset);

// Throws ConfigError with a "line N:" prefix on the first bad line.
Config parse_config(std::string_view text);
Config load_config(const std::string& path);

// FNV-1a 64 of the canonical text.
std::uint64_t config_hash(const Config& config);

}  // namespace care
