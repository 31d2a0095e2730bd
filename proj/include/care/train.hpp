#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "care/attention.hpp"
#include "care/checkpoint.hpp"
#include "care/config.hpp"
#include "care/data.hpp"
#include "care/nn.hpp"
#include "care/objective.hpp"
#include "care/schedule.hpp"

namespace care::train {

struct OnlineGroups {
  nn::Encoder encoder1;
  nn::MlpHead projector1;
  nn::MlpHead predictor1;
  attn::Transformer transformer1;
  nn::MlpHead projector2;
  nn::MlpHead predictor2;
};

// Moving-average copies; never trained by gradients.
struct MomentumGroups {
  nn::Encoder encoder2;
  nn::MlpHead m_projector1;
  attn::Transformer m_transformer;
  nn::MlpHead m_projector2;
};

struct DualStreamParams {
  OnlineGroups online;
  MomentumGroups momentum;
  // One velocity per trainable entry of online_params(), same order.
  std::vector<Tensor> velocity;

  // The six online groups, in the order above.
  nn::ParamList online_params();
  // The four momentum groups.
  nn::ParamList momentum_params();
  // The online counterparts of momentum_params(), entry for entry.
  nn::ParamList mirrored_online_params();
  // Everything, for checkpoints.
  nn::ParamList all_params();
};

// Momentum groups start as exact copies of their online counterparts.
DualStreamParams init_dual_stream(const Config& config, std::uint64_t seed);

struct StreamForward {
  ssl::StreamOutputs out;
  Tensor map1;     // online encoder map (pre-pool)
  Tensor map2;     // momentum encoder map
  Tensor pooled1;  // pooled online encoder features
  attn::AttentionTrace attention;
};

struct ForwardModes {
  nn::ForwardMode online = nn::ForwardMode::train();
  nn::ForwardMode momentum = nn::ForwardMode::train_frozen_stats();
};

// v1, v2: [b, 3, r, r] batches of first and second views.
StreamForward forward_once(DualStreamParams& params, const Tensor& v1, const Tensor& v2,
                           const ForwardModes& modes = {});

struct TrainState {
  std::size_t step = 0;
  std::size_t total_steps = 1;
  sched::LrSchedule lr;
  sched::TauSchedule tau;
  double lambda = ssl::kDefaultLambda;
  bool normalize_att = false;
  bool symmetrize = false;
  double weight_decay = 0.0;
  // Overrides the scheduled coefficient when set.
  std::optional<double> forced_tau;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
};

TrainState make_train_state(const Config& config, std::size_t steps_per_epoch);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double tau = 0.0;
  ssl::LossBreakdown loss;
};

// Losses of one batch on the active tape (symmetrized when requested).
ssl::LossTensors forward_losses(DualStreamParams& params, const TrainState& state,
                                const Tensor& v1, const Tensor& v2);

// One SGD step on the online groups followed by the moving-average update.
// Throws NumericError naming the first non-finite tensor.
StepRecord train_step(TrainState& state, DualStreamParams& params, const Tensor& v1,
                      const Tensor& v2);

// View pairs for a batch of dataset indices; each sample's views depend only
// on (seed, step, position in batch).
std::pair<Tensor, Tensor> make_batch(std::span<const data::ImageRecord> images,
                                     std::span<const std::size_t> indices,
                                     const data::AugmentConfig& augment, std::uint64_t seed,
                                     std::size_t step);

std::size_t steps_per_epoch(std::size_t dataset_size, std::size_t batch_size);
// Index batches of one epoch from a permutation seeded by (seed, epoch). A
// trailing batch of one sample borrows a second index so BN sees two.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t dataset_size,
                                                    std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch);

inline constexpr const char* kMetricsHeader = "step,lr,tau,l_c,l_t,l_att,l_total";
std::string metrics_row(const StepRecord& r);

struct PretrainResult {
  io::Checkpoint checkpoint;
  std::vector<StepRecord> records;
  DualStreamParams params;
};

using ProgressFn = std::function<void(const StepRecord&)>;

// Full pretraining run. Writes the metrics CSV when metrics_path is non-empty.
PretrainResult pretrain(const Config& config, const std::vector<data::ImageRecord>& images,
                        const std::string& metrics_path = {}, const ProgressFn& progress = {});
PretrainResult pretrain(const Config& config, const std::string& metrics_path = {},
                        const ProgressFn& progress = {});

io::Checkpoint make_checkpoint(DualStreamParams& params, const Config& config, std::size_t step);
// Copies every checkpoint entry into matching parameters; throws FormatError
// on a missing entry or a shape mismatch.
void restore(nn::ParamList params, const io::Checkpoint& ckpt);
// Rebuilds encoder1 from a checkpoint's stored config and tensors.
nn::Encoder load_exported_encoder(const io::Checkpoint& ckpt);

// Pooled eval-mode features [n, c] computed in batches.
Tensor encode(nn::Encoder& encoder, std::span<const data::ImageRecord> images,
              std::size_t batch = 256);

// Batch variance of l2-normalized rows, averaged over feature dimensions.
double embedding_variance(const Tensor& features);

struct ProbeConfig {
  std::size_t epochs = 30;
  double lr = 0.2;
  double momentum = 0.9;
  std::size_t batch = 256;
  double train_fraction = 0.75;
  std::uint64_t seed = 1;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
};

// Softmax linear classifier on fixed features, standardized with statistics
// of the training rows. Labels must lie in [0, classes).
ProbeResult probe_features(const Tensor& features, std::span<const int> labels,
                           std::span<const std::size_t> train_rows,
                           std::span<const std::size_t> test_rows, std::size_t classes,
                           const ProbeConfig& config);
// Encodes with the frozen encoder, splits by a seeded permutation, probes.
ProbeResult linear_probe(nn::Encoder& encoder, std::span<const data::ImageRecord> images,
                         const ProbeConfig& config);
ProbeConfig probe_config_from(const Config& config);

struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;
  bool degenerate = false;
};

// Gradient-weighted channel map for target |pooled features|^2, ReLU,
// min-max normalized, bilinearly upsampled to the image size. A zero-range map
// becomes all zeros with degenerate set and a line on `warnings`.
Heatmap attention_map(nn::Encoder& encoder, const data::ImageRecord& image,
                      std::ostream* warnings = nullptr);

}  // namespace care::train
