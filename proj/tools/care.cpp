// care: pretraining, probing and visualization front end.
#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "care/checkpoint.hpp"
#include "care/config.hpp"
#include "care/errors.hpp"
#include "care/selftest.hpp"
#include "care/train.hpp"

using namespace care;

namespace {

struct Args {
  std::optional<std::uint64_t> seed;
  std::string config, out, metrics, ckpt, dataset, input_out;
  std::size_t image = 0;
  std::size_t log_every = 50;
  std::optional<std::size_t> probe_epochs;
};

int run_pretrain(const Args& a) {
  Config config = load_config(a.config);
  if (a.seed) config.seed = *a.seed;
  const std::string out = a.out.empty() ? config.out : a.out;
  const std::string metrics = a.metrics.empty() ? config.metrics : a.metrics;
  if (out.empty()) throw ConfigError("no checkpoint path: pass --out or set 'out' in the config");
  const auto images = data::load_dataset(config.dataset);
  const std::size_t total = config.epochs * train::steps_per_epoch(images.size(), config.batch_size);
  std::cerr << "pretraining on " << images.size() << " images, " << total << " steps\n";
  const auto start = std::chrono::steady_clock::now();
  const auto result = train::pretrain(config, images, metrics, [&](const train::StepRecord& r) {
    if (a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == total)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::fprintf(stderr, "step %zu/%zu  lr %.5f  tau %.5f  l_c %.4f  l_t %.4f  l_att %.4f  l_total %.4f  (%.0fs)\n",
                   r.step + 1, total, r.lr, r.tau, r.loss.l_c, r.loss.l_t, r.loss.l_att, r.loss.l_total, secs);
    }
  });
  io::save_checkpoint(out, result.checkpoint);
  std::cout << "wrote " << out << " (step " << result.checkpoint.meta.step << ")\n";
  return 0;
}

int run_probe(const Args& a) {
  const io::Checkpoint ckpt = io::load_checkpoint(a.ckpt);
  Config config = parse_config(ckpt.meta.config_text);
  if (a.seed) config.seed = *a.seed;
  if (a.probe_epochs) config.probe_epochs = *a.probe_epochs;
  nn::Encoder encoder = train::load_exported_encoder(ckpt);
  const auto images = data::load_dataset(a.dataset);
  const auto r = train::linear_probe(encoder, images, train::probe_config_from(config));
  std::printf("train_accuracy %.4f (%zu)\ntest_accuracy %.4f (%zu)\n", r.train_accuracy, r.train_count,
              r.test_accuracy, r.test_count);
  return 0;
}

int run_viz(const Args& a) {
  const io::Checkpoint ckpt = io::load_checkpoint(a.ckpt);
  const Config config = parse_config(ckpt.meta.config_text);
  nn::Encoder encoder = train::load_exported_encoder(ckpt);
  const auto images = data::load_dataset(a.dataset.empty() ? config.dataset : a.dataset);
  if (a.image >= images.size()) {
    throw DataError("image index " + std::to_string(a.image) + " out of range (dataset has " +
                    std::to_string(images.size()) + ")");
  }
  const auto& img = images[a.image];
  const train::Heatmap h = train::attention_map(encoder, img, &std::cerr);
  io::write_heatmap_ppm(a.out, h.height, h.width, h.values);
  if (!a.input_out.empty()) io::write_ppm(a.input_out, img.height, img.width, img.pixels);
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

int run_selftest(const Args& a) {
  const std::uint64_t seed = a.seed.value_or(1);
  Config small;
  small.encoder.stem_channels = 16;
  small.encoder.stage_channels = {16, 32, 64};
  small.encoder.blocks_per_stage = {1, 1, 1};
  const std::pair<const char*, selftest::Outcome> checks[] = {
      {"gradients", selftest::gradient_suite(20, seed)},
      {"loss contracts", selftest::loss_contracts(1000, seed)},
      {"schedules", selftest::schedule_exactness()},
      {"attention rows", selftest::attention_rows(2, 6, seed)},
      {"update partition", selftest::update_partition(small, 4, seed)},
  };
  bool ok = true;
  for (const auto& [name, o] : checks) {
    std::cout << (o.passed ? "PASS " : "FAIL ") << name << ": " << o.detail << "\n";
    ok = ok && o.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"care: dual-stream self-supervised pretraining"};
  app.fallthrough();
  Args a;
  app.add_option("--seed", a.seed, "override the run seed");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain from a config file");
  pretrain->add_option("--config", a.config, "config file")->required();
  pretrain->add_option("--out", a.out, "checkpoint to write (default: config 'out')");
  pretrain->add_option("--metrics", a.metrics, "per-step metrics CSV (default: config 'metrics')");
  pretrain->add_option("--log-every", a.log_every, "progress line interval in steps, 0 for none");

  auto* probe = app.add_subcommand("probe", "linear probe on frozen encoder features");
  probe->add_option("--ckpt", a.ckpt, "checkpoint")->required();
  probe->add_option("--dataset", a.dataset, "cifar10:<file> or synth:<n>:<seed>")->required();
  probe->add_option("--epochs", a.probe_epochs, "probe epochs (default: from checkpoint config)");

  auto* viz = app.add_subcommand("viz", "write an encoder attention heatmap as PPM");
  viz->add_option("--ckpt", a.ckpt, "checkpoint")->required();
  viz->add_option("--image", a.image, "image index in the dataset")->required();
  viz->add_option("--out", a.out, "heatmap PPM path")->required();
  viz->add_option("--dataset", a.dataset, "dataset (default: the pretraining dataset)");
  viz->add_option("--input-out", a.input_out, "also write the source image here");

  auto* self = app.add_subcommand("selftest", "run gradient and invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return 2;
  }
  try {
    if (pretrain->parsed()) return run_pretrain(a);
    if (probe->parsed()) return run_probe(a);
    if (viz->parsed()) return run_viz(a);
    if (self->parsed()) return run_selftest(a);
  } catch (const care::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
