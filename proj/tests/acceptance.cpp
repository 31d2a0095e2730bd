// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "care/checkpoint.hpp"
#include "care/errors.hpp"
#include "care/ops.hpp"
#include "care/selftest.hpp"
#include "care/train.hpp"

using namespace care;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Report {
  int failed = 0;
  void line(int id, bool ok, const std::string& detail) {
    std::printf("criterion %d %s: %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    failed += ok ? 0 : 1;
  }
};

// The encoder used for every training-based criterion; see README.
Config acceptance_config() {
  Config c;
  c.encoder.stem_channels = 16;
  c.encoder.stage_channels = {16, 32, 64};
  c.encoder.blocks_per_stage = {1, 1, 1};
  return c;
}

std::vector<std::vector<double>> read_csv_values(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string row;
  std::getline(in, row);
  std::vector<std::vector<double>> out;
  while (std::getline(in, row)) {
    std::vector<double> vals;
    std::stringstream ss(row);
    std::string cell;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    out.push_back(vals);
  }
  return out;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::size_t epochs = 20, seeds = 3;
  std::string work = (std::filesystem::temp_directory_path() / "care_acceptance").string();
  app.add_option("--epochs", epochs, "pretraining epochs for the ablation");
  app.add_option("--seeds", seeds, "seeds per ablation arm");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  std::filesystem::create_directories(work);
  Report report;
  const Config base = acceptance_config();

  {
    const auto t0 = Clock::now();
    const auto o = selftest::gradient_suite(20, 2024);
    const double secs = seconds_since(t0);
    report.line(1, o.passed && secs < 120.0, o.detail + fmt(", %.1fs", secs));
  }
  {
    const auto o = selftest::loss_contracts(1000, 7);
    report.line(2, o.passed, o.detail);
  }
  {
    const auto o = selftest::schedule_exactness();
    report.line(3, o.passed, o.detail);
  }
  {
    const auto rows = selftest::attention_rows(2, 6, 11);
    bool finite = true;
    std::string detail = rows.detail + "; 3-epoch runs:";
    for (const attn::PosKind kind :
         {attn::PosKind::none, attn::PosKind::sincos_abs, attn::PosKind::learn_abs, attn::PosKind::learn_rel}) {
      Config c = base;
      c.pos_encoding = kind;
      c.dataset = "synth:256:4";
      c.epochs = 3;
      c.warmup_epochs = 1;
      bool ok = true;
      try {
        const auto r = train::pretrain(c);
        for (const auto& s : r.records) ok = ok && std::isfinite(s.loss.l_total);
        detail += " " + std::string(attn::pos_kind_name(kind)) + fmt("=%.2f", r.records.back().loss.l_total);
      } catch (const NumericError& e) {
        ok = false;
        detail += " " + std::string(attn::pos_kind_name(kind)) + " non-finite (" + e.what() + ")";
      }
      finite = finite && ok;
    }
    report.line(4, rows.passed && finite, detail);
  }
  {
    const auto o = selftest::update_partition(base, 4, 5);
    report.line(5, o.passed, o.detail);
  }

  // Ablation: lambda 100 against lambda 0, identical except for lambda.
  const auto probe_set = data::synth_shapes(4000, 777);
  const auto pretrain_set = data::synth_shapes(2000, 1);
  std::vector<double> acc100, acc0, var100;
  std::vector<nn::Encoder> encoders100;
  {
    const auto t0 = Clock::now();
    std::string detail;
    std::size_t wins = 0;
    for (std::uint64_t s = 1; s <= seeds; ++s) {
      for (const double lambda : {100.0, 0.0}) {
        Config c = base;
        c.seed = s;
        c.lambda = lambda;
        c.epochs = epochs;
        c.warmup_epochs = epochs > 1 ? std::max<std::size_t>(1, epochs / 10) : 0;
        auto r = train::pretrain(c, pretrain_set);
        nn::Encoder& enc = r.params.online.encoder1;
        const auto probe = train::linear_probe(enc, probe_set, train::probe_config_from(c));
        if (lambda > 0.0) {
          acc100.push_back(probe.test_accuracy);
          var100.push_back(train::embedding_variance(
              train::encode(enc, std::span<const data::ImageRecord>(probe_set).first(512))));
          encoders100.push_back(enc);
        } else {
          acc0.push_back(probe.test_accuracy);
        }
        std::fprintf(stderr, "  ablation seed %llu lambda %g: probe %.4f, final l_total %.3f (%.0fs)\n",
                     static_cast<unsigned long long>(s), lambda, probe.test_accuracy,
                     r.records.back().loss.l_total, seconds_since(t0));
      }
      wins += acc100.back() >= acc0.back();
      detail += fmt(" seed %.0f:", static_cast<double>(s)) + fmt(" %.3f", acc100.back()) + fmt(" vs %.3f,", acc0.back());
    }
    const double secs = seconds_since(t0);
    const double m100 = median3(acc100), m0 = median3(acc0);
    const bool ok = m100 >= m0 - 0.01 && wins * 3 >= seeds * 2 && secs <= 45 * 60;
    detail = "median " + fmt("%.3f", m100) + fmt(" vs %.3f", m0) + ", lambda 100 ahead in " + std::to_string(wins) + "/" +
             std::to_string(seeds) + " seeds (" + detail.substr(1, detail.size() - 2) + ")" + fmt(", %.0fs", secs);
    report.line(6, ok, detail);
  }
  {
    const double lo = *std::min_element(var100.begin(), var100.end());
    std::string detail = "embedding variance per seed:";
    for (double v : var100) detail += fmt(" %.2e", v);
    report.line(7, lo > 1e-3, detail + " (threshold 1e-3)");
  }
  {
    SeededRng rng(2718);
    std::vector<data::ImageRecord> disks;
    for (int i = 0; i < 20; ++i) disks.push_back(data::render_shape(data::ShapeClass::disk, rng, false));
    std::string detail;
    bool ok = true;
    for (std::size_t e = 0; e < encoders100.size(); ++e) {
      double in_sum = 0.0, out_sum = 0.0;
      std::size_t in_n = 0, out_n = 0, per_image = 0;
      for (const auto& img : disks) {
        const auto h = train::attention_map(encoders100[e], img);
        double a = 0.0, b = 0.0;
        std::size_t na = 0, nb = 0;
        for (std::size_t r = 0; r < h.height; ++r) {
          for (std::size_t c = 0; c < h.width; ++c) {
            const double v = h.values[r * h.width + c];
            if (img.box.contains(r, c)) {
              a += v;
              ++na;
            } else {
              b += v;
              ++nb;
            }
          }
        }
        in_sum += a;
        out_sum += b;
        in_n += na;
        out_n += nb;
        per_image += a / static_cast<double>(na) > b / static_cast<double>(std::max<std::size_t>(nb, 1));
      }
      const double in_mean = in_sum / static_cast<double>(in_n), out_mean = out_sum / static_cast<double>(out_n);
      // The first seed's encoder decides; the others are reported alongside.
      if (e == 0) ok = in_mean > out_mean;
      detail += std::string(e == 0 ? "" : "; ") + "seed " + std::to_string(e + 1) + fmt(": inside %.3f", in_mean) +
                fmt(" vs outside %.3f", out_mean) + ", " + std::to_string(per_image) + "/20 images";
    }
    report.line(8, ok && !encoders100.empty(), detail);
  }
  {
    Config c = base;
    c.dataset = "synth:640:2";
    c.epochs = 1;
    c.warmup_epochs = 0;
    const auto a_path = std::filesystem::path(work) / "a.csv", b_path = std::filesystem::path(work) / "b.csv";
    auto ra = train::pretrain(c, a_path.string());
    train::pretrain(c, b_path.string());
    const auto va = read_csv_values(a_path), vb = read_csv_values(b_path);
    double worst = va.size() == vb.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(va.size(), vb.size()); ++i)
      for (std::size_t j = 0; j < va[i].size(); ++j) worst = std::max(worst, std::abs(va[i][j] - vb[i][j]));

    const auto ckpt_path = std::filesystem::path(work) / "run.ckpt";
    io::save_checkpoint(ckpt_path, ra.checkpoint);
    const io::Checkpoint back = io::load_checkpoint(ckpt_path);
    train::DualStreamParams fresh = train::init_dual_stream(c, 99);
    train::restore(fresh.all_params(), back);
    std::size_t mismatched = 0, checked = 0;
    const auto orig = ra.params.all_params(), restored = fresh.all_params();
    for (std::size_t i = 0; i < orig.size(); ++i, ++checked) mismatched += !bitwise_equal(orig[i].tensor, restored[i].tensor);
    const bool meta_ok = back.meta == ra.checkpoint.meta;
    const bool ok = va.size() == 10 && worst <= 1e-6 && mismatched == 0 && meta_ok;
    report.line(9, ok, std::to_string(va.size()) + " rows, max CSV diff " + fmt("%.1e", worst) + ", " +
                           std::to_string(checked - mismatched) + "/" + std::to_string(checked) +
                           " tensors bitwise after reload, metadata " + (meta_ok ? "equal" : "differs"));
  }
  {
    Config c = base;
    c.batch_size = 8;
    c.epochs = 50;
    c.warmup_epochs = 0;
    train::DualStreamParams params = train::init_dual_stream(c, 3);
    train::TrainState state = train::make_train_state(c, 1);
    const auto images = data::synth_shapes(8, 13);
    const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
    data::AugmentConfig aug = c.augment;
    const auto [v1, v2] = train::make_batch(images, idx, aug, 13, 0);
    double first = 0.0, last = 0.0;
    for (int s = 0; s < 50; ++s) {
      const double l = train::train_step(state, params, v1, v2).loss.l_total;
      if (s == 0) first = l;
      last = l;
    }
    report.line(10, last < first, fmt("l_total step 1 %.3f", first) + fmt(", step 50 %.3f", last));
  }

  std::printf("%d of 10 criteria failed\n", report.failed);
  return report.failed == 0 ? 0 : 1;
}
