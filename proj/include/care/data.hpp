#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "care/rng.hpp"
#include "care/tensor.hpp"

namespace care::data {

// Inclusive pixel rectangle.
struct Box {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t bottom = 0;
  std::size_t right = 0;

  bool contains(std::size_t r, std::size_t c) const {
    return r >= top && r <= bottom && c >= left && c <= right;
  }
};

// Planar RGB in [0,1]: pixels[(ch * height + r) * width + c].
struct ImageRecord {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  int label = 0;
  // Object extent for synthetic images; the full frame otherwise.
  Box box;

  float& at(std::size_t ch, std::size_t r, std::size_t c) { return pixels[(ch * height + r) * width + c]; }
  float at(std::size_t ch, std::size_t r, std::size_t c) const { return pixels[(ch * height + r) * width + c]; }
};

ImageRecord blank_image(std::size_t height, std::size_t width, float fill = 0.0F);

// CIFAR-10 binary batches: records of 1 label byte plus 3072 bytes of R, G, B
// planes, each 32x32 row-major.
inline constexpr std::size_t kCifarRecordBytes = 3073;
std::vector<ImageRecord> load_cifar10(const std::filesystem::path& path);
std::vector<ImageRecord> parse_cifar10(std::span<const unsigned char> bytes);

enum class ShapeClass { disk = 0, square = 1, triangle = 2, ring = 3 };
inline constexpr int kShapeClasses = 4;

// One 32x32 shape of random position, size and color over a noisy or black
// background.
ImageRecord render_shape(ShapeClass cls, SeededRng& rng, bool noisy_background = true);
// Image i has class i mod 4 and is rendered from its own sub-seed.
std::vector<ImageRecord> synth_shapes(std::size_t n, std::uint64_t seed);

// Parses "cifar10:<path>" or "synth:<n>:<seed>".
std::vector<ImageRecord> load_dataset(const std::string& spec);

struct AugmentConfig {
  std::size_t out_resolution = 32;
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0;
  double crop_ratio_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double grayscale_prob = 0.2;
  // Indexed by view (first, second).
  std::array<double, 2> blur_prob{1.0, 0.1};
  std::array<double, 2> solarize_prob{0.0, 0.2};
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  std::size_t blur_radius = 2;
  float solarize_threshold = 0.5F;

  void validate() const;
};

ImageRecord resize_bilinear(const ImageRecord& img, std::size_t top, std::size_t left,
                            std::size_t height, std::size_t width, std::size_t out_h,
                            std::size_t out_w);
ImageRecord flip_horizontal(const ImageRecord& img);
ImageRecord to_grayscale(const ImageRecord& img);
ImageRecord gaussian_blur(const ImageRecord& img, double sigma, std::size_t radius);
// 1 where the source value reaches the threshold.
std::vector<unsigned char> solarize_mask(const ImageRecord& img, float threshold);
ImageRecord invert_where(const ImageRecord& img, std::span<const unsigned char> mask);
ImageRecord solarize(const ImageRecord& img, float threshold);

// Random-resized crop, flip, color jitter, grayscale, blur and solarization, in
// that order. view_index is 1 or 2 and selects the per-view probabilities.
ImageRecord augment_view(const ImageRecord& img, const AugmentConfig& cfg, std::uint64_t seed,
                         int view_index);

struct ViewPair {
  ImageRecord first;
  ImageRecord second;
  std::uint64_t seed_first = 0;
  std::uint64_t seed_second = 0;
};

ViewPair make_view_pair(const ImageRecord& img, const AugmentConfig& cfg, SeededRng& rng);

// [n, 3, h, w] batch of equally sized images.
Tensor stack_images(std::span<const ImageRecord> images);
Tensor stack_images(std::span<const ImageRecord* const> images);

}  // namespace care::data
