#include "care/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>

#include "care/errors.hpp"

namespace care::data {

namespace {

constexpr std::size_t kSynthSize = 32;
constexpr int kCropAttempts = 10;

float clamp01(float v) { return std::clamp(v, 0.0F, 1.0F); }

float luma(float r, float g, float b) { return 0.299F * r + 0.587F * g + 0.114F * b; }

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ConfigError(std::string("augment: ") + name + " must lie in [0, 1], got " + std::to_string(p));
  }
}

std::size_t parse_size(std::string_view text, const std::string& context) {
  std::size_t v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw ConfigError("dataset '" + context + "': bad number '" + std::string(text) + "'");
  return v;
}

void blend(ImageRecord& img, float factor, const std::vector<float>& other) {
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = clamp01(factor * img.pixels[i] + (1.0F - factor) * other[i]);
  }
}

std::vector<float> gray_planes(const ImageRecord& img) {
  const std::size_t plane = img.height * img.width;
  std::vector<float> out(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    const float y = luma(img.pixels[p], img.pixels[plane + p], img.pixels[2 * plane + p]);
    out[p] = out[plane + p] = out[2 * plane + p] = y;
  }
  return out;
}

void adjust_brightness(ImageRecord& img, float f) {
  for (float& v : img.pixels) v = clamp01(v * f);
}

void adjust_contrast(ImageRecord& img, float f) {
  const auto gray = gray_planes(img);
  double m = 0.0;
  for (std::size_t p = 0; p < img.height * img.width; ++p) m += gray[p];
  m /= static_cast<double>(img.height * img.width);
  blend(img, f, std::vector<float>(img.pixels.size(), static_cast<float>(m)));
}

void adjust_saturation(ImageRecord& img, float f) { blend(img, f, gray_planes(img)); }

// Rotates hue by `shift` turns through an HSV round trip.
void adjust_hue(ImageRecord& img, float shift) {
  const std::size_t plane = img.height * img.width;
  for (std::size_t p = 0; p < plane; ++p) {
    float& r = img.pixels[p];
    float& g = img.pixels[plane + p];
    float& b = img.pixels[2 * plane + p];
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const float delta = mx - mn;
    if (delta <= 0.0F) continue;
    float h;
    if (mx == r) {
      h = std::fmod((g - b) / delta, 6.0F);
    } else if (mx == g) {
      h = (b - r) / delta + 2.0F;
    } else {
      h = (r - g) / delta + 4.0F;
    }
    h = h / 6.0F + shift;
    h -= std::floor(h);
    const float s = delta / mx, v = mx;
    const float h6 = h * 6.0F;
    const auto sector = static_cast<int>(std::floor(h6)) % 6;
    const float f = h6 - std::floor(h6);
    const float pp = v * (1.0F - s), q = v * (1.0F - s * f), t = v * (1.0F - s * (1.0F - f));
    switch (sector) {
      case 0: r = v, g = t, b = pp; break;
      case 1: r = q, g = v, b = pp; break;
      case 2: r = pp, g = v, b = t; break;
      case 3: r = pp, g = q, b = v; break;
      case 4: r = t, g = pp, b = v; break;
      default: r = v, g = pp, b = q; break;
    }
    r = clamp01(r), g = clamp01(g), b = clamp01(b);
  }
}

void color_jitter(ImageRecord& img, const AugmentConfig& cfg, SeededRng& rng) {
  const auto factor = [&](double strength) {
    return static_cast<float>(rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength));
  };
  const float fb = factor(cfg.brightness), fc = factor(cfg.contrast), fs = factor(cfg.saturation);
  const auto fh = static_cast<float>(rng.uniform(-cfg.hue, cfg.hue));
  std::array<int, 4> order{0, 1, 2, 3};
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  for (int op : order) {
    switch (op) {
      case 0: adjust_brightness(img, fb); break;
      case 1: adjust_contrast(img, fc); break;
      case 2: adjust_saturation(img, fs); break;
      default: adjust_hue(img, fh); break;
    }
  }
}

struct CropWindow {
  std::size_t top, left, height, width;
};

CropWindow sample_crop(const ImageRecord& img, const AugmentConfig& cfg, SeededRng& rng) {
  const double area = static_cast<double>(img.height * img.width);
  const double log_lo = std::log(cfg.crop_ratio_min), log_hi = std::log(cfg.crop_ratio_max);
  for (int attempt = 0; attempt < kCropAttempts; ++attempt) {
    const double target = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w >= 1 && h >= 1 && w <= img.width && h <= img.height) {
      const std::size_t top = rng.below(img.height - h + 1);
      const std::size_t left = rng.below(img.width - w + 1);
      return {top, left, h, w};
    }
  }
  // Largest centered window whose aspect ratio lies in range.
  const double in_ratio = static_cast<double>(img.width) / static_cast<double>(img.height);
  std::size_t w = img.width, h = img.height;
  if (in_ratio < cfg.crop_ratio_min) {
    h = std::min(h, static_cast<std::size_t>(std::lround(static_cast<double>(w) / cfg.crop_ratio_min)));
  } else if (in_ratio > cfg.crop_ratio_max) {
    w = std::min(w, static_cast<std::size_t>(std::lround(static_cast<double>(h) * cfg.crop_ratio_max)));
  }
  return {(img.height - h) / 2, (img.width - w) / 2, h, w};
}

}  // namespace

ImageRecord blank_image(std::size_t height, std::size_t width, float fill) {
  ImageRecord img;
  img.height = height;
  img.width = width;
  img.pixels.assign(3 * height * width, fill);
  img.box = {0, 0, height - 1, width - 1};
  return img;
}

std::vector<ImageRecord> parse_cifar10(std::span<const unsigned char> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("cifar10: size " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes));
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  std::vector<ImageRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError("cifar10: record " + std::to_string(i) + " has label " + std::to_string(rec[0]));
    }
    ImageRecord img = blank_image(32, 32);
    img.label = rec[0];
    for (std::size_t j = 0; j < 3072; ++j) img.pixels[j] = static_cast<float>(rec[1 + j]) / 255.0F;
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<ImageRecord> load_cifar10(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_cifar10(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

ImageRecord render_shape(ShapeClass cls, SeededRng& rng, bool noisy_background) {
  const std::size_t n = kSynthSize;
  ImageRecord img = blank_image(n, n);
  img.label = static_cast<int>(cls);
  std::array<float, 3> bg{}, fg{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    bg[ch] = noisy_background ? static_cast<float>(rng.uniform(0.0, 0.45)) : 0.0F;
    fg[ch] = static_cast<float>(rng.uniform(0.55, 1.0));
  }
  const double radius = rng.uniform(5.0, 11.0);
  const double cy = rng.uniform(radius, static_cast<double>(n) - radius);
  const double cx = rng.uniform(radius, static_cast<double>(n) - radius);

  auto inside = [&](double y, double x) {
    const double dy = y - cy, dx = x - cx;
    switch (cls) {
      case ShapeClass::disk: return dx * dx + dy * dy <= radius * radius;
      case ShapeClass::square: return std::abs(dx) <= 0.85 * radius && std::abs(dy) <= 0.85 * radius;
      case ShapeClass::triangle: {
        const double depth = (dy + radius) / (2.0 * radius);  // 0 at the apex, 1 at the base
        return depth >= 0.0 && depth <= 1.0 && std::abs(dx) <= radius * depth;
      }
      case ShapeClass::ring: {
        const double d2 = dx * dx + dy * dy;
        return d2 <= radius * radius && d2 >= 0.3 * radius * radius;
      }
    }
    return false;
  };

  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const bool on = inside(static_cast<double>(r) + 0.5, static_cast<double>(c) + 0.5);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const float noise = noisy_background ? static_cast<float>(0.08 * rng.normal()) : 0.0F;
        img.at(ch, r, c) = clamp01((on ? fg[ch] : bg[ch]) + (on ? 0.5F * noise : noise));
      }
    }
  }
  const auto lo = [&](double v) { return static_cast<std::size_t>(std::max(0.0, std::floor(v))); };
  const auto hi = [&](double v) { return std::min(n - 1, static_cast<std::size_t>(std::max(0.0, std::ceil(v) - 1.0))); };
  img.box = {lo(cy - radius), lo(cx - radius), hi(cy + radius), hi(cx + radius)};
  return img;
}

std::vector<ImageRecord> synth_shapes(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("synth_shapes: n must be at least 1");
  std::vector<ImageRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SeededRng rng(mix_seed(seed, i));
    out.push_back(render_shape(static_cast<ShapeClass>(i % kShapeClasses), rng));
  }
  return out;
}

std::vector<ImageRecord> load_dataset(const std::string& spec) {
  if (spec.rfind("cifar10:", 0) == 0) return load_cifar10(spec.substr(8));
  if (spec.rfind("synth:", 0) == 0) {
    const std::string rest = spec.substr(6);
    const auto colon = rest.find(':');
    if (colon == std::string::npos) throw ConfigError("dataset '" + spec + "': expected synth:<n>:<seed>");
    return synth_shapes(parse_size(std::string_view(rest).substr(0, colon), spec),
                        parse_size(std::string_view(rest).substr(colon + 1), spec));
  }
  throw ConfigError("dataset '" + spec + "': expected cifar10:<path> or synth:<n>:<seed>");
}

void AugmentConfig::validate() const {
  if (out_resolution == 0) throw ConfigError("augment: out_resolution must be positive");
  if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
    throw ConfigError("augment: crop scale range must lie in (0, 1]");
  }
  if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max)) {
    throw ConfigError("augment: crop ratio range must be positive and ordered");
  }
  check_prob(flip_prob, "flip_prob");
  check_prob(jitter_prob, "jitter_prob");
  check_prob(grayscale_prob, "grayscale_prob");
  for (double p : blur_prob) check_prob(p, "blur_prob");
  for (double p : solarize_prob) check_prob(p, "solarize_prob");
  if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) {
    throw ConfigError("augment: blur sigma range must be positive and ordered");
  }
}

ImageRecord resize_bilinear(const ImageRecord& img, std::size_t top, std::size_t left,
                            std::size_t height, std::size_t width, std::size_t out_h,
                            std::size_t out_w) {
  ImageRecord out = blank_image(out_h, out_w);
  out.label = img.label;
  const double sy = static_cast<double>(height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(width) / static_cast<double>(out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    const double y = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, static_cast<double>(height - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    const double wy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < out_w; ++c) {
      const double x = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, static_cast<double>(width - 1));
      const auto x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, width - 1);
      const double wx = x - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double a = img.at(ch, top + y0, left + x0), b = img.at(ch, top + y0, left + x1);
        const double cc = img.at(ch, top + y1, left + x0), d = img.at(ch, top + y1, left + x1);
        const double v = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * cc + wx * d);
        out.at(ch, r, c) = static_cast<float>(v);
      }
    }
  }
  return out;
}

ImageRecord flip_horizontal(const ImageRecord& img) {
  ImageRecord out = img;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t r = 0; r < img.height; ++r)
      for (std::size_t c = 0; c < img.width; ++c) out.at(ch, r, c) = img.at(ch, r, img.width - 1 - c);
  return out;
}

ImageRecord to_grayscale(const ImageRecord& img) {
  ImageRecord out = img;
  out.pixels = gray_planes(img);
  return out;
}

ImageRecord gaussian_blur(const ImageRecord& img, double sigma, std::size_t radius) {
  const std::size_t taps = 2 * radius + 1;
  std::vector<double> kernel(taps);
  double total = 0.0;
  for (std::size_t i = 0; i < taps; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    total += kernel[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  for (double& k : kernel) k /= total;

  const auto h = static_cast<std::ptrdiff_t>(img.height), w = static_cast<std::ptrdiff_t>(img.width);
  const auto rad = static_cast<std::ptrdiff_t>(radius);
  auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t hi) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, hi - 1)); };
  ImageRecord tmp = img, out = img;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::ptrdiff_t r = 0; r < h; ++r) {
      for (std::ptrdiff_t c = 0; c < w; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t k = -rad; k <= rad; ++k) acc += kernel[static_cast<std::size_t>(k + rad)] * img.at(ch, static_cast<std::size_t>(r), clampi(c + k, w));
        tmp.at(ch, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(acc);
      }
    }
    for (std::ptrdiff_t r = 0; r < h; ++r) {
      for (std::ptrdiff_t c = 0; c < w; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t k = -rad; k <= rad; ++k) acc += kernel[static_cast<std::size_t>(k + rad)] * tmp.at(ch, clampi(r + k, h), static_cast<std::size_t>(c));
        out.at(ch, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

std::vector<unsigned char> solarize_mask(const ImageRecord& img, float threshold) {
  std::vector<unsigned char> mask(img.pixels.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = img.pixels[i] >= threshold ? 1 : 0;
  return mask;
}

ImageRecord invert_where(const ImageRecord& img, std::span<const unsigned char> mask) {
  if (mask.size() != img.pixels.size()) throw DimensionError("invert_where: mask size differs from image");
  ImageRecord out = img;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0) out.pixels[i] = 1.0F - out.pixels[i];
  }
  return out;
}

ImageRecord solarize(const ImageRecord& img, float threshold) {
  return invert_where(img, solarize_mask(img, threshold));
}

ImageRecord augment_view(const ImageRecord& img, const AugmentConfig& cfg, std::uint64_t seed,
                         int view_index) {
  if (view_index != 1 && view_index != 2) throw ContractError("augment_view: view_index must be 1 or 2");
  if (img.height < 8 || img.width < 8) throw DataError("augment_view: image smaller than 8x8");
  const auto v = static_cast<std::size_t>(view_index - 1);
  SeededRng rng(seed);

  const CropWindow crop = sample_crop(img, cfg, rng);
  ImageRecord out = resize_bilinear(img, crop.top, crop.left, crop.height, crop.width,
                                    cfg.out_resolution, cfg.out_resolution);
  if (rng.bernoulli(cfg.flip_prob)) out = flip_horizontal(out);
  if (rng.bernoulli(cfg.jitter_prob)) color_jitter(out, cfg, rng);
  if (rng.bernoulli(cfg.grayscale_prob)) out = to_grayscale(out);
  if (rng.bernoulli(cfg.blur_prob[v])) {
    out = gaussian_blur(out, rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max), cfg.blur_radius);
  }
  if (rng.bernoulli(cfg.solarize_prob[v])) out = solarize(out, cfg.solarize_threshold);
  for (float& p : out.pixels) p = clamp01(p);
  out.box = {0, 0, out.height - 1, out.width - 1};
  return out;
}

ViewPair make_view_pair(const ImageRecord& img, const AugmentConfig& cfg, SeededRng& rng) {
  ViewPair pair;
  pair.seed_first = rng.next_u64();
  pair.seed_second = rng.next_u64();
  pair.first = augment_view(img, cfg, pair.seed_first, 1);
  pair.second = augment_view(img, cfg, pair.seed_second, 2);
  return pair;
}

Tensor stack_images(std::span<const ImageRecord* const> images) {
  if (images.empty()) throw DataError("stack_images: empty batch");
  const std::size_t h = images[0]->height, w = images[0]->width, per = 3 * h * w;
  Tensor out({images.size(), 3, h, w});
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != h || images[i]->width != w) {
      throw DimensionError("stack_images: image " + std::to_string(i) + " has a different size");
    }
    std::copy(images[i]->pixels.begin(), images[i]->pixels.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

Tensor stack_images(std::span<const ImageRecord> images) {
  std::vector<const ImageRecord*> ptrs;
  for (const auto& img : images) ptrs.push_back(&img);
  return stack_images(std::span<const ImageRecord* const>(ptrs));
}

}  // namespace care::data
