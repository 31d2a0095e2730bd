#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "care/tensor.hpp"

namespace care::io {

// Layout (all integers little-endian):
//   "CARE" | u32 version | u32 entry count | entries...
//   entry: u16 name length | name | u8 dtype | u8 rank | u32 dims[rank] | payload
// dtype 0 is f32. Metadata is the final entry, "__meta__", dtype 2 (raw
// bytes) holding a JSON object.
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kMetaEntry = "__meta__";

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::uint64_t config_hash = 0;
  // Parameter group kept for downstream use.
  std::string exported = "encoder1";
  std::string config_text;

  bool operator==(const CheckpointMeta&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::vector<NamedTensor> entries;
  CheckpointMeta meta;

  // nullptr when absent.
  const Tensor* find(std::string_view name) const;
};

std::vector<unsigned char> serialize(const Checkpoint& ckpt);
// Throws BadMagicError, VersionError, TruncatedError or FormatError.
Checkpoint deserialize(std::span<const unsigned char> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Binary P6, maxval 255. Values are clamped to [0,1] before quantization.
void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const float> planar_rgb);
// Single-channel values in [0,1] drawn on a linear blue (0) to red (1) ramp.
void write_heatmap_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
                       std::span<const float> values);
std::array<unsigned char, 3> heat_color(float v);

}  // namespace care::io
