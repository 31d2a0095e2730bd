#include "care/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "care/errors.hpp"
#include "json.hpp"

namespace care::io {

namespace {

constexpr unsigned char kMagic[4] = {'C', 'A', 'R', 'E'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeBytes = 2;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void bytes(std::span<const unsigned char> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<unsigned char> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  std::vector<unsigned char> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : b_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1, "u8")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2, "u16")); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4, "u32")); }
  std::span<const unsigned char> take(std::size_t n, const std::string& what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n, const std::string& what) {
    if (remaining() < n) {
      throw TruncatedError("checkpoint truncated reading " + what + " at byte " + std::to_string(pos_) +
                           " (" + std::to_string(n) + " needed, " + std::to_string(remaining()) + " left)");
    }
  }
  std::uint64_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

void write_name(Writer& w, std::string_view name) {
  if (name.size() > 0xFFFF) throw FormatError("checkpoint entry name too long: " + std::string(name.substr(0, 40)));
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes({reinterpret_cast<const unsigned char*>(name.data()), name.size()});
}

std::string meta_json(const CheckpointMeta& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["config_hash"] = m.config_hash;
  j["export"] = m.exported;
  j["config"] = m.config_text;
  return j.dump();
}

CheckpointMeta parse_meta(std::span<const unsigned char> bytes) {
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    CheckpointMeta m;
    m.step = j.at("step").get<std::uint64_t>();
    m.config_hash = j.at("config_hash").get<std::uint64_t>();
    m.exported = j.at("export").get<std::string>();
    m.config_text = j.at("config").get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is malformed: ") + e.what());
  }
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0F, 1.0F) * 255.0F));
}

std::string ppm_header(std::size_t height, std::size_t width) {
  return "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
}

void write_rgb(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<unsigned char>& rgb) {
  const std::string header = ppm_header(height, width);
  std::vector<unsigned char> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), rgb.begin(), rgb.end());
  write_file(path, bytes);
}

}  // namespace

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

std::vector<unsigned char> serialize(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size() + 1));
  for (const auto& e : ckpt.entries) {
    if (e.name == kMetaEntry) throw FormatError("checkpoint entry name '__meta__' is reserved");
    write_name(w, e.name);
    w.u8(kDtypeF32);
    const Shape& shape = e.tensor.shape();
    if (shape.size() > 0xFF) throw FormatError("tensor rank too large for " + e.name);
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.tensor.data()) w.u32(std::bit_cast<std::uint32_t>(v));
  }
  const std::string meta = meta_json(ckpt.meta);
  write_name(w, kMetaEntry);
  w.u8(kDtypeBytes);
  w.u8(1);
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes({reinterpret_cast<const unsigned char*>(meta.data()), meta.size()});
  return w.take();
}

Checkpoint deserialize(std::span<const unsigned char> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) throw BadMagicError("not a checkpoint: bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    const auto name_bytes = r.take(len, "entry name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint8_t dtype = r.u8();
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = shape_numel(shape);
    if (dtype == kDtypeBytes && name == kMetaEntry && rank == 1) {
      ckpt.meta = parse_meta(r.take(n, "metadata"));
      continue;
    }
    if (dtype != kDtypeF32) throw FormatError("entry " + name + " has unsupported dtype " + std::to_string(dtype));
    if (n > r.remaining() / 4) throw TruncatedError("checkpoint truncated in payload of " + name);
    const auto payload = r.take(4 * n, "payload of " + name);
    std::vector<float> data(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(payload[4 * k + static_cast<std::size_t>(b)]) << (8 * b);
      data[k] = std::bit_cast<float>(bits);
    }
    ckpt.entries.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, serialize(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return deserialize(bytes);
  } catch (const BadMagicError& e) {
    throw BadMagicError(path.string() + ": " + e.what());
  } catch (const VersionError& e) {
    throw VersionError(path.string() + ": " + e.what());
  } catch (const TruncatedError& e) {
    throw TruncatedError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::array<unsigned char, 3> heat_color(float v) {
  const float t = std::clamp(v, 0.0F, 1.0F);
  return {quantize(t), 0, quantize(1.0F - t)};
}

void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const float> planar_rgb) {
  const std::size_t plane = height * width;
  if (planar_rgb.size() != 3 * plane) throw DimensionError("write_ppm: expected 3 planes of " + std::to_string(plane));
  std::vector<unsigned char> rgb(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t ch = 0; ch < 3; ++ch) rgb[3 * p + ch] = quantize(planar_rgb[ch * plane + p]);
  }
  write_rgb(path, height, width, rgb);
}

void write_heatmap_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
                       std::span<const float> values) {
  if (values.size() != height * width) throw DimensionError("write_heatmap_ppm: value count differs from height*width");
  std::vector<unsigned char> rgb(3 * values.size());
  for (std::size_t p = 0; p < values.size(); ++p) {
    const auto c = heat_color(values[p]);
    std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * p));
  }
  write_rgb(path, height, width, rgb);
}

}  // namespace care::io
