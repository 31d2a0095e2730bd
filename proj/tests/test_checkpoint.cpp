#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "care/checkpoint.hpp"
#include "care/errors.hpp"
#include "care/rng.hpp"
#include "doctest.h"

using namespace care;
using namespace care::io;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "care_test_io";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Checkpoint random_checkpoint(std::uint64_t seed) {
  SeededRng rng(seed);
  Checkpoint c;
  const std::vector<Shape> shapes{{3}, {2, 5}, {4, 3, 3, 3}, {1}, {2, 1, 2}};
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Tensor t(shapes[i]);
    for (float& v : t.mutable_data()) v = static_cast<float>(rng.normal() * 1e3);
    c.entries.push_back({"group" + std::to_string(i) + ".w", t});
  }
  // Awkward values must survive bit for bit.
  c.entries[0].tensor.mutable_data()[0] = -0.0F;
  c.entries[0].tensor.mutable_data()[1] = 1e-42F;
  c.meta.step = 12345;
  c.meta.config_hash = 0xfeedfacecafebeefULL;
  c.meta.config_text = "lambda = 100\nout = \"quoted\" path\n";
  return c;
}

}  // namespace

TEST_CASE("checkpoint roundtrip is bitwise") {
  const Checkpoint c = random_checkpoint(3);
  const auto path = scratch("rt.ckpt");
  save_checkpoint(path, c);
  const Checkpoint back = load_checkpoint(path);
  REQUIRE(back.entries.size() == c.entries.size());
  for (std::size_t i = 0; i < c.entries.size(); ++i) {
    CHECK(back.entries[i].name == c.entries[i].name);
    CHECK(bitwise_equal(back.entries[i].tensor, c.entries[i].tensor));
  }
  CHECK(back.meta == c.meta);
  CHECK(back.find("group2.w") != nullptr);
  CHECK(back.find("absent") == nullptr);
  CHECK(serialize(back) == serialize(c));
}

TEST_CASE("layout begins with magic, version and entry count") {
  const auto bytes = serialize(random_checkpoint(1));
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CARE");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  // Five tensors plus the metadata entry.
  CHECK(bytes[8] == 6);
}

TEST_CASE("empty entry list is a valid checkpoint") {
  std::vector<unsigned char> bytes{'C', 'A', 'R', 'E', 1, 0, 0, 0, 0, 0, 0, 0};
  const Checkpoint c = deserialize(bytes);
  CHECK(c.entries.empty());
  CHECK(c.meta.step == 0);
}

TEST_CASE("corrupt inputs raise distinct errors") {
  auto bytes = serialize(random_checkpoint(2));
  SUBCASE("bad magic") {
    std::copy_n("XXXX", 4, bytes.begin());
    CHECK_THROWS_AS(deserialize(bytes), BadMagicError);
  }
  SUBCASE("version") {
    bytes[4] = 2;
    CHECK_THROWS_AS(deserialize(bytes), VersionError);
  }
  SUBCASE("truncated at every prefix") {
    for (std::size_t n = 12; n < bytes.size(); n += 7) {
      CHECK_THROWS_AS(deserialize(std::span(bytes).first(n)), TruncatedError);
    }
    CHECK_THROWS_AS(deserialize(std::span(bytes).first(3)), FormatError);
  }
  SUBCASE("trailing garbage") {
    bytes.push_back(0);
    CHECK_THROWS_AS(deserialize(bytes), FormatError);
  }
  SUBCASE("truncated file keeps its type and names the path") {
    const auto path = scratch("cut.ckpt");
    std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), 40);
    try {
      load_checkpoint(path);
      FAIL("expected TruncatedError");
    } catch (const TruncatedError& e) {
      CHECK(std::string(e.what()).find("cut.ckpt") != std::string::npos);
    }
  }
  CHECK_THROWS_AS(load_checkpoint(scratch("does_not_exist.ckpt")), IoError);
}

TEST_CASE("1x1 white PPM") {
  const auto path = scratch("white.ppm");
  const std::vector<float> px{1.0F, 1.0F, 1.0F};
  write_ppm(path, 1, 1, px);
  const auto bytes = read_bytes(path);
  const std::string header = "P6\n1 1\n255\n";
  REQUIRE(bytes.size() == header.size() + 3);
  CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())) == header);
  CHECK(bytes[header.size()] == 255);
  CHECK(bytes[header.size() + 1] == 255);
  CHECK(bytes[header.size() + 2] == 255);
}

TEST_CASE("heat ramp endpoints and file size") {
  CHECK(heat_color(0.0F) == std::array<unsigned char, 3>{0, 0, 255});
  CHECK(heat_color(1.0F) == std::array<unsigned char, 3>{255, 0, 0});
  CHECK(heat_color(2.0F) == heat_color(1.0F));
  const std::size_t h = 7, w = 5;
  std::vector<float> v(h * w);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i) / static_cast<float>(v.size() - 1);
  const auto path = scratch("heat.ppm");
  write_heatmap_ppm(path, h, w, v);
  const std::string header = "P6\n5 7\n255\n";
  const auto bytes = read_bytes(path);
  CHECK(bytes.size() == header.size() + 3 * h * w);
  CHECK(bytes[header.size() + 2] == 255);
  CHECK(bytes.back() == 0);
  CHECK_THROWS_AS(write_heatmap_ppm(path, h, w + 1, v), DimensionError);
  CHECK_THROWS_AS(write_ppm("/nonexistent/dir/x.ppm", 1, 1, std::vector<float>{0, 0, 0}), IoError);
}
