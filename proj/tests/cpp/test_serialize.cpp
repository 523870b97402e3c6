#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "apt/image_io.hpp"
#include "apt/rng.hpp"
#include "apt/serialize.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace apt;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "apt_serialize_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise exact") {
  RandomStream rs(1);
  Checkpoint ck;
  ck.meta = {{"kind", "demo"}, {"seed", 42}, {"config_hash", "deadbeef"}};
  Tensor w({3, 4});
  rs.fill_normal(w);
  Tensor b({4});
  rs.fill_normal(b);
  ck.add("layer.w", w);
  ck.add("layer.b", b);

  auto path = temp_path("roundtrip.aptc").string();
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);

  CHECK(back.meta.at("kind") == "demo");
  CHECK(back.meta.at("seed") == 42);
  REQUIRE(back.arrays.size() == 2);
  CHECK(back.arrays[0].name == "layer.w");
  CHECK(back.tensor("layer.w").same_shape(w));
  for (int64_t i = 0; i < w.size(); ++i) CHECK(back.tensor("layer.w")[i] == w[i]);
  for (int64_t i = 0; i < b.size(); ++i) CHECK(back.tensor("layer.b")[i] == b[i]);
  CHECK(back.find("missing") == nullptr);
  CHECK_THROWS_AS(back.tensor("missing"), std::out_of_range);
}

TEST_CASE("u8 arrays round trip and are validated") {
  Checkpoint ck;
  Tensor img({2, 2});
  img[0] = 0; img[1] = 255; img[2] = 17; img[3] = 128;
  ck.add("pixels", img, Dtype::u8);
  auto path = temp_path("u8.aptc").string();
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);
  for (int i = 0; i < 4; ++i) CHECK(back.tensor("pixels")[i] == img[i]);

  Checkpoint bad;
  bad.add("pixels", Tensor::full({1}, 0.5), Dtype::u8);
  CHECK_THROWS_AS(save_checkpoint(temp_path("bad.aptc").string(), bad), std::invalid_argument);
}

TEST_CASE("version mismatch is refused") {
  Checkpoint ck;
  ck.add("x", Tensor::scalar(1.0));
  auto path = temp_path("ver.aptc").string();
  save_checkpoint(path, ck);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    uint32_t bogus = 999;
    f.write(reinterpret_cast<const char*>(&bogus), 4);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), std::runtime_error);
}

TEST_CASE("bad magic and missing file are refused") {
  auto path = temp_path("magic.aptc").string();
  write_text_file(path, "not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint(temp_path("nope.aptc").string()), std::runtime_error);
}

TEST_CASE("duplicate array names are rejected") {
  Checkpoint ck;
  ck.add("x", Tensor::scalar(1.0));
  CHECK_THROWS_AS(ck.add("x", Tensor::scalar(2.0)), std::invalid_argument);
}

TEST_CASE("file hash is content-determined") {
  auto p1 = temp_path("h1.bin").string();
  auto p2 = temp_path("h2.bin").string();
  write_text_file(p1, "hello world");
  write_text_file(p2, "hello world");
  CHECK(hash_file_hex(p1) == hash_file_hex(p2));
  write_text_file(p2, "hello worle");
  CHECK(hash_file_hex(p1) != hash_file_hex(p2));
  CHECK(hash_file_hex(p1).size() == 16);
}

TEST_CASE("json hash is key-order independent") {
  nlohmann::json a = {{"b", 1}, {"a", 2}};
  nlohmann::json b;
  b["a"] = 2;
  b["b"] = 1;
  CHECK(hash_json_hex(a) == hash_json_hex(b));
  b["a"] = 3;
  CHECK(hash_json_hex(a) != hash_json_hex(b));
}

TEST_CASE("png round trip rgb") {
  RandomStream rs(7);
  ImageU8 img;
  img.width = 13;
  img.height = 9;
  img.channels = 3;
  img.pixels.resize(13 * 9 * 3);
  for (auto& p : img.pixels) p = static_cast<uint8_t>(rs.uniform_int(256));
  auto path = temp_path("rt.png").string();
  write_png(path, img);
  ImageU8 back = read_png(path);
  CHECK(back.width == 13);
  CHECK(back.height == 9);
  CHECK(back.channels == 3);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("tensor to u8 conversion clamps and quantizes") {
  Tensor t({3, 1, 2});
  t[0] = -1.0; t[1] = 1.0;   // R
  t[2] = 0.0;  t[3] = 5.0;   // G: clamped high
  t[4] = -3.0; t[5] = 0.5;   // B: clamped low
  ImageU8 img = to_u8(t);
  CHECK(img.pixels[0] == 0);
  CHECK(img.pixels[1] == 128);  // 0.0 -> 0.5 -> round(127.5)
  CHECK(img.pixels[2] == 0);
  CHECK(img.pixels[3] == 255);
  CHECK(img.pixels[4] == 255);
  CHECK(img.pixels[5] == 191);

  Tensor back = from_u8(img);
  CHECK(back.dim(0) == 3);
  CHECK(back[0] == doctest::Approx(-1.0));
  CHECK(back[1] == doctest::Approx(1.0));
}

TEST_CASE("grid layout places tiles with padding") {
  std::vector<Tensor> tiles;
  for (int i = 0; i < 3; ++i) tiles.push_back(Tensor::full({1, 2, 2}, static_cast<double>(i)));
  Tensor g = make_grid(tiles, 2, 1, -1.0);
  CHECK(g.dim(1) == 2 * 2 + 3);  // 2 rows of height 2, 3 pad lines
  CHECK(g.dim(2) == 2 * 2 + 3);
  CHECK(g[0] == -1.0);                 // padding corner
  CHECK(g[1 * 7 + 1] == 0.0);          // first tile
  CHECK(g[1 * 7 + 4] == 1.0);          // second tile
  CHECK(g[4 * 7 + 1] == 2.0);          // third tile, second row
}
