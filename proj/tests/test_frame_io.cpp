#include "ulm/frame.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <zlib.h>

#include "doctest.h"
#include "ulm/errors.hpp"
#include "ulm/png_io.hpp"
#include "ulm/rng.hpp"
#include "ulm/simulator.hpp"

using namespace ulm;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  return fs::temp_directory_path() / name;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("ulmf round-trip is bit-exact") {
  const auto sf = sim::simulate_frame(48, 32, 4, sim::PsfModel{}, 0.05, 5);
  const auto path = temp_file("rt.ulmf");
  write_ulmf(sf.frame, path);
  const Frame back = read_ulmf(path);
  CHECK(back.width == 48);
  CHECK(back.height == 32);
  CHECK(back.pixels == sf.frame.pixels);
  fs::remove(path);
}

TEST_CASE("ulmf header is the documented layout") {
  Frame f = Frame::zeros(2, 1);
  f.at(0, 0) = 1.0f;
  const auto path = temp_file("hdr.ulmf");
  write_ulmf(f, path);
  const auto bytes = slurp(path);
  REQUIRE(bytes.size() == 4 + 4 + 4 + 2 * 4);
  CHECK(bytes[0] == 'U');
  CHECK(bytes[1] == 'L');
  CHECK(bytes[2] == 'M');
  CHECK(bytes[3] == 'F');
  CHECK(bytes[4] == 2);  // width, little-endian
  CHECK(bytes[5] == 0);
  CHECK(bytes[8] == 1);  // height
  // 1.0f little-endian = 00 00 80 3f
  CHECK(bytes[12] == 0x00);
  CHECK(bytes[14] == 0x80);
  CHECK(bytes[15] == 0x3f);
  fs::remove(path);
}

TEST_CASE("ulmf rejects bad magic and truncation") {
  const auto path = temp_file("bad.ulmf");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_AS(read_ulmf(path), ValidationError);
  {
    Frame f = Frame::zeros(4, 4);
    write_ulmf(f, path);
    fs::resize_file(path, 20);  // chop the pixel payload
  }
  CHECK_THROWS_AS(read_ulmf(path), ValidationError);
  CHECK_THROWS_AS(read_ulmf(temp_file("missing.ulmf")), ValidationError);
  fs::remove(path);
}

namespace {

// Minimal PNG reader for the test: parses IHDR, inflates the IDAT stream,
// strips the per-row filter byte (always filter 0 here).
struct DecodedPng {
  int width = 0, height = 0, bit_depth = 0, color_type = 0;
  std::vector<std::uint8_t> scanlines;  // filter bytes removed
};

DecodedPng decode_png(const fs::path& p) {
  const auto bytes = slurp(p);
  REQUIRE(bytes.size() > 8);
  const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  for (int i = 0; i < 8; ++i) REQUIRE(bytes[i] == sig[i]);

  DecodedPng out;
  std::vector<std::uint8_t> idat;
  size_t off = 8;
  auto u32 = [&](size_t at) {
    return (static_cast<std::uint32_t>(bytes[at]) << 24) |
           (bytes[at + 1] << 16) | (bytes[at + 2] << 8) | bytes[at + 3];
  };
  while (off + 8 <= bytes.size()) {
    const std::uint32_t len = u32(off);
    const std::string type(bytes.begin() + off + 4, bytes.begin() + off + 8);
    const size_t data = off + 8;
    if (type == "IHDR") {
      out.width = static_cast<int>(u32(data));
      out.height = static_cast<int>(u32(data + 4));
      out.bit_depth = bytes[data + 8];
      out.color_type = bytes[data + 9];
    } else if (type == "IDAT") {
      idat.insert(idat.end(), bytes.begin() + data, bytes.begin() + data + len);
    }
    off = data + len + 4;  // skip crc
    if (type == "IEND") break;
  }
  const int bpp = out.bit_depth / 8;
  uLongf raw_len = static_cast<uLongf>(out.height) * (1 + out.width * bpp);
  std::vector<std::uint8_t> raw(raw_len);
  REQUIRE(uncompress(raw.data(), &raw_len, idat.data(),
                     static_cast<uLong>(idat.size())) == Z_OK);
  REQUIRE(raw_len == raw.size());
  for (int y = 0; y < out.height; ++y) {
    const std::uint8_t* row = raw.data() + y * (1 + out.width * bpp);
    REQUIRE(row[0] == 0);  // filter type 0
    out.scanlines.insert(out.scanlines.end(), row + 1,
                         row + 1 + out.width * bpp);
  }
  return out;
}

}  // namespace

TEST_CASE("gray8 png round-trips through a zlib decode") {
  std::vector<std::uint8_t> pix = {0, 64, 128, 255, 10, 20};
  const auto path = temp_file("g8.png");
  png::write_gray8(path, 3, 2, pix);
  const auto d = decode_png(path);
  CHECK(d.width == 3);
  CHECK(d.height == 2);
  CHECK(d.bit_depth == 8);
  CHECK(d.color_type == 0);
  CHECK(d.scanlines == pix);
  fs::remove(path);
}

TEST_CASE("gray16 png stores big-endian samples") {
  std::vector<std::uint16_t> pix = {0x0102, 0xfffe};
  const auto path = temp_file("g16.png");
  png::write_gray16(path, 2, 1, pix);
  const auto d = decode_png(path);
  CHECK(d.bit_depth == 16);
  REQUIRE(d.scanlines.size() == 4);
  CHECK(d.scanlines[0] == 0x01);
  CHECK(d.scanlines[1] == 0x02);
  CHECK(d.scanlines[2] == 0xff);
  CHECK(d.scanlines[3] == 0xfe);
  fs::remove(path);
}

TEST_CASE("frame png export scales to the frame peak") {
  Frame f = Frame::zeros(2, 1);
  f.at(0, 0) = 0.5f;
  f.at(1, 0) = 2.0f;
  const auto path = temp_file("fp.png");
  write_frame_png(f, path);
  const auto d = decode_png(path);
  CHECK(d.scanlines[1] == 255);
  CHECK(d.scanlines[0] == 64);  // round(0.25 * 255)
  fs::remove(path);
}
