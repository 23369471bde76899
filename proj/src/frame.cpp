#include "ulm/frame.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ulm/errors.hpp"
#include "ulm/png_io.hpp"

namespace ulm {

namespace {

void put_u32_le(std::ofstream& os, std::uint32_t v) {
  const std::uint8_t b[4] = {
      static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
      static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

Frame Frame::zeros(int width, int height, int frame_id) {
  Frame f;
  f.width = width;
  f.height = height;
  f.frame_id = frame_id;
  f.pixels.assign(static_cast<size_t>(width) * height, 0.0f);
  return f;
}

void write_ulmf(const Frame& f, const std::filesystem::path& path) {
  if (f.width < 1 || f.height < 1 ||
      f.pixels.size() != static_cast<size_t>(f.width) * f.height) {
    throw ValidationError("write_ulmf: malformed frame");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw ValidationError("cannot open for write: " + path.string());
  }
  os.write("ULMF", 4);
  put_u32_le(os, static_cast<std::uint32_t>(f.width));
  put_u32_le(os, static_cast<std::uint32_t>(f.height));
  // f32 little-endian; this targets little-endian hosts.
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(f.pixels.data()),
           static_cast<std::streamsize>(f.pixels.size() * 4));
  if (!os) {
    throw ValidationError("write failed: " + path.string());
  }
}

Frame read_ulmf(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw ValidationError("cannot open: " + path.string());
  }
  std::uint8_t head[12];
  is.read(reinterpret_cast<char*>(head), 12);
  if (is.gcount() != 12 || std::memcmp(head, "ULMF", 4) != 0) {
    throw ValidationError("not a ULMF file: " + path.string());
  }
  Frame f;
  f.width = static_cast<int>(get_u32_le(head + 4));
  f.height = static_cast<int>(get_u32_le(head + 8));
  if (f.width < 1 || f.height < 1 || f.width > (1 << 20) ||
      f.height > (1 << 20)) {
    throw ValidationError("ULMF: implausible dimensions in " + path.string());
  }
  f.pixels.resize(static_cast<size_t>(f.width) * f.height);
  is.read(reinterpret_cast<char*>(f.pixels.data()),
          static_cast<std::streamsize>(f.pixels.size() * 4));
  if (is.gcount() != static_cast<std::streamsize>(f.pixels.size() * 4)) {
    throw ValidationError("ULMF: truncated pixel data in " + path.string());
  }
  for (float v : f.pixels) {
    if (!std::isfinite(v)) {
      throw ValidationError("ULMF: non-finite pixel in " + path.string());
    }
  }
  return f;
}

void write_frame_png(const Frame& f, const std::filesystem::path& path) {
  float peak = 0.0f;
  for (float v : f.pixels) peak = std::max(peak, v);
  if (peak <= 0.0f) peak = 1.0f;
  std::vector<std::uint8_t> bytes(f.pixels.size());
  for (size_t i = 0; i < f.pixels.size(); ++i) {
    const float v = std::clamp(f.pixels[i] / peak, 0.0f, 1.0f);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  png::write_gray8(path, f.width, f.height, bytes);
}

}  // namespace ulm
