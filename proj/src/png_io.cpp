#include "ulm/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "ulm/errors.hpp"

namespace ulm::png {

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void write_chunk(std::ofstream& os, const char type[4],
                 const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> head;
  put_u32_be(head, static_cast<std::uint32_t>(payload.size()));
  os.write(reinterpret_cast<const char*>(head.data()), 4);
  os.write(type, 4);
  if (!payload.empty()) {
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
  }
  std::uint32_t crc =
      crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!payload.empty()) {
    crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
  }
  std::vector<std::uint8_t> tail;
  put_u32_be(tail, crc);
  os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

void write_png(const std::filesystem::path& path, int width, int height,
               int bit_depth, const std::vector<std::uint8_t>& raw_rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw ValidationError("cannot open for write: " + path.string());
  }
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a,
                                      '\n'};
  os.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(width));
  put_u32_be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(static_cast<std::uint8_t>(bit_depth));
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // adaptive filtering
  ihdr.push_back(0);  // no interlace
  write_chunk(os, "IHDR", ihdr);

  uLongf bound = compressBound(static_cast<uLong>(raw_rows.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw_rows.data(),
                static_cast<uLong>(raw_rows.size()), 6) != Z_OK) {
    throw NumericError("png: zlib compression failed");
  }
  compressed.resize(bound);
  write_chunk(os, "IDAT", compressed);
  write_chunk(os, "IEND", {});
  if (!os) {
    throw ValidationError("write failed: " + path.string());
  }
}

}  // namespace

void write_gray8(const std::filesystem::path& path, int width, int height,
                 const std::vector<std::uint8_t>& pixels) {
  if (width < 1 || height < 1 ||
      pixels.size() != static_cast<size_t>(width) * height) {
    throw ValidationError("write_gray8: pixel count mismatch");
  }
  std::vector<std::uint8_t> rows;
  rows.reserve(static_cast<size_t>(height) * (width + 1));
  for (int y = 0; y < height; ++y) {
    rows.push_back(0);  // filter: none
    rows.insert(rows.end(), pixels.begin() + static_cast<size_t>(y) * width,
                pixels.begin() + static_cast<size_t>(y + 1) * width);
  }
  write_png(path, width, height, 8, rows);
}

void write_gray16(const std::filesystem::path& path, int width, int height,
                  const std::vector<std::uint16_t>& pixels) {
  if (width < 1 || height < 1 ||
      pixels.size() != static_cast<size_t>(width) * height) {
    throw ValidationError("write_gray16: pixel count mismatch");
  }
  std::vector<std::uint8_t> rows;
  rows.reserve(static_cast<size_t>(height) * (2 * width + 1));
  for (int y = 0; y < height; ++y) {
    rows.push_back(0);
    for (int x = 0; x < width; ++x) {
      const std::uint16_t v = pixels[static_cast<size_t>(y) * width + x];
      rows.push_back(static_cast<std::uint8_t>(v >> 8));  // PNG is big-endian
      rows.push_back(static_cast<std::uint8_t>(v & 0xff));
    }
  }
  write_png(path, width, height, 16, rows);
}

}  // namespace ulm::png
