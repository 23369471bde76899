#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ulm {

/// Single-channel float image, row-major, the unit of simulation and
/// inference.
struct Frame {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // width * height, row-major
  int frame_id = 0;

  float at(int x, int y) const { return pixels[y * width + x]; }
  float& at(int x, int y) { return pixels[y * width + x]; }

  static Frame zeros(int width, int height, int frame_id = 0);
};

// ULMF container: magic "ULMF", little-endian u32 width, u32 height, then
// width*height little-endian f32 row-major.
void write_ulmf(const Frame& f, const std::filesystem::path& path);
Frame read_ulmf(const std::filesystem::path& path);

/// Lossy 8-bit grayscale PNG for visualization, intensity scaled by the
/// frame maximum. Not consumed by the pipeline.
void write_frame_png(const Frame& f, const std::filesystem::path& path);

}  // namespace ulm
