#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ulm::png {

// Minimal grayscale PNG encoders (zlib-backed, filter type 0 throughout).
void write_gray8(const std::filesystem::path& path, int width, int height,
                 const std::vector<std::uint8_t>& pixels);
void write_gray16(const std::filesystem::path& path, int width, int height,
                  const std::vector<std::uint16_t>& pixels);

}  // namespace ulm::png
