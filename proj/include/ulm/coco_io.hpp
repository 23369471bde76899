#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ulm/errors.hpp"
#include "ulm/simulator.hpp"

namespace ulm::coco {

// Load failures by category, all rooted in ValidationError for the CLI.
class CocoParseError : public ValidationError {
  using ValidationError::ValidationError;
};
class CocoSchemaError : public ValidationError {
  using ValidationError::ValidationError;
};
class CocoIntegrityError : public ValidationError {
  using ValidationError::ValidationError;
};

struct CocoImage {
  std::int64_t id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;

  bool operator==(const CocoImage&) const = default;
};

struct CocoAnnotation {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  int category_id = 0;
  std::array<double, 4> bbox{};  // [x_top_left, y_top_left, w, h], pixels
  double area = 0.0;
  int iscrowd = 0;

  bool operator==(const CocoAnnotation&) const = default;
};

struct CocoCategory {
  int id = 0;
  std::string name;

  bool operator==(const CocoCategory&) const = default;
};

struct CocoDataset {
  std::vector<CocoImage> images;
  std::vector<CocoAnnotation> annotations;
  std::vector<CocoCategory> categories;

  bool operator==(const CocoDataset&) const = default;
};

inline constexpr int kMicrobubbleCategoryId = 1;  // 0 is the no-object slot

/// One image record per frame, one annotation per ground-truth item.
/// Annotation ids run sequentially from 1; image ids are frame ids.
CocoDataset to_coco(const std::vector<sim::SimulatedFrame>& frames,
                    const std::string& category_name);

/// Fixed key order, id-sorted lists, floats rounded to 6 decimals; the
/// save -> load -> save cycle is byte-stable.
void save(const CocoDataset& d, const std::filesystem::path& path);
CocoDataset load(const std::filesystem::path& path);

}  // namespace ulm::coco
