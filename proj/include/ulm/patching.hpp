#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "ulm/frame.hpp"
#include "ulm/geometry.hpp"
#include "ulm/set_loss.hpp"

namespace ulm::patch {

/// K x K tiling of a frame. Patches are indexed row-major with x fastest;
/// when a side is not divisible by k the last row/column extends to the edge.
struct PatchGrid {
  int k = 1;
  int frame_w = 0;
  int frame_h = 0;
  int patch_w = 0;  // base size; the last column may be wider
  int patch_h = 0;
  std::vector<std::pair<int, int>> offsets;  // (x, y) origin per patch

  int patch_width(int index) const;
  int patch_height(int index) const;
};

PatchGrid make_grid(int frame_w, int frame_h, int k);

/// Post-threshold prediction in global pixel coordinates.
struct Detection {
  double x = 0.0;  // center
  double y = 0.0;
  geom::BBoxA box;
  double confidence = 0.0;
  int source_patch = 0;

  bool operator==(const Detection&) const = default;
};

struct FramePatch {
  Frame frame;
  int off_x = 0;
  int off_y = 0;
};

/// Tiles the frame; concatenating the patches at their offsets reconstructs
/// it bit-exactly. Patch order follows the grid.
std::vector<FramePatch> split(const Frame& frame, int k);

/// Keeps predictions with confidence >= threshold and maps their normalized
/// patch boxes to absolute global pixels (scale by patch dims, then offset).
std::vector<Detection> to_global(const std::vector<Prediction>& preds,
                                 int off_x, int off_y, int patch_w,
                                 int patch_h, double confidence_threshold,
                                 int source_patch);

/// Duplicate suppression at patch borders: among detections from different
/// patches whose centers both lie within `band` px of the same interior grid
/// line and within `radius` px of each other, only the highest-confidence
/// one survives (ties break toward the lower source patch). Output sorted by
/// (center y, center x).
std::vector<Detection> dedup_borders(const std::vector<Detection>& dets,
                                     const PatchGrid& grid, double band,
                                     double radius);

/// One CSV row per detection: frame_id, x, y, confidence, x0, y0, x1, y1
/// with 6-decimal fixed-point reals. Byte-stable for identical inputs.
struct DetectionRow {
  int frame_id = 0;
  Detection det;

  bool operator==(const DetectionRow&) const = default;
};

void write_detections_csv(const std::filesystem::path& path,
                          const std::vector<DetectionRow>& rows);
std::vector<DetectionRow> read_detections_csv(
    const std::filesystem::path& path);

}  // namespace ulm::patch
