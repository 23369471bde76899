#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ulm/frame.hpp"
#include "ulm/patching.hpp"
#include "ulm/set_loss.hpp"

namespace ulm::eval {

/// Ground-truth object in absolute pixel coordinates.
struct GtObject {
  geom::BBoxA box;
  double cx = 0.0;
  double cy = 0.0;
};

std::vector<GtObject> to_gt_objects(const std::vector<GroundTruthItem>& gt,
                                    int frame_w, int frame_h);

struct ThresholdStat {
  double iou = 0.0;
  double ap = 0.0;
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
};

struct EvalReport {
  std::vector<ThresholdStat> per_threshold;  // ascending threshold
  double map = 0.0;                          // mean AP over thresholds
  double mar = 0.0;                          // mean final recall over thresholds
  double center_precision = 0.0;
  double center_recall = 0.0;
  double center_radius = 2.0;  // pixels
  int max_dets = 100;
  std::int64_t n_images = 0;
  std::int64_t n_detections = 0;
  std::int64_t n_gt = 0;
};

/// The COCO grid 0.50:0.05:0.95.
std::vector<double> default_iou_thresholds();

/// COCO-style scoring: per threshold, detections in descending confidence
/// (capped at max_dets per frame) greedily take the unmatched GT of highest
/// IoU >= threshold; AP interpolates precision at 101 recall points; mAR
/// averages the final recall over thresholds. Center metrics match greedily
/// by Euclidean distance <= center_radius, independent of IoU.
EvalReport evaluate(const std::vector<std::vector<patch::Detection>>& dets,
                    const std::vector<std::vector<GtObject>>& gt,
                    const std::vector<double>& iou_thresholds,
                    double center_radius, int max_dets);

/// Canonical JSON serialization (fixed key order, trailing newline).
void save_report(const EvalReport& r, const std::filesystem::path& path);

/// Super-resolution accumulation map: detection-center histogram on an
/// upsampled raster. Centers outside the frame land in the discard tally.
struct SrMap {
  int frame_w = 0;
  int frame_h = 0;
  int factor = 1;
  std::vector<std::uint32_t> counts;  // (frame_w*factor)*(frame_h*factor)
  std::int64_t discarded = 0;

  int width() const { return frame_w * factor; }
  int height() const { return frame_h * factor; }
  std::uint64_t total() const;
};

SrMap render_sr_map(const std::vector<patch::Detection>& dets, int frame_w,
                    int frame_h, int factor);

/// 16-bit grayscale PNG, cell counts scaled by the maximum count.
void write_sr_png16(const SrMap& m, const std::filesystem::path& path);

/// Raw counts as a float frame, for ULMF export.
Frame sr_to_frame(const SrMap& m);

}  // namespace ulm::eval
