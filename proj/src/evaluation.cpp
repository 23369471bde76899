#include "ulm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "ulm/errors.hpp"
#include "ulm/png_io.hpp"

namespace ulm::eval {

namespace {

constexpr double kEps = 2.220446049250313e-16;  // spacing(1.0)
constexpr int kRecallPoints = 101;

// Per-frame detections in descending-confidence order, capped.
std::vector<int> ranked_indices(const std::vector<patch::Detection>& dets,
                                int max_dets) {
  std::vector<int> idx(dets.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return dets[a].confidence > dets[b].confidence;
  });
  if (static_cast<int>(idx.size()) > max_dets) idx.resize(max_dets);
  return idx;
}

}  // namespace

std::vector<GtObject> to_gt_objects(const std::vector<GroundTruthItem>& gt,
                                    int frame_w, int frame_h) {
  std::vector<GtObject> out;
  out.reserve(gt.size());
  for (const auto& g : gt) {
    out.push_back({geom::to_absolute(g.box, frame_w, frame_h),
                   g.center_x * frame_w, g.center_y * frame_h});
  }
  return out;
}

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

EvalReport evaluate(const std::vector<std::vector<patch::Detection>>& dets,
                    const std::vector<std::vector<GtObject>>& gt,
                    const std::vector<double>& iou_thresholds,
                    double center_radius, int max_dets) {
  if (iou_thresholds.empty()) {
    throw ValidationError("evaluate: empty IoU threshold list");
  }
  for (double t : iou_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) {
      throw ValidationError("evaluate: IoU thresholds must be in (0, 1]");
    }
  }
  if (dets.size() != gt.size()) {
    throw ValidationError("evaluate: detections and GT frame counts differ");
  }
  if (max_dets < 1) throw ValidationError("evaluate: max_dets must be >= 1");
  if (center_radius < 0.0) {
    throw ValidationError("evaluate: center_radius must be >= 0");
  }

  const int n_frames = static_cast<int>(dets.size());
  std::vector<double> thresholds = iou_thresholds;
  std::sort(thresholds.begin(), thresholds.end());

  // Confidence ranking and IoU tables, shared across thresholds.
  std::vector<std::vector<int>> rank(n_frames);
  std::vector<std::vector<std::vector<double>>> ious(n_frames);
  std::int64_t n_gt_total = 0, n_det_total = 0;
  for (int f = 0; f < n_frames; ++f) {
    rank[f] = ranked_indices(dets[f], max_dets);
    n_det_total += static_cast<std::int64_t>(dets[f].size());
    n_gt_total += static_cast<std::int64_t>(gt[f].size());
    ious[f].resize(rank[f].size());
    for (std::size_t d = 0; d < rank[f].size(); ++d) {
      ious[f][d].resize(gt[f].size());
      for (std::size_t g = 0; g < gt[f].size(); ++g) {
        ious[f][d][g] = geom::iou(dets[f][rank[f][d]].box, gt[f][g].box);
      }
    }
  }

  EvalReport report;
  report.center_radius = center_radius;
  report.max_dets = max_dets;
  report.n_images = n_frames;
  report.n_detections = n_det_total;
  report.n_gt = n_gt_total;

  double ap_sum = 0.0, recall_sum = 0.0;
  for (double t : thresholds) {
    // Greedy per-frame matching: each detection takes the unmatched GT of
    // highest IoU >= t (ties go to the later GT, as in the COCO evaluator).
    std::vector<double> scores;
    std::vector<char> matched;
    std::int64_t tp_count = 0;
    for (int f = 0; f < n_frames; ++f) {
      std::vector<char> gt_taken(gt[f].size(), 0);
      for (std::size_t d = 0; d < rank[f].size(); ++d) {
        double best = std::min(t, 1.0 - 1e-10);
        int m = -1;
        for (std::size_t g = 0; g < gt[f].size(); ++g) {
          if (gt_taken[g]) continue;
          if (ious[f][d][g] < best) continue;
          best = ious[f][d][g];
          m = static_cast<int>(g);
        }
        if (m >= 0) {
          gt_taken[m] = 1;
          ++tp_count;
        }
        scores.push_back(dets[f][rank[f][d]].confidence);
        matched.push_back(m >= 0 ? 1 : 0);
      }
    }

    // Global precision-recall curve over all frames.
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });

    double ap = 0.0, final_recall = 0.0;
    if (n_gt_total > 0 && !order.empty()) {
      std::vector<double> rc(order.size()), pr(order.size());
      double tp = 0, fp = 0;
      for (std::size_t i = 0; i < order.size(); ++i) {
        (matched[order[i]] ? tp : fp) += 1.0;
        rc[i] = tp / static_cast<double>(n_gt_total);
        pr[i] = tp / (tp + fp + kEps);
      }
      final_recall = rc.back();
      for (std::size_t i = pr.size() - 1; i > 0; --i) {
        pr[i - 1] = std::max(pr[i - 1], pr[i]);
      }
      for (int i = 0; i < kRecallPoints; ++i) {
        const double thr = static_cast<double>(i) / (kRecallPoints - 1);
        const auto it = std::lower_bound(rc.begin(), rc.end(), thr);
        if (it != rc.end()) ap += pr[it - rc.begin()];
      }
      ap /= kRecallPoints;
    }

    ThresholdStat stat;
    stat.iou = t;
    stat.ap = ap;
    stat.tp = tp_count;
    stat.fp = static_cast<std::int64_t>(scores.size()) - tp_count;
    stat.fn = n_gt_total - tp_count;
    report.per_threshold.push_back(stat);
    ap_sum += ap;
    recall_sum += final_recall;
  }
  report.map = ap_sum / static_cast<double>(thresholds.size());
  report.mar = recall_sum / static_cast<double>(thresholds.size());

  // Center-distance matching, independent of the IoU grid.
  std::int64_t c_tp = 0, c_dets = 0;
  for (int f = 0; f < n_frames; ++f) {
    std::vector<char> gt_taken(gt[f].size(), 0);
    c_dets += static_cast<std::int64_t>(rank[f].size());
    for (std::size_t d = 0; d < rank[f].size(); ++d) {
      const auto& det = dets[f][rank[f][d]];
      double best = center_radius;
      int m = -1;
      for (std::size_t g = 0; g < gt[f].size(); ++g) {
        if (gt_taken[g]) continue;
        const double dist =
            std::hypot(det.x - gt[f][g].cx, det.y - gt[f][g].cy);
        if (m < 0 ? dist <= best : dist < best) {
          best = dist;
          m = static_cast<int>(g);
        }
      }
      if (m >= 0) {
        gt_taken[m] = 1;
        ++c_tp;
      }
    }
  }
  report.center_precision =
      c_dets > 0 ? static_cast<double>(c_tp) / static_cast<double>(c_dets)
                 : 0.0;
  report.center_recall =
      n_gt_total > 0
          ? static_cast<double>(c_tp) / static_cast<double>(n_gt_total)
          : 0.0;
  return report;
}

void save_report(const EvalReport& r, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["map"] = r.map;
  j["mar"] = r.mar;
  j["center_precision"] = r.center_precision;
  j["center_recall"] = r.center_recall;
  j["center_radius_px"] = r.center_radius;
  j["max_dets"] = r.max_dets;
  j["n_images"] = r.n_images;
  j["n_detections"] = r.n_detections;
  j["n_gt"] = r.n_gt;
  j["per_threshold"] = nlohmann::ordered_json::array();
  for (const auto& s : r.per_threshold) {
    nlohmann::ordered_json e;
    e["iou"] = s.iou;
    e["ap"] = s.ap;
    e["tp"] = s.tp;
    e["fp"] = s.fp;
    e["fn"] = s.fn;
    j["per_threshold"].push_back(e);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw ValidationError("cannot open for writing: " + path.string());
  }
  os << j.dump(2) << "\n";
  if (!os) throw ValidationError("write failed: " + path.string());
}

std::uint64_t SrMap::total() const {
  std::uint64_t s = 0;
  for (auto c : counts) s += c;
  return s;
}

SrMap render_sr_map(const std::vector<patch::Detection>& dets, int frame_w,
                    int frame_h, int factor) {
  if (frame_w < 1 || frame_h < 1) {
    throw ValidationError("render_sr_map: frame dimensions must be >= 1");
  }
  if (factor < 1) {
    throw ValidationError("render_sr_map: upsample factor must be >= 1");
  }
  SrMap m;
  m.frame_w = frame_w;
  m.frame_h = frame_h;
  m.factor = factor;
  m.counts.assign(static_cast<std::size_t>(m.width()) * m.height(), 0);
  for (const auto& d : dets) {
    if (d.x < 0.0 || d.x >= frame_w || d.y < 0.0 || d.y >= frame_h) {
      ++m.discarded;
      continue;
    }
    const int cx = static_cast<int>(std::floor(d.x * factor));
    const int cy = static_cast<int>(std::floor(d.y * factor));
    ++m.counts[static_cast<std::size_t>(cy) * m.width() + cx];
  }
  return m;
}

void write_sr_png16(const SrMap& m, const std::filesystem::path& path) {
  std::uint32_t peak = 0;
  for (auto c : m.counts) peak = std::max(peak, c);
  std::vector<std::uint16_t> px(m.counts.size(), 0);
  if (peak > 0) {
    for (std::size_t i = 0; i < m.counts.size(); ++i) {
      px[i] = static_cast<std::uint16_t>(
          std::lround(65535.0 * m.counts[i] / peak));
    }
  }
  png::write_gray16(path, m.width(), m.height(), px);
}

Frame sr_to_frame(const SrMap& m) {
  Frame f = Frame::zeros(m.width(), m.height());
  for (std::size_t i = 0; i < m.counts.size(); ++i) {
    f.pixels[i] = static_cast<float>(m.counts[i]);
  }
  return f;
}

}  // namespace ulm::eval
