#include "ulm/patching.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "ulm/errors.hpp"

namespace ulm::patch {

int PatchGrid::patch_width(int index) const {
  const int col = index % k;
  return col < k - 1 ? patch_w : frame_w - patch_w * (k - 1);
}

int PatchGrid::patch_height(int index) const {
  const int row = index / k;
  return row < k - 1 ? patch_h : frame_h - patch_h * (k - 1);
}

PatchGrid make_grid(int frame_w, int frame_h, int k) {
  if (frame_w < 1 || frame_h < 1) {
    throw ValidationError("make_grid: frame dimensions must be >= 1");
  }
  if (k < 1) throw ValidationError("make_grid: k must be >= 1");
  if (k > frame_w || k > frame_h) {
    throw ValidationError("make_grid: k exceeds a frame side");
  }
  PatchGrid g;
  g.k = k;
  g.frame_w = frame_w;
  g.frame_h = frame_h;
  g.patch_w = frame_w / k;
  g.patch_h = frame_h / k;
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < k; ++c) {
      g.offsets.emplace_back(c * g.patch_w, r * g.patch_h);
    }
  }
  return g;
}

std::vector<FramePatch> split(const Frame& frame, int k) {
  const PatchGrid g = make_grid(frame.width, frame.height, k);
  std::vector<FramePatch> out;
  out.reserve(g.offsets.size());
  for (int i = 0; i < k * k; ++i) {
    const auto [ox, oy] = g.offsets[i];
    const int pw = g.patch_width(i), ph = g.patch_height(i);
    FramePatch p{Frame::zeros(pw, ph, frame.frame_id), ox, oy};
    for (int y = 0; y < ph; ++y) {
      for (int x = 0; x < pw; ++x) {
        p.frame.at(x, y) = frame.at(ox + x, oy + y);
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Detection> to_global(const std::vector<Prediction>& preds,
                                 int off_x, int off_y, int patch_w,
                                 int patch_h, double confidence_threshold,
                                 int source_patch) {
  if (confidence_threshold < 0.0 || confidence_threshold > 1.0) {
    throw ValidationError("to_global: threshold must be in [0, 1]");
  }
  if (patch_w < 1 || patch_h < 1) {
    throw ValidationError("to_global: patch dimensions must be >= 1");
  }
  std::vector<Detection> out;
  for (const auto& p : preds) {
    if (p.confidence() < confidence_threshold) continue;
    Detection d;
    d.confidence = p.confidence();
    d.source_patch = source_patch;
    d.x = p.box.cx * patch_w + off_x;
    d.y = p.box.cy * patch_h + off_y;
    const geom::BBoxA local = geom::to_absolute(p.box, patch_w, patch_h);
    d.box = {local.x0 + off_x, local.y0 + off_y, local.x1 + off_x,
             local.y1 + off_y};
    out.push_back(d);
  }
  return out;
}

namespace {

// Both centers within `band` of the same interior grid line.
bool shares_band(const Detection& a, const Detection& b, const PatchGrid& g,
                 double band) {
  for (int c = 1; c < g.k; ++c) {
    const double v = static_cast<double>(c) * g.patch_w;
    if (std::abs(a.x - v) <= band && std::abs(b.x - v) <= band) return true;
  }
  for (int r = 1; r < g.k; ++r) {
    const double h = static_cast<double>(r) * g.patch_h;
    if (std::abs(a.y - h) <= band && std::abs(b.y - h) <= band) return true;
  }
  return false;
}

bool conflicts(const Detection& a, const Detection& b, const PatchGrid& g,
               double band, double radius) {
  if (a.source_patch == b.source_patch) return false;
  const double dx = a.x - b.x, dy = a.y - b.y;
  if (dx * dx + dy * dy > radius * radius) return false;
  return shares_band(a, b, g, band);
}

}  // namespace

std::vector<Detection> dedup_borders(const std::vector<Detection>& dets,
                                     const PatchGrid& grid, double band,
                                     double radius) {
  if (band < 0.0 || radius < 0.0) {
    throw ValidationError("dedup_borders: band and radius must be >= 0");
  }
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    const Detection &a = dets[i], &b = dets[j];
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.source_patch != b.source_patch) return a.source_patch < b.source_patch;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });

  std::vector<char> dropped(dets.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (dropped[order[i]]) continue;
    const Detection& keep = dets[order[i]];
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      if (dropped[order[j]]) continue;
      if (conflicts(keep, dets[order[j]], grid, band, radius)) {
        dropped[order[j]] = 1;
      }
    }
  }

  std::vector<Detection> out;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (!dropped[i]) out.push_back(dets[i]);
  }
  std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    if (a.y != b.y) return a.y < b.y;
    if (a.x != b.x) return a.x < b.x;
    return a.confidence > b.confidence;
  });
  return out;
}

void write_detections_csv(const std::filesystem::path& path,
                          const std::vector<DetectionRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw ValidationError("cannot open for writing: " + path.string());
  }
  os << "frame_id,x,y,confidence,x0,y0,x1,y1\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf),
                  "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.frame_id,
                  r.det.x, r.det.y, r.det.confidence, r.det.box.x0,
                  r.det.box.y0, r.det.box.x1, r.det.box.y1);
    os << buf;
  }
  if (!os) throw ValidationError("write failed: " + path.string());
}

std::vector<DetectionRow> read_detections_csv(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "frame_id,x,y,confidence,x0,y0,x1,y1") {
    throw ValidationError("detections CSV: bad header in " + path.string());
  }
  std::vector<DetectionRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    DetectionRow r;
    const int n = std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf,%lf",
                              &r.frame_id, &r.det.x, &r.det.y,
                              &r.det.confidence, &r.det.box.x0, &r.det.box.y0,
                              &r.det.box.x1, &r.det.box.y1);
    if (n != 8) {
      throw ValidationError("detections CSV: malformed line " +
                            std::to_string(lineno) + " in " + path.string());
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace ulm::patch
