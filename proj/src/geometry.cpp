#include "ulm/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "ulm/errors.hpp"

namespace ulm::geom {

namespace {

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

BBoxA corners(const BBoxN& b) {
  return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0,
          b.cy + b.h / 2.0};
}

BBoxN clamp_sides(const BBoxN& b) {
  return {b.cx, b.cy, std::max(b.w, kMinBoxSide), std::max(b.h, kMinBoxSide)};
}

}  // namespace

bool valid(const BBoxN& b) {
  return std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) &&
         std::isfinite(b.h) && b.w > 0.0 && b.h > 0.0 && b.cx >= 0.0 &&
         b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0;
}

bool valid(const BBoxA& b) {
  return std::isfinite(b.x0) && std::isfinite(b.y0) && std::isfinite(b.x1) &&
         std::isfinite(b.y1) && b.x0 < b.x1 && b.y0 < b.y1;
}

BBoxA to_absolute(const BBoxN& b, int frame_w, int frame_h) {
  if (frame_w < 1 || frame_h < 1) {
    throw ValidationError("to_absolute: frame dimensions must be >= 1");
  }
  const double fw = static_cast<double>(frame_w);
  const double fh = static_cast<double>(frame_h);
  return {(b.cx - b.w / 2.0) * fw, (b.cy - b.h / 2.0) * fh,
          (b.cx + b.w / 2.0) * fw, (b.cy + b.h / 2.0) * fh};
}

BBoxN to_normalized(const BBoxA& b, int frame_w, int frame_h) {
  if (frame_w < 1 || frame_h < 1) {
    throw ValidationError("to_normalized: frame dimensions must be >= 1");
  }
  const double fw = static_cast<double>(frame_w);
  const double fh = static_cast<double>(frame_h);
  return {(b.x0 + b.x1) / 2.0 / fw, (b.y0 + b.y1) / 2.0 / fh,
          (b.x1 - b.x0) / fw, (b.y1 - b.y0) / fh};
}

double iou(const BBoxA& a, const BBoxA& b) {
  const double iw =
      std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih =
      std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

double giou(const BBoxA& a, const BBoxA& b) {
  const double iw =
      std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih =
      std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double cw = std::max(a.x1, b.x1) - std::min(a.x0, b.x0);
  const double ch = std::max(a.y1, b.y1) - std::min(a.y0, b.y0);
  const double enc = cw * ch;
  return inter / uni - (enc - uni) / enc;
}

double giou_grad(const BBoxA& a, const BBoxA& b, std::array<double, 4>* db) {
  const double ix0 = std::max(a.x0, b.x0);
  const double iy0 = std::max(a.y0, b.y0);
  const double ix1 = std::min(a.x1, b.x1);
  const double iy1 = std::min(a.y1, b.y1);
  const double iw = std::max(0.0, ix1 - ix0);
  const double ih = std::max(0.0, iy1 - iy0);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double cw = std::max(a.x1, b.x1) - std::min(a.x0, b.x0);
  const double ch = std::max(a.y1, b.y1) - std::min(a.y0, b.y0);
  const double enc = cw * ch;

  // dI/d(b corners): active only where b's corner is the binding one and the
  // overlap is non-empty.
  double dI[4] = {0, 0, 0, 0};
  if (inter > 0.0) {
    if (b.x0 > a.x0) dI[0] = -ih;
    if (b.y0 > a.y0) dI[1] = -iw;
    if (b.x1 < a.x1) dI[2] = ih;
    if (b.y1 < a.y1) dI[3] = iw;
  }
  // dAb/d(b corners)
  const double bw = b.width();
  const double bh = b.height();
  const double dAb[4] = {-bh, -bw, bh, bw};
  // dEnc/d(b corners): active where b's corner defines the hull.
  double dE[4] = {0, 0, 0, 0};
  if (b.x0 < a.x0) dE[0] = -ch;
  if (b.y0 < a.y0) dE[1] = -cw;
  if (b.x1 > a.x1) dE[2] = ch;
  if (b.y1 > a.y1) dE[3] = cw;

  // giou = I/U - 1 + U/Enc, with U = Aa + Ab - I.
  for (int i = 0; i < 4; ++i) {
    const double dU = dAb[i] - dI[i];
    (*db)[i] = (dI[i] * uni - inter * dU) / (uni * uni) +
               (dU * enc - uni * dE[i]) / (enc * enc);
  }
  return inter / uni - (enc - uni) / enc;
}

double box_loss(const BBoxN& gt, const BBoxN& pred, double lambda_l1,
                double lambda_giou) {
  if (lambda_l1 < 0.0 || lambda_giou < 0.0) {
    throw ValidationError("box_loss: weights must be >= 0");
  }
  const BBoxN g = clamp_sides(gt);
  const BBoxN p = clamp_sides(pred);
  const double l1 = std::abs(g.cx - p.cx) + std::abs(g.cy - p.cy) +
                    std::abs(g.w - p.w) + std::abs(g.h - p.h);
  return lambda_l1 * l1 + lambda_giou * (1.0 - giou(corners(g), corners(p)));
}

double box_loss_grad(const BBoxN& gt, const BBoxN& pred, double lambda_l1,
                     double lambda_giou, std::array<double, 4>* dpred) {
  const BBoxN g = clamp_sides(gt);
  const BBoxN p = clamp_sides(pred);
  const double wa = pred.w > kMinBoxSide ? 1.0 : 0.0;  // clamp pass-through
  const double ha = pred.h > kMinBoxSide ? 1.0 : 0.0;

  const double l1 = std::abs(g.cx - p.cx) + std::abs(g.cy - p.cy) +
                    std::abs(g.w - p.w) + std::abs(g.h - p.h);
  std::array<double, 4> dg_corners{};
  const double gv = giou_grad(corners(g), corners(p), &dg_corners);

  // Corner gradients back to center form: x0 = cx - w/2, x1 = cx + w/2.
  const double dcx = dg_corners[0] + dg_corners[2];
  const double dcy = dg_corners[1] + dg_corners[3];
  const double dw = 0.5 * (dg_corners[2] - dg_corners[0]);
  const double dh = 0.5 * (dg_corners[3] - dg_corners[1]);

  (*dpred)[0] = lambda_l1 * sign(p.cx - g.cx) - lambda_giou * dcx;
  (*dpred)[1] = lambda_l1 * sign(p.cy - g.cy) - lambda_giou * dcy;
  (*dpred)[2] = (lambda_l1 * sign(p.w - g.w) - lambda_giou * dw) * wa;
  (*dpred)[3] = (lambda_l1 * sign(p.h - g.h) - lambda_giou * dh) * ha;
  return lambda_l1 * l1 + lambda_giou * (1.0 - gv);
}

}  // namespace ulm::geom
