#pragma once

#include <array>

namespace ulm::geom {

/// Box in normalized center form: (cx, cy, w, h), each a fraction of the
/// frame side in [0,1]. Canonical representation for matching and losses.
struct BBoxN {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const BBoxN&) const = default;
};

/// Box in absolute pixel corners: x0 < x1, y0 < y1.
struct BBoxA {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }

  bool operator==(const BBoxA&) const = default;
};

/// Smallest predicted side kept alive in loss computations so GIoU stays
/// defined while the model still emits near-degenerate boxes.
inline constexpr double kMinBoxSide = 1e-4;

bool valid(const BBoxN& b);
bool valid(const BBoxA& b);

/// Normalized -> absolute pixels. Throws ValidationError on non-positive
/// frame dimensions.
BBoxA to_absolute(const BBoxN& b, int frame_w, int frame_h);

/// Absolute pixels -> normalized. Inverse of to_absolute.
BBoxN to_normalized(const BBoxA& b, int frame_w, int frame_h);

/// Intersection over union, in [0,1]. Symmetric; 0 for disjoint boxes.
double iou(const BBoxA& a, const BBoxA& b);

/// Generalized IoU: iou minus the enclosing-box slack, in (-1, 1].
double giou(const BBoxA& a, const BBoxA& b);

/// giou plus its gradient with respect to b's corners (x0, y0, x1, y1).
/// Piecewise-smooth; subgradient 0 is used at corner ties.
double giou_grad(const BBoxA& a, const BBoxA& b, std::array<double, 4>* db);

/// lambda_l1 * |gt - pred|_1 + lambda_giou * (1 - giou(gt, pred)), both boxes
/// taken in normalized form. Sides below kMinBoxSide are clamped first.
double box_loss(const BBoxN& gt, const BBoxN& pred, double lambda_l1,
                double lambda_giou);

/// box_loss plus its gradient with respect to pred's (cx, cy, w, h).
double box_loss_grad(const BBoxN& gt, const BBoxN& pred, double lambda_l1,
                     double lambda_giou, std::array<double, 4>* dpred);

}  // namespace ulm::geom
