#pragma once

#include <array>
#include <vector>

#include "ulm/geometry.hpp"

namespace ulm {

// Class indices inside probability vectors. COCO category ids are a separate
// numbering owned by coco_io.
inline constexpr int kClassMicrobubble = 0;
inline constexpr int kClassNoObject = 1;

struct GroundTruthItem {
  int class_label = 1;  // COCO category id; simulator emits "microbubble" = 1
  geom::BBoxN box;
  double center_x = 0.0;  // normalized, inside box
  double center_y = 0.0;
};

/// One prediction slot: raw class scores plus their softmax, and a box in
/// normalized center form. Raw scores are kept so the loss can be
/// differentiated at its leaves.
struct Prediction {
  std::array<double, 2> class_logits{0.0, 0.0};
  std::array<double, 2> class_probs{0.5, 0.5};
  geom::BBoxN box;

  static Prediction from_logits(double logit_mb, double logit_noobj,
                                const geom::BBoxN& box);

  double confidence() const { return class_probs[kClassMicrobubble]; }
};

}  // namespace ulm

namespace ulm::loss {

struct LossBreakdown {
  double class_nll = 0.0;
  double l1 = 0.0;
  double giou_term = 0.0;
  double total = 0.0;
  int floored_logs = 0;  // times the 1e-12 probability floor fired
};

struct LossGradients {
  // d total / d class_logits[i], d total / d (cx, cy, w, h) of each box.
  std::vector<std::array<double, 2>> d_logits;
  std::vector<std::array<double, 4>> d_box;
};

struct LossWeights {
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double no_object = 0.1;
};

}  // namespace ulm::loss

namespace ulm::match {
struct Assignment;
}

namespace ulm::loss {

/// Set-prediction training loss over one image: matched slots pay
/// -log p(microbubble) plus the box loss, the remaining slots pay the
/// down-weighted -log p(no-object). Probabilities are floored at 1e-12
/// before the log; LossBreakdown.floored_logs counts how often.
LossBreakdown hungarian_loss(const std::vector<GroundTruthItem>& gt,
                             const std::vector<Prediction>& preds,
                             const match::Assignment& assignment,
                             const LossWeights& w);

/// Gradient of hungarian_loss.total with respect to every prediction's raw
/// class scores and box coordinates, the assignment held fixed.
LossGradients loss_gradient(const std::vector<GroundTruthItem>& gt,
                            const std::vector<Prediction>& preds,
                            const match::Assignment& assignment,
                            const LossWeights& w);

}  // namespace ulm::loss
