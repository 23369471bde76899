#include "ulm/set_loss.hpp"

#include <algorithm>
#include <cmath>

#include "ulm/errors.hpp"
#include "ulm/matching.hpp"

namespace ulm {

Prediction Prediction::from_logits(double logit_mb, double logit_noobj,
                                   const geom::BBoxN& box) {
  Prediction p;
  p.class_logits = {logit_mb, logit_noobj};
  const double m = std::max(logit_mb, logit_noobj);
  const double e0 = std::exp(logit_mb - m);
  const double e1 = std::exp(logit_noobj - m);
  p.class_probs = {e0 / (e0 + e1), e1 / (e0 + e1)};
  p.box = box;
  return p;
}

}  // namespace ulm

namespace ulm::loss {

namespace {

constexpr double kProbFloor = 1e-12;

double floored_nll(double p, int* floored) {
  if (p < kProbFloor) {
    ++*floored;
    p = kProbFloor;
  }
  return -std::log(p);
}

void check_assignment(const std::vector<GroundTruthItem>& gt,
                      const std::vector<Prediction>& preds,
                      const match::Assignment& a) {
  if (preds.size() < gt.size()) {
    throw ValidationError("hungarian_loss: need at least |gt| predictions");
  }
  if (a.pairs.size() != gt.size()) {
    throw ValidationError("hungarian_loss: assignment does not cover gt");
  }
  std::vector<char> pred_used(preds.size(), 0);
  for (size_t g = 0; g < a.pairs.size(); ++g) {
    const auto& [gi, pi] = a.pairs[g];
    if (gi != static_cast<int>(g) || pi < 0 ||
        pi >= static_cast<int>(preds.size()) || pred_used[pi]) {
      throw ValidationError("hungarian_loss: malformed assignment");
    }
    pred_used[pi] = 1;
  }
}

}  // namespace

LossBreakdown hungarian_loss(const std::vector<GroundTruthItem>& gt,
                             const std::vector<Prediction>& preds,
                             const match::Assignment& assignment,
                             const LossWeights& w) {
  check_assignment(gt, preds, assignment);
  LossBreakdown out;
  std::vector<char> matched(preds.size(), 0);
  for (const auto& [gi, pi] : assignment.pairs) {
    const Prediction& p = preds[pi];
    out.class_nll +=
        floored_nll(p.class_probs[kClassMicrobubble], &out.floored_logs);
    const geom::BBoxN& gb = gt[gi].box;
    // Split the box loss so the breakdown stays additive.
    out.l1 += geom::box_loss(gb, p.box, w.lambda_l1, 0.0);
    out.giou_term += geom::box_loss(gb, p.box, 0.0, w.lambda_giou);
    matched[pi] = 1;
  }
  for (size_t m = 0; m < preds.size(); ++m) {
    if (matched[m]) continue;
    out.class_nll +=
        w.no_object *
        floored_nll(preds[m].class_probs[kClassNoObject], &out.floored_logs);
  }
  out.total = out.class_nll + out.l1 + out.giou_term;
  return out;
}

LossGradients loss_gradient(const std::vector<GroundTruthItem>& gt,
                            const std::vector<Prediction>& preds,
                            const match::Assignment& assignment,
                            const LossWeights& w) {
  check_assignment(gt, preds, assignment);
  LossGradients g;
  g.d_logits.assign(preds.size(), {0.0, 0.0});
  g.d_box.assign(preds.size(), {0.0, 0.0, 0.0, 0.0});

  std::vector<char> matched(preds.size(), 0);
  for (const auto& [gi, pi] : assignment.pairs) {
    const Prediction& p = preds[pi];
    // d(-log softmax_c) / d logits = softmax - onehot(c). The probability
    // floor only fires in saturated regions where the softmax gradient is
    // already ~0, so no special casing.
    g.d_logits[pi][kClassMicrobubble] =
        p.class_probs[kClassMicrobubble] - 1.0;
    g.d_logits[pi][kClassNoObject] = p.class_probs[kClassNoObject];
    geom::box_loss_grad(gt[gi].box, p.box, w.lambda_l1, w.lambda_giou,
                        &g.d_box[pi]);
    matched[pi] = 1;
  }
  for (size_t m = 0; m < preds.size(); ++m) {
    if (matched[m]) continue;
    g.d_logits[m][kClassMicrobubble] =
        w.no_object * preds[m].class_probs[kClassMicrobubble];
    g.d_logits[m][kClassNoObject] =
        w.no_object * (preds[m].class_probs[kClassNoObject] - 1.0);
  }
  return g;
}

}  // namespace ulm::loss
