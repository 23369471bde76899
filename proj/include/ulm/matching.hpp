#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ulm/set_loss.hpp"

namespace ulm::match {

/// Pairwise match costs, ground truth rows by prediction columns.
struct CostMatrix {
  int n_gt = 0;
  int n_pred = 0;
  std::vector<double> costs;  // row-major, n_gt * n_pred

  double at(int g, int p) const { return costs[g * n_pred + p]; }
  double& at(int g, int p) { return costs[g * n_pred + p]; }
};

/// One-to-one mapping of every ground-truth row to a distinct prediction
/// column, with the summed cost of the matched entries.
struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (gt_index, pred_index), by gt
  double total_cost = 0.0;
};

struct MatchWeights {
  double lambda_class = 1.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
};

/// cost[n][m] = -lambda_class * p_m(class_n) + box_loss(b_n, b_m).
/// The class term uses the raw probability; the log enters only the
/// training loss. Requires n_pred >= n_gt and at least one prediction.
CostMatrix build_cost_matrix(const std::vector<GroundTruthItem>& gt,
                             const std::vector<Prediction>& preds,
                             const MatchWeights& w);

/// Minimum-cost one-to-one assignment covering the smaller side, shortest
/// augmenting path on the rectangular matrix. Among equal-cost optima
/// (ties detected at 1e-9) the lexicographically smallest pairing by
/// (gt_index, pred_index) is returned; when rows outnumber columns the
/// tie-break applies to the transposed problem. Pairs are sorted by
/// gt_index.
Assignment solve_assignment(const CostMatrix& c);

}  // namespace ulm::match
