#include "ulm/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ulm/errors.hpp"

namespace ulm::match {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kTieTol = 1e-9;

// Shortest-augmenting-path assignment (Kuhn-Munkres with potentials) on a
// rectangular matrix with rows <= cols. Returns the optimal total cost and
// the column matched to each row.
double jv_solve(const std::vector<double>& cost, int rows, int cols,
                std::vector<int>* rowsol) {
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> p(cols + 1, 0), way(cols + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(cols + 1, kInf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  rowsol->assign(rows, -1);
  double total = 0.0;
  for (int j = 1; j <= cols; ++j) {
    if (p[j]) {
      (*rowsol)[p[j] - 1] = j - 1;
      total += cost[(p[j] - 1) * cols + (j - 1)];
    }
  }
  return total;
}

// Optimal cost of assigning rows [row_from, rows) to the columns not yet
// taken. Used while fixing columns row by row for the tie-break.
double tail_cost(const CostMatrix& c, int row_from,
                 const std::vector<char>& col_taken) {
  const int rows = c.n_gt - row_from;
  if (rows == 0) return 0.0;
  std::vector<int> cols_left;
  for (int j = 0; j < c.n_pred; ++j) {
    if (!col_taken[j]) cols_left.push_back(j);
  }
  std::vector<double> sub(static_cast<size_t>(rows) * cols_left.size());
  for (int i = 0; i < rows; ++i) {
    for (size_t j = 0; j < cols_left.size(); ++j) {
      sub[i * cols_left.size() + j] = c.at(row_from + i, cols_left[j]);
    }
  }
  std::vector<int> rowsol;
  return jv_solve(sub, rows, static_cast<int>(cols_left.size()), &rowsol);
}

}  // namespace

CostMatrix build_cost_matrix(const std::vector<GroundTruthItem>& gt,
                             const std::vector<Prediction>& preds,
                             const MatchWeights& w) {
  if (preds.empty()) {
    throw ValidationError("build_cost_matrix: predictions must be non-empty");
  }
  if (preds.size() < gt.size()) {
    throw ValidationError("build_cost_matrix: need n_pred >= n_gt, got " +
                          std::to_string(preds.size()) + " < " +
                          std::to_string(gt.size()));
  }
  CostMatrix c;
  c.n_gt = static_cast<int>(gt.size());
  c.n_pred = static_cast<int>(preds.size());
  c.costs.resize(static_cast<size_t>(c.n_gt) * c.n_pred);
  for (int g = 0; g < c.n_gt; ++g) {
    for (int m = 0; m < c.n_pred; ++m) {
      const double p_class = preds[m].class_probs[kClassMicrobubble];
      c.at(g, m) = -w.lambda_class * p_class +
                   geom::box_loss(gt[g].box, preds[m].box, w.lambda_l1,
                                  w.lambda_giou);
    }
  }
  return c;
}

Assignment solve_assignment(const CostMatrix& c) {
  for (double v : c.costs) {
    if (!std::isfinite(v)) {
      throw ValidationError("solve_assignment: non-finite cost entry");
    }
  }
  if (c.n_gt > c.n_pred) {
    // Wide-side shortage: solve on the transpose, then swap the pair roles.
    CostMatrix t;
    t.n_gt = c.n_pred;
    t.n_pred = c.n_gt;
    t.costs.resize(c.costs.size());
    for (int g = 0; g < c.n_gt; ++g) {
      for (int p = 0; p < c.n_pred; ++p) t.at(p, g) = c.at(g, p);
    }
    Assignment swapped = solve_assignment(t);
    Assignment a;
    a.total_cost = swapped.total_cost;
    a.pairs.reserve(swapped.pairs.size());
    for (const auto& [p, g] : swapped.pairs) a.pairs.emplace_back(g, p);
    std::sort(a.pairs.begin(), a.pairs.end());
    return a;
  }
  Assignment a;
  if (c.n_gt == 0 || c.n_pred == 0) return a;

  std::vector<int> rowsol;
  const double optimal = jv_solve(c.costs, c.n_gt, c.n_pred, &rowsol);

  // Fix columns row by row, taking the smallest column index that still
  // admits an optimal completion. This pins down which of the equal-cost
  // optima is returned.
  std::vector<char> col_taken(c.n_pred, 0);
  double fixed = 0.0;
  a.pairs.reserve(c.n_gt);
  for (int g = 0; g < c.n_gt; ++g) {
    int best_col = -1;
    double best_total = kInf;
    for (int j = 0; j < c.n_pred; ++j) {
      if (col_taken[j]) continue;
      col_taken[j] = 1;
      const double total = fixed + c.at(g, j) + tail_cost(c, g + 1, col_taken);
      col_taken[j] = 0;
      if (total <= optimal + kTieTol) {
        best_col = j;
        break;
      }
      if (total < best_total) {
        best_total = total;
        best_col = j;
      }
    }
    col_taken[best_col] = 1;
    fixed += c.at(g, best_col);
    a.pairs.emplace_back(g, best_col);
  }
  for (const auto& [g, m] : a.pairs) a.total_cost += c.at(g, m);
  return a;
}

}  // namespace ulm::match
