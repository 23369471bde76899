#include "ulm/nn/graph.hpp"

#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "ulm/errors.hpp"
#include "ulm/rng.hpp"

using namespace ulm;
using namespace ulm::nn;

namespace {

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// Central finite differences of a scalar-valued graph builder with respect
// to one leaf matrix, compared against the tape's gradient.
void check_grads(const std::function<double(const std::vector<Mat>&,
                                            std::vector<Mat>*)>& eval,
                 std::vector<Mat> leaves, double tol = 1e-7) {
  std::vector<Mat> grads;
  eval(leaves, &grads);
  REQUIRE(grads.size() == leaves.size());
  const double h = 1e-6;
  for (size_t li = 0; li < leaves.size(); ++li) {
    REQUIRE(grads[li].rows() == leaves[li].rows());
    REQUIRE(grads[li].cols() == leaves[li].cols());
    for (Eigen::Index r = 0; r < leaves[li].rows(); ++r) {
      for (Eigen::Index c = 0; c < leaves[li].cols(); ++c) {
        auto probe = [&](double eps) {
          std::vector<Mat> pert = leaves;
          pert[li](r, c) += eps;
          return eval(pert, nullptr);
        };
        const double fd = (probe(h) - probe(-h)) / (2 * h);
        CHECK(std::abs(grads[li](r, c) - fd) < tol);
      }
    }
  }
}

// Runs a graph over param leaves, reduces via inner with fixed weights.
double run_graph(
    const std::vector<Mat>& leaves, std::vector<Mat>* grads, const Mat& rw,
    const std::function<int(Graph&, const std::vector<int>&)>& build) {
  Graph g;
  std::vector<int> ids;
  for (const auto& m : leaves) ids.push_back(g.param(m, "leaf"));
  const int out = build(g, ids);
  const int root = g.inner(out, rw, "probe");
  if (grads) {
    g.backward(root);
    grads->clear();
    for (int id : ids) {
      grads->push_back(g.has_grad(id)
                           ? g.grad(id)
                           : Mat::Zero(g.value(id).rows(), g.value(id).cols()));
    }
  }
  return g.value(root)(0, 0);
}

}  // namespace

TEST_CASE("linear forward and gradients") {
  Rng rng(1);
  const Mat rw = random_mat(rng, 3, 4);
  auto eval = [&](const std::vector<Mat>& L, std::vector<Mat>* G) {
    return run_graph(L, G, rw, [](Graph& g, const std::vector<int>& ids) {
      return g.linear(ids[0], ids[1], ids[2], "lin");
    });
  };
  check_grads(eval, {random_mat(rng, 3, 5), random_mat(rng, 4, 5),
                     random_mat(rng, 1, 4)});
}

TEST_CASE("relu, sigmoid, add, transpose gradients") {
  Rng rng(2);
  const Mat rw = random_mat(rng, 2, 3);
  auto eval = [&](const std::vector<Mat>& L, std::vector<Mat>* G) {
    return run_graph(L, G, rw, [](Graph& g, const std::vector<int>& ids) {
      const int a = g.relu(ids[0], "r");
      const int b = g.sigmoid(ids[1], "s");
      const int c = g.add(a, b, "a");
      return g.transpose(g.transpose(c, "t1"), "t2");
    });
  };
  check_grads(eval, {random_mat(rng, 2, 3), random_mat(rng, 2, 3)});
}

TEST_CASE("layer_norm gradients") {
  Rng rng(3);
  const Mat rw = random_mat(rng, 4, 6);
  auto eval = [&](const std::vector<Mat>& L, std::vector<Mat>* G) {
    return run_graph(L, G, rw, [](Graph& g, const std::vector<int>& ids) {
      return g.layer_norm(ids[0], ids[1], ids[2], "ln");
    });
  };
  check_grads(eval,
              {random_mat(rng, 4, 6), random_mat(rng, 1, 6),
               random_mat(rng, 1, 6)},
              1e-6);
}

TEST_CASE("conv2d matches a direct convolution and its gradients") {
  Rng rng(4);
  const int C = 2, H = 5, W = 6, CO = 3, K = 3, S = 2, P = 1;
  const int HO = (H + 2 * P - K) / S + 1, WO = (W + 2 * P - K) / S + 1;
  const Mat x = random_mat(rng, C, H * W);
  const Mat w = random_mat(rng, CO, C * K * K);
  const Mat b = random_mat(rng, CO, 1);

  Graph g;
  const int xi = g.param(x, "x");
  Shape3 out_shape;
  const int y = g.conv2d(xi, {C, H, W}, g.param(w, "w"), g.param(b, "b"), CO,
                         K, S, P, &out_shape, "conv");
  CHECK(out_shape.h == HO);
  CHECK(out_shape.w == WO);

  // Direct nested-loop reference.
  for (int co = 0; co < CO; ++co) {
    for (int oy = 0; oy < HO; ++oy) {
      for (int ox = 0; ox < WO; ++ox) {
        double acc = b(co, 0);
        for (int c = 0; c < C; ++c) {
          for (int ky = 0; ky < K; ++ky) {
            for (int kx = 0; kx < K; ++kx) {
              const int iy = oy * S - P + ky;
              const int ix = ox * S - P + kx;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += w(co, (c * K + ky) * K + kx) * x(c, iy * W + ix);
            }
          }
        }
        CHECK(g.value(y)(co, oy * WO + ox) == doctest::Approx(acc));
      }
    }
  }

  const Mat rw = random_mat(rng, CO, HO * WO);
  auto eval = [&](const std::vector<Mat>& L, std::vector<Mat>* G) {
    return run_graph(L, G, rw, [&](Graph& gg, const std::vector<int>& ids) {
      Shape3 s;
      return gg.conv2d(ids[0], {C, H, W}, ids[1], ids[2], CO, K, S, P, &s,
                       "conv");
    });
  };
  check_grads(eval, {x, w, b});
}

TEST_CASE("mha normalizes attention rows and backpropagates exactly") {
  Rng rng(5);
  const int TQ = 4, TK = 6, D = 8, HEADS = 2;
  std::vector<Mat> leaves = {random_mat(rng, TQ, D),   // q_in
                             random_mat(rng, TK, D),   // kv_in
                             random_mat(rng, D, D, 0.5), random_mat(rng, 1, D),
                             random_mat(rng, D, D, 0.5), random_mat(rng, 1, D),
                             random_mat(rng, D, D, 0.5), random_mat(rng, 1, D),
                             random_mat(rng, D, D, 0.5), random_mat(rng, 1, D)};
  const Mat rw = random_mat(rng, TQ, D);
  auto eval = [&](const std::vector<Mat>& L, std::vector<Mat>* G) {
    return run_graph(L, G, rw, [&](Graph& g, const std::vector<int>& ids) {
      return g.mha(ids[0], ids[1], ids[1], ids[2], ids[3], ids[4], ids[5],
                   ids[6], ids[7], ids[8], ids[9], HEADS, "mha");
    });
  };
  check_grads(eval, leaves, 1e-6);
}

TEST_CASE("self-attention with shared q/k/v node accumulates all paths") {
  Rng rng(6);
  const int T = 5, D = 8;
  std::vector<Mat> leaves = {random_mat(rng, T, D)};
  std::vector<Mat> proj;
  for (int i = 0; i < 4; ++i) {
    leaves.push_back(random_mat(rng, D, D, 0.5));
    leaves.push_back(random_mat(rng, 1, D));
  }
  const Mat rw = random_mat(rng, T, D);
  auto eval = [&](const std::vector<Mat>& L, std::vector<Mat>* G) {
    return run_graph(L, G, rw, [&](Graph& g, const std::vector<int>& ids) {
      return g.mha(ids[0], ids[0], ids[0], ids[1], ids[2], ids[3], ids[4],
                   ids[5], ids[6], ids[7], ids[8], 2, "self");
    });
  };
  check_grads(eval, leaves, 1e-6);
}

TEST_CASE("set_loss node reproduces the reference loss and its gradients") {
  Rng rng(7);
  std::vector<GroundTruthItem> gt;
  for (int i = 0; i < 3; ++i) {
    GroundTruthItem g;
    const double w = rng.uniform(0.1, 0.3), h = rng.uniform(0.1, 0.3);
    g.box = {rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w,
             h};
    gt.push_back(g);
  }
  const Mat logits = random_mat(rng, 6, 2);
  Mat raw_boxes = random_mat(rng, 6, 4);

  match::MatchWeights mw;
  loss::LossWeights lw;
  loss::LossBreakdown bd;
  match::Assignment assign;

  auto eval = [&](const std::vector<Mat>& L, std::vector<Mat>* G) {
    Graph g;
    const int li = g.param(L[0], "logits");
    const int ri = g.param(L[1], "raw");
    const int bi = g.sigmoid(ri, "sig");
    loss::LossBreakdown bd_local;
    const int root =
        g.set_loss(li, bi, gt, mw, lw, &bd_local, &assign, "loss");
    bd = bd_local;
    if (G) {
      g.backward(root);
      *G = {g.grad(li), g.grad(ri)};
    }
    return g.value(root)(0, 0);
  };

  // The node's forward agrees with the standalone loss modules.
  const double total = eval({logits, raw_boxes}, nullptr);
  std::vector<Prediction> preds;
  for (int i = 0; i < 6; ++i) {
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    preds.push_back(Prediction::from_logits(
        logits(i, 0), logits(i, 1),
        {sig(raw_boxes(i, 0)), sig(raw_boxes(i, 1)), sig(raw_boxes(i, 2)),
         sig(raw_boxes(i, 3))}));
  }
  const auto a =
      match::solve_assignment(match::build_cost_matrix(gt, preds, mw));
  const auto ref = loss::hungarian_loss(gt, preds, a, lw);
  CHECK(total == doctest::Approx(ref.total).epsilon(1e-12));
  CHECK(bd.total == doctest::Approx(ref.total).epsilon(1e-12));

  // Gradcheck with the assignment stable across probes (FD across a
  // matching switch would be meaningless).
  std::vector<Mat> grads;
  eval({logits, raw_boxes}, &grads);
  const auto base_assign = assign;
  const double h = 1e-6;
  for (int leaf = 0; leaf < 2; ++leaf) {
    const Mat& g0 = grads[leaf];
    Mat probe = leaf == 0 ? logits : raw_boxes;
    for (Eigen::Index r = 0; r < probe.rows(); ++r) {
      for (Eigen::Index c = 0; c < probe.cols(); ++c) {
        auto at = [&](double eps) {
          std::vector<Mat> L = {logits, raw_boxes};
          L[leaf](r, c) += eps;
          return eval(L, nullptr);
        };
        const double up = at(h);
        const bool stable_up = assign.pairs == base_assign.pairs;
        const double dn = at(-h);
        const bool stable_dn = assign.pairs == base_assign.pairs;
        if (!stable_up || !stable_dn) continue;
        CHECK(std::abs(g0(r, c) - (up - dn) / (2 * h)) < 1e-6);
      }
    }
  }
}

TEST_CASE("empty ground truth flows through the loss node") {
  Rng rng(8);
  Graph g;
  const int li = g.param(random_mat(rng, 4, 2), "logits");
  const int bi = g.sigmoid(g.param(random_mat(rng, 4, 4), "raw"), "sig");
  loss::LossBreakdown bd;
  const int root = g.set_loss(li, bi, {}, match::MatchWeights{},
                              loss::LossWeights{}, &bd, nullptr, "loss");
  g.backward(root);
  CHECK(bd.l1 == 0.0);
  CHECK(g.has_grad(li));
  CHECK(g.grad(li).allFinite());
}

TEST_CASE("dropout is identity at p=0 and rescales at p>0") {
  Rng rng(9);
  Graph g;
  const int x = g.param(random_mat(rng, 10, 10), "x");
  Rng drop(1);
  CHECK(g.dropout(x, 0.0, drop, "d0") == x);

  const int d = g.dropout(x, 0.4, drop, "d");
  const Mat& y = g.value(d);
  int zeros = 0;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
      if (y(r, c) == 0.0) {
        ++zeros;
      } else {
        CHECK(y(r, c) ==
              doctest::Approx(g.value(x)(r, c) / 0.6).epsilon(1e-12));
      }
    }
  }
  CHECK(zeros > 10);
  CHECK(zeros < 90);
}

TEST_CASE("non-finite activations abort naming the layer") {
  Graph g;
  Mat bad(1, 2);
  bad << 1.0, std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(g.input(std::move(bad), "backbone.1"),
                       "non-finite values in layer 'backbone.1'",
                       NumericError);
}

TEST_CASE("backward rejects non-scalar roots") {
  Graph g;
  Rng rng(10);
  const int x = g.param(random_mat(rng, 2, 2), "x");
  CHECK_THROWS_AS(g.backward(x), NumericError);
}
