#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "ulm/matching.hpp"
#include "ulm/rng.hpp"
#include "ulm/set_loss.hpp"

namespace ulm::nn {

// All graph math runs in double; parameters are stored in float32 by the
// ParameterStore and promoted on entry. Row-major to match image layouts.
using Mat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Shape3 {
  int c = 0, h = 0, w = 0;
};

/// Eager tape: every op appends a node holding its forward value and a
/// closure that scatters the node's gradient into its parents. Creation
/// order doubles as the topological order, so backward() is a reverse scan.
class Graph {
 public:
  /// Leaf with no gradient (images, positional encodings, zeros).
  int input(Mat value, const std::string& tag);

  /// Leaf that accumulates a gradient (model parameters).
  int param(const Mat& value, const std::string& tag);

  /// y = W * im2col(x) + b over a c_in x h x w feature map. W is
  /// (c_out x c_in*k*k), b is (c_out x 1). Returns the c_out x (h_out*w_out)
  /// map; out_shape reports the spatial geometry.
  int conv2d(int x, Shape3 xs, int w, int b, int c_out, int k, int stride,
             int pad, Shape3* out_shape, const std::string& tag);

  int relu(int x, const std::string& tag);
  int add(int a, int b, const std::string& tag);
  int sigmoid(int x, const std::string& tag);

  /// Feature map (c x h*w) -> token matrix (h*w x c).
  int transpose(int x, const std::string& tag);

  /// y = x * W^T + b with x (t x d_in), W (d_out x d_in), b (1 x d_out).
  int linear(int x, int w, int b, const std::string& tag);

  /// Row-wise layer norm with scale gamma and shift beta, both (1 x d).
  int layer_norm(int x, int gamma, int beta, const std::string& tag);

  /// Multi-head attention. q_in (t_q x d), k_in/v_in (t_kv x d); the four
  /// projections are (d x d) with (1 x d) biases. Softmax rows are checked
  /// to normalize within 1e-6.
  int mha(int q_in, int k_in, int v_in, int wq, int bq, int wk, int bk,
          int wv, int bv, int wo, int bo, int n_heads, const std::string& tag);

  /// Inverted-bernoulli dropout; identity when p == 0.
  int dropout(int x, double p, Rng& rng, const std::string& tag);

  /// Scalar projection sum(x o weights), the reduction used by gradient
  /// tests to turn any node into a backward root.
  int inner(int x, Mat weights, const std::string& tag);

  /// Hungarian set loss over class logits (n x 2) and sigmoid boxes (n x 4).
  /// Emits a 1x1 node; the breakdown and the matching are written through
  /// the out pointers during the forward pass.
  int set_loss(int logits, int boxes, const std::vector<GroundTruthItem>& gt,
               const match::MatchWeights& mw, const loss::LossWeights& lw,
               loss::LossBreakdown* breakdown, match::Assignment* assignment,
               const std::string& tag);

  /// Seeds d(root)/d(root) = 1 and walks the tape backwards.
  void backward(int root);

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }
  const std::string& tag(int id) const { return nodes_[id].tag; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Non-finite screening of every emitted value (default on).
  void set_check_numerics(bool on) { check_numerics_ = on; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::string tag;
    std::function<void(Graph&)> backprop;
  };

  int emit(Mat value, bool needs_grad, const std::string& tag,
           std::function<void(Graph&)> backprop);
  bool wants(int id) const { return nodes_[id].needs_grad; }
  void accum(int id, const Mat& delta);

  std::vector<Node> nodes_;
  bool check_numerics_ = true;
};

}  // namespace ulm::nn
