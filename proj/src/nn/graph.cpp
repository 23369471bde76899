#include "ulm/nn/graph.hpp"

#include <cmath>
#include <utility>

#include "ulm/errors.hpp"
#include "ulm/rng.hpp"

namespace ulm::nn {

namespace {

Mat im2col(const Mat& x, const Shape3& s, int k, int stride, int pad,
           int h_out, int w_out) {
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(s.c) * k * k,
                       static_cast<Eigen::Index>(h_out) * w_out);
  for (int oy = 0; oy < h_out; ++oy) {
    for (int ox = 0; ox < w_out; ++ox) {
      const int col = oy * w_out + ox;
      for (int c = 0; c < s.c; ++c) {
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= s.w) continue;
            cols((c * k + ky) * k + kx, col) = x(c, iy * s.w + ix);
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(Mat* dx, const Mat& dcols, const Shape3& s, int k, int stride,
                int pad, int h_out, int w_out) {
  for (int oy = 0; oy < h_out; ++oy) {
    for (int ox = 0; ox < w_out; ++ox) {
      const int col = oy * w_out + ox;
      for (int c = 0; c < s.c; ++c) {
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= s.w) continue;
            (*dx)(c, iy * s.w + ix) += dcols((c * k + ky) * k + kx, col);
          }
        }
      }
    }
  }
}

Mat softmax_rows(const Mat& s) {
  Mat out(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    out.row(r) = (s.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace

int Graph::emit(Mat value, bool needs_grad, const std::string& tag,
                std::function<void(Graph&)> backprop) {
  if (check_numerics_ && !value.allFinite()) {
    throw NumericError("non-finite values in layer '" + tag + "'");
  }
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.tag = tag;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Graph::accum(int id, const Mat& delta) {
  Mat& g = nodes_[id].grad;
  if (g.size() == 0) {
    g = delta;
  } else {
    g += delta;
  }
}

int Graph::input(Mat value, const std::string& tag) {
  return emit(std::move(value), false, tag, nullptr);
}

int Graph::param(const Mat& value, const std::string& tag) {
  return emit(value, true, tag, nullptr);
}

void Graph::backward(int root) {
  if (nodes_[root].value.size() != 1) {
    throw NumericError("backward: root must be scalar");
  }
  nodes_[root].grad = Mat::Ones(1, 1);
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.backprop && n.grad.size() > 0) {
      n.backprop(*this);
    }
  }
}

int Graph::conv2d(int x, Shape3 xs, int w, int b, int c_out, int k,
                  int stride, int pad, Shape3* out_shape,
                  const std::string& tag) {
  const int h_out = (xs.h + 2 * pad - k) / stride + 1;
  const int w_out = (xs.w + 2 * pad - k) / stride + 1;
  Mat cols = im2col(value(x), xs, k, stride, pad, h_out, w_out);
  Mat y = value(w) * cols;
  y.colwise() += value(b).col(0);
  if (out_shape) *out_shape = {c_out, h_out, w_out};

  const int self = emit(std::move(y), true, tag, nullptr);
  nodes_[self].backprop = [=, cols = std::move(cols)](Graph& g) {
    const Mat& dy = g.nodes_[self].grad;
    g.accum(w, dy * cols.transpose());
    g.accum(b, dy.rowwise().sum());
    if (g.wants(x)) {
      const Mat dcols = g.value(w).transpose() * dy;
      Mat dx = Mat::Zero(xs.c, static_cast<Eigen::Index>(xs.h) * xs.w);
      col2im_add(&dx, dcols, xs, k, stride, pad, h_out, w_out);
      g.accum(x, dx);
    }
  };
  return self;
}

int Graph::relu(int x, const std::string& tag) {
  Mat y = value(x).cwiseMax(0.0);
  const bool ng = wants(x);
  const int self = emit(std::move(y), ng, tag, nullptr);
  if (ng) {
    nodes_[self].backprop = [=](Graph& g) {
      g.accum(x, (g.nodes_[self].grad.array() *
                  (g.value(self).array() > 0.0).cast<double>())
                     .matrix());
    };
  }
  return self;
}

int Graph::add(int a, int b, const std::string& tag) {
  Mat y = value(a) + value(b);
  const bool ng = wants(a) || wants(b);
  const int self = emit(std::move(y), ng, tag, nullptr);
  if (ng) {
    nodes_[self].backprop = [=](Graph& g) {
      const Mat& dy = g.nodes_[self].grad;
      if (g.wants(a)) g.accum(a, dy);
      if (g.wants(b)) g.accum(b, dy);
    };
  }
  return self;
}

int Graph::sigmoid(int x, const std::string& tag) {
  Mat y = (1.0 / (1.0 + (-value(x).array()).exp())).matrix();
  const bool ng = wants(x);
  const int self = emit(std::move(y), ng, tag, nullptr);
  if (ng) {
    nodes_[self].backprop = [=](Graph& g) {
      const auto& s = g.value(self).array();
      g.accum(x, (g.nodes_[self].grad.array() * s * (1.0 - s)).matrix());
    };
  }
  return self;
}

int Graph::transpose(int x, const std::string& tag) {
  Mat y = value(x).transpose();
  const bool ng = wants(x);
  const int self = emit(std::move(y), ng, tag, nullptr);
  if (ng) {
    nodes_[self].backprop = [=](Graph& g) {
      g.accum(x, g.nodes_[self].grad.transpose());
    };
  }
  return self;
}

int Graph::linear(int x, int w, int b, const std::string& tag) {
  Mat y = value(x) * value(w).transpose();
  y.rowwise() += value(b).row(0);
  const int self = emit(std::move(y), true, tag, nullptr);
  nodes_[self].backprop = [=](Graph& g) {
    const Mat& dy = g.nodes_[self].grad;
    g.accum(w, dy.transpose() * g.value(x));
    g.accum(b, dy.colwise().sum());
    if (g.wants(x)) g.accum(x, dy * g.value(w));
  };
  return self;
}

int Graph::layer_norm(int x, int gamma, int beta, const std::string& tag) {
  constexpr double kEps = 1e-5;
  const Mat& xv = value(x);
  const Eigen::Index rows = xv.rows(), cols = xv.cols();
  Mat xhat(rows, cols);
  Mat inv_std(rows, 1);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r, 0) = 1.0 / std::sqrt(var + kEps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r, 0);
  }
  Mat y = (xhat.array().rowwise() * value(gamma).row(0).array()).matrix();
  y.rowwise() += value(beta).row(0);
  const int self = emit(std::move(y), true, tag, nullptr);
  nodes_[self].backprop = [=, xhat = std::move(xhat),
                           inv_std = std::move(inv_std)](Graph& g) {
    const Mat& dy = g.nodes_[self].grad;
    g.accum(gamma, (dy.array() * xhat.array()).colwise().sum().matrix());
    g.accum(beta, dy.colwise().sum());
    if (!g.wants(x)) return;
    const auto gam = g.value(gamma).row(0).array();
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const Eigen::Array<double, 1, Eigen::Dynamic> dxhat =
          dy.row(r).array() * gam;
      const double m1 = dxhat.mean();
      const double m2 = (dxhat * xhat.row(r).array()).mean();
      dx.row(r) =
          ((dxhat - m1 - xhat.row(r).array() * m2) * inv_std(r, 0)).matrix();
    }
    g.accum(x, dx);
  };
  return self;
}

int Graph::mha(int q_in, int k_in, int v_in, int wq, int bq, int wk, int bk,
               int wv, int bv, int wo, int bo, int n_heads,
               const std::string& tag) {
  const Eigen::Index d = value(q_in).cols();
  const Eigen::Index dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat q = value(q_in) * value(wq).transpose();
  q.rowwise() += value(bq).row(0);
  Mat kk = value(k_in) * value(wk).transpose();
  kk.rowwise() += value(bk).row(0);
  Mat v = value(v_in) * value(wv).transpose();
  v.rowwise() += value(bv).row(0);

  std::vector<Mat> attn(n_heads);
  Mat concat(q.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = kk.middleCols(h * dh, dh);
    const Mat scores = (qh * kh.transpose()) * scale;
    attn[h] = softmax_rows(scores);
    const double row_err =
        (attn[h].rowwise().sum().array() - 1.0).abs().maxCoeff();
    if (!attn[h].allFinite() || row_err > 1e-6) {
      throw NumericError("attention rows not normalized in layer '" + tag +
                         "'");
    }
    concat.middleCols(h * dh, dh) = attn[h] * v.middleCols(h * dh, dh);
  }
  Mat y = concat * value(wo).transpose();
  y.rowwise() += value(bo).row(0);

  const int self = emit(std::move(y), true, tag, nullptr);
  nodes_[self].backprop = [=, q = std::move(q), kk = std::move(kk),
                           v = std::move(v), attn = std::move(attn),
                           concat = std::move(concat)](Graph& g) {
    const Mat& dy = g.nodes_[self].grad;
    g.accum(wo, dy.transpose() * concat);
    g.accum(bo, dy.colwise().sum());
    const Mat dconcat = dy * g.value(wo);

    Mat dq = Mat::Zero(q.rows(), d);
    Mat dk = Mat::Zero(kk.rows(), d);
    Mat dv = Mat::Zero(v.rows(), d);
    for (int h = 0; h < n_heads; ++h) {
      const auto doh = dconcat.middleCols(h * dh, dh);
      const Mat& a = attn[h];
      dv.middleCols(h * dh, dh) = a.transpose() * doh;
      const Mat da = doh * v.middleCols(h * dh, dh).transpose();
      // Softmax rows: dS = A o (dA - rowsum(dA o A)).
      Mat ds(a.rows(), a.cols());
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const double dot = (da.row(r).array() * a.row(r).array()).sum();
        ds.row(r) = (a.row(r).array() * (da.row(r).array() - dot)).matrix();
      }
      ds *= scale;
      dq.middleCols(h * dh, dh) = ds * kk.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * q.middleCols(h * dh, dh);
    }
    g.accum(wq, dq.transpose() * g.value(q_in));
    g.accum(bq, dq.colwise().sum());
    g.accum(wk, dk.transpose() * g.value(k_in));
    g.accum(bk, dk.colwise().sum());
    g.accum(wv, dv.transpose() * g.value(v_in));
    g.accum(bv, dv.colwise().sum());
    if (g.wants(q_in)) g.accum(q_in, dq * g.value(wq));
    if (g.wants(k_in)) g.accum(k_in, dk * g.value(wk));
    if (g.wants(v_in)) g.accum(v_in, dv * g.value(wv));
  };
  return self;
}

int Graph::dropout(int x, double p, Rng& rng, const std::string& tag) {
  if (p < 0.0 || p >= 1.0) {
    throw ValidationError("dropout: p must be in [0, 1)");
  }
  if (p == 0.0) return x;
  const Mat& xv = value(x);
  Mat mask(xv.rows(), xv.cols());
  const double keep = 1.0 - p;
  for (Eigen::Index r = 0; r < mask.rows(); ++r) {
    for (Eigen::Index c = 0; c < mask.cols(); ++c) {
      mask(r, c) = rng.uniform() < p ? 0.0 : 1.0 / keep;
    }
  }
  Mat y = (xv.array() * mask.array()).matrix();
  const bool ng = wants(x);
  const int self = emit(std::move(y), ng, tag, nullptr);
  if (ng) {
    nodes_[self].backprop = [=, mask = std::move(mask)](Graph& g) {
      g.accum(x, (g.nodes_[self].grad.array() * mask.array()).matrix());
    };
  }
  return self;
}

int Graph::inner(int x, Mat weights, const std::string& tag) {
  if (weights.rows() != value(x).rows() ||
      weights.cols() != value(x).cols()) {
    throw ValidationError("inner: weight shape mismatch");
  }
  const double s = (value(x).array() * weights.array()).sum();
  const bool ng = wants(x);
  const int self = emit(Mat::Constant(1, 1, s), ng, tag, nullptr);
  if (ng) {
    nodes_[self].backprop = [=, weights = std::move(weights)](Graph& g) {
      g.accum(x, g.nodes_[self].grad(0, 0) * weights);
    };
  }
  return self;
}

int Graph::set_loss(int logits, int boxes,
                    const std::vector<GroundTruthItem>& gt,
                    const match::MatchWeights& mw,
                    const loss::LossWeights& lw,
                    loss::LossBreakdown* breakdown,
                    match::Assignment* assignment, const std::string& tag) {
  const Mat& lv = value(logits);
  const Mat& bv = value(boxes);
  const int n = static_cast<int>(lv.rows());
  std::vector<Prediction> preds;
  preds.reserve(n);
  for (int i = 0; i < n; ++i) {
    preds.push_back(Prediction::from_logits(
        lv(i, 0), lv(i, 1), {bv(i, 0), bv(i, 1), bv(i, 2), bv(i, 3)}));
  }
  match::Assignment a;
  if (!gt.empty()) {
    a = match::solve_assignment(match::build_cost_matrix(gt, preds, mw));
  }
  const loss::LossBreakdown bd = loss::hungarian_loss(gt, preds, a, lw);
  if (breakdown) *breakdown = bd;
  if (assignment) *assignment = a;

  const int self =
      emit(Mat::Constant(1, 1, bd.total), true, tag, nullptr);
  nodes_[self].backprop = [=, preds = std::move(preds),
                           a = std::move(a)](Graph& g) {
    const double seed = g.nodes_[self].grad(0, 0);
    const loss::LossGradients lg = loss::loss_gradient(gt, preds, a, lw);
    Mat dl(preds.size(), 2), db(preds.size(), 4);
    for (size_t i = 0; i < preds.size(); ++i) {
      dl(i, 0) = seed * lg.d_logits[i][0];
      dl(i, 1) = seed * lg.d_logits[i][1];
      for (int c = 0; c < 4; ++c) db(i, c) = seed * lg.d_box[i][c];
    }
    g.accum(logits, dl);
    g.accum(boxes, db);
  };
  return self;
}

}  // namespace ulm::nn
