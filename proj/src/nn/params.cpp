#include "ulm/nn/params.hpp"

#include <cmath>

#include "ulm/errors.hpp"

namespace ulm::nn {

int ParameterStore::add(const std::string& name, int rows, int cols) {
  if (rows < 1 || cols < 1) {
    throw ValidationError("param '" + name + "': bad shape");
  }
  if (by_name_.count(name)) {
    throw ValidationError("param '" + name + "' registered twice");
  }
  Entry e;
  e.name = name;
  e.rows = rows;
  e.cols = cols;
  e.offset = flat_.size();
  flat_.resize(flat_.size() + static_cast<std::size_t>(rows) * cols, 0.0f);
  entries_.push_back(e);
  by_name_[name] = static_cast<int>(entries_.size()) - 1;
  return by_name_[name];
}

int ParameterStore::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? -1 : it->second;
}

Mat ParameterStore::promote(int i) const {
  const Entry& e = entries_[i];
  Mat m(e.rows, e.cols);
  const float* src = flat_.data() + e.offset;
  for (int r = 0; r < e.rows; ++r) {
    for (int c = 0; c < e.cols; ++c) {
      m(r, c) = static_cast<double>(src[r * e.cols + c]);
    }
  }
  return m;
}

void ParameterStore::assign(int i, const Mat& m) {
  const Entry& e = entries_[i];
  if (m.rows() != e.rows || m.cols() != e.cols) {
    throw ValidationError("param '" + e.name + "': assign shape mismatch");
  }
  float* dst = flat_.data() + e.offset;
  for (int r = 0; r < e.rows; ++r) {
    for (int c = 0; c < e.cols; ++c) {
      dst[r * e.cols + c] = static_cast<float>(m(r, c));
    }
  }
}

AdamW::AdamW(std::size_t n_params, const AdamWConfig& cfg)
    : cfg_(cfg), m_(n_params, 0.0), v_(n_params, 0.0) {}

void AdamW::step(std::vector<float>* params, const std::vector<double>& grad) {
  if (params->size() != m_.size() || grad.size() != m_.size()) {
    throw ValidationError("AdamW: parameter/gradient size mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const double g = grad[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    const double theta = static_cast<double>((*params)[i]);
    (*params)[i] = static_cast<float>(
        theta - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                           cfg_.weight_decay * theta));
  }
}

}  // namespace ulm::nn
