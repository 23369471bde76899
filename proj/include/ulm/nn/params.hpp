#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ulm/nn/graph.hpp"

namespace ulm::nn {

/// Named float32 tensors in one flat buffer; the master copy that
/// checkpoints serialize and the optimizer updates. Graph math promotes
/// entries to double on the way in.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;  // element offset into the flat buffer
  };

  int add(const std::string& name, int rows, int cols);
  int index_of(const std::string& name) const;  // -1 when absent

  int count() const { return static_cast<int>(entries_.size()); }
  const Entry& entry(int i) const { return entries_[i]; }
  std::size_t total_size() const { return flat_.size(); }

  std::vector<float>& flat() { return flat_; }
  const std::vector<float>& flat() const { return flat_; }

  Mat promote(int i) const;
  void assign(int i, const Mat& m);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> by_name_;
  std::vector<float> flat_;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay. Moments are kept in double; the
/// parameter update rounds through the float32 master copy.
class AdamW {
 public:
  AdamW(std::size_t n_params, const AdamWConfig& cfg);

  void step(std::vector<float>* params, const std::vector<double>& grad);
  std::int64_t t() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace ulm::nn
