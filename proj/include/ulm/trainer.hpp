#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ulm/model.hpp"

namespace ulm::train {

struct TrainItem {
  Frame frame;
  std::vector<GroundTruthItem> gt;
};

struct LossConfig {
  match::MatchWeights match;
  loss::LossWeights loss;
};

/// Loss of one item under the current parameters; when `grad` is non-null it
/// receives d(total)/d(theta) over the flat parameter vector. The matching
/// realized inside the loss is reported through `assignment`.
loss::LossBreakdown item_loss(const model::DetrTiny& m, const TrainItem& item,
                              const LossConfig& lc, std::vector<double>* grad,
                              match::Assignment* assignment = nullptr,
                              Rng* dropout_rng = nullptr);

/// Training objective with deep supervision: the loss above plus the same
/// Hungarian loss applied to every intermediate decoder layer through the
/// shared heads, one independent matching per layer. Returns the final-layer
/// breakdown (what the curves record); `optimized_total` receives the sum
/// the gradient is taken of.
loss::LossBreakdown item_loss_deep(const model::DetrTiny& m,
                                   const TrainItem& item, const LossConfig& lc,
                                   std::vector<double>* grad,
                                   double* optimized_total = nullptr,
                                   match::Assignment* assignment = nullptr,
                                   Rng* dropout_rng = nullptr);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 1;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 42;
  int workers = 1;
  double train_fraction = 0.7;  // remainder is the validation split
  std::int64_t max_steps = 0;   // 0 = no cap; counts optimizer steps
  LossConfig loss;
  bool deep_supervision = true;  // also supervise intermediate decoder layers
  double grad_clip_norm = 0.1;   // global-norm gradient clip; 0 disables
  double adam_beta2 = 0.999;     // second-moment decay of the optimizer
  bool restore_best = true;     // leave the model at the best-val parameters
};

struct EpochStats {
  int epoch = 0;                      // 1-based
  loss::LossBreakdown train_mean;     // per-item mean over the epoch
  double val_mean = 0.0;              // falls back to train when no val split
  std::int64_t steps_end = 0;
};

struct TrainResult {
  std::vector<EpochStats> curve;
  double best_val = 0.0;
  int best_epoch = -1;
  std::int64_t steps = 0;
  std::vector<int> train_indices;  // the seeded split, in shuffle order
  std::vector<int> val_indices;
};

/// AdamW training loop: seeded 70/30 split, per-epoch shuffles, per-item
/// gradients reduced in item order so results do not depend on the worker
/// count. Deterministic given (items, config, model parameters).
TrainResult train(model::DetrTiny* m, const std::vector<TrainItem>& items,
                  const TrainConfig& cfg,
                  const std::function<void(const EpochStats&)>& on_epoch = {});

}  // namespace ulm::train
