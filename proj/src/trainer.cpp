#include "ulm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <numeric>
#include <thread>

#include "ulm/errors.hpp"
#include "ulm/nn/params.hpp"

namespace ulm::train {

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// Static index partition across threads; exceptions surface in index order
// so failures are reported deterministically.
void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (int i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
  }
}

void shuffle_indices(std::vector<int>* idx, Rng* rng) {
  for (size_t i = idx->size(); i > 1; --i) {
    std::swap((*idx)[i - 1], (*idx)[rng->uniform_int(0, i - 1)]);
  }
}

}  // namespace

namespace {

loss::LossBreakdown item_loss_impl(const model::DetrTiny& m,
                                   const TrainItem& item, const LossConfig& lc,
                                   bool deep, std::vector<double>* grad,
                                   double* optimized_total,
                                   match::Assignment* assignment,
                                   Rng* dropout_rng) {
  model::TapedForward tf = m.forward_taped(item.frame, dropout_rng);
  nn::Graph& g = tf.graph;
  loss::LossBreakdown bd;
  int root = g.set_loss(tf.logits, tf.boxes, item.gt, lc.match, lc.loss, &bd,
                        assignment, "set_loss");
  double total = bd.total;
  if (deep) {
    for (std::size_t l = 0; l < tf.aux_logits.size(); ++l) {
      loss::LossBreakdown aux;
      const int node =
          g.set_loss(tf.aux_logits[l], tf.aux_boxes[l], item.gt, lc.match,
                     lc.loss, &aux, nullptr, "set_loss.aux" + std::to_string(l));
      total += aux.total;
      root = g.add(root, node, "set_loss.sum");
    }
  }
  if (!std::isfinite(total)) {
    throw NumericError("item loss is non-finite");
  }
  if (optimized_total) *optimized_total = total;
  if (grad) {
    grad->assign(m.params().total_size(), 0.0);
    g.backward(root);
    for (int i = 0; i < m.params().count(); ++i) {
      const int node = tf.param_nodes[i];
      if (!g.has_grad(node)) continue;
      const auto& e = m.params().entry(i);
      const nn::Mat& gm = g.grad(node);
      std::memcpy(grad->data() + e.offset, gm.data(),
                  static_cast<std::size_t>(gm.size()) * sizeof(double));
    }
  }
  return bd;
}

}  // namespace

loss::LossBreakdown item_loss(const model::DetrTiny& m, const TrainItem& item,
                              const LossConfig& lc, std::vector<double>* grad,
                              match::Assignment* assignment,
                              Rng* dropout_rng) {
  return item_loss_impl(m, item, lc, false, grad, nullptr, assignment,
                        dropout_rng);
}

loss::LossBreakdown item_loss_deep(const model::DetrTiny& m,
                                   const TrainItem& item, const LossConfig& lc,
                                   std::vector<double>* grad,
                                   double* optimized_total,
                                   match::Assignment* assignment,
                                   Rng* dropout_rng) {
  return item_loss_impl(m, item, lc, true, grad, optimized_total, assignment,
                        dropout_rng);
}

TrainResult train(model::DetrTiny* m, const std::vector<TrainItem>& items,
                  const TrainConfig& cfg,
                  const std::function<void(const EpochStats&)>& on_epoch) {
  if (items.empty()) {
    throw ValidationError("train: need at least one item");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.workers < 1) {
    throw ValidationError("train: epochs, batch_size, workers must be >= 1");
  }
  if (cfg.train_fraction <= 0.0 || cfg.train_fraction > 1.0) {
    throw ValidationError("train: train_fraction must be in (0, 1]");
  }
  for (size_t i = 0; i < items.size(); ++i) {
    if (static_cast<int>(items[i].gt.size()) >= m->config().n_queries) {
      throw ValidationError(
          "train: item " + std::to_string(i) + " has " +
          std::to_string(items[i].gt.size()) +
          " ground-truth boxes; need fewer than n_queries = " +
          std::to_string(m->config().n_queries));
    }
  }

  Rng rng(cfg.seed);
  std::vector<int> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_indices(&order, &rng);
  size_t n_train = static_cast<size_t>(
      std::lround(cfg.train_fraction * static_cast<double>(items.size())));
  n_train = std::clamp<size_t>(n_train, 1, items.size());
  std::vector<int> train_idx(order.begin(), order.begin() + n_train);
  std::vector<int> val_idx(order.begin() + n_train, order.end());

  TrainResult result;
  result.train_indices = train_idx;
  result.val_indices = val_idx;

  auto& store = m->params();
  nn::AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.beta2 = cfg.adam_beta2;
  nn::AdamW opt(store.total_size(), ocfg);

  std::vector<float> best_params;
  bool stop = false;

  std::vector<std::vector<double>> item_grads;
  std::vector<loss::LossBreakdown> item_bds;
  std::vector<double> batch_grad(store.total_size());

  for (int epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
    shuffle_indices(&train_idx, &rng);
    loss::LossBreakdown epoch_sum;
    int epoch_items = 0;

    for (size_t start = 0; start < train_idx.size() && !stop;
         start += cfg.batch_size) {
      const int b = static_cast<int>(
          std::min<size_t>(cfg.batch_size, train_idx.size() - start));
      item_grads.assign(b, {});
      item_bds.assign(b, {});
      const std::int64_t batch_id = result.steps;
      try {
        parallel_for(b, cfg.workers, [&](int j) {
          const TrainItem& it = items[train_idx[start + j]];
          Rng drop_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(
                                              batch_id * cfg.batch_size + j)));
          item_bds[j] = cfg.deep_supervision
                            ? item_loss_deep(*m, it, cfg.loss, &item_grads[j],
                                             nullptr, nullptr, &drop_rng)
                            : item_loss(*m, it, cfg.loss, &item_grads[j],
                                        nullptr, &drop_rng);
        });
      } catch (const NumericError& e) {
        throw NumericError("batch " + std::to_string(batch_id) + ": " +
                           e.what());
      }

      // Reduce per-item gradients in item order: the result is identical
      // for any worker count.
      std::fill(batch_grad.begin(), batch_grad.end(), 0.0);
      for (int j = 0; j < b; ++j) {
        const auto& g = item_grads[j];
        for (size_t k = 0; k < g.size(); ++k) batch_grad[k] += g[k];
      }
      const double inv_b = 1.0 / b;
      for (double& v : batch_grad) v *= inv_b;

      if (cfg.grad_clip_norm > 0.0) {
        double sq = 0.0;
        for (const double v : batch_grad) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip_norm) {
          const double scale = cfg.grad_clip_norm / norm;
          for (double& v : batch_grad) v *= scale;
        }
      }

      opt.step(&store.flat(), batch_grad);
      ++result.steps;
      m->set_step(result.steps);

      for (int j = 0; j < b; ++j) {
        epoch_sum.class_nll += item_bds[j].class_nll;
        epoch_sum.l1 += item_bds[j].l1;
        epoch_sum.giou_term += item_bds[j].giou_term;
        epoch_sum.total += item_bds[j].total;
        epoch_sum.floored_logs += item_bds[j].floored_logs;
      }
      epoch_items += b;

      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) stop = true;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.steps_end = result.steps;
    if (epoch_items > 0) {
      stats.train_mean.class_nll = epoch_sum.class_nll / epoch_items;
      stats.train_mean.l1 = epoch_sum.l1 / epoch_items;
      stats.train_mean.giou_term = epoch_sum.giou_term / epoch_items;
      stats.train_mean.total = epoch_sum.total / epoch_items;
      stats.train_mean.floored_logs = epoch_sum.floored_logs;
    }

    if (!val_idx.empty()) {
      std::vector<double> totals(val_idx.size());
      parallel_for(static_cast<int>(val_idx.size()), cfg.workers, [&](int j) {
        totals[j] =
            item_loss(*m, items[val_idx[j]], cfg.loss, nullptr).total;
      });
      stats.val_mean =
          std::accumulate(totals.begin(), totals.end(), 0.0) / totals.size();
    } else {
      stats.val_mean = stats.train_mean.total;
    }

    if (result.best_epoch < 0 || stats.val_mean < result.best_val) {
      result.best_val = stats.val_mean;
      result.best_epoch = epoch;
      best_params = store.flat();
    }
    result.curve.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }

  if (cfg.restore_best && !best_params.empty()) {
    store.flat() = best_params;
  }
  return result;
}

}  // namespace ulm::train
