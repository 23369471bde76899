#include "ulm/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "ulm/errors.hpp"
#include "ulm/simulator.hpp"
#include "ulm/trainer.hpp"

using namespace ulm;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  return fs::temp_directory_path() / name;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_encoder_layers = 1;
  cfg.n_decoder_layers = 1;
  cfg.n_queries = 5;
  cfg.backbone_channels = {8, 8};
  cfg.patch_input_size = 16;
  cfg.ffn_dim = 32;
  return cfg;
}

train::TrainItem tiny_item(std::uint64_t seed) {
  sim::PsfModel psf;
  psf.sigma_x = psf.sigma_y = 1.2;
  const auto sf = sim::simulate_frame(16, 16, 2, psf, 0.02, seed);
  return {sf.frame, sf.gt};
}

}  // namespace

TEST_CASE("positional encoding covers [-1, 1] with distinct positions") {
  const auto pe = model::positional_encoding(8, 8, 64);
  REQUIRE(pe.rows() == 64);
  REQUIRE(pe.cols() == 64);
  CHECK(pe.maxCoeff() <= 1.0);
  CHECK(pe.minCoeff() >= -1.0);
  for (int a = 0; a < 64; ++a) {
    for (int b = a + 1; b < 64; ++b) {
      CHECK((pe.row(a) - pe.row(b)).cwiseAbs().maxCoeff() > 1e-6);
    }
  }
}

TEST_CASE("config validation rejects inconsistent shapes") {
  auto cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.d_model = 18;  // not divisible by 4
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  cfg.n_heads = 3;  // does not divide d_model
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  cfg.patch_input_size = 17;  // not a multiple of the stride
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  cfg.backbone_channels.clear();
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("backbone reduces a patch by stride 8 in the default config") {
  model::DetrTiny m(model::ModelConfig{}, 7);
  const auto sf = sim::simulate_frame(64, 64, 3, sim::PsfModel{}, 0.05, 11);
  const auto feat = m.backbone_features(sf.frame);
  CHECK(feat.rows() == 64);   // d_model
  CHECK(feat.cols() == 64);   // 8 x 8 locations
}

TEST_CASE("forward yields one normalized prediction per query") {
  model::DetrTiny m(tiny_config(), 3);
  const auto item = tiny_item(21);
  const auto preds = m.forward(item.frame);
  REQUIRE(static_cast<int>(preds.size()) == 5);
  for (const auto& p : preds) {
    CHECK(p.class_probs[0] + p.class_probs[1] == doctest::Approx(1.0));
    CHECK(p.class_probs[0] >= 0.0);
    CHECK(p.box.cx > 0.0);
    CHECK(p.box.cx < 1.0);
    CHECK(p.box.cy > 0.0);
    CHECK(p.box.cy < 1.0);
    CHECK(p.box.w > 0.0);
    CHECK(p.box.w < 1.0);
    CHECK(p.box.h > 0.0);
    CHECK(p.box.h < 1.0);
  }
}

TEST_CASE("forward rejects a mismatched patch size") {
  model::DetrTiny m(tiny_config(), 3);
  const auto sf = sim::simulate_frame(32, 32, 1, sim::PsfModel{}, 0.0, 1);
  CHECK_THROWS_AS(m.forward(sf.frame), ValidationError);
}

TEST_CASE("permuting the object queries permutes the predictions") {
  const auto cfg = tiny_config();
  model::DetrTiny m(cfg, 9);
  const auto item = tiny_item(33);
  const auto base = m.forward(item.frame);

  // Rotate the query rows by one inside the flat parameter buffer.
  auto& store = m.params();
  const int qi = store.index_of("queries.weight");
  REQUIRE(qi >= 0);
  const auto& e = store.entry(qi);
  REQUIRE(e.rows == cfg.n_queries);
  std::vector<float> rows(e.rows * e.cols);
  std::copy_n(store.flat().begin() + e.offset, rows.size(), rows.begin());
  for (int r = 0; r < e.rows; ++r) {
    const int src = (r + 1) % e.rows;
    std::copy_n(rows.begin() + src * e.cols, e.cols,
                store.flat().begin() + e.offset + r * e.cols);
  }

  const auto rotated = m.forward(item.frame);
  for (int r = 0; r < cfg.n_queries; ++r) {
    const auto& a = rotated[r];
    const auto& b = base[(r + 1) % cfg.n_queries];
    CHECK(a.class_probs[0] == doctest::Approx(b.class_probs[0]).epsilon(1e-9));
    CHECK(a.box.cx == doctest::Approx(b.box.cx).epsilon(1e-9));
    CHECK(a.box.cy == doctest::Approx(b.box.cy).epsilon(1e-9));
    CHECK(a.box.w == doctest::Approx(b.box.w).epsilon(1e-9));
    CHECK(a.box.h == doctest::Approx(b.box.h).epsilon(1e-9));
  }
}

TEST_CASE("checkpoints round-trip bitwise and re-save byte-identically") {
  model::DetrTiny m(tiny_config(), 17);
  m.set_step(123);
  const auto path = temp_file("model.ulmc");
  model::save_checkpoint(m, path);

  auto loaded = model::load_checkpoint(path);
  CHECK(loaded.config() == m.config());
  CHECK(loaded.step() == 123);
  CHECK(loaded.init_seed() == 17);
  CHECK(loaded.params().flat() == m.params().flat());

  const auto item = tiny_item(5);
  const auto a = m.forward(item.frame);
  const auto b = loaded.forward(item.frame);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].class_logits == b[i].class_logits);
    CHECK(a[i].box == b[i].box);
  }

  const auto path2 = temp_file("model2.ulmc");
  model::save_checkpoint(loaded, path2);
  CHECK(slurp(path) == slurp(path2));
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("corrupt checkpoints are rejected") {
  model::DetrTiny m(tiny_config(), 17);
  const auto path = temp_file("corrupt.ulmc");
  model::save_checkpoint(m, path);

  auto bytes = slurp(path);
  bytes[0] = 'X';
  {
    std::ofstream os(path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }
  CHECK_THROWS_AS(model::load_checkpoint(path), ValidationError);

  bytes[0] = 'U';
  bytes.resize(bytes.size() - 40);
  {
    std::ofstream os(path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }
  CHECK_THROWS_AS(model::load_checkpoint(path), ValidationError);

  fs::remove(path);
  CHECK_THROWS_AS(model::load_checkpoint(path), ValidationError);
}

TEST_CASE("item_loss gradients agree with finite differences") {
  model::DetrTiny m(tiny_config(), 29);
  const auto item = tiny_item(41);
  train::LossConfig lc;

  std::vector<double> grad;
  match::Assignment base_assign;
  const auto bd = train::item_loss(m, item, lc, &grad, &base_assign);
  CHECK(std::isfinite(bd.total));
  REQUIRE(grad.size() == m.params().total_size());

  // Probe a spread of parameter coordinates; FD in the float32 master copy,
  // skipping probes where the matching flips.
  auto& flat = m.params().flat();
  Rng rng(99);
  int checked = 0;
  for (int probe = 0; probe < 24; ++probe) {
    const auto idx = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(flat.size()) - 1));
    const float orig = flat[idx];
    const double h = 1e-3;

    match::Assignment a_up, a_dn;
    flat[idx] = static_cast<float>(orig + h);
    const double up_h = static_cast<double>(flat[idx]) - orig;
    const double up = train::item_loss(m, item, lc, nullptr, &a_up).total;
    flat[idx] = static_cast<float>(orig - h);
    const double dn_h = orig - static_cast<double>(flat[idx]);
    const double dn = train::item_loss(m, item, lc, nullptr, &a_dn).total;
    flat[idx] = orig;

    if (a_up.pairs != base_assign.pairs || a_dn.pairs != base_assign.pairs) {
      continue;
    }
    const double fd = (up - dn) / (up_h + dn_h);
    const double denom = std::max({std::abs(fd), std::abs(grad[idx]), 1e-4});
    CHECK(std::abs(fd - grad[idx]) / denom < 2e-3);
    ++checked;
  }
  CHECK(checked >= 16);
}

TEST_CASE("deep-supervision gradients agree with finite differences") {
  auto cfg = tiny_config();
  cfg.n_decoder_layers = 2;
  model::DetrTiny m(cfg, 31);
  const auto item = tiny_item(47);

  // A few warm-up steps so the per-layer matchings are stable under the
  // probe perturbations.
  train::TrainConfig wc;
  wc.epochs = 30;
  wc.batch_size = 1;
  wc.lr = 1e-3;
  wc.restore_best = false;
  train::train(&m, {item}, wc);

  const train::LossConfig lc;
  std::vector<double> grad;
  double total = 0.0;
  const auto bd = train::item_loss_deep(m, item, lc, &grad, &total);
  CHECK(total > bd.total);  // the aux layer contributes
  REQUIRE(grad.size() == m.params().total_size());

  auto& flat = m.params().flat();
  Rng rng(77);
  int checked = 0;
  for (int probe = 0; probe < 30; ++probe) {
    const auto idx = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(flat.size()) - 1));
    const float orig = flat[idx];
    const double h = 1e-3;

    double up = 0.0, dn = 0.0;
    flat[idx] = static_cast<float>(orig + h);
    const double up_h = static_cast<double>(flat[idx]) - orig;
    train::item_loss_deep(m, item, lc, nullptr, &up);
    flat[idx] = static_cast<float>(orig - h);
    const double dn_h = orig - static_cast<double>(flat[idx]);
    train::item_loss_deep(m, item, lc, nullptr, &dn);
    flat[idx] = orig;

    const double fd = (up - dn) / (up_h + dn_h);
    const double denom = std::max({std::abs(fd), std::abs(grad[idx]), 1e-4});
    const double rel = std::abs(fd - grad[idx]) / denom;
    // Matching flips in any layer leave a kink; those probes are skipped.
    if (rel > 0.05) continue;
    CHECK(rel < 2e-3);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("training is deterministic and worker-count independent") {
  std::vector<train::TrainItem> items;
  for (int i = 0; i < 6; ++i) items.push_back(tiny_item(100 + i));

  train::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 3;
  tc.seed = 7;
  tc.restore_best = false;

  auto run = [&](int workers) {
    model::DetrTiny m(tiny_config(), 55);
    auto cfg = tc;
    cfg.workers = workers;
    const auto res = train::train(&m, items, cfg);
    return std::make_pair(res, m.params().flat());
  };

  const auto [r1, p1] = run(1);
  const auto [r2, p2] = run(1);
  const auto [r3, p3] = run(3);

  REQUIRE(r1.curve.size() == 2);
  CHECK(p1 == p2);
  CHECK(p1 == p3);
  for (size_t e = 0; e < r1.curve.size(); ++e) {
    CHECK(r1.curve[e].train_mean.total == r2.curve[e].train_mean.total);
    CHECK(r1.curve[e].train_mean.total == r3.curve[e].train_mean.total);
    CHECK(r1.curve[e].val_mean == r3.curve[e].val_mean);
  }
}

TEST_CASE("training reduces the loss on a single item") {
  model::DetrTiny m(tiny_config(), 71);
  std::vector<train::TrainItem> items = {tiny_item(200)};

  train::TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 1;
  tc.lr = 2e-3;
  tc.train_fraction = 1.0;
  tc.restore_best = false;

  const auto res = train::train(&m, items, tc);
  REQUIRE(res.curve.size() == 30);
  CHECK(res.steps == 30);
  CHECK(res.curve.back().train_mean.total <
        0.5 * res.curve.front().train_mean.total);
}

TEST_CASE("max_steps caps the optimizer step count") {
  model::DetrTiny m(tiny_config(), 71);
  std::vector<train::TrainItem> items;
  for (int i = 0; i < 4; ++i) items.push_back(tiny_item(300 + i));

  train::TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 2;
  tc.max_steps = 3;
  tc.train_fraction = 1.0;
  tc.restore_best = false;

  const auto res = train::train(&m, items, tc);
  CHECK(res.steps == 3);
  CHECK(m.step() == 3);
}

TEST_CASE("train rejects items with too many ground-truth boxes") {
  model::DetrTiny m(tiny_config(), 1);  // 5 queries
  sim::PsfModel psf;
  psf.sigma_x = psf.sigma_y = 1.0;
  const auto sf = sim::simulate_frame(16, 16, 5, psf, 0.0, 9);
  REQUIRE(sf.gt.size() == 5);
  std::vector<train::TrainItem> items = {{sf.frame, sf.gt}};
  CHECK_THROWS_AS(train::train(&m, items, train::TrainConfig{}),
                  ValidationError);
}

TEST_CASE("fresh models with the same seed are identical") {
  model::DetrTiny a(tiny_config(), 13), b(tiny_config(), 13),
      c(tiny_config(), 14);
  CHECK(a.params().flat() == b.params().flat());
  CHECK(a.params().flat() != c.params().flat());
}
