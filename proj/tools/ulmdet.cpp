// ulmdet: batch pipeline driver — simulate, train, detect, evaluate, render.
// Every subcommand writes a manifest.json with the full run configuration
// beside its outputs; identical configs reproduce outputs byte-identically.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ulm/coco_io.hpp"
#include "ulm/errors.hpp"
#include "ulm/evaluation.hpp"
#include "ulm/model.hpp"
#include "ulm/pipeline.hpp"
#include "ulm/trainer.hpp"

namespace fs = std::filesystem;
using namespace ulm;
using nlohmann::ordered_json;

namespace {

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open for writing: " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw ValidationError("write failed: " + path.string());
}

struct LoadedData {
  coco::CocoDataset dataset;            // images sorted by id
  std::vector<sim::SimulatedFrame> frames;  // aligned with dataset.images
};

LoadedData load_data(const fs::path& dir, int frames_limit) {
  LoadedData d;
  d.dataset = coco::load(dir / "annotations.json");
  std::sort(d.dataset.images.begin(), d.dataset.images.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  if (frames_limit > 0 &&
      static_cast<int>(d.dataset.images.size()) > frames_limit) {
    d.dataset.images.resize(frames_limit);
  }
  std::map<std::int64_t, std::vector<const coco::CocoAnnotation*>> by_image;
  for (const auto& a : d.dataset.annotations) {
    by_image[a.image_id].push_back(&a);
  }
  for (const auto& img : d.dataset.images) {
    sim::SimulatedFrame sf;
    sf.frame = read_ulmf(dir / img.file_name);
    if (sf.frame.width != img.width || sf.frame.height != img.height) {
      throw ValidationError("frame " + img.file_name +
                            " does not match its recorded dimensions");
    }
    sf.frame.frame_id = static_cast<int>(img.id);
    for (const auto* a : by_image[img.id]) {
      GroundTruthItem g;
      g.class_label = a->category_id;
      const geom::BBoxA abs{a->bbox[0], a->bbox[1], a->bbox[0] + a->bbox[2],
                            a->bbox[1] + a->bbox[3]};
      g.box = geom::to_normalized(abs, img.width, img.height);
      g.center_x = g.box.cx;
      g.center_y = g.box.cy;
      sf.gt.push_back(g);
    }
    d.frames.push_back(std::move(sf));
  }
  return d;
}

// Deterministic per-index parallelism: output slots are pre-allocated and
// filled independently, so the worker count never changes results.
void parallel_frames(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
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

struct SimulateOpts {
  std::string out;
  int frames = 100;
  int size = 64;
  int height = 0;  // 0 = square
  int bubbles = 5;
  double sigma = 2.0;
  double sigma_y = 0.0;  // 0 = same as sigma
  double noise = 0.05;
  std::uint64_t seed = 42;
};

int cmd_simulate(const SimulateOpts& o) {
  sim::PsfModel psf;
  psf.sigma_x = o.sigma;
  psf.sigma_y = o.sigma_y > 0 ? o.sigma_y : o.sigma;
  const int h = o.height > 0 ? o.height : o.size;

  const auto frames =
      pipe::make_dataset(o.frames, o.size, h, o.bubbles, psf, o.noise, o.seed);
  const auto dataset = coco::to_coco(frames, "microbubble");

  const fs::path dir = o.out;
  fs::create_directories(dir / "frames");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    write_ulmf(frames[i].frame, dir / dataset.images[i].file_name);
  }
  coco::save(dataset, dir / "annotations.json");

  ordered_json m;
  m["subcommand"] = "simulate";
  m["out"] = o.out;
  m["frames"] = o.frames;
  m["size"] = o.size;
  m["height"] = h;
  m["bubbles"] = o.bubbles;
  m["sigma"] = psf.sigma_x;
  m["sigma_y"] = psf.sigma_y;
  m["noise"] = o.noise;
  m["seed"] = o.seed;
  write_json(dir / "manifest.json", m);
  std::printf("simulate: %d frames (%dx%d) -> %s\n", o.frames, o.size, h,
              o.out.c_str());
  return 0;
}

struct TrainOpts {
  std::string data;
  std::string out;
  std::string init;  // checkpoint to fine-tune from
  int frames_limit = 0;
  int epochs = 50;
  int batch = 1;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 42;
  int workers = 1;
  double train_fraction = 0.7;
  std::int64_t max_steps = 0;
  double grad_clip = 0.1;
  bool no_deep = false;
  double lambda_class = 1.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double no_object = 0.1;
  // model knobs, ignored when --init supplies a checkpoint
  int d_model = 64;
  int heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int queries = 20;
  int ffn_dim = 256;
  double dropout = 0.0;
};

int cmd_train(const TrainOpts& o) {
  const auto data = load_data(o.data, o.frames_limit);
  const auto items = pipe::to_train_items(data.frames);

  model::DetrTiny m = [&] {
    if (!o.init.empty()) return model::load_checkpoint(o.init);
    model::ModelConfig cfg;
    cfg.d_model = o.d_model;
    cfg.n_heads = o.heads;
    cfg.n_encoder_layers = o.enc_layers;
    cfg.n_decoder_layers = o.dec_layers;
    cfg.n_queries = o.queries;
    cfg.ffn_dim = o.ffn_dim;
    cfg.dropout = o.dropout;
    if (!items.empty()) {
      cfg.patch_input_size = items.front().frame.width;
    }
    return model::DetrTiny(cfg, o.seed);
  }();

  train::TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.lr = o.lr;
  tc.weight_decay = o.weight_decay;
  tc.seed = o.seed;
  tc.workers = o.workers;
  tc.train_fraction = o.train_fraction;
  tc.max_steps = o.max_steps;
  tc.grad_clip_norm = o.grad_clip;
  tc.deep_supervision = !o.no_deep;
  tc.loss.match.lambda_class = o.lambda_class;
  tc.loss.match.lambda_l1 = o.lambda_l1;
  tc.loss.match.lambda_giou = o.lambda_giou;
  tc.loss.loss.lambda_l1 = o.lambda_l1;
  tc.loss.loss.lambda_giou = o.lambda_giou;
  tc.loss.loss.no_object = o.no_object;

  const fs::path dir = o.out;
  fs::create_directories(dir);

  std::ofstream curve(dir / "loss_curve.csv", std::ios::binary);
  if (!curve) {
    throw ValidationError("cannot open for writing: " +
                          (dir / "loss_curve.csv").string());
  }
  curve << "epoch,steps,train_total,train_class_nll,train_l1,train_giou,"
           "val_total\n";
  const auto res = train::train(&m, items, tc, [&](const train::EpochStats& s) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  s.epoch, static_cast<long long>(s.steps_end),
                  s.train_mean.total, s.train_mean.class_nll, s.train_mean.l1,
                  s.train_mean.giou_term, s.val_mean);
    curve << buf;
    std::printf("epoch %d/%d train %.4f val %.4f\n", s.epoch, o.epochs,
                s.train_mean.total, s.val_mean);
  });
  curve.close();

  model::save_checkpoint(m, dir / "checkpoint.ulmc");

  ordered_json man;
  man["subcommand"] = "train";
  man["data"] = o.data;
  man["out"] = o.out;
  man["init"] = o.init;
  man["frames_limit"] = o.frames_limit;
  man["epochs"] = o.epochs;
  man["batch_size"] = o.batch;
  man["lr"] = o.lr;
  man["weight_decay"] = o.weight_decay;
  man["seed"] = o.seed;
  man["workers"] = o.workers;
  man["train_fraction"] = o.train_fraction;
  man["max_steps"] = o.max_steps;
  man["grad_clip"] = o.grad_clip;
  man["deep_supervision"] = !o.no_deep;
  man["lambda_class"] = o.lambda_class;
  man["lambda_l1"] = o.lambda_l1;
  man["lambda_giou"] = o.lambda_giou;
  man["no_object"] = o.no_object;
  ordered_json mc;
  mc["d_model"] = m.config().d_model;
  mc["n_heads"] = m.config().n_heads;
  mc["n_encoder_layers"] = m.config().n_encoder_layers;
  mc["n_decoder_layers"] = m.config().n_decoder_layers;
  mc["n_queries"] = m.config().n_queries;
  mc["backbone_channels"] = m.config().backbone_channels;
  mc["patch_input_size"] = m.config().patch_input_size;
  mc["dropout"] = m.config().dropout;
  mc["ffn_dim"] = m.config().ffn_dim;
  man["model"] = mc;
  man["best_epoch"] = res.best_epoch;
  man["best_val"] = res.best_val;
  man["steps"] = res.steps;
  write_json(dir / "manifest.json", man);
  std::printf("train: %lld steps, best val %.6f at epoch %d -> %s\n",
              static_cast<long long>(res.steps), res.best_val, res.best_epoch,
              (dir / "checkpoint.ulmc").string().c_str());
  return 0;
}

struct DetectOpts {
  std::string data;
  std::string checkpoint;
  std::string out;
  int grid = 1;
  double threshold = 0.5;
  double band = 4.0;
  double radius = 2.0;
  int workers = 1;
};

int cmd_detect(const DetectOpts& o) {
  const auto data = load_data(o.data, 0);
  const auto m = model::load_checkpoint(o.checkpoint);

  const int n = static_cast<int>(data.frames.size());
  std::vector<std::vector<patch::Detection>> per_frame(n);
  parallel_frames(n, o.workers, [&](int i) {
    per_frame[i] = pipe::detect_frame(m, data.frames[i].frame, o.grid,
                                      o.threshold, o.band, o.radius);
  });

  std::vector<patch::DetectionRow> rows;
  for (int i = 0; i < n; ++i) {
    for (const auto& d : per_frame[i]) {
      rows.push_back({data.frames[i].frame.frame_id, d});
    }
  }

  const fs::path dir = o.out;
  fs::create_directories(dir);
  patch::write_detections_csv(dir / "detections.csv", rows);

  ordered_json man;
  man["subcommand"] = "detect";
  man["data"] = o.data;
  man["checkpoint"] = o.checkpoint;
  man["out"] = o.out;
  man["grid"] = o.grid;
  man["threshold"] = o.threshold;
  man["band"] = o.band;
  man["radius"] = o.radius;
  man["workers"] = o.workers;
  write_json(dir / "manifest.json", man);
  std::printf("detect: %zu detections over %d frames -> %s\n", rows.size(), n,
              (dir / "detections.csv").string().c_str());
  return 0;
}

struct EvaluateOpts {
  std::string data;
  std::string detections;
  std::string out;
  std::vector<double> iou_thresholds;  // empty = COCO grid
  double center_radius = 2.0;
  int max_dets = 100;
};

int cmd_evaluate(const EvaluateOpts& o) {
  const auto data = load_data(o.data, 0);
  const auto rows = patch::read_detections_csv(o.detections);

  std::map<std::int64_t, int> index;
  for (std::size_t i = 0; i < data.frames.size(); ++i) {
    index[data.frames[i].frame.frame_id] = static_cast<int>(i);
  }
  std::vector<std::vector<patch::Detection>> dets(data.frames.size());
  for (const auto& r : rows) {
    const auto it = index.find(r.frame_id);
    if (it == index.end()) {
      throw ValidationError("detections reference unknown frame_id " +
                            std::to_string(r.frame_id));
    }
    dets[it->second].push_back(r.det);
  }
  std::vector<std::vector<eval::GtObject>> gt;
  for (const auto& sf : data.frames) {
    gt.push_back(
        eval::to_gt_objects(sf.gt, sf.frame.width, sf.frame.height));
  }

  const auto thresholds = o.iou_thresholds.empty()
                              ? eval::default_iou_thresholds()
                              : o.iou_thresholds;
  const auto report =
      eval::evaluate(dets, gt, thresholds, o.center_radius, o.max_dets);

  const fs::path dir = o.out;
  fs::create_directories(dir);
  eval::save_report(report, dir / "report.json");

  ordered_json man;
  man["subcommand"] = "evaluate";
  man["data"] = o.data;
  man["detections"] = o.detections;
  man["out"] = o.out;
  man["iou_thresholds"] = thresholds;
  man["center_radius"] = o.center_radius;
  man["max_dets"] = o.max_dets;
  write_json(dir / "manifest.json", man);
  std::printf("evaluate: mAP %.4f mAR %.4f center_recall %.4f -> %s\n",
              report.map, report.mar, report.center_recall,
              (dir / "report.json").string().c_str());
  return 0;
}

struct RenderOpts {
  std::string detections;
  std::string out;
  int width = 0;
  int height = 0;
  int factor = 8;
};

int cmd_render(const RenderOpts& o) {
  const auto rows = patch::read_detections_csv(o.detections);
  std::vector<patch::Detection> dets;
  dets.reserve(rows.size());
  for (const auto& r : rows) dets.push_back(r.det);

  const auto map = eval::render_sr_map(dets, o.width, o.height, o.factor);

  const fs::path dir = o.out;
  fs::create_directories(dir);
  eval::write_sr_png16(map, dir / "sr_map.png");
  write_ulmf(eval::sr_to_frame(map), dir / "sr_map.ulmf");

  ordered_json man;
  man["subcommand"] = "render";
  man["detections"] = o.detections;
  man["out"] = o.out;
  man["width"] = o.width;
  man["height"] = o.height;
  man["factor"] = o.factor;
  man["accumulated"] = map.total();
  man["discarded"] = map.discarded;
  write_json(dir / "manifest.json", man);
  std::printf("render: %llu centers accumulated (%lld outside) -> %s\n",
              static_cast<unsigned long long>(map.total()),
              static_cast<long long>(map.discarded),
              (dir / "sr_map.png").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"microbubble localization pipeline"};
  app.require_subcommand(1);

  SimulateOpts so;
  auto* sim_cmd = app.add_subcommand("simulate", "write a synthetic dataset");
  sim_cmd->add_option("--out", so.out, "output directory")->required();
  sim_cmd->add_option("--frames", so.frames, "number of frames");
  sim_cmd->add_option("--size", so.size, "frame width (and height)");
  sim_cmd->add_option("--height", so.height, "frame height override");
  sim_cmd->add_option("--bubbles", so.bubbles, "max bubbles per frame");
  sim_cmd->add_option("--sigma", so.sigma, "PSF sigma, pixels");
  sim_cmd->add_option("--sigma-y", so.sigma_y, "anisotropic y sigma");
  sim_cmd->add_option("--noise", so.noise, "additive noise stddev");
  sim_cmd->add_option("--seed", so.seed, "RNG seed");

  TrainOpts to;
  auto* train_cmd = app.add_subcommand("train", "train or fine-tune a model");
  train_cmd->add_option("--data", to.data, "dataset directory")->required();
  train_cmd->add_option("--out", to.out, "output directory")->required();
  train_cmd->add_option("--init", to.init, "checkpoint to fine-tune from");
  train_cmd->add_option("--frames-limit", to.frames_limit,
                        "use only the first N frames");
  train_cmd->add_option("--epochs", to.epochs, "training epochs");
  train_cmd->add_option("--batch", to.batch, "batch size");
  train_cmd->add_option("--lr", to.lr, "AdamW learning rate");
  train_cmd->add_option("--weight-decay", to.weight_decay, "AdamW decay");
  train_cmd->add_option("--seed", to.seed, "RNG seed");
  train_cmd->add_option("--workers", to.workers, "gradient worker threads");
  train_cmd->add_option("--train-fraction", to.train_fraction,
                        "training split fraction");
  train_cmd->add_option("--max-steps", to.max_steps,
                        "stop after this many optimizer steps");
  train_cmd->add_option("--grad-clip", to.grad_clip,
                        "global-norm gradient clip, 0 disables");
  train_cmd->add_flag("--no-deep-supervision", to.no_deep,
                      "supervise only the final decoder layer");
  train_cmd->add_option("--lambda-class", to.lambda_class,
                        "matching class weight");
  train_cmd->add_option("--lambda-l1", to.lambda_l1, "L1 box weight");
  train_cmd->add_option("--lambda-giou", to.lambda_giou, "GIoU box weight");
  train_cmd->add_option("--no-object", to.no_object,
                        "no-object class down-weight");
  train_cmd->add_option("--d-model", to.d_model, "model width");
  train_cmd->add_option("--heads", to.heads, "attention heads");
  train_cmd->add_option("--enc-layers", to.enc_layers, "encoder layers");
  train_cmd->add_option("--dec-layers", to.dec_layers, "decoder layers");
  train_cmd->add_option("--queries", to.queries, "object queries");
  train_cmd->add_option("--ffn-dim", to.ffn_dim, "feed-forward width");
  train_cmd->add_option("--dropout", to.dropout, "dropout fraction");

  DetectOpts det_o;
  auto* detect_cmd = app.add_subcommand("detect", "run tiled inference");
  detect_cmd->add_option("--data", det_o.data, "dataset directory")->required();
  detect_cmd->add_option("--checkpoint", det_o.checkpoint, "model checkpoint")
      ->required();
  detect_cmd->add_option("--out", det_o.out, "output directory")->required();
  detect_cmd->add_option("--grid", det_o.grid, "k for k x k patching");
  detect_cmd->add_option("--threshold", det_o.threshold,
                         "confidence threshold");
  detect_cmd->add_option("--band", det_o.band, "border dedup band, pixels");
  detect_cmd->add_option("--radius", det_o.radius, "border dedup radius");
  detect_cmd->add_option("--workers", det_o.workers, "frame worker threads");

  EvaluateOpts eo;
  auto* eval_cmd = app.add_subcommand("evaluate", "score detections");
  eval_cmd->add_option("--data", eo.data, "dataset directory")->required();
  eval_cmd->add_option("--detections", eo.detections, "detections CSV")
      ->required();
  eval_cmd->add_option("--out", eo.out, "output directory")->required();
  eval_cmd->add_option("--iou-thresholds", eo.iou_thresholds,
                       "comma-separated IoU thresholds")
      ->delimiter(',');
  eval_cmd->add_option("--center-radius", eo.center_radius,
                       "center match radius, pixels");
  eval_cmd->add_option("--max-dets", eo.max_dets, "per-frame detection cap");

  RenderOpts ro;
  auto* render_cmd = app.add_subcommand("render", "accumulate the SR map");
  render_cmd->add_option("--detections", ro.detections, "detections CSV")
      ->required();
  render_cmd->add_option("--out", ro.out, "output directory")->required();
  render_cmd->add_option("--width", ro.width, "frame width")->required();
  render_cmd->add_option("--height", ro.height, "frame height")->required();
  render_cmd->add_option("--factor", ro.factor, "upsampling factor");

  try {
    app.parse(argc, argv);
    if (sim_cmd->parsed()) return cmd_simulate(so);
    if (train_cmd->parsed()) return cmd_train(to);
    if (detect_cmd->parsed()) return cmd_detect(det_o);
    if (eval_cmd->parsed()) return cmd_evaluate(eo);
    if (render_cmd->parsed()) return cmd_render(ro);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  }
}
