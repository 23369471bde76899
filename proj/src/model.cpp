#include "ulm/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "ulm/errors.hpp"
#include "ulm/rng.hpp"

namespace ulm::model {

namespace {

using nn::Mat;

constexpr std::uint32_t kCheckpointVersion = 1;

struct LayerIds {
  int wq, bq, wk, bk, wv, bv, wo, bo;
};

}  // namespace

void ModelConfig::validate() const {
  if (d_model < 4 || d_model % 4 != 0) {
    throw ValidationError("model: d_model must be a positive multiple of 4");
  }
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw ValidationError("model: d_model must divide evenly into n_heads");
  }
  if (n_encoder_layers < 1 || n_decoder_layers < 1) {
    throw ValidationError("model: need at least one encoder/decoder layer");
  }
  if (n_queries < 1) {
    throw ValidationError("model: n_queries must be >= 1");
  }
  if (backbone_channels.empty()) {
    throw ValidationError("model: backbone_channels must be non-empty");
  }
  for (int c : backbone_channels) {
    if (c < 1) throw ValidationError("model: backbone channel counts >= 1");
  }
  const int stride = 1 << static_cast<int>(backbone_channels.size());
  if (patch_input_size < stride || patch_input_size % stride != 0) {
    throw ValidationError(
        "model: patch_input_size must be a multiple of the backbone stride " +
        std::to_string(stride));
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ValidationError("model: dropout must be in [0, 1)");
  }
  if (ffn_dim < 1) {
    throw ValidationError("model: ffn_dim must be >= 1");
  }
}

nn::Mat positional_encoding(int h, int w, int d_model) {
  if (d_model < 2 || d_model % 2 != 0) {
    throw ValidationError("positional_encoding: d_model must be even");
  }
  const int half = d_model / 2;
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  constexpr double kTemperature = 10000.0;
  Mat pe(static_cast<Eigen::Index>(h) * w, d_model);
  for (int y = 0; y < h; ++y) {
    const double py = (y + 0.5) / h * kTwoPi;
    for (int x = 0; x < w; ++x) {
      const double px = (x + 0.5) / w * kTwoPi;
      const Eigen::Index row = static_cast<Eigen::Index>(y) * w + x;
      for (int c = 0; c < half; ++c) {
        const double freq =
            std::pow(kTemperature, -static_cast<double>(2 * (c / 2)) / half);
        pe(row, c) = (c % 2 == 0) ? std::sin(py * freq) : std::cos(py * freq);
        pe(row, half + c) =
            (c % 2 == 0) ? std::sin(px * freq) : std::cos(px * freq);
      }
    }
  }
  return pe;
}

DetrTiny::DetrTiny(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg), init_seed_(init_seed) {
  cfg_.validate();
  register_params();
  init_params();
}

void DetrTiny::register_params() {
  const int d = cfg_.d_model;
  int c_in = 1;
  for (size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const int c_out = cfg_.backbone_channels[i];
    const std::string base = "backbone." + std::to_string(i);
    store_.add(base + ".weight", c_out, c_in * 9);
    store_.add(base + ".bias", c_out, 1);
    c_in = c_out;
  }
  store_.add("backbone.proj.weight", d, c_in);
  store_.add("backbone.proj.bias", d, 1);

  auto add_attn = [&](const std::string& base) {
    store_.add(base + ".wq", d, d);
    store_.add(base + ".bq", 1, d);
    store_.add(base + ".wk", d, d);
    store_.add(base + ".bk", 1, d);
    store_.add(base + ".wv", d, d);
    store_.add(base + ".bv", 1, d);
    store_.add(base + ".wo", d, d);
    store_.add(base + ".bo", 1, d);
  };
  auto add_ln = [&](const std::string& base) {
    store_.add(base + ".gamma", 1, d);
    store_.add(base + ".beta", 1, d);
  };
  auto add_ffn = [&](const std::string& base) {
    store_.add(base + ".lin1.weight", cfg_.ffn_dim, d);
    store_.add(base + ".lin1.bias", 1, cfg_.ffn_dim);
    store_.add(base + ".lin2.weight", d, cfg_.ffn_dim);
    store_.add(base + ".lin2.bias", 1, d);
  };

  for (int l = 0; l < cfg_.n_encoder_layers; ++l) {
    const std::string base = "encoder." + std::to_string(l);
    add_ln(base + ".ln1");
    add_attn(base + ".attn");
    add_ln(base + ".ln2");
    add_ffn(base + ".ffn");
  }
  add_ln("encoder.final_ln");

  for (int l = 0; l < cfg_.n_decoder_layers; ++l) {
    const std::string base = "decoder." + std::to_string(l);
    add_ln(base + ".ln1");
    add_attn(base + ".self_attn");
    add_ln(base + ".ln2");
    add_attn(base + ".cross_attn");
    add_ln(base + ".ln3");
    add_ffn(base + ".ffn");
  }
  add_ln("decoder.final_ln");

  store_.add("queries.weight", cfg_.n_queries, d);
  store_.add("class_head.weight", 2, d);
  store_.add("class_head.bias", 1, 2);
  store_.add("box_head.0.weight", d, d);
  store_.add("box_head.0.bias", 1, d);
  store_.add("box_head.1.weight", d, d);
  store_.add("box_head.1.bias", 1, d);
  store_.add("box_head.2.weight", 4, d);
  store_.add("box_head.2.bias", 1, 4);
}

void DetrTiny::init_params() {
  Rng rng(init_seed_);
  auto fill_uniform = [&](int idx, double limit) {
    const auto& e = store_.entry(idx);
    Mat m(e.rows, e.cols);
    for (int r = 0; r < e.rows; ++r) {
      for (int c = 0; c < e.cols; ++c) m(r, c) = rng.uniform(-limit, limit);
    }
    store_.assign(idx, m);
  };
  auto fill_const = [&](int idx, double v) {
    const auto& e = store_.entry(idx);
    store_.assign(idx, Mat::Constant(e.rows, e.cols, v));
  };

  for (int i = 0; i < store_.count(); ++i) {
    const auto& e = store_.entry(i);
    const auto& n = e.name;
    const bool is_weight = n.ends_with(".weight") || n.ends_with(".wq") ||
                           n.ends_with(".wk") || n.ends_with(".wv") ||
                           n.ends_with(".wo");
    if (n == "queries.weight") {
      Mat m(e.rows, e.cols);
      for (int r = 0; r < e.rows; ++r)
        for (int c = 0; c < e.cols; ++c) m(r, c) = rng.normal();
      store_.assign(i, m);
    } else if (n.starts_with("backbone.") && n.ends_with(".weight")) {
      // He-uniform over fan_in for the ReLU conv stack.
      fill_uniform(i, std::sqrt(6.0 / e.cols));
    } else if (is_weight) {
      // Xavier-uniform: weights are stored (fan_out x fan_in).
      fill_uniform(i, std::sqrt(6.0 / (e.rows + e.cols)));
    } else if (n.ends_with(".gamma")) {
      fill_const(i, 1.0);
    } else if (n == "box_head.2.bias") {
      // Start boxes centered and small: sigmoid(-1.5) ~ 0.18 of the patch.
      Mat m(1, 4);
      m << 0.0, 0.0, -1.5, -1.5;
      store_.assign(i, m);
    } else if (n == "class_head.bias") {
      // Start near the no-object prior: a few occupied slots out of N.
      Mat m(1, 2);
      m << 0.0, 2.0;
      store_.assign(i, m);
    } else {
      fill_const(i, 0.0);  // biases and beta
    }
  }
}

TapedForward DetrTiny::forward_taped(const Frame& patch,
                                     Rng* dropout_rng) const {
  const int s = cfg_.patch_input_size;
  if (patch.width != s || patch.height != s) {
    throw ValidationError("forward: expected a " + std::to_string(s) + "x" +
                          std::to_string(s) + " patch, got " +
                          std::to_string(patch.width) + "x" +
                          std::to_string(patch.height));
  }
  if (cfg_.dropout > 0.0 && dropout_rng == nullptr) {
    throw ValidationError("forward: dropout > 0 requires an rng");
  }

  TapedForward tf;
  nn::Graph& g = tf.graph;

  // Promote every parameter once; ids align with the store.
  tf.param_nodes.resize(store_.count());
  for (int i = 0; i < store_.count(); ++i) {
    tf.param_nodes[i] = g.param(store_.promote(i), store_.entry(i).name);
  }
  auto pid = [&](const std::string& name) {
    const int i = store_.index_of(name);
    return tf.param_nodes[i];
  };
  auto drop = [&](int x, const std::string& tag) {
    return cfg_.dropout > 0.0 ? g.dropout(x, cfg_.dropout, *dropout_rng, tag)
                              : x;
  };

  Mat x0(1, static_cast<Eigen::Index>(s) * s);
  for (int i = 0; i < s * s; ++i) x0(0, i) = patch.pixels[i];
  int x = g.input(std::move(x0), "image");
  nn::Shape3 shape{1, s, s};

  for (size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const std::string base = "backbone." + std::to_string(i);
    x = g.conv2d(x, shape, pid(base + ".weight"), pid(base + ".bias"),
                 cfg_.backbone_channels[i], 3, 2, 1, &shape, base);
    x = g.relu(x, base + ".relu");
  }
  x = g.conv2d(x, shape, pid("backbone.proj.weight"),
               pid("backbone.proj.bias"), cfg_.d_model, 1, 1, 0, &shape,
               "backbone.proj");

  const int hp = shape.h, wp = shape.w;
  int src = g.transpose(x, "tokens");
  const int pe = g.input(positional_encoding(hp, wp, cfg_.d_model),
                         "positional_encoding");

  auto attn_ids = [&](const std::string& base) {
    return LayerIds{pid(base + ".wq"), pid(base + ".bq"), pid(base + ".wk"),
                    pid(base + ".bk"), pid(base + ".wv"), pid(base + ".bv"),
                    pid(base + ".wo"), pid(base + ".bo")};
  };
  auto ffn = [&](int in, const std::string& base) {
    int h = g.linear(in, pid(base + ".lin1.weight"), pid(base + ".lin1.bias"),
                     base + ".lin1");
    h = g.relu(h, base + ".relu");
    h = drop(h, base + ".dropout");
    return g.linear(h, pid(base + ".lin2.weight"), pid(base + ".lin2.bias"),
                    base + ".lin2");
  };

  // Shared output heads behind the decoder's final norm; `tag` keeps layer
  // diagnostics distinct between the last layer and the auxiliary taps.
  auto heads = [&](int node, const std::string& tag) -> std::pair<int, int> {
    const int out = g.layer_norm(node, pid("decoder.final_ln.gamma"),
                                 pid("decoder.final_ln.beta"),
                                 tag + ".final_ln");
    const int logits = g.linear(out, pid("class_head.weight"),
                                pid("class_head.bias"), tag + ".class_head");
    int b = g.linear(out, pid("box_head.0.weight"), pid("box_head.0.bias"),
                     tag + ".box_head.0");
    b = g.relu(b, tag + ".box_head.0.relu");
    b = g.linear(b, pid("box_head.1.weight"), pid("box_head.1.bias"),
                 tag + ".box_head.1");
    b = g.relu(b, tag + ".box_head.1.relu");
    b = g.linear(b, pid("box_head.2.weight"), pid("box_head.2.bias"),
                 tag + ".box_head.2");
    return {logits, g.sigmoid(b, tag + ".box_head.sigmoid")};
  };

  // Pre-norm encoder; positions enter the queries and keys of every layer.
  for (int l = 0; l < cfg_.n_encoder_layers; ++l) {
    const std::string base = "encoder." + std::to_string(l);
    const int h1 = g.layer_norm(src, pid(base + ".ln1.gamma"),
                                pid(base + ".ln1.beta"), base + ".ln1");
    const int qk = g.add(h1, pe, base + ".qk");
    const LayerIds a = attn_ids(base + ".attn");
    int sa = g.mha(qk, qk, h1, a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo,
                   cfg_.n_heads, base + ".attn");
    sa = drop(sa, base + ".attn.dropout");
    src = g.add(src, sa, base + ".res1");
    const int h2 = g.layer_norm(src, pid(base + ".ln2.gamma"),
                                pid(base + ".ln2.beta"), base + ".ln2");
    src = g.add(src, ffn(h2, base + ".ffn"), base + ".res2");
  }
  const int mem = g.layer_norm(src, pid("encoder.final_ln.gamma"),
                               pid("encoder.final_ln.beta"),
                               "encoder.final_ln");
  const int mem_k = g.add(mem, pe, "memory.keys");

  const int queries = pid("queries.weight");
  int tgt = g.input(Mat::Zero(cfg_.n_queries, cfg_.d_model), "tgt0");
  for (int l = 0; l < cfg_.n_decoder_layers; ++l) {
    const std::string base = "decoder." + std::to_string(l);
    const int h1 = g.layer_norm(tgt, pid(base + ".ln1.gamma"),
                                pid(base + ".ln1.beta"), base + ".ln1");
    const int qk = g.add(h1, queries, base + ".qk");
    const LayerIds sa_ids = attn_ids(base + ".self_attn");
    int sa = g.mha(qk, qk, h1, sa_ids.wq, sa_ids.bq, sa_ids.wk, sa_ids.bk,
                   sa_ids.wv, sa_ids.bv, sa_ids.wo, sa_ids.bo, cfg_.n_heads,
                   base + ".self_attn");
    sa = drop(sa, base + ".self_attn.dropout");
    tgt = g.add(tgt, sa, base + ".res1");

    const int h2 = g.layer_norm(tgt, pid(base + ".ln2.gamma"),
                                pid(base + ".ln2.beta"), base + ".ln2");
    const int q2 = g.add(h2, queries, base + ".q2");
    const LayerIds ca_ids = attn_ids(base + ".cross_attn");
    int ca = g.mha(q2, mem_k, mem, ca_ids.wq, ca_ids.bq, ca_ids.wk, ca_ids.bk,
                   ca_ids.wv, ca_ids.bv, ca_ids.wo, ca_ids.bo, cfg_.n_heads,
                   base + ".cross_attn");
    ca = drop(ca, base + ".cross_attn.dropout");
    tgt = g.add(tgt, ca, base + ".res2");

    const int h3 = g.layer_norm(tgt, pid(base + ".ln3.gamma"),
                                pid(base + ".ln3.beta"), base + ".ln3");
    tgt = g.add(tgt, ffn(h3, base + ".ffn"), base + ".res3");

    // Intermediate layers go through the shared norm and heads so training
    // can supervise every decoder stage.
    if (l + 1 < cfg_.n_decoder_layers) {
      const auto [lg, bx] = heads(tgt, "decoder.aux" + std::to_string(l));
      tf.aux_logits.push_back(lg);
      tf.aux_boxes.push_back(bx);
    }
  }
  const auto [lg, bx] = heads(tgt, "decoder.out");
  tf.logits = lg;
  tf.boxes = bx;
  return tf;
}

std::vector<Prediction> predictions_from(const nn::Mat& logits,
                                         const nn::Mat& boxes) {
  std::vector<Prediction> preds;
  preds.reserve(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    preds.push_back(Prediction::from_logits(
        logits(i, 0), logits(i, 1),
        {boxes(i, 0), boxes(i, 1), boxes(i, 2), boxes(i, 3)}));
  }
  return preds;
}

std::vector<Prediction> DetrTiny::forward(const Frame& patch) const {
  TapedForward tf = forward_taped(patch);
  return predictions_from(tf.graph.value(tf.logits),
                          tf.graph.value(tf.boxes));
}

nn::Mat DetrTiny::backbone_features(const Frame& patch) const {
  const int s = cfg_.patch_input_size;
  if (patch.width != s || patch.height != s) {
    throw ValidationError("backbone_features: patch size mismatch");
  }
  nn::Graph g;
  Mat x0(1, static_cast<Eigen::Index>(s) * s);
  for (int i = 0; i < s * s; ++i) x0(0, i) = patch.pixels[i];
  int x = g.input(std::move(x0), "image");
  nn::Shape3 shape{1, s, s};
  for (size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const std::string base = "backbone." + std::to_string(i);
    x = g.conv2d(x, shape,
                 g.param(store_.promote(store_.index_of(base + ".weight")),
                         base + ".weight"),
                 g.param(store_.promote(store_.index_of(base + ".bias")),
                         base + ".bias"),
                 cfg_.backbone_channels[i], 3, 2, 1, &shape, base);
    x = g.relu(x, base + ".relu");
  }
  x = g.conv2d(
      x, shape,
      g.param(store_.promote(store_.index_of("backbone.proj.weight")),
              "backbone.proj.weight"),
      g.param(store_.promote(store_.index_of("backbone.proj.bias")),
              "backbone.proj.bias"),
      cfg_.d_model, 1, 1, 0, &shape, "backbone.proj");
  return g.value(x);
}

void save_checkpoint(const DetrTiny& m, const std::filesystem::path& path) {
  const auto& store = m.params();
  nlohmann::ordered_json dir;
  dir["format_version"] = kCheckpointVersion;
  const auto& c = m.config();
  dir["config"] = {{"d_model", c.d_model},
                   {"n_heads", c.n_heads},
                   {"n_encoder_layers", c.n_encoder_layers},
                   {"n_decoder_layers", c.n_decoder_layers},
                   {"n_queries", c.n_queries},
                   {"backbone_channels", c.backbone_channels},
                   {"patch_input_size", c.patch_input_size},
                   {"dropout", c.dropout},
                   {"ffn_dim", c.ffn_dim}};
  dir["step"] = m.step();
  dir["seed"] = m.init_seed();
  dir["tensors"] = nlohmann::ordered_json::array();
  for (int i = 0; i < store.count(); ++i) {
    const auto& e = store.entry(i);
    dir["tensors"].push_back({{"name", e.name},
                              {"rows", e.rows},
                              {"cols", e.cols},
                              {"offset", e.offset}});
  }
  const std::string json = dir.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw ValidationError("cannot open for write: " + path.string());
  }
  os.write("ULMC", 4);
  const std::uint32_t ver = kCheckpointVersion;
  os.write(reinterpret_cast<const char*>(&ver), 4);
  const std::uint64_t len = json.size();
  os.write(reinterpret_cast<const char*>(&len), 8);
  os.write(json.data(), static_cast<std::streamsize>(json.size()));
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(store.flat().data()),
           static_cast<std::streamsize>(store.flat().size() * 4));
  if (!os) {
    throw ValidationError("write failed: " + path.string());
  }
}

DetrTiny load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw ValidationError("cannot open: " + path.string());
  }
  char magic[4];
  std::uint32_t ver = 0;
  std::uint64_t len = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&ver), 4);
  is.read(reinterpret_cast<char*>(&len), 8);
  if (!is || std::memcmp(magic, "ULMC", 4) != 0) {
    throw ValidationError("not a ULMC checkpoint: " + path.string());
  }
  if (ver != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " +
                          std::to_string(ver));
  }
  if (len > (std::uint64_t{1} << 24)) {
    throw ValidationError("checkpoint: implausible directory size");
  }
  std::string json(len, '\0');
  is.read(json.data(), static_cast<std::streamsize>(len));
  if (!is) {
    throw ValidationError("checkpoint: truncated directory");
  }
  nlohmann::json dir;
  try {
    dir = nlohmann::json::parse(json);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("checkpoint: bad directory JSON: ") +
                          e.what());
  }
  ModelConfig cfg;
  try {
    const auto& c = dir.at("config");
    cfg.d_model = c.at("d_model").get<int>();
    cfg.n_heads = c.at("n_heads").get<int>();
    cfg.n_encoder_layers = c.at("n_encoder_layers").get<int>();
    cfg.n_decoder_layers = c.at("n_decoder_layers").get<int>();
    cfg.n_queries = c.at("n_queries").get<int>();
    cfg.backbone_channels = c.at("backbone_channels").get<std::vector<int>>();
    cfg.patch_input_size = c.at("patch_input_size").get<int>();
    cfg.dropout = c.at("dropout").get<double>();
    cfg.ffn_dim = c.at("ffn_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad config: ") + e.what());
  }

  DetrTiny m(cfg, dir.value("seed", std::uint64_t{0}));
  m.set_step(dir.value("step", std::int64_t{0}));

  auto& store = m.params();
  const auto& tensors = dir.at("tensors");
  if (static_cast<int>(tensors.size()) != store.count()) {
    throw ValidationError("checkpoint: tensor count mismatch");
  }
  for (int i = 0; i < store.count(); ++i) {
    const auto& t = tensors.at(i);
    const auto& e = store.entry(i);
    if (t.at("name").get<std::string>() != e.name ||
        t.at("rows").get<int>() != e.rows ||
        t.at("cols").get<int>() != e.cols ||
        t.at("offset").get<std::size_t>() != e.offset) {
      throw ValidationError("checkpoint: tensor table mismatch at '" +
                            e.name + "'");
    }
  }
  is.read(reinterpret_cast<char*>(store.flat().data()),
          static_cast<std::streamsize>(store.flat().size() * 4));
  if (is.gcount() !=
      static_cast<std::streamsize>(store.flat().size() * 4)) {
    throw ValidationError("checkpoint: truncated tensor payload");
  }
  for (float v : store.flat()) {
    if (!std::isfinite(v)) {
      throw ValidationError("checkpoint: non-finite parameter value");
    }
  }
  return m;
}

}  // namespace ulm::model
