#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ulm/frame.hpp"
#include "ulm/nn/graph.hpp"
#include "ulm/nn/params.hpp"

namespace ulm::model {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_encoder_layers = 2;
  int n_decoder_layers = 2;
  int n_queries = 20;
  std::vector<int> backbone_channels = {32, 64, 64};  // stride 2 per block
  int patch_input_size = 64;
  double dropout = 0.0;
  int ffn_dim = 256;

  void validate() const;  // throws ValidationError
  bool operator==(const ModelConfig&) const = default;
};

/// Fixed 2-D sine/cosine grid, (h*w) x d_model with position index y*w + x.
/// First half of the channels encodes y, second half x; values in [-1, 1].
nn::Mat positional_encoding(int h, int w, int d_model);

/// The tape of one forward pass, cut at the two head outputs so callers can
/// append a loss node and run backward.
struct TapedForward {
  nn::Graph graph;
  int logits = -1;                // n_queries x 2
  int boxes = -1;                 // n_queries x 4, already through sigmoid
  std::vector<int> aux_logits;    // same heads on intermediate decoder layers
  std::vector<int> aux_boxes;
  std::vector<int> param_nodes;   // node id per ParameterStore entry
};

/// Small detection transformer: conv backbone (stride 8), sine positional
/// encodings, pre-norm encoder/decoder over learned object queries, linear
/// class head and 3-layer MLP box head.
class DetrTiny {
 public:
  DetrTiny(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }

  std::vector<Prediction> forward(const Frame& patch) const;
  TapedForward forward_taped(const Frame& patch,
                             Rng* dropout_rng = nullptr) const;

  /// Backbone + projection only: d_model x (h' * w') feature map.
  nn::Mat backbone_features(const Frame& patch) const;

  std::uint64_t init_seed() const { return init_seed_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

 private:
  void register_params();
  void init_params();

  ModelConfig cfg_;
  std::uint64_t init_seed_ = 0;
  std::int64_t step_ = 0;
  nn::ParameterStore store_;
};

/// Extracts N Predictions from the two head outputs of a finished forward.
std::vector<Prediction> predictions_from(const nn::Mat& logits,
                                         const nn::Mat& boxes);

// Checkpoint container "ULMC": magic, u32 version, u64 JSON length, JSON
// directory (config, step, seed, tensor table), then raw float32
// little-endian tensor payloads. Byte-stable for identical parameters.
void save_checkpoint(const DetrTiny& m, const std::filesystem::path& path);
DetrTiny load_checkpoint(const std::filesystem::path& path);

}  // namespace ulm::model
