#pragma once

#include <cstdint>
#include <vector>

#include "ulm/model.hpp"
#include "ulm/patching.hpp"
#include "ulm/simulator.hpp"
#include "ulm/trainer.hpp"

namespace ulm::pipe {

/// Independent frames with per-frame bubble count uniform in
/// [0, max_bubbles] and a fresh sub-seed each; frame_id = index.
std::vector<sim::SimulatedFrame> make_dataset(int n_frames, int width,
                                              int height, int max_bubbles,
                                              const sim::PsfModel& psf,
                                              double noise_std,
                                              std::uint64_t seed);

std::vector<train::TrainItem> to_train_items(
    const std::vector<sim::SimulatedFrame>& frames);

/// K x K tiled inference: split, forward per patch, remap past the
/// confidence threshold, border dedup. Every patch must match the model's
/// input size.
std::vector<patch::Detection> detect_frame(const model::DetrTiny& m,
                                           const Frame& frame, int k,
                                           double confidence_threshold,
                                           double band = 4.0,
                                           double radius = 2.0);

}  // namespace ulm::pipe
