#include "ulm/pipeline.hpp"

#include <string>

#include "ulm/errors.hpp"

namespace ulm::pipe {

std::vector<sim::SimulatedFrame> make_dataset(int n_frames, int width,
                                              int height, int max_bubbles,
                                              const sim::PsfModel& psf,
                                              double noise_std,
                                              std::uint64_t seed) {
  if (n_frames < 1) {
    throw ValidationError("make_dataset: n_frames must be >= 1");
  }
  if (max_bubbles < 0) {
    throw ValidationError("make_dataset: max_bubbles must be >= 0");
  }
  Rng master(seed);
  std::vector<sim::SimulatedFrame> out;
  out.reserve(n_frames);
  for (int f = 0; f < n_frames; ++f) {
    const int n = static_cast<int>(master.uniform_int(0, max_bubbles));
    const std::uint64_t sub = master.next_u64();
    auto sf = sim::simulate_frame(width, height, n, psf, noise_std, sub);
    sf.frame.frame_id = f;
    out.push_back(std::move(sf));
  }
  return out;
}

std::vector<train::TrainItem> to_train_items(
    const std::vector<sim::SimulatedFrame>& frames) {
  std::vector<train::TrainItem> items;
  items.reserve(frames.size());
  for (const auto& sf : frames) items.push_back({sf.frame, sf.gt});
  return items;
}

std::vector<patch::Detection> detect_frame(const model::DetrTiny& m,
                                           const Frame& frame, int k,
                                           double confidence_threshold,
                                           double band, double radius) {
  const int need = m.config().patch_input_size;
  const auto grid = patch::make_grid(frame.width, frame.height, k);
  for (int i = 0; i < k * k; ++i) {
    if (grid.patch_width(i) != need || grid.patch_height(i) != need) {
      throw ValidationError(
          "detect_frame: grid " + std::to_string(k) + " on a " +
          std::to_string(frame.width) + "x" + std::to_string(frame.height) +
          " frame yields " + std::to_string(grid.patch_width(i)) + "x" +
          std::to_string(grid.patch_height(i)) +
          " patches; the model takes " + std::to_string(need) + "x" +
          std::to_string(need));
    }
  }
  const auto patches = patch::split(frame, k);
  std::vector<patch::Detection> dets;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto preds = m.forward(patches[i].frame);
    const auto mapped = patch::to_global(
        preds, patches[i].off_x, patches[i].off_y, patches[i].frame.width,
        patches[i].frame.height, confidence_threshold, static_cast<int>(i));
    dets.insert(dets.end(), mapped.begin(), mapped.end());
  }
  return patch::dedup_borders(dets, grid, band, radius);
}

}  // namespace ulm::pipe
