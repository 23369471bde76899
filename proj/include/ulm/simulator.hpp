#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ulm/frame.hpp"
#include "ulm/rng.hpp"
#include "ulm/set_loss.hpp"

namespace ulm::sim {

/// Stationary Gaussian point-spread function, in pixels.
struct PsfModel {
  double sigma_x = 2.0;
  double sigma_y = 2.0;
  double amplitude = 1.0;
};

struct SimulatedFrame {
  Frame frame;
  std::vector<GroundTruthItem> gt;
};

/// Edge margin inside which no bubble center is placed.
double center_margin(const PsfModel& psf);

/// Renders bubbles at the given pixel-space centers: normalized Gaussian sum
/// plus per-pixel Gaussian noise drawn from `rng` in row-major order.
Frame render_scene(int width, int height,
                   const std::vector<std::pair<double, double>>& centers,
                   const PsfModel& psf, double noise_std, Rng& rng,
                   int frame_id = 0);

/// Ground truth for the given centers: one item per bubble, box = center
/// +/- 3 sigma per axis in normalized coordinates.
std::vector<GroundTruthItem> ground_truth_for(
    const std::vector<std::pair<double, double>>& centers,
    const PsfModel& psf, int width, int height);

/// Samples centers uniformly inside the margin, renders, and attaches ground
/// truth. Deterministic given the seed.
SimulatedFrame simulate_frame(int width, int height, int n_bubbles,
                              const PsfModel& psf, double noise_std,
                              std::uint64_t seed);

/// Advects the frame-0 scene by `flow` pixels per frame; bubbles leaving the
/// margin respawn at freshly sampled positions. Element 0 matches
/// simulate_frame for the same seed.
std::vector<SimulatedFrame> simulate_sequence(
    int n_frames, int width, int height, int n_bubbles, const PsfModel& psf,
    double noise_std, std::uint64_t seed, std::pair<double, double> flow);

}  // namespace ulm::sim
