#include "ulm/simulator.hpp"

#include <cmath>
#include <string>

#include "ulm/errors.hpp"

namespace ulm::sim {

namespace {

void validate_psf(const PsfModel& psf) {
  if (!(psf.sigma_x > 0.0) || !(psf.sigma_y > 0.0) || !(psf.amplitude > 0.0)) {
    throw ValidationError("psf: sigma_x, sigma_y, amplitude must be > 0");
  }
}

std::vector<std::pair<double, double>> sample_centers(int width, int height,
                                                      int n_bubbles,
                                                      const PsfModel& psf,
                                                      Rng& rng) {
  const double margin = center_margin(psf);
  const double lo_x = margin, hi_x = width - margin;
  const double lo_y = margin, hi_y = height - margin;
  if (n_bubbles > 0 && (lo_x >= hi_x || lo_y >= hi_y)) {
    throw ValidationError(
        "simulate_frame: margin " + std::to_string(margin) +
        " px leaves no room for bubble centers in a " + std::to_string(width) +
        "x" + std::to_string(height) + " frame");
  }
  std::vector<std::pair<double, double>> centers;
  centers.reserve(n_bubbles);
  for (int i = 0; i < n_bubbles; ++i) {
    centers.emplace_back(rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y));
  }
  return centers;
}

}  // namespace

double center_margin(const PsfModel& psf) {
  return 3.0 * std::max(psf.sigma_x, psf.sigma_y);
}

Frame render_scene(int width, int height,
                   const std::vector<std::pair<double, double>>& centers,
                   const PsfModel& psf, double noise_std, Rng& rng,
                   int frame_id) {
  validate_psf(psf);
  if (width < 1 || height < 1) {
    throw ValidationError("render_scene: frame dimensions must be >= 1");
  }
  if (noise_std < 0.0) {
    throw ValidationError("render_scene: noise_std must be >= 0");
  }
  Frame f = Frame::zeros(width, height, frame_id);
  const double inv2sx2 = 1.0 / (2.0 * psf.sigma_x * psf.sigma_x);
  const double inv2sy2 = 1.0 / (2.0 * psf.sigma_y * psf.sigma_y);
  // Intensities are the Gaussian sum divided by the single-bubble peak, so
  // the amplitude knob cancels out of the stored image.
  std::vector<double> acc(f.pixels.size(), 0.0);
  for (const auto& [cx, cy] : centers) {
    for (int y = 0; y < height; ++y) {
      const double dy2 = (y - cy) * (y - cy) * inv2sy2;
      double* row = acc.data() + static_cast<size_t>(y) * width;
      for (int x = 0; x < width; ++x) {
        row[x] += std::exp(-((x - cx) * (x - cx) * inv2sx2 + dy2));
      }
    }
  }
  if (noise_std > 0.0) {
    for (double& v : acc) v += rng.normal(0.0, noise_std);
  }
  for (size_t i = 0; i < acc.size(); ++i) {
    f.pixels[i] = static_cast<float>(acc[i]);
  }
  return f;
}

std::vector<GroundTruthItem> ground_truth_for(
    const std::vector<std::pair<double, double>>& centers,
    const PsfModel& psf, int width, int height) {
  std::vector<GroundTruthItem> gt;
  gt.reserve(centers.size());
  for (const auto& [cx, cy] : centers) {
    GroundTruthItem item;
    item.class_label = 1;
    item.center_x = cx / width;
    item.center_y = cy / height;
    item.box = {item.center_x, item.center_y, 6.0 * psf.sigma_x / width,
                6.0 * psf.sigma_y / height};
    gt.push_back(item);
  }
  return gt;
}

SimulatedFrame simulate_frame(int width, int height, int n_bubbles,
                              const PsfModel& psf, double noise_std,
                              std::uint64_t seed) {
  validate_psf(psf);
  if (n_bubbles < 0) {
    throw ValidationError("simulate_frame: n_bubbles must be >= 0");
  }
  Rng rng(seed);
  const auto centers = sample_centers(width, height, n_bubbles, psf, rng);
  SimulatedFrame out;
  out.frame = render_scene(width, height, centers, psf, noise_std, rng);
  out.gt = ground_truth_for(centers, psf, width, height);
  return out;
}

std::vector<SimulatedFrame> simulate_sequence(
    int n_frames, int width, int height, int n_bubbles, const PsfModel& psf,
    double noise_std, std::uint64_t seed, std::pair<double, double> flow) {
  validate_psf(psf);
  if (n_frames < 1) {
    throw ValidationError("simulate_sequence: n_frames must be >= 1");
  }
  if (n_bubbles < 0) {
    throw ValidationError("simulate_sequence: n_bubbles must be >= 0");
  }
  Rng rng(seed);
  auto centers = sample_centers(width, height, n_bubbles, psf, rng);
  const double margin = center_margin(psf);
  const double lo_x = margin, hi_x = width - margin;
  const double lo_y = margin, hi_y = height - margin;

  std::vector<SimulatedFrame> out;
  out.reserve(n_frames);
  for (int k = 0; k < n_frames; ++k) {
    if (k > 0) {
      for (auto& [cx, cy] : centers) {
        cx += flow.first;
        cy += flow.second;
        if (cx < lo_x || cx >= hi_x || cy < lo_y || cy >= hi_y) {
          cx = rng.uniform(lo_x, hi_x);
          cy = rng.uniform(lo_y, hi_y);
        }
      }
    }
    SimulatedFrame sf;
    sf.frame = render_scene(width, height, centers, psf, noise_std, rng, k);
    sf.gt = ground_truth_for(centers, psf, width, height);
    out.push_back(std::move(sf));
  }
  return out;
}

}  // namespace ulm::sim
