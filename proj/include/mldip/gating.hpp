#pragma once

#include "mldip/acquisition.hpp"
#include "mldip/core.hpp"

namespace mldip::gating {

/// Real matrix T x (n_coils * n1 * 2) built from the real/imag parts of the
/// DC readout of every frame, column-detrended.
struct GatingMatrix {
  int frames = 0;
  int cols = 0;
  float sampling_rate = 0.0f;  // Hz, 1 / frame duration
  std::vector<float> x;        // row-major

  float &at(int t, int c) { return x[std::size_t(t) * cols + c]; }
  float at(int t, int c) const { return x[std::size_t(t) * cols + c]; }
};

/// T x 6 latent initialization, columns (resp_1, resp_2, card_1..card_4),
/// each standardized to zero mean and unit variance.
struct LatentInit {
  int frames = 0;
  std::vector<float> z;  // row-major, 6 columns

  static constexpr int kComponents = 6;
  float &at(int t, int k) { return z[std::size_t(t) * kComponents + k]; }
  float at(int t, int k) const { return z[std::size_t(t) * kComponents + k]; }
};

struct Band {
  float lo_hz;
  float hi_hz;
};

/// Assembles the gating matrix from the gating-slot readouts.
GatingMatrix extract_central_lines(const acquisition::KSpaceSeries &ks, float sampling_rate_hz);

/// Zero-phase 4th-order bandpass per column, then PCA: top 2 components in the
/// respiratory band and top 4 in the cardiac band. Deterministic sign
/// convention: first significant loading positive.
LatentInit extract_motion_components(const GatingMatrix &g, Band resp_band = {0.08f, 0.7f},
                                     Band card_band = {0.7f, 3.5f});

/// Zero-phase (forward-backward) 4th-order Butterworth bandpass of one column.
/// Exposed for testing.
std::vector<float> bandpass_filtfilt(const std::vector<float> &x, float lo_hz, float hi_hz,
                                     float fs_hz);

/// Beat starts detected from the dominant cardiac component (peak picking).
std::vector<int> detect_beats(const LatentInit &latent);

void write_latent(const LatentInit &latent, const std::string &path);
LatentInit read_latent(const std::string &path);

}  // namespace mldip::gating
