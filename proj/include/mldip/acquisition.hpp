#pragma once

#include "mldip/core.hpp"

#include <span>

namespace mldip::acquisition {

/// Complex receive-coil sensitivity maps on the image grid.
struct CoilMaps {
  Grid grid;
  int n_coils = 0;
  std::vector<cfloat> maps;  // coil-major

  CoilMaps() = default;
  CoilMaps(Grid g, int nc) : grid(g), n_coils(nc), maps(std::size_t(g.voxels()) * nc) {}

  cfloat *coil(int c) { return maps.data() + std::size_t(c) * grid.voxels(); }
  const cfloat *coil(int c) const { return maps.data() + std::size_t(c) * grid.voxels(); }
};

/// Per-frame (ky, kz) readout coordinates on the phase-encode grid, stored in
/// FFT index layout (DC at index 0).
struct SamplingPattern {
  int frames = 0;
  int n_ro = 0;
  int n2 = 0, n3 = 0;
  int gating_slot = 0;
  std::vector<std::int32_t> ky, kz;  // frames * n_ro each

  std::int32_t ky_at(int t, int j) const { return ky[std::size_t(t) * n_ro + j]; }
  std::int32_t kz_at(int t, int j) const { return kz[std::size_t(t) * n_ro + j]; }
};

/// Multi-coil k-space samples, fully sampled along the readout (kx) axis.
/// Per frame the samples are stored in (coil, readout, kx) order.
struct KSpaceSeries {
  int frames = 0;
  int n_coils = 0;
  int n_ro = 0;
  int n1 = 0;  // readout length
  int n2 = 0, n3 = 0;
  float noise_sigma = 0.0f;
  SamplingPattern pattern;
  std::vector<cfloat> data;

  std::int64_t samples_per_frame() const { return std::int64_t(n_coils) * n_ro * n1; }
  cfloat *frame(int t) { return data.data() + std::size_t(t) * samples_per_frame(); }
  const cfloat *frame(int t) const { return data.data() + std::size_t(t) * samples_per_frame(); }
  Grid grid() const { return Grid{n1, n2, n3}; }

  void allocate() { data.assign(std::size_t(frames) * samples_per_frame(), cfloat{}); }
};

/// Smooth synthetic coil sensitivities with distinct phases, deterministic in
/// seed. With uniform=true (n_coils must be 1) the map is identically one.
CoilMaps synthesize_coil_maps(const Grid &grid, int n_coils, std::uint32_t seed,
                              bool uniform = false);

/// Golden-angle pseudo-radial spokes rasterized to the Cartesian phase-encode
/// grid, one spoke per frame, traversed tip-to-tip. Slot gating_slot carries
/// the DC readout (ky=kz=0) in every frame. When n_ro == n2*n3 a full raster
/// is produced instead.
SamplingPattern opra_pattern(int T, int n_ro, int n2, int n3, int gating_slot,
                             std::uint32_t seed = 0);

/// R = (n2*n3) / (mean readouts per frame).
double acceleration_rate(const SamplingPattern &pattern);

/// A^(t): per coil, 3D unitary FFT of (S_c .* x), sampled along the frame's
/// (ky, kz) list. Output shape (n_coils, n_ro, n1).
void forward(const cfloat *x, const CoilMaps &maps, const SamplingPattern &pattern, int t,
             cfloat *out);

/// Conjugate transpose of forward: zero-fill, inverse FFT, conjugate-map
/// coil combination.
void adjoint(const cfloat *samples, const CoilMaps &maps, const SamplingPattern &pattern, int t,
             cfloat *out);

/// Frame-wise forward model plus i.i.d. complex Gaussian noise with standard
/// deviation noise_sigma per real/imag component; per-frame RNG streams make
/// serial and parallel simulation agree bitwise.
KSpaceSeries simulate_acquisition(const ImageSeries &series, const CoilMaps &maps,
                                  const SamplingPattern &pattern, float noise_sigma,
                                  std::uint64_t seed);

}  // namespace mldip::acquisition
