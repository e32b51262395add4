#pragma once

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mldip {

using cfloat = std::complex<float>;

/// Violated call contract (shape mismatch, out-of-range argument, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string &msg) : std::runtime_error(msg) {}
};

/// Malformed or truncated on-disk data.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string &msg) : std::runtime_error(msg) {}
};

/// Invalid configuration value or unknown key.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string &msg) : std::runtime_error(msg) {}
};

/// Too little data to run the requested computation.
struct InsufficientDataError : std::runtime_error {
  explicit InsufficientDataError(const std::string &msg) : std::runtime_error(msg) {}
};

/// Image grid, (n1, n2, n3) = (readout/SI, phase/AP, slice/LR).
struct Grid {
  int n1 = 0;
  int n2 = 0;
  int n3 = 0;

  std::int64_t voxels() const { return std::int64_t(n1) * n2 * n3; }
  bool operator==(const Grid &) const = default;
};

inline std::int64_t voxel_index(const Grid &g, int i1, int i2, int i3) {
  return (std::int64_t(i1) * g.n2 + i2) * g.n3 + i3;
}

/// Time series of complex 3D volumes, frame-major.
struct ImageSeries {
  Grid grid;
  int frames = 0;
  std::vector<cfloat> data;

  ImageSeries() = default;
  ImageSeries(Grid g, int T) : grid(g), frames(T), data(std::size_t(g.voxels()) * T) {}

  cfloat *frame(int t) { return data.data() + std::size_t(t) * grid.voxels(); }
  const cfloat *frame(int t) const { return data.data() + std::size_t(t) * grid.voxels(); }
};

/// Time series of integer tissue-label volumes, frame-major.
struct LabelSeries {
  Grid grid;
  int frames = 0;
  std::vector<std::int32_t> data;

  LabelSeries() = default;
  LabelSeries(Grid g, int T) : grid(g), frames(T), data(std::size_t(g.voxels()) * T) {}

  std::int32_t *frame(int t) { return data.data() + std::size_t(t) * grid.voxels(); }
  const std::int32_t *frame(int t) const { return data.data() + std::size_t(t) * grid.voxels(); }
};

/// Deterministic 64-bit stream seed for (seed, index) pairs.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t x = seed * 0x9E3779B97F4A7C15ull + index + 1;
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

}  // namespace mldip
