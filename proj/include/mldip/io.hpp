#pragma once

#include "mldip/acquisition.hpp"
#include "mldip/core.hpp"

#include <array>

namespace mldip::io {

// ---- DVS container (dynamic volume series) ---------------------------------
// Layout, little-endian:
//   magic "DVS1"; u8 dtype (0 = complex64 as 2xfloat32, 1 = float32,
//   2 = int32 labels); u32 T, n1, n2, n3; frame-major payload.

enum class DvsType : std::uint8_t { Complex64 = 0, Float32 = 1, Int32 = 2 };

struct DvsHeader {
  DvsType dtype;
  std::uint32_t frames, n1, n2, n3;
};

DvsHeader probe_dvs(const std::string &path);

void write_dvs(const ImageSeries &series, const std::string &path);
void write_dvs(const LabelSeries &series, const std::string &path);
void write_dvs_float(const std::vector<float> &data, Grid grid, int frames,
                     const std::string &path);

ImageSeries read_dvs_complex(const std::string &path);
LabelSeries read_dvs_labels(const std::string &path);
std::vector<float> read_dvs_float(const std::string &path, Grid &grid, int &frames);

// ---- KSS1 container ---------------------------------------------------------
// Layout, little-endian: magic "KSS1"; u32 T, n_coils, n_ro, n1, n2, n3; then
// per frame the readout coordinate table (n_ro pairs of i32) followed by
// interleaved float32 (real, imag) samples in (coil, readout, kx) order.

void write_kss(const acquisition::KSpaceSeries &ks, const std::string &path);

/// Reads a KSS1 file. The gating slot is recovered as the unique readout slot
/// that carries (ky=0, kz=0) in every frame (-1 when absent).
acquisition::KSpaceSeries read_kss(const std::string &path);

// ---- small sidecars ---------------------------------------------------------

/// Coil maps as a DVS complex container with one "frame" per coil.
void write_coil_maps(const acquisition::CoilMaps &maps, const std::string &path);
acquisition::CoilMaps read_coil_maps(const std::string &path);

// ---- hashing ----------------------------------------------------------------

std::array<std::uint8_t, 32> sha256(const void *data, std::size_t len);
std::string sha256_hex(const void *data, std::size_t len);
std::string sha256_file(const std::string &path);

}  // namespace mldip::io
