#pragma once

#include "mldip/core.hpp"
#include "mldip/eval.hpp"

#include <cstdint>

namespace mldip::render {

/// Binary 8-bit PGM (P5) writer; data is row-major, `height` rows of `width`.
void write_pgm(const std::string &path, int width, int height,
               const std::vector<std::uint8_t> &data);

/// Linear map of arbitrary floats onto 0..255 (max -> 255, min -> 0;
/// constant input renders black).
std::vector<std::uint8_t> normalize_to_bytes(const std::vector<float> &values);

/// Space x time profile as an image: one row per line position, one column
/// per frame.
void save_xt_profile(const eval::Profile &profile, const std::string &path);

/// Horizontal montage of mid-slice (n3/2) magnitudes of up to `max_frames`
/// evenly spaced frames.
void save_montage(const ImageSeries &series, int max_frames, const std::string &path);

/// Stacked polyline plot of one or more equally long curves (gating overlays,
/// volume curves, loss traces).
void save_curves(const std::vector<std::vector<float>> &curves, int height_per_curve,
                 const std::string &path);

}  // namespace mldip::render
