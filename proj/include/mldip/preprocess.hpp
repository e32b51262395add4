#pragma once

#include "mldip/acquisition.hpp"
#include "mldip/core.hpp"

namespace mldip::preprocess {

/// 1D inverse FFT along kx, crop the spatial interval [lo, hi), FFT back.
/// The readout length becomes hi - lo.
acquisition::KSpaceSeries readout_crop(const acquisition::KSpaceSeries &ks, int lo, int hi);

struct CoilCompression {
  acquisition::KSpaceSeries compressed;
  std::vector<cfloat> matrix;  // n_virtual x n_coils, row-major
  int n_virtual = 0;
  int n_physical = 0;
  double retained_energy = 0.0;
};

/// PCA coil compression; the compression matrix comes from the
/// eigendecomposition of the coil covariance accumulated over all samples.
CoilCompression pca_coil_compress(const acquisition::KSpaceSeries &ks, int n_virtual);

/// Applies a compression matrix to coil maps so the compressed forward
/// operator keeps a matching sensitivity model.
acquisition::CoilMaps compress_coil_maps(const acquisition::CoilMaps &maps,
                                         const std::vector<cfloat> &matrix, int n_virtual);

void write_compression_matrix(const CoilCompression &cc, const std::string &path);

enum class MapMode { Oracle, LowRes };

/// Oracle mode returns the attached ground-truth maps; lowres mode estimates
/// maps from the apodized time-averaged k-space, RSS-normalized.
acquisition::CoilMaps estimate_coil_maps(const acquisition::KSpaceSeries &ks, MapMode mode,
                                         const acquisition::CoilMaps *truth = nullptr);

}  // namespace mldip::preprocess
