#pragma once

#include "mldip/core.hpp"

namespace mldip::fft {

/// In-place unitary 3D FFT over a row-major (n1, n2, n3) complex volume.
/// Unitary scaling (1/sqrt(N) in both directions) so inverse == adjoint.
void fft3(cfloat *data, const Grid &g, bool inverse);

/// In-place unitary 1D FFT of a contiguous complex line.
void fft1(cfloat *line, int n, bool inverse);

}  // namespace mldip::fft
