#include "mldip/fft.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

namespace mldip::fft {

namespace {

std::mutex plan_mutex;

fftwf_plan plan_for(int n1, int n2, int n3, bool inverse) {
  static std::map<std::tuple<int, int, int, bool>, fftwf_plan> cache;
  std::lock_guard<std::mutex> lock(plan_mutex);
  auto key = std::make_tuple(n1, n2, n3, inverse);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  // Dummy buffer for planning; execution uses the new-array interface.
  fftwf_complex *buf = fftwf_alloc_complex(std::size_t(n1) * n2 * n3);
  fftwf_plan p;
  int sign = inverse ? FFTW_BACKWARD : FFTW_FORWARD;
  unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  if (n2 == 0)
    p = fftwf_plan_dft_1d(n1, buf, buf, sign, flags);
  else
    p = fftwf_plan_dft_3d(n1, n2, n3, buf, buf, sign, flags);
  fftwf_free(buf);
  cache.emplace(key, p);
  return p;
}

void scale(cfloat *data, std::int64_t n, float s) {
  for (std::int64_t i = 0; i < n; ++i) data[i] *= s;
}

}  // namespace

void fft3(cfloat *data, const Grid &g, bool inverse) {
  fftwf_plan p = plan_for(g.n1, g.n2, g.n3, inverse);
  fftwf_execute_dft(p, reinterpret_cast<fftwf_complex *>(data),
                    reinterpret_cast<fftwf_complex *>(data));
  scale(data, g.voxels(), 1.0f / std::sqrt(float(g.voxels())));
}

void fft1(cfloat *line, int n, bool inverse) {
  fftwf_plan p = plan_for(n, 0, 0, inverse);
  fftwf_execute_dft(p, reinterpret_cast<fftwf_complex *>(line),
                    reinterpret_cast<fftwf_complex *>(line));
  scale(line, n, 1.0f / std::sqrt(float(n)));
}

}  // namespace mldip::fft
