#include "mldip/preprocess.hpp"

#include "mldip/fft.hpp"
#include "mldip/io.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mldip::preprocess {

acquisition::KSpaceSeries readout_crop(const acquisition::KSpaceSeries &ks, int lo, int hi) {
  if (!(0 <= lo && lo < hi && hi <= ks.n1)) throw ContractError("readout_crop: degenerate range");
  acquisition::KSpaceSeries out;
  out.frames = ks.frames;
  out.n_coils = ks.n_coils;
  out.n_ro = ks.n_ro;
  out.n1 = hi - lo;
  out.n2 = ks.n2;
  out.n3 = ks.n3;
  out.noise_sigma = ks.noise_sigma;
  out.pattern = ks.pattern;
  out.allocate();

  std::vector<cfloat> line(ks.n1);
  const std::int64_t lines_per_frame = std::int64_t(ks.n_coils) * ks.n_ro;
  for (int t = 0; t < ks.frames; ++t) {
    const cfloat *src = ks.frame(t);
    cfloat *dst = out.frame(t);
    for (std::int64_t l = 0; l < lines_per_frame; ++l) {
      std::copy_n(src + l * ks.n1, ks.n1, line.data());
      fft::fft1(line.data(), ks.n1, true);
      fft::fft1(line.data() + lo, out.n1, false);
      std::copy_n(line.data() + lo, out.n1, dst + l * out.n1);
    }
  }
  return out;
}

CoilCompression pca_coil_compress(const acquisition::KSpaceSeries &ks, int n_virtual) {
  const int nc = ks.n_coils;
  if (n_virtual < 1 || n_virtual > nc)
    throw ContractError("pca_coil_compress: n_virtual out of [1, n_coils]");

  // Coil covariance accumulated over every (frame, readout, kx) sample.
  Eigen::MatrixXcd cov = Eigen::MatrixXcd::Zero(nc, nc);
  const std::int64_t per_coil = std::int64_t(ks.n_ro) * ks.n1;
  Eigen::VectorXcd s(nc);
  for (int t = 0; t < ks.frames; ++t) {
    const cfloat *frame = ks.frame(t);
    for (std::int64_t i = 0; i < per_coil; ++i) {
      for (int c = 0; c < nc; ++c) s[c] = frame[c * per_coil + i];
      cov.noalias() += s * s.adjoint();
    }
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> eig(cov);
  double total = std::max(eig.eigenvalues().sum(), 1e-300);
  double kept = 0;
  CoilCompression cc;
  cc.n_virtual = n_virtual;
  cc.n_physical = nc;
  cc.matrix.resize(std::size_t(n_virtual) * nc);
  for (int v = 0; v < n_virtual; ++v) {
    Eigen::VectorXcd u = eig.eigenvectors().col(nc - 1 - v);
    kept += eig.eigenvalues()[nc - 1 - v];
    // Deterministic phase: largest-magnitude entry real positive.
    int imax = 0;
    for (int c = 1; c < nc; ++c)
      if (std::abs(u[c]) > std::abs(u[imax])) imax = c;
    std::complex<double> ph = std::abs(u[imax]) > 0 ? std::conj(u[imax]) / std::abs(u[imax])
                                                    : std::complex<double>(1, 0);
    for (int c = 0; c < nc; ++c) {
      std::complex<double> m = std::conj(u[c] * ph);  // row of U^H
      cc.matrix[std::size_t(v) * nc + c] = cfloat(float(m.real()), float(m.imag()));
    }
  }
  cc.retained_energy = kept / total;

  cc.compressed.frames = ks.frames;
  cc.compressed.n_coils = n_virtual;
  cc.compressed.n_ro = ks.n_ro;
  cc.compressed.n1 = ks.n1;
  cc.compressed.n2 = ks.n2;
  cc.compressed.n3 = ks.n3;
  cc.compressed.noise_sigma = ks.noise_sigma;
  cc.compressed.pattern = ks.pattern;
  cc.compressed.allocate();
  for (int t = 0; t < ks.frames; ++t) {
    const cfloat *src = ks.frame(t);
    cfloat *dst = cc.compressed.frame(t);
    for (std::int64_t i = 0; i < per_coil; ++i) {
      for (int v = 0; v < n_virtual; ++v) {
        cfloat acc{};
        for (int c = 0; c < nc; ++c) acc += cc.matrix[std::size_t(v) * nc + c] * src[c * per_coil + i];
        dst[v * per_coil + i] = acc;
      }
    }
  }
  return cc;
}

acquisition::CoilMaps compress_coil_maps(const acquisition::CoilMaps &maps,
                                         const std::vector<cfloat> &matrix, int n_virtual) {
  if (matrix.size() != std::size_t(n_virtual) * maps.n_coils)
    throw ContractError("compress_coil_maps: matrix shape mismatch");
  acquisition::CoilMaps out(maps.grid, n_virtual);
  const std::int64_t N = maps.grid.voxels();
  for (int v = 0; v < n_virtual; ++v) {
    cfloat *dst = out.coil(v);
    for (int c = 0; c < maps.n_coils; ++c) {
      cfloat m = matrix[std::size_t(v) * maps.n_coils + c];
      const cfloat *src = maps.coil(c);
      for (std::int64_t i = 0; i < N; ++i) dst[i] += m * src[i];
    }
  }
  return out;
}

void write_compression_matrix(const CoilCompression &cc, const std::string &path) {
  // Small binary sidecar: magic, u32 n_virtual, u32 n_physical, complex64 rows.
  std::FILE *f = std::fopen(path.c_str(), "wb");
  if (!f) throw FormatError("cannot open " + path + " for writing");
  std::fwrite("CCM1", 1, 4, f);
  std::uint32_t nv = cc.n_virtual, np = cc.n_physical;
  std::fwrite(&nv, 4, 1, f);
  std::fwrite(&np, 4, 1, f);
  std::fwrite(cc.matrix.data(), sizeof(cfloat), cc.matrix.size(), f);
  std::fclose(f);
}

acquisition::CoilMaps estimate_coil_maps(const acquisition::KSpaceSeries &ks, MapMode mode,
                                         const acquisition::CoilMaps *truth) {
  if (mode == MapMode::Oracle) {
    if (!truth) throw ContractError("estimate_coil_maps: oracle mode without ground-truth maps");
    return *truth;
  }

  const Grid g = ks.grid();
  const std::int64_t N = g.voxels();
  const std::int64_t pe_stride = std::int64_t(g.n2) * g.n3;

  // Time-averaged k-space on the sampled locations.
  std::vector<int> count(std::size_t(g.n2) * g.n3, 0);
  std::vector<std::vector<std::complex<double>>> acc(
      ks.n_coils, std::vector<std::complex<double>>(std::size_t(N), {0, 0}));
  for (int t = 0; t < ks.frames; ++t) {
    const cfloat *frame = ks.frame(t);
    for (int j = 0; j < ks.n_ro; ++j) {
      int ky = ks.pattern.ky_at(t, j), kz = ks.pattern.kz_at(t, j);
      ++count[std::size_t(ky) * g.n3 + kz];
      for (int c = 0; c < ks.n_coils; ++c) {
        const cfloat *line = frame + (std::size_t(c) * ks.n_ro + j) * g.n1;
        std::complex<double> *dst = acc[c].data() + std::int64_t(ky) * g.n3 + kz;
        for (int i1 = 0; i1 < g.n1; ++i1) dst[i1 * pe_stride] += line[i1];
      }
    }
  }

  // Apodization to the central 25% of the phase-encode plane (Hann rolloff).
  auto window = [](int idx, int n) {
    int q = idx <= n / 2 ? idx : idx - n;  // centered coordinate
    double h = std::max(1.0, n / 8.0);
    double r = std::abs(q) / h;
    return r >= 1.0 ? 0.0 : 0.5 * (1.0 + std::cos(3.14159265358979323846 * r));
  };

  acquisition::CoilMaps maps(g, ks.n_coils);
  std::vector<float> rss(N, 0.0f);
  std::vector<cfloat> vol(N);
  for (int c = 0; c < ks.n_coils; ++c) {
    for (int i2 = 0; i2 < g.n2; ++i2)
      for (int i3 = 0; i3 < g.n3; ++i3) {
        int cnt = count[std::size_t(i2) * g.n3 + i3];
        double w = window(i2, g.n2) * window(i3, g.n3);
        double s = cnt > 0 ? w / cnt : 0.0;
        for (int i1 = 0; i1 < g.n1; ++i1) {
          std::int64_t i = voxel_index(g, i1, i2, i3);
          std::complex<double> v = acc[c][i] * s;
          vol[i] = cfloat(float(v.real()), float(v.imag()));
        }
      }
    fft::fft3(vol.data(), g, true);
    std::copy(vol.begin(), vol.end(), maps.coil(c));
    for (std::int64_t i = 0; i < N; ++i) rss[i] += std::norm(vol[i]);
  }
  float rss_max = 0.0f;
  for (std::int64_t i = 0; i < N; ++i) {
    rss[i] = std::sqrt(rss[i]);
    rss_max = std::max(rss_max, rss[i]);
  }
  const float eps = 1e-6f * rss_max;
  for (int c = 0; c < ks.n_coils; ++c) {
    cfloat *m = maps.coil(c);
    for (std::int64_t i = 0; i < N; ++i) m[i] /= (rss[i] + eps);
  }
  return maps;
}

}  // namespace mldip::preprocess
