#include "mldip/acquisition.hpp"

#include "mldip/fft.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <random>
#include <unordered_set>

namespace mldip::acquisition {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kGoldenAngle = kPi / 1.6180339887498949;  // ~111.246 degrees

// Centered phase-encode coordinate -> FFT index (DC at 0).
inline int fft_index(int centered, int n) { return centered >= 0 ? centered : centered + n; }

}  // namespace

CoilMaps synthesize_coil_maps(const Grid &grid, int n_coils, std::uint32_t seed, bool uniform) {
  if (n_coils < 1) throw ContractError("synthesize_coil_maps: n_coils must be >= 1");
  CoilMaps maps(grid, n_coils);
  if (uniform) {
    if (n_coils != 1) throw ContractError("uniform-map mode requires n_coils == 1");
    std::fill(maps.maps.begin(), maps.maps.end(), cfloat(1.0f, 0.0f));
    return maps;
  }
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> uf(0.0f, 1.0f);
  for (int c = 0; c < n_coils; ++c) {
    // Coil centers on a ring around the torso in the (AP, LR) plane, spread
    // along SI; wide Gaussian falloff keeps the RSS smooth over the body.
    float theta = 2.0f * float(kPi) * (c + 0.35f * uf(rng)) / n_coils;
    float c1 = -0.5f + (n_coils > 1 ? float(c) / (n_coils - 1) : 0.5f) + 0.2f * (uf(rng) - 0.5f);
    float c2 = 1.35f * std::cos(theta);
    float c3 = 1.35f * std::sin(theta);
    float width = 1.1f + 0.2f * uf(rng);
    float phase0 = 2.0f * float(kPi) * uf(rng);
    float p1 = 0.6f * (uf(rng) - 0.5f), p2 = 0.6f * (uf(rng) - 0.5f), p3 = 0.6f * (uf(rng) - 0.5f);
    cfloat *m = maps.coil(c);
    std::int64_t i = 0;
    for (int i1 = 0; i1 < grid.n1; ++i1)
      for (int i2 = 0; i2 < grid.n2; ++i2)
        for (int i3 = 0; i3 < grid.n3; ++i3, ++i) {
          float u1 = (2.0f * i1 - (grid.n1 - 1)) / grid.n1;
          float u2 = (2.0f * i2 - (grid.n2 - 1)) / grid.n2;
          float u3 = (2.0f * i3 - (grid.n3 - 1)) / grid.n3;
          float d = (u1 - c1) * (u1 - c1) + (u2 - c2) * (u2 - c2) + (u3 - c3) * (u3 - c3);
          float mag = std::exp(-d / (2.0f * width * width));
          float ph = phase0 + p1 * u1 + p2 * u2 + p3 * u3;
          m[i] = cfloat(mag * std::cos(ph), mag * std::sin(ph));
        }
  }
  return maps;
}

SamplingPattern opra_pattern(int T, int n_ro, int n2, int n3, int gating_slot,
                             std::uint32_t seed) {
  if (n_ro < 1) throw ContractError("opra_pattern: n_ro must be >= 1");
  if (gating_slot < 0 || gating_slot >= n_ro)
    throw ContractError("opra_pattern: gating_slot out of range");
  if (std::int64_t(n_ro) > std::int64_t(n2) * n3)
    throw ContractError("opra_pattern: more readouts per frame than phase-encode grid points");

  SamplingPattern p;
  p.frames = T;
  p.n_ro = n_ro;
  p.n2 = n2;
  p.n3 = n3;
  p.gating_slot = gating_slot;
  p.ky.resize(std::size_t(T) * n_ro);
  p.kz.resize(std::size_t(T) * n_ro);

  if (std::int64_t(n_ro) == std::int64_t(n2) * n3) {
    // Full-grid mode: raster order with DC swapped into the gating slot.
    for (int t = 0; t < T; ++t) {
      std::size_t base = std::size_t(t) * n_ro;
      int j = 0;
      for (int a = 0; a < n2; ++a)
        for (int b = 0; b < n3; ++b, ++j) {
          p.ky[base + j] = a;
          p.kz[base + j] = b;
        }
      std::swap(p.ky[base], p.ky[base + gating_slot]);
      std::swap(p.kz[base], p.kz[base + gating_slot]);
    }
    return p;
  }

  std::mt19937 rng(seed);
  const double theta0 = 2.0 * kPi * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  const double r2 = n2 / 2.0 - 1.0, r3 = n3 / 2.0 - 1.0;
  const int want = n_ro - 1;  // non-DC readouts per frame

  // One continuous tip-to-tip walk: each golden-angle spoke is rasterized over
  // its full diameter, alternating traversal direction so the trajectory stays
  // smooth across spoke and frame boundaries; frames consume the walk in order.
  long spoke = 0;
  bool flip = false;
  std::vector<std::pair<int, int>> walk;
  std::size_t pos = 0;
  auto refill = [&] {
    double theta = theta0 + double(spoke++) * kGoldenAngle;
    double cy = std::cos(theta), cz = std::sin(theta);
    const int steps = 4 * std::max(n2, n3);
    int pa = INT_MIN, pb = INT_MIN;
    for (int s = 0; s <= steps; ++s) {
      double u = -1.0 + 2.0 * double(s) / steps;
      if (flip) u = -u;
      int a = int(std::lround(u * r2 * cy));
      int b = int(std::lround(u * r3 * cz));
      if (a == 0 && b == 0) continue;  // DC is reserved for the gating slot
      if (a == pa && b == pb) continue;
      walk.emplace_back(a, b);
      pa = a;
      pb = b;
    }
    flip = !flip;
  };

  for (int t = 0; t < T; ++t) {
    std::vector<std::pair<int, int>> pts;
    std::unordered_set<std::int64_t> seen;
    int guard = 0;
    while (int(pts.size()) < want) {
      if (pos == walk.size()) {
        walk.clear();
        pos = 0;
        refill();
        if (++guard > 64) throw ContractError("opra_pattern: cannot fill frame from spokes");
      }
      while (pos < walk.size() && int(pts.size()) < want) {
        auto [a, b] = walk[pos++];
        std::int64_t key = std::int64_t(a + n2) * (2 * n3 + 1) + (b + n3);
        if (seen.insert(key).second) pts.emplace_back(a, b);
      }
    }
    std::size_t base = std::size_t(t) * n_ro;
    int j = 0;
    for (int slot = 0; slot < n_ro; ++slot) {
      if (slot == gating_slot) {
        p.ky[base + slot] = 0;
        p.kz[base + slot] = 0;
      } else {
        p.ky[base + slot] = fft_index(pts[j].first, n2);
        p.kz[base + slot] = fft_index(pts[j].second, n3);
        ++j;
      }
    }
  }
  return p;
}

double acceleration_rate(const SamplingPattern &pattern) {
  if (pattern.frames < 1 || pattern.n_ro < 1) throw ContractError("acceleration_rate: empty pattern");
  return double(pattern.n2) * pattern.n3 / double(pattern.n_ro);
}

void forward(const cfloat *x, const CoilMaps &maps, const SamplingPattern &pattern, int t,
             cfloat *out) {
  const Grid g = maps.grid;
  if (pattern.n2 != g.n2 || pattern.n3 != g.n3)
    throw ContractError("forward: pattern grid does not match coil-map grid");
  if (t < 0 || t >= pattern.frames) throw ContractError("forward: frame index out of range");
  const std::int64_t N = g.voxels();
  std::vector<cfloat> work(N);
  for (int c = 0; c < maps.n_coils; ++c) {
    const cfloat *s = maps.coil(c);
    for (std::int64_t i = 0; i < N; ++i) work[i] = s[i] * x[i];
    fft::fft3(work.data(), g, false);
    for (int j = 0; j < pattern.n_ro; ++j) {
      int ky = pattern.ky_at(t, j), kz = pattern.kz_at(t, j);
      if (ky < 0 || ky >= g.n2 || kz < 0 || kz >= g.n3)
        throw ContractError("forward: pattern index out of grid bounds");
      cfloat *line = out + (std::size_t(c) * pattern.n_ro + j) * g.n1;
      const std::int64_t stride = std::int64_t(g.n2) * g.n3;
      const cfloat *src = work.data() + std::int64_t(ky) * g.n3 + kz;
      for (int i1 = 0; i1 < g.n1; ++i1) line[i1] = src[std::int64_t(i1) * stride];
    }
  }
}

void adjoint(const cfloat *samples, const CoilMaps &maps, const SamplingPattern &pattern, int t,
             cfloat *out) {
  const Grid g = maps.grid;
  if (pattern.n2 != g.n2 || pattern.n3 != g.n3)
    throw ContractError("adjoint: pattern grid does not match coil-map grid");
  if (t < 0 || t >= pattern.frames) throw ContractError("adjoint: frame index out of range");
  const std::int64_t N = g.voxels();
  std::vector<cfloat> work(N);
  std::fill(out, out + N, cfloat{});
  for (int c = 0; c < maps.n_coils; ++c) {
    std::fill(work.begin(), work.end(), cfloat{});
    for (int j = 0; j < pattern.n_ro; ++j) {
      int ky = pattern.ky_at(t, j), kz = pattern.kz_at(t, j);
      const cfloat *line = samples + (std::size_t(c) * pattern.n_ro + j) * g.n1;
      const std::int64_t stride = std::int64_t(g.n2) * g.n3;
      cfloat *dst = work.data() + std::int64_t(ky) * g.n3 + kz;
      for (int i1 = 0; i1 < g.n1; ++i1) dst[std::int64_t(i1) * stride] += line[i1];
    }
    fft::fft3(work.data(), g, true);
    const cfloat *s = maps.coil(c);
    for (std::int64_t i = 0; i < N; ++i) out[i] += std::conj(s[i]) * work[i];
  }
}

KSpaceSeries simulate_acquisition(const ImageSeries &series, const CoilMaps &maps,
                                  const SamplingPattern &pattern, float noise_sigma,
                                  std::uint64_t seed) {
  if (series.frames != pattern.frames)
    throw ContractError("simulate_acquisition: frame counts do not match");
  if (series.grid != maps.grid) throw ContractError("simulate_acquisition: grid mismatch");
  KSpaceSeries ks;
  ks.frames = pattern.frames;
  ks.n_coils = maps.n_coils;
  ks.n_ro = pattern.n_ro;
  ks.n1 = series.grid.n1;
  ks.n2 = pattern.n2;
  ks.n3 = pattern.n3;
  ks.noise_sigma = noise_sigma;
  ks.pattern = pattern;
  ks.allocate();
  const std::int64_t M = ks.samples_per_frame();
  for (int t = 0; t < ks.frames; ++t) {
    cfloat *y = ks.frame(t);
    forward(series.frame(t), maps, pattern, t, y);
    if (noise_sigma > 0) {
      std::mt19937_64 rng(stream_seed(seed, std::uint64_t(t)));
      std::normal_distribution<float> gauss(0.0f, noise_sigma);
      for (std::int64_t i = 0; i < M; ++i) {
        float re = gauss(rng), im = gauss(rng);
        y[i] += cfloat(re, im);
      }
    }
  }
  return ks;
}

}  // namespace mldip::acquisition
