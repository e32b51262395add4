#include "mldip/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace mldip::render {

void write_pgm(const std::string &path, int width, int height,
               const std::vector<std::uint8_t> &data) {
  if (width < 1 || height < 1 || data.size() != std::size_t(width) * height)
    throw ContractError("write_pgm: data does not match the requested dimensions");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("write_pgm: cannot open " + path);
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char *>(data.data()), std::streamsize(data.size()));
  if (!f) throw FormatError("write_pgm: write failed for " + path);
}

std::vector<std::uint8_t> normalize_to_bytes(const std::vector<float> &values) {
  float lo = values.empty() ? 0.0f : values[0], hi = lo;
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<std::uint8_t> out(values.size(), std::uint8_t(0));
  const float span = hi - lo;
  if (span <= 0) return out;
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = std::uint8_t(std::lround(255.0f * (values[i] - lo) / span));
  return out;
}

void save_xt_profile(const eval::Profile &profile, const std::string &path) {
  write_pgm(path, profile.frames, profile.length, normalize_to_bytes(profile.values));
}

void save_montage(const ImageSeries &series, int max_frames, const std::string &path) {
  const Grid &g = series.grid;
  const int n = std::min(max_frames, series.frames);
  if (n < 1) throw ContractError("save_montage: empty series");
  const int slice = g.n3 / 2;
  std::vector<float> canvas(std::size_t(g.n1) * g.n2 * n, 0.0f);
  for (int k = 0; k < n; ++k) {
    const int t = series.frames == 1 ? 0 : k * (series.frames - 1) / std::max(1, n - 1);
    const cfloat *f = series.frame(t);
    for (int i1 = 0; i1 < g.n1; ++i1)
      for (int i2 = 0; i2 < g.n2; ++i2)
        canvas[std::size_t(i1) * (std::size_t(g.n2) * n) + std::size_t(k) * g.n2 + i2] =
            std::abs(f[voxel_index(g, i1, i2, slice)]);
  }
  write_pgm(path, g.n2 * n, g.n1, normalize_to_bytes(canvas));
}

void save_curves(const std::vector<std::vector<float>> &curves, int height_per_curve,
                 const std::string &path) {
  if (curves.empty() || curves[0].empty())
    throw ContractError("save_curves: need at least one non-empty curve");
  const int w = int(curves[0].size());
  for (const auto &c : curves)
    if (int(c.size()) != w) throw ContractError("save_curves: curves differ in length");
  const int h = height_per_curve;
  std::vector<std::uint8_t> img(std::size_t(w) * h * curves.size(), std::uint8_t(0));
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto &c = curves[k];
    float lo = c[0], hi = c[0];
    for (float v : c) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const float span = hi > lo ? hi - lo : 1.0f;
    for (int x = 0; x < w; ++x) {
      const int y = int(std::lround((hi - c[std::size_t(x)]) / span * float(h - 1)));
      img[(k * std::size_t(h) + std::size_t(y)) * w + std::size_t(x)] = 255;
    }
  }
  write_pgm(path, w, h * int(curves.size()), img);
}

}  // namespace mldip::render
