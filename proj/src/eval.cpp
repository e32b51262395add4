#include "mldip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mldip::eval {

namespace {

constexpr double kPsnrCap = 99.0;
constexpr double kK1 = 0.01, kK2 = 0.03;
constexpr int kWin = 7;

void check_pair(const ImageSeries &ref, const ImageSeries &test, const char *op) {
  if (ref.grid != test.grid || ref.frames != test.frames)
    throw ContractError(std::string(op) + ": series shapes differ");
  if (ref.frames < 1 || ref.grid.voxels() < 1)
    throw ContractError(std::string(op) + ": empty series");
}

/// Sliding-window sums of width kWin along the last axis:
/// in [a, b, n] -> out [a, b, n - kWin + 1]. Double precision throughout.
void box_last(const std::vector<double> &in, int a, int b, int n, std::vector<double> &out) {
  const int m = n - kWin + 1;
  out.assign(std::size_t(a) * b * m, 0.0);
  for (int i = 0; i < a * b; ++i) {
    const double *src = in.data() + std::size_t(i) * n;
    double *dst = out.data() + std::size_t(i) * m;
    double s = 0;
    for (int k = 0; k < kWin; ++k) s += src[k];
    dst[0] = s;
    for (int j = 1; j < m; ++j) {
      s += src[j + kWin - 1] - src[j - 1];
      dst[j] = s;
    }
  }
}

/// Moves axis 0 of an [a, b, c] array to the end, giving [b, c, a].
void rotate_axes(const std::vector<double> &in, int a, int b, int c, std::vector<double> &out) {
  out.assign(in.size(), 0.0);
  for (int i = 0; i < a; ++i)
    for (int j = 0; j < b; ++j)
      for (int k = 0; k < c; ++k)
        out[(std::size_t(j) * c + k) * a + i] = in[(std::size_t(i) * b + j) * c + k];
}

/// 7x7x7 box sums over all valid window positions of a volume given as
/// doubles; output dims (n1-6, n2-6, n3-6).
std::vector<double> box3(const std::vector<double> &x, const Grid &g) {
  const int m1 = g.n1 - kWin + 1, m2 = g.n2 - kWin + 1, m3 = g.n3 - kWin + 1;
  std::vector<double> t1, t2, t3, t4, t5;
  box_last(x, g.n1, g.n2, g.n3, t1);          // [n1, n2, m3]
  rotate_axes(t1, g.n1, g.n2, m3, t2);        // [n2, m3, n1]
  box_last(t2, g.n2, m3, g.n1, t3);           // [n2, m3, m1]
  rotate_axes(t3, g.n2, m3, m1, t4);          // [m3, m1, n2]
  box_last(t4, m3, m1, g.n2, t5);             // [m3, m1, m2]
  // Restore (m1, m2, m3) order.
  std::vector<double> out(std::size_t(m1) * m2 * m3);
  for (int k = 0; k < m3; ++k)
    for (int i = 0; i < m1; ++i)
      for (int j = 0; j < m2; ++j)
        out[(std::size_t(i) * m2 + j) * m3 + k] = t5[(std::size_t(k) * m1 + i) * m2 + j];
  return out;
}

}  // namespace

double psnr(const ImageSeries &ref, const ImageSeries &test) {
  check_pair(ref, test, "psnr");
  double peak = 0, mse = 0;
  for (std::size_t i = 0; i < ref.data.size(); ++i) {
    const double r = std::abs(ref.data[i]);
    const double d = r - std::abs(test.data[i]);
    peak = std::max(peak, r);
    mse += d * d;
  }
  if (peak == 0) throw ContractError("psnr: reference is identically zero");
  mse /= double(ref.data.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const ImageSeries &ref, const ImageSeries &test) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0;
  for (const cfloat &v : ref.data) {
    const double m = std::abs(v);
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  return ssim(ref, test, hi - lo);
}

double ssim(const ImageSeries &ref, const ImageSeries &test, double dynamic_range) {
  check_pair(ref, test, "ssim");
  const Grid &g = ref.grid;
  if (g.n1 < kWin || g.n2 < kWin || g.n3 < kWin)
    throw ContractError("ssim: grid smaller than the 7x7x7 window");
  if (dynamic_range <= 0) throw ContractError("ssim: dynamic range must be positive");
  const double c1 = (kK1 * dynamic_range) * (kK1 * dynamic_range);
  const double c2 = (kK2 * dynamic_range) * (kK2 * dynamic_range);
  const double n = double(kWin) * kWin * kWin;
  const std::int64_t nv = g.voxels();

  double total = 0;
  std::vector<double> x(std::size_t(nv), 0.0), y(std::size_t(nv), 0.0), xx(std::size_t(nv), 0.0),
      yy(std::size_t(nv), 0.0), xy(std::size_t(nv), 0.0);
  for (int t = 0; t < ref.frames; ++t) {
    const cfloat *rf = ref.frame(t), *tf = test.frame(t);
    for (std::int64_t i = 0; i < nv; ++i) {
      const double a = std::abs(rf[i]), b = std::abs(tf[i]);
      x[std::size_t(i)] = a;
      y[std::size_t(i)] = b;
      xx[std::size_t(i)] = a * a;
      yy[std::size_t(i)] = b * b;
      xy[std::size_t(i)] = a * b;
    }
    const auto sx = box3(x, g), sy = box3(y, g), sxx = box3(xx, g), syy = box3(yy, g),
               sxy = box3(xy, g);
    double acc = 0;
    for (std::size_t i = 0; i < sx.size(); ++i) {
      const double mx = sx[i] / n, my = sy[i] / n;
      const double vx = sxx[i] / n - mx * mx;
      const double vy = syy[i] / n - my * my;
      const double cv = sxy[i] / n - mx * my;
      acc += ((2 * mx * my + c1) * (2 * cv + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total += acc / double(sx.size());
  }
  return total / double(ref.frames);
}

Profile xt_profile(const ImageSeries &series, const LineSpec &line) {
  const Grid &g = series.grid;
  if (line.axis < 0 || line.axis > 2) throw ContractError("xt_profile: axis must be 0, 1, or 2");
  const int len = line.axis == 0 ? g.n1 : (line.axis == 1 ? g.n2 : g.n3);
  const int la = line.axis == 0 ? g.n2 : g.n1;
  const int lb = line.axis == 2 ? g.n2 : g.n3;
  if (line.fixed_a < 0 || line.fixed_a >= la || line.fixed_b < 0 || line.fixed_b >= lb)
    throw ContractError("xt_profile: line outside the grid");

  Profile out;
  out.length = len;
  out.frames = series.frames;
  out.values.assign(std::size_t(len) * series.frames, 0.0f);
  for (int t = 0; t < series.frames; ++t) {
    const cfloat *f = series.frame(t);
    for (int p = 0; p < len; ++p) {
      std::int64_t idx;
      if (line.axis == 0)
        idx = voxel_index(g, p, line.fixed_a, line.fixed_b);
      else if (line.axis == 1)
        idx = voxel_index(g, line.fixed_a, p, line.fixed_b);
      else
        idx = voxel_index(g, line.fixed_a, line.fixed_b, p);
      out.values[std::size_t(p) * series.frames + t] = std::abs(f[idx]);
    }
  }
  return out;
}

std::vector<double> volume_curve(const ImageSeries &series, const LabelSeries &truth_labels,
                                 float voxel_size_mm, float threshold, int dilate_voxels,
                                 std::int32_t blood_label) {
  if (series.grid != truth_labels.grid || series.frames != truth_labels.frames)
    throw ContractError("volume_curve: series and labels disagree in shape");
  if (threshold <= 0 || threshold >= 1)
    throw ContractError("volume_curve: threshold must be in (0,1)");
  if (voxel_size_mm <= 0 || dilate_voxels < 0)
    throw ContractError("volume_curve: invalid voxel size or dilation radius");

  const Grid &g = series.grid;
  const std::int64_t nv = g.voxels();
  const double voxel_ml = std::pow(double(voxel_size_mm), 3.0) / 1000.0;
  std::vector<double> curve(std::size_t(series.frames), 0.0);
  std::vector<std::uint8_t> roi(std::size_t(nv), std::uint8_t(0));

  for (int t = 0; t < series.frames; ++t) {
    const std::int32_t *lab = truth_labels.frame(t);
    const cfloat *img = series.frame(t);

    // Blood reference: median magnitude over the truth blood mask (robust to
    // partial-volume dimming at the pool boundary).
    std::vector<float> blood;
    for (std::int64_t i = 0; i < nv; ++i)
      if (lab[i] == blood_label) blood.push_back(std::abs(img[i]));
    if (blood.empty()) {
      curve[std::size_t(t)] = 0.0;  // empty segmentation; ef_metrics flags it
      continue;
    }
    auto mid = blood.begin() + std::ptrdiff_t(blood.size() / 2);
    std::nth_element(blood.begin(), mid, blood.end());
    const double ref = *mid;

    // Chebyshev dilation of the truth mask by dilate_voxels.
    std::fill(roi.begin(), roi.end(), std::uint8_t(0));
    const int r = dilate_voxels;
    for (int i1 = 0; i1 < g.n1; ++i1)
      for (int i2 = 0; i2 < g.n2; ++i2)
        for (int i3 = 0; i3 < g.n3; ++i3) {
          if (lab[voxel_index(g, i1, i2, i3)] != blood_label) continue;
          for (int d1 = std::max(0, i1 - r); d1 <= std::min(g.n1 - 1, i1 + r); ++d1)
            for (int d2 = std::max(0, i2 - r); d2 <= std::min(g.n2 - 1, i2 + r); ++d2)
              for (int d3 = std::max(0, i3 - r); d3 <= std::min(g.n3 - 1, i3 + r); ++d3)
                roi[std::size_t(voxel_index(g, d1, d2, d3))] = 1;
        }

    // Partial-volume integration: voxels at or above the blood reference
    // count fully, voxels at or below the cut not at all, and voxels in
    // between count by their normalized intensity. Linear blur preserves the
    // intensity integral, so the estimate is first-order insensitive to the
    // sub-voxel smoothing every reconstruction carries at this resolution,
    // where a hard count over a boundary shell is not.
    const double cut = double(threshold) * ref;
    double count = 0;
    for (std::int64_t i = 0; i < nv; ++i)
      if (roi[std::size_t(i)]) {
        const double v = std::abs(img[i]);
        if (v >= cut) count += std::min(1.0, (v - cut) / (ref - cut));
      }
    curve[std::size_t(t)] = count * voxel_ml;
  }
  return curve;
}

std::vector<BeatMetrics> ef_metrics(const std::vector<double> &curve,
                                    const std::vector<int> &beat_boundaries) {
  if (beat_boundaries.size() < 2) throw ContractError("ef_metrics: need at least one beat");
  for (std::size_t i = 0; i + 1 < beat_boundaries.size(); ++i)
    if (beat_boundaries[i] >= beat_boundaries[i + 1])
      throw ContractError("ef_metrics: beat boundaries must be strictly increasing");
  if (beat_boundaries.front() < 0 || beat_boundaries.back() > int(curve.size()))
    throw ContractError("ef_metrics: beat boundaries outside the curve");

  std::vector<BeatMetrics> out;
  for (std::size_t i = 0; i + 1 < beat_boundaries.size(); ++i) {
    BeatMetrics m;
    m.beat = int(i);
    double lo = std::numeric_limits<double>::infinity(), hi = 0;
    bool empty = false;
    for (int t = beat_boundaries[i]; t < beat_boundaries[i + 1]; ++t) {
      lo = std::min(lo, curve[std::size_t(t)]);
      hi = std::max(hi, curve[std::size_t(t)]);
      if (curve[std::size_t(t)] <= 0) empty = true;
    }
    m.edv = hi;
    m.esv = lo;
    m.sv = hi - lo;
    m.valid = !empty && hi > 0;
    m.ef = m.valid ? 100.0 * m.sv / m.edv : 0.0;
    out.push_back(m);
  }
  return out;
}

}  // namespace mldip::eval
