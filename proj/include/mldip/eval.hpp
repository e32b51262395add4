#pragma once

#include "mldip/core.hpp"

namespace mldip::eval {

/// PSNR in dB over magnitude images: 10*log10(peak^2 / MSE) with
/// peak = max |ref| over the whole series, computed across all voxels and
/// frames. Identical inputs return the 99.0 dB cap. Throws ContractError on
/// shape mismatch or an identically-zero reference.
double psnr(const ImageSeries &ref, const ImageSeries &test);

/// Mean local SSIM over magnitude images: 7x7x7 sliding window (valid
/// positions only), stabilization constants (K1*L)^2 / (K2*L)^2 with
/// K1=0.01, K2=0.03; per-frame mean, then averaged over frames. The default
/// overload takes the dynamic range L from the reference series.
double ssim(const ImageSeries &ref, const ImageSeries &test);
double ssim(const ImageSeries &ref, const ImageSeries &test, double dynamic_range);

/// Line through the volume along one axis, the other two indices fixed.
struct LineSpec {
  int axis = 0;      // 0 -> n1, 1 -> n2, 2 -> n3
  int fixed_a = 0;   // first remaining index (grid order)
  int fixed_b = 0;   // second remaining index
};

/// Space x time magnitude profile: values[p * frames + t].
struct Profile {
  int length = 0;
  int frames = 0;
  std::vector<float> values;

  float at(int p, int t) const { return values[std::size_t(p) * frames + t]; }
};

Profile xt_profile(const ImageSeries &series, const LineSpec &line);

/// Blood-pool volume per frame (mL): voxels whose magnitude exceeds
/// `threshold` times the frame's blood reference intensity (median |series|
/// over the truth blood-pool mask), restricted to the truth mask dilated by
/// `dilate_voxels`, times the voxel volume.
std::vector<double> volume_curve(const ImageSeries &series, const LabelSeries &truth_labels,
                                 float voxel_size_mm, float threshold = 0.5f,
                                 int dilate_voxels = 1, std::int32_t blood_label = 3);

struct BeatMetrics {
  int beat = 0;
  double edv = 0;  // mL
  double esv = 0;  // mL
  double sv = 0;   // mL
  double ef = 0;   // percent
  bool valid = true;
};

/// Per-beat EDV/ESV/SV/EF from a volume curve; `beat_boundaries` holds the
/// first frame of each beat plus a terminating boundary. Beats containing an
/// empty segmentation (zero volume) are flagged invalid.
std::vector<BeatMetrics> ef_metrics(const std::vector<double> &curve,
                                    const std::vector<int> &beat_boundaries);

}  // namespace mldip::eval
