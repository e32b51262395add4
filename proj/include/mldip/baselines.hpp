#pragma once

#include "mldip/acquisition.hpp"
#include "mldip/core.hpp"
#include "mldip/gating.hpp"
#include "mldip/mldip.hpp"
#include "mldip/phantom.hpp"

namespace mldip::baselines {

/// Per-frame (cardiac, respiratory) bin labels; rejected frames carry -1/-1.
struct BinAssignment {
  int n_card = 0;
  int n_resp = 0;
  std::vector<int> cardiac_bin;  // per frame, -1 when rejected
  std::vector<int> resp_bin;     // per frame, -1 when rejected
  std::vector<bool> rejected;

  int frames() const { return int(rejected.size()); }
  int bin_of(int t) const { return resp_bin[std::size_t(t)] * n_card + cardiac_bin[std::size_t(t)]; }
};

/// Bins frames by cardiac phase (floor(phase * n_card)) and respiratory
/// amplitude quantiles; beats whose duration deviates from the median by more
/// than reject_threshold * median are rejected entirely, as are frames not
/// covered by a complete beat. Throws InsufficientDataError below 2 beats.
BinAssignment bin_frames(const phantom::MotionSchedule &schedule, int n_card = 20, int n_resp = 4,
                         float reject_threshold = 0.2f);

/// Same, with beats detected from the dominant cardiac latent component and
/// respiratory amplitude taken from the first latent column.
BinAssignment bin_frames(const gating::LatentInit &latent, int n_card = 20, int n_resp = 4,
                         float reject_threshold = 0.2f);

void write_bin_table(const BinAssignment &bins, const std::string &path);
BinAssignment read_bin_table(const std::string &path);

/// Per-frame adjoint of the sampled data (canonical lower-bound recon).
ImageSeries zero_filled_recon(const acquisition::KSpaceSeries &ks,
                              const acquisition::CoilMaps &maps);

/// Static-template ablation: identical to model::train except that the image
/// path is frozen (single template, coefficient pinned at 1 for every frame).
model::TrainedModel fixed_template_train(const acquisition::KSpaceSeries &ks,
                                         const acquisition::CoilMaps &maps,
                                         const gating::LatentInit &latent_init,
                                         model::ModelConfig cfg);

/// Result of the binned reconstruction: one volume per (cardiac, resp) bin.
struct BinnedRecon {
  Grid grid;
  int n_card = 0;
  int n_resp = 0;
  std::vector<cfloat> volumes;           // (resp-major) n_resp * n_card * voxels
  std::vector<int> frames_per_bin;       // same bin order
  std::vector<bool> filled_from_neighbor;
  std::vector<double> residual_trace;    // CG residual 2-norm, per iteration

  cfloat *volume(int card, int resp) {
    return volumes.data() + (std::size_t(resp) * n_card + card) * grid.voxels();
  }
  const cfloat *volume(int card, int resp) const {
    return volumes.data() + (std::size_t(resp) * n_card + card) * grid.voxels();
  }
};

/// Conjugate-gradient solve of the normal equations pooling all readouts per
/// bin, with quadratic finite-difference penalties along the cyclic cardiac
/// dimension (lambda_t) and the three spatial axes (lambda_s); fixed
/// iteration count. Empty bins are flagged and filled by nearest-neighbor
/// interpolation along the cardiac (then respiratory) dimension.
BinnedRecon binned_cs_recon(const acquisition::KSpaceSeries &ks, const acquisition::CoilMaps &maps,
                            const BinAssignment &bins, float lambda_t, float lambda_s,
                            int n_iters);

}  // namespace mldip::baselines
