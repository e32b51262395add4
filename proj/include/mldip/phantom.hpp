#pragma once

#include "mldip/core.hpp"

namespace mldip::phantom {

enum Label : std::int32_t {
  kBackground = 0,
  kBody = 1,
  kMyocardium = 2,
  kBloodPool = 3,
  kLiver = 4,
};

struct PhantomConfig {
  Grid grid{64, 56, 46};
  float voxel_size_mm = 2.0f;
  int frames_per_base_cycle = 358;
  int n_resp_cycles = 5;
  int n_cardiac_beats = 20;
  int pvc_per_resp_cycle = 1;
  int repeat_factor = 1;
  float contrast_drift_amplitude = 0.25f;
  // PVC beats are shortened and contract less; the following beat pauses.
  float pvc_duration_factor = 0.6f;
  float pvc_contraction_factor = 0.5f;
  float compensatory_duration_factor = 1.15f;
  std::uint32_t seed = 1;

  int total_frames() const { return frames_per_base_cycle * repeat_factor; }
};

void validate(const PhantomConfig &cfg);

/// Per-frame motion state over the full series (base cycle tiled repeat_factor times).
struct MotionSchedule {
  std::vector<float> cardiac_phase;  // in [0,1), resets at each beat boundary
  std::vector<float> resp_phase;     // in [0,1)
  std::vector<int> beat_index;       // global beat counter
  std::vector<int> beat_duration;    // frames, of the beat this frame belongs to
  std::vector<bool> is_pvc;

  int frames() const { return int(cardiac_phase.size()); }
  /// First frame of each beat, plus a terminating boundary.
  std::vector<int> beat_boundaries() const;
};

struct MotionState {
  float cardiac_phase;
  float resp_phase;
  bool is_pvc;
  int beat_index;
};

struct PhantomSeries {
  ImageSeries images;
  LabelSeries labels;
  MotionSchedule schedule;
  float voxel_size_mm = 2.0f;
};

MotionSchedule make_schedule(const PhantomConfig &cfg);

/// Motion state of frame t; throws ContractError when t is out of [0, T0).
MotionState motion_state(int t, const PhantomConfig &cfg);

/// Analytic dynamic torso: ellipsoidal body, two-chamber heart, liver block.
/// Cardiac phase drives wall thickening and blood-pool shrinkage; respiratory
/// phase drives SI translation of heart/liver and AP chest-wall displacement.
PhantomSeries generate_phantom_series(const PhantomConfig &cfg);

/// Blood-pool volume in mL per frame, from the label masks.
std::vector<double> truth_volume_curve(const PhantomSeries &series);

/// Writes the plain-text schedule sidecar (frame, cardiac_phase, resp_phase,
/// beat_index, is_pvc).
void write_schedule(const MotionSchedule &schedule, const std::string &path);
MotionSchedule read_schedule(const std::string &path);

}  // namespace mldip::phantom
