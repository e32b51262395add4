#include "mldip/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

namespace mldip::phantom {

namespace {

constexpr float kPi = 3.14159265358979323846f;

// Smooth contraction waveform: 0 at end-diastole (phase 0), peak at ~0.4.
float contraction(float phase) {
  if (phase >= 0.8f) return 0.0f;
  float s = std::sin(kPi * phase / 0.8f);
  return s * s;
}

// Respiratory displacement waveform in [0,1], exhale at phase 0.
float resp_wave(float phase) {
  float s = std::sin(kPi * phase);
  return s * s;
}

struct Ellipsoid {
  float c1, c2, c3;
  float r1, r2, r3;

  float eval(float u1, float u2, float u3) const {
    float d1 = (u1 - c1) / r1, d2 = (u2 - c2) / r2, d3 = (u3 - c3) / r3;
    return std::sqrt(d1 * d1 + d2 * d2 + d3 * d3);
  }
};

// Linear soft edge of width w (normalized units) around e = 1.
float soft(float e, float w = 0.08f) {
  float a = 0.5f + 0.5f * (1.0f - e) / w;
  return std::clamp(a, 0.0f, 1.0f);
}

float mix(float a, float b, float t) { return a + (b - a) * t; }

struct BeatLayout {
  std::vector<int> start;     // per beat, first frame in base cycle
  std::vector<int> duration;  // per beat
  std::vector<bool> pvc;
  std::vector<bool> compensatory;
};

BeatLayout beat_layout(const PhantomConfig &cfg) {
  const int beats = cfg.n_cardiac_beats;
  const int cycles = cfg.n_resp_cycles;
  BeatLayout lay;
  lay.pvc.assign(beats, false);
  lay.compensatory.assign(beats, false);
  // Distribute beats over respiratory cycles; within each cycle the PVCs sit
  // at the end, each immediately followed by its compensatory beat.
  for (int c = 0; c < cycles; ++c) {
    int b0 = c * beats / cycles;
    int b1 = (c + 1) * beats / cycles;
    int in_cycle = b1 - b0;
    for (int p = 0; p < cfg.pvc_per_resp_cycle; ++p) {
      int comp = b1 - 1 - 2 * p;
      int pvc = comp - 1;
      if (pvc < b0) throw ConfigError("not enough beats per respiratory cycle for requested PVCs");
      lay.pvc[pvc] = true;
      lay.compensatory[comp] = true;
      (void)in_cycle;
    }
  }
  std::vector<double> weight(beats);
  double total = 0;
  for (int b = 0; b < beats; ++b) {
    weight[b] = lay.pvc[b] ? cfg.pvc_duration_factor
                           : (lay.compensatory[b] ? cfg.compensatory_duration_factor : 1.0);
    total += weight[b];
  }
  const int F = cfg.frames_per_base_cycle;
  lay.start.resize(beats);
  lay.duration.resize(beats);
  double cum = 0;
  int prev = 0;
  for (int b = 0; b < beats; ++b) {
    cum += weight[b];
    int edge = int(std::lround(F * cum / total));
    lay.start[b] = prev;
    lay.duration[b] = edge - prev;
    if (lay.duration[b] < 1) throw ConfigError("beat shorter than one frame; increase frames_per_base_cycle");
    prev = edge;
  }
  return lay;
}

}  // namespace

void validate(const PhantomConfig &cfg) {
  if (cfg.grid.n1 < 16 || cfg.grid.n2 < 16 || cfg.grid.n3 < 16)
    throw ConfigError("phantom grid dims must be >= 16");
  if (cfg.repeat_factor < 1) throw ConfigError("repeat_factor must be >= 1");
  if (cfg.n_resp_cycles < 1 || cfg.n_cardiac_beats < cfg.n_resp_cycles)
    throw ConfigError("need at least one cardiac beat per respiratory cycle");
  if (cfg.frames_per_base_cycle < 2 * cfg.n_cardiac_beats)
    throw ConfigError("frames_per_base_cycle too small for the beat count");
  if (cfg.pvc_per_resp_cycle < 0) throw ConfigError("pvc_per_resp_cycle must be >= 0");
  if (cfg.voxel_size_mm <= 0) throw ConfigError("voxel_size_mm must be positive");
  beat_layout(cfg);  // throws when PVC placement is infeasible
}

std::vector<int> MotionSchedule::beat_boundaries() const {
  std::vector<int> b;
  int prev = -1;
  for (int t = 0; t < frames(); ++t) {
    if (beat_index[t] != prev) {
      b.push_back(t);
      prev = beat_index[t];
    }
  }
  b.push_back(frames());
  return b;
}

MotionSchedule make_schedule(const PhantomConfig &cfg) {
  validate(cfg);
  const int F = cfg.frames_per_base_cycle;
  const int T = cfg.total_frames();
  BeatLayout lay = beat_layout(cfg);

  MotionSchedule s;
  s.cardiac_phase.resize(T);
  s.resp_phase.resize(T);
  s.beat_index.resize(T);
  s.beat_duration.resize(T);
  s.is_pvc.resize(T);

  std::vector<int> beat_of_frame(F);
  for (int b = 0, t = 0; b < int(lay.start.size()); ++b)
    for (int k = 0; k < lay.duration[b]; ++k) beat_of_frame[t++] = b;

  for (int t = 0; t < T; ++t) {
    int rep = t / F;
    int tb = t % F;
    int b = beat_of_frame[tb];
    s.cardiac_phase[t] = float(tb - lay.start[b]) / float(lay.duration[b]);
    s.resp_phase[t] = float(std::fmod(double(tb) * cfg.n_resp_cycles / F, 1.0));
    s.beat_index[t] = rep * cfg.n_cardiac_beats + b;
    s.beat_duration[t] = lay.duration[b];
    s.is_pvc[t] = lay.pvc[b];
  }
  return s;
}

MotionState motion_state(int t, const PhantomConfig &cfg) {
  if (t < 0 || t >= cfg.total_frames()) throw ContractError("motion_state: frame index out of range");
  MotionSchedule s = make_schedule(cfg);
  return {s.cardiac_phase[t], s.resp_phase[t], bool(s.is_pvc[t]), s.beat_index[t]};
}

PhantomSeries generate_phantom_series(const PhantomConfig &cfg) {
  validate(cfg);
  const Grid g = cfg.grid;
  const int T = cfg.total_frames();
  const std::int64_t N = g.voxels();

  PhantomSeries out;
  out.schedule = make_schedule(cfg);
  out.images = ImageSeries(g, T);
  out.labels = LabelSeries(g, T);
  out.voxel_size_mm = cfg.voxel_size_mm;

  // Static per-voxel body texture (low-frequency) and phase ramp.
  std::mt19937 rng(cfg.seed);
  std::uniform_real_distribution<float> uf(0.0f, 1.0f);
  float tf1[3], tf2[3], tf3[3], tp[3];
  for (int k = 0; k < 3; ++k) {
    tf1[k] = 1.0f + 2.0f * uf(rng);
    tf2[k] = 1.0f + 2.0f * uf(rng);
    tf3[k] = 1.0f + 2.0f * uf(rng);
    tp[k] = 2.0f * kPi * uf(rng);
  }
  std::vector<float> texture(N), phase_ramp(N);
  {
    std::int64_t i = 0;
    for (int i1 = 0; i1 < g.n1; ++i1)
      for (int i2 = 0; i2 < g.n2; ++i2)
        for (int i3 = 0; i3 < g.n3; ++i3, ++i) {
          float u1 = (2.0f * i1 - (g.n1 - 1)) / g.n1;
          float u2 = (2.0f * i2 - (g.n2 - 1)) / g.n2;
          float u3 = (2.0f * i3 - (g.n3 - 1)) / g.n3;
          float tex = 1.0f;
          for (int k = 0; k < 3; ++k)
            tex += 0.04f * std::cos(kPi * (tf1[k] * u1 + tf2[k] * u2 + tf3[k] * u3) + tp[k]);
          texture[i] = tex;
          phase_ramp[i] = 0.3f * u1 + 0.2f * u2 - 0.25f * u3;
        }
  }

  // Tissue magnitudes and phase offsets: blood bright (ferumoxytol-like cine).
  const float mag_body = 0.25f, mag_myo = 0.40f, mag_blood = 1.00f, mag_liver = 0.55f;
  const float ph_body = 0.20f, ph_myo = 0.60f, ph_blood = -0.40f, ph_liver = 1.00f;

  for (int t = 0; t < T; ++t) {
    float card = out.schedule.cardiac_phase[t];
    float resp = out.schedule.resp_phase[t];
    float amp = out.schedule.is_pvc[t] ? cfg.pvc_contraction_factor : 1.0f;
    float c = contraction(card) * amp;
    float r = resp_wave(resp);
    // SI shift: amplitude 10% of grid extent n1 (0.2 in normalized units).
    float si = 0.2f * r;
    float blood_t = mag_blood * (1.0f + cfg.contrast_drift_amplitude *
                                            std::sin(2.0f * kPi * t / float(T)));

    Ellipsoid body{0.0f, 0.0f, 0.0f, 0.97f, 0.82f + 0.02f * r, 0.88f};
    Ellipsoid epi{0.10f + si, 0.05f, -0.12f,
                  0.34f * (1.0f - 0.06f * c), 0.30f * (1.0f - 0.06f * c), 0.28f * (1.0f - 0.06f * c)};
    Ellipsoid blood{0.10f + si, 0.05f, -0.12f,
                    0.24f * (1.0f - 0.28f * c), 0.21f * (1.0f - 0.28f * c), 0.20f * (1.0f - 0.28f * c)};
    Ellipsoid liver{0.55f + si, 0.10f, 0.25f, 0.30f, 0.45f, 0.40f};

    cfloat *img = out.images.frame(t);
    std::int32_t *lab = out.labels.frame(t);
    std::int64_t i = 0;
    for (int i1 = 0; i1 < g.n1; ++i1)
      for (int i2 = 0; i2 < g.n2; ++i2)
        for (int i3 = 0; i3 < g.n3; ++i3, ++i) {
          float u1 = (2.0f * i1 - (g.n1 - 1)) / g.n1;
          float u2 = (2.0f * i2 - (g.n2 - 1)) / g.n2;
          float u3 = (2.0f * i3 - (g.n3 - 1)) / g.n3;

          float e_body = body.eval(u1, u2, u3);
          float mag = 0.0f, ph = ph_body;
          std::int32_t label = kBackground;
          if (e_body < 1.4f) {
            float a = soft(e_body);
            mag = mix(0.0f, mag_body * texture[i], a);
            if (e_body < 1.0f) label = kBody;

            float e_liv = liver.eval(u1, u2, u3);
            if (e_liv < 1.4f) {
              float al = soft(e_liv);
              mag = mix(mag, mag_liver, al);
              if (al > 0.5f) ph = ph_liver;
              if (e_liv < 1.0f) label = kLiver;
            }
            float e_epi = epi.eval(u1, u2, u3);
            if (e_epi < 1.4f) {
              float am = soft(e_epi);
              mag = mix(mag, mag_myo, am);
              if (am > 0.5f) ph = ph_myo;
              if (e_epi < 1.0f) label = kMyocardium;
              float e_bld = blood.eval(u1, u2, u3);
              if (e_bld < 1.4f) {
                float ab = soft(e_bld);
                mag = mix(mag, blood_t, ab);
                if (ab > 0.5f) ph = ph_blood;
                if (e_bld < 1.0f) label = kBloodPool;
              }
            }
          }
          float phi = phase_ramp[i] + ph;
          img[i] = cfloat(mag * std::cos(phi), mag * std::sin(phi));
          lab[i] = label;
        }
  }
  return out;
}

std::vector<double> truth_volume_curve(const PhantomSeries &series) {
  const double vox_ml = std::pow(double(series.voxel_size_mm), 3) / 1000.0;
  std::vector<double> curve(series.labels.frames);
  const std::int64_t N = series.labels.grid.voxels();
  for (int t = 0; t < series.labels.frames; ++t) {
    const std::int32_t *lab = series.labels.frame(t);
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < N; ++i) count += (lab[i] == kBloodPool);
    curve[t] = count * vox_ml;
  }
  return curve;
}

void write_schedule(const MotionSchedule &schedule, const std::string &path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f << "# frame\tcardiac_phase\tresp_phase\tbeat_index\tis_pvc\n";
  for (int t = 0; t < schedule.frames(); ++t) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d\t%.6f\t%.6f\t%d\t%d\n", t, schedule.cardiac_phase[t],
                  schedule.resp_phase[t], schedule.beat_index[t], int(schedule.is_pvc[t]));
    f << buf;
  }
}

MotionSchedule read_schedule(const std::string &path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open " + path);
  MotionSchedule s;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    int frame, beat, pvc;
    float card, resp;
    if (std::sscanf(line.c_str(), "%d %f %f %d %d", &frame, &card, &resp, &beat, &pvc) != 5)
      throw FormatError("malformed schedule line: " + line);
    s.cardiac_phase.push_back(card);
    s.resp_phase.push_back(resp);
    s.beat_index.push_back(beat);
    s.beat_duration.push_back(0);
    s.is_pvc.push_back(pvc != 0);
  }
  // Recover beat durations from the boundaries.
  auto bounds = s.beat_boundaries();
  for (size_t b = 0; b + 1 < bounds.size(); ++b)
    for (int t = bounds[b]; t < bounds[b + 1]; ++t) s.beat_duration[t] = bounds[b + 1] - bounds[b];
  return s;
}

}  // namespace mldip::phantom
