#include <doctest.h>

#include "mldip/io.hpp"
#include "mldip/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

using namespace mldip;
using namespace mldip::phantom;

namespace {

PhantomConfig small_cfg() {
  PhantomConfig cfg;
  cfg.grid = {24, 20, 18};
  cfg.frames_per_base_cycle = 120;
  cfg.n_resp_cycles = 2;
  cfg.n_cardiac_beats = 8;
  cfg.pvc_per_resp_cycle = 1;
  return cfg;
}

}  // namespace

TEST_CASE("schedule has the requested PVC count and origin state") {
  PhantomConfig cfg;  // paper-style defaults: 358 frames, 5 resp, 20 beats
  auto s = make_schedule(cfg);

  auto st0 = motion_state(0, cfg);
  CHECK(st0.cardiac_phase == doctest::Approx(0.0f));
  CHECK(st0.resp_phase == doctest::Approx(0.0f));

  // Exactly 5 PVC beats over the base cycle.
  std::vector<int> pvc_beats;
  for (int t = 0; t < s.frames(); ++t)
    if (s.is_pvc[t] && (pvc_beats.empty() || pvc_beats.back() != s.beat_index[t]))
      pvc_beats.push_back(s.beat_index[t]);
  CHECK(pvc_beats.size() == 5);

  CHECK_THROWS_AS(motion_state(-1, cfg), ContractError);
  CHECK_THROWS_AS(motion_state(cfg.total_frames(), cfg), ContractError);
}

TEST_CASE("beat durations partition the base cycle") {
  PhantomConfig cfg;
  auto s = make_schedule(cfg);
  auto bounds = s.beat_boundaries();
  CHECK(bounds.front() == 0);
  CHECK(bounds.back() == cfg.frames_per_base_cycle);
  CHECK(int(bounds.size()) - 1 == cfg.n_cardiac_beats);
  long sum = 0;
  for (std::size_t b = 0; b + 1 < bounds.size(); ++b) sum += bounds[b + 1] - bounds[b];
  CHECK(sum == cfg.frames_per_base_cycle);
}

TEST_CASE("PVC flags match the duration outliers") {
  PhantomConfig cfg;
  auto s = make_schedule(cfg);
  auto bounds = s.beat_boundaries();
  std::vector<int> durations;
  for (std::size_t b = 0; b + 1 < bounds.size(); ++b) durations.push_back(bounds[b + 1] - bounds[b]);
  std::vector<int> regular;
  for (std::size_t b = 0; b + 1 < bounds.size(); ++b)
    if (!s.is_pvc[bounds[b]]) regular.push_back(durations[b]);
  std::sort(regular.begin(), regular.end());
  int median_regular = regular[regular.size() / 2];
  for (std::size_t b = 0; b + 1 < bounds.size(); ++b)
    CHECK(s.is_pvc[bounds[b]] == (durations[b] < median_regular));
}

TEST_CASE("total frames and repeat factor") {
  PhantomConfig cfg;
  cfg.repeat_factor = 25;
  CHECK(cfg.total_frames() == 8950);
}

TEST_CASE("phantom determinism and periodicity") {
  PhantomConfig cfg = small_cfg();
  cfg.repeat_factor = 2;
  cfg.contrast_drift_amplitude = 0.0f;
  auto a = generate_phantom_series(cfg);
  auto b = generate_phantom_series(cfg);
  CHECK(io::sha256_hex(a.images.data.data(), a.images.data.size() * sizeof(cfloat)) ==
        io::sha256_hex(b.images.data.data(), b.images.data.size() * sizeof(cfloat)));

  // Exact periodicity with zero contrast drift.
  const int F = cfg.frames_per_base_cycle;
  const auto N = cfg.grid.voxels();
  for (int t : {0, 17, F - 1}) {
    const cfloat *x0 = a.images.frame(t);
    const cfloat *x1 = a.images.frame(t + F);
    bool same = std::equal(x0, x0 + N, x1);
    CHECK(same);
  }
}

TEST_CASE("contrast drift breaks periodicity") {
  PhantomConfig cfg = small_cfg();
  cfg.repeat_factor = 2;
  cfg.contrast_drift_amplitude = 0.3f;
  auto a = generate_phantom_series(cfg);
  const int F = cfg.frames_per_base_cycle;
  const auto N = cfg.grid.voxels();
  // t=17 avoids the zero crossings of the drift waveform.
  CHECK_FALSE(std::equal(a.images.frame(17), a.images.frame(17) + N, a.images.frame(17 + F)));
}

TEST_CASE("blood pool contracts with cardiac phase in every regular beat") {
  PhantomConfig cfg = small_cfg();
  auto series = generate_phantom_series(cfg);
  auto curve = truth_volume_curve(series);
  auto bounds = series.schedule.beat_boundaries();
  for (std::size_t b = 0; b + 1 < bounds.size(); ++b) {
    if (series.schedule.is_pvc[bounds[b]]) continue;
    int dur = bounds[b + 1] - bounds[b];
    int ed = bounds[b];                             // phase ~0
    int es = bounds[b] + int(std::lround(0.4 * dur));  // phase ~0.4
    CHECK(curve[ed] > curve[es]);
  }
}

TEST_CASE("PVC beats have smaller stroke volume than regular beats") {
  PhantomConfig cfg = small_cfg();
  auto series = generate_phantom_series(cfg);
  auto curve = truth_volume_curve(series);
  auto bounds = series.schedule.beat_boundaries();
  double min_regular_sv = 1e30, max_pvc_sv = 0;
  for (std::size_t b = 0; b + 1 < bounds.size(); ++b) {
    double vmax = 0, vmin = 1e30;
    for (int t = bounds[b]; t < bounds[b + 1]; ++t) {
      vmax = std::max(vmax, curve[t]);
      vmin = std::min(vmin, curve[t]);
    }
    double sv = vmax - vmin;
    if (series.schedule.is_pvc[bounds[b]])
      max_pvc_sv = std::max(max_pvc_sv, sv);
    else
      min_regular_sv = std::min(min_regular_sv, sv);
  }
  CHECK(max_pvc_sv < min_regular_sv);
}

TEST_CASE("volume curve arithmetic") {
  PhantomSeries s;
  s.voxel_size_mm = 2.0f;
  s.labels = LabelSeries(Grid{16, 16, 16}, 1);
  auto c0 = truth_volume_curve(s);
  CHECK(c0[0] == doctest::Approx(0.0));  // all-background labels
  for (int i = 0; i < 1000; ++i) s.labels.data[i] = kBloodPool;
  auto c1 = truth_volume_curve(s);
  CHECK(c1[0] == doctest::Approx(8.0));  // 1000 voxels at 2 mm isotropic
}

TEST_CASE("blood is brighter than myocardium in every frame") {
  PhantomConfig cfg = small_cfg();
  auto series = generate_phantom_series(cfg);
  const auto N = cfg.grid.voxels();
  for (int t = 0; t < series.images.frames; ++t) {
    const cfloat *img = series.images.frame(t);
    const std::int32_t *lab = series.labels.frame(t);
    double blood = 0, myo = 0;
    long nb = 0, nm = 0;
    for (std::int64_t i = 0; i < N; ++i) {
      if (lab[i] == kBloodPool) blood += std::abs(img[i]), ++nb;
      if (lab[i] == kMyocardium) myo += std::abs(img[i]), ++nm;
    }
    REQUIRE(nb > 0);
    REQUIRE(nm > 0);
    CHECK(blood / nb > myo / nm);
  }
}

TEST_CASE("schedule sidecar round trip") {
  PhantomConfig cfg = small_cfg();
  auto s = make_schedule(cfg);
  auto path = (std::filesystem::temp_directory_path() / "mldip_sched.txt").string();
  write_schedule(s, path);
  auto r = read_schedule(path);
  CHECK(r.frames() == s.frames());
  CHECK(r.beat_index == s.beat_index);
  CHECK(r.is_pvc == s.is_pvc);
  CHECK(r.beat_duration == s.beat_duration);
  std::remove(path.c_str());
}

TEST_CASE("config validation") {
  PhantomConfig cfg = small_cfg();
  cfg.grid.n1 = 8;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = small_cfg();
  cfg.repeat_factor = 0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = small_cfg();
  cfg.n_cardiac_beats = 1;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}
