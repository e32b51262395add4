#include <doctest.h>

#include "mldip/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace mldip;
using namespace mldip::baselines;

namespace {

phantom::PhantomConfig schedule_config(int pvc_per_cycle) {
  phantom::PhantomConfig cfg;
  cfg.frames_per_base_cycle = 358;
  cfg.n_cardiac_beats = 20;
  cfg.n_resp_cycles = 5;
  cfg.pvc_per_resp_cycle = pvc_per_cycle;
  return cfg;
}

/// Static test scene: smooth complex volume, deterministic.
ImageSeries static_series(const Grid &g, int T) {
  ImageSeries s(g, T);
  for (int i1 = 0; i1 < g.n1; ++i1)
    for (int i2 = 0; i2 < g.n2; ++i2)
      for (int i3 = 0; i3 < g.n3; ++i3) {
        const float v = 0.2f + std::exp(-(std::pow(i1 - g.n1 / 2.0f, 2.0f) / 8.0f +
                                          std::pow(i2 - g.n2 / 2.0f, 2.0f) / 6.0f +
                                          std::pow(i3 - g.n3 / 2.0f, 2.0f) / 5.0f));
        s.frame(0)[voxel_index(g, i1, i2, i3)] = cfloat(v, 0.3f * v);
      }
  for (int t = 1; t < T; ++t)
    std::copy(s.frame(0), s.frame(0) + g.voxels(), s.frame(t));
  return s;
}

/// One-bin assignment accepting every frame.
BinAssignment all_in_one_bin(int frames) {
  BinAssignment b;
  b.n_card = 1;
  b.n_resp = 1;
  b.cardiac_bin.assign(std::size_t(frames), 0);
  b.resp_bin.assign(std::size_t(frames), 0);
  b.rejected.assign(std::size_t(frames), false);
  return b;
}

double psnr_vs(const std::vector<cfloat> &test, const std::vector<cfloat> &ref) {
  double mse = 0, peak = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = std::abs(test[i]) - std::abs(ref[i]);
    mse += d * d;
    peak = std::max(peak, double(std::abs(ref[i])));
  }
  mse /= double(ref.size());
  return 10.0 * std::log10(peak * peak / mse);
}

std::string temp_path(const char *name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

// ---------------------------------------------------------------------------
// bin_frames on the phantom schedule

TEST_CASE("bin_frames rejects exactly the PVC beats at threshold 0.2") {
  auto sched = phantom::make_schedule(schedule_config(1));
  BinAssignment bins = bin_frames(sched, 20, 4, 0.2f);
  REQUIRE(bins.frames() == sched.frames());
  CHECK(bins.n_card == 20);
  CHECK(bins.n_resp == 4);
  // PVC beats (0.6x duration) deviate by ~40% from the median and must go;
  // compensatory beats (1.15x) stay within the 20% band.
  for (int t = 0; t < bins.frames(); ++t)
    CHECK(bins.rejected[std::size_t(t)] == bool(sched.is_pvc[std::size_t(t)]));
}

TEST_CASE("bin_frames partitions every surviving frame into one valid bin") {
  auto sched = phantom::make_schedule(schedule_config(1));
  BinAssignment bins = bin_frames(sched, 20, 4, 0.2f);
  int kept = 0;
  for (int t = 0; t < bins.frames(); ++t) {
    if (bins.rejected[std::size_t(t)]) {
      CHECK(bins.cardiac_bin[std::size_t(t)] == -1);
      CHECK(bins.resp_bin[std::size_t(t)] == -1);
      continue;
    }
    ++kept;
    CHECK(bins.cardiac_bin[std::size_t(t)] >= 0);
    CHECK(bins.cardiac_bin[std::size_t(t)] < 20);
    CHECK(bins.resp_bin[std::size_t(t)] >= 0);
    CHECK(bins.resp_bin[std::size_t(t)] < 4);
    // Cardiac bin is floor(phase * n_card) by definition.
    const int expect =
        std::min(int(sched.cardiac_phase[std::size_t(t)] * 20.0f), 19);
    CHECK(bins.cardiac_bin[std::size_t(t)] == expect);
  }
  CHECK(kept > 0);
}

TEST_CASE("bin_frames keeps all frames when the rhythm is regular") {
  auto sched = phantom::make_schedule(schedule_config(0));
  BinAssignment bins = bin_frames(sched, 20, 4, 0.2f);
  for (int t = 0; t < bins.frames(); ++t) CHECK_FALSE(bins.rejected[std::size_t(t)]);
}

TEST_CASE("bin_frames respiratory quantiles balance the bin populations") {
  auto sched = phantom::make_schedule(schedule_config(0));
  BinAssignment bins = bin_frames(sched, 20, 4, 0.2f);
  std::vector<int> count(4, 0);
  int kept = 0;
  for (int t = 0; t < bins.frames(); ++t)
    if (!bins.rejected[std::size_t(t)]) {
      ++count[std::size_t(bins.resp_bin[std::size_t(t)])];
      ++kept;
    }
  for (int r = 0; r < 4; ++r) {
    CHECK(count[std::size_t(r)] > kept / 8);      // no starved bin
    CHECK(count[std::size_t(r)] < kept / 2);      // no dominant bin
  }
}

TEST_CASE("bin_frames needs at least two beats") {
  phantom::PhantomConfig cfg = schedule_config(0);
  cfg.n_cardiac_beats = 1;
  cfg.n_resp_cycles = 1;
  cfg.frames_per_base_cycle = 40;
  auto sched = phantom::make_schedule(cfg);
  CHECK_THROWS_AS(bin_frames(sched, 20, 4, 0.2f), InsufficientDataError);
}

TEST_CASE("bin_frames works from gating latents") {
  const int T = 240;
  gating::LatentInit li;
  li.frames = T;
  li.z.assign(std::size_t(T) * 6, 0.0f);
  // Clean periodic cardiac component (period 16) and slow respiration.
  for (int t = 0; t < T; ++t) {
    li.at(t, 0) = std::sin(2.0f * 3.14159265f * t / 80.0f);
    li.at(t, 2) = std::cos(2.0f * 3.14159265f * t / 16.0f);
  }
  BinAssignment bins = bin_frames(li, 10, 2, 0.2f);
  REQUIRE(bins.frames() == T);
  int kept = 0;
  for (int t = 0; t < T; ++t)
    if (!bins.rejected[std::size_t(t)]) {
      ++kept;
      CHECK(bins.cardiac_bin[std::size_t(t)] >= 0);
      CHECK(bins.cardiac_bin[std::size_t(t)] < 10);
      CHECK(bins.resp_bin[std::size_t(t)] >= 0);
      CHECK(bins.resp_bin[std::size_t(t)] < 2);
    }
  // Regular rhythm: nearly all frames survive (edges before the first / after
  // the last detected beat start are dropped by construction).
  CHECK(kept >= T - 2 * 16);
}

TEST_CASE("bin table round trips and rejects malformed files") {
  auto sched = phantom::make_schedule(schedule_config(1));
  BinAssignment bins = bin_frames(sched, 20, 4, 0.2f);
  const std::string path = temp_path("mldip_bins_test.tsv");
  write_bin_table(bins, path);
  BinAssignment back = read_bin_table(path);
  CHECK(back.n_card == bins.n_card);
  CHECK(back.n_resp == bins.n_resp);
  REQUIRE(back.frames() == bins.frames());
  for (int t = 0; t < bins.frames(); ++t) {
    CHECK(back.cardiac_bin[std::size_t(t)] == bins.cardiac_bin[std::size_t(t)]);
    CHECK(back.resp_bin[std::size_t(t)] == bins.resp_bin[std::size_t(t)]);
    CHECK(back.rejected[std::size_t(t)] == bins.rejected[std::size_t(t)]);
  }
  {
    std::ofstream f(path);
    f << "not a bin table\n";
  }
  CHECK_THROWS_AS(read_bin_table(path), FormatError);
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// zero-filled reconstruction

TEST_CASE("zero-filled recon inverts full sampling with a uniform coil") {
  const Grid g{16, 12, 10};
  const int T = 3;
  ImageSeries truth = static_series(g, T);
  auto maps = acquisition::synthesize_coil_maps(g, 1, 1, /*uniform=*/true);
  auto pattern = acquisition::opra_pattern(T, g.n2 * g.n3, g.n2, g.n3, 0);
  auto ks = acquisition::simulate_acquisition(truth, maps, pattern, 0.0f, 1);
  ImageSeries zf = zero_filled_recon(ks, maps);
  for (int t = 0; t < T; ++t)
    for (std::int64_t i = 0; i < g.voxels(); ++i)
      CHECK(std::abs(zf.frame(t)[i] - truth.frame(t)[i]) < 1e-6f);
}

TEST_CASE("zero-filled recon is linear in the data") {
  const Grid g{16, 12, 10};
  const int T = 4;
  ImageSeries truth = static_series(g, T);
  auto maps = acquisition::synthesize_coil_maps(g, 3, 2);
  auto pattern = acquisition::opra_pattern(T, 9, g.n2, g.n3, 4, 2);
  auto ks = acquisition::simulate_acquisition(truth, maps, pattern, 0.0f, 2);
  ImageSeries zf1 = zero_filled_recon(ks, maps);
  for (auto &v : ks.data) v *= 2.0f;
  ImageSeries zf2 = zero_filled_recon(ks, maps);
  for (std::size_t i = 0; i < zf1.data.size(); ++i)
    CHECK(std::abs(zf2.data[i] - 2.0f * zf1.data[i]) < 1e-5f);
}

TEST_CASE("zero-filled recon rejects mismatched coil maps") {
  const Grid g{16, 12, 10};
  ImageSeries truth = static_series(g, 2);
  auto maps = acquisition::synthesize_coil_maps(g, 2, 1);
  auto pattern = acquisition::opra_pattern(2, 9, g.n2, g.n3, 4, 1);
  auto ks = acquisition::simulate_acquisition(truth, maps, pattern, 0.0f, 1);
  auto wrong = acquisition::synthesize_coil_maps(Grid{16, 12, 8}, 2, 1);
  CHECK_THROWS_AS(zero_filled_recon(ks, wrong), ContractError);
}

// ---------------------------------------------------------------------------
// fixed-template ablation

TEST_CASE("fixed_template_train freezes the image path") {
  const Grid g{8, 8, 6};
  const int T = 12;
  ImageSeries truth = static_series(g, T);
  auto maps = acquisition::synthesize_coil_maps(g, 2, 3);
  auto pattern = acquisition::opra_pattern(T, 8, g.n2, g.n3, 4, 3);
  auto ks = acquisition::simulate_acquisition(truth, maps, pattern, 0.005f, 3);
  gating::LatentInit li;
  li.frames = T;
  li.z.assign(std::size_t(T) * 6, 0.0f);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < 6; ++k) li.at(t, k) = std::sin(0.5f * t + k);

  model::ModelConfig cfg;
  cfg.L1 = 2;
  cfg.L2 = 4;  // overridden to 1 by the wrapper
  cfg.conv_decoder_channels = {4, 4};
  cfg.unet_channels = {4, 6};
  cfg.mlp_flow_widths = {8, 8, 8, 8, 8, 8};
  cfg.mlp_image_widths = {8, 8, 8, 8, 8, 8};
  cfg.iterations = 5;
  cfg.batch_frames = 2;
  cfg.seed = 11;

  model::TrainedModel m = fixed_template_train(ks, maps, li, cfg);
  CHECK(m.cfg.mode == model::TrainMode::FixedTemplate);
  CHECK(m.cfg.L2 == 1);
  // The composite template is the same for every frame: coefficient pinned.
  for (int t = 0; t < T; ++t) {
    auto fc = model::eval_coefficients(m, t);
    REQUIRE(fc.v.size() == 1);
    CHECK(fc.v[0] == cfloat(1.0f, 0.0f));
  }
  // Same config trained in full mode carries strictly more parameters.
  model::ModelConfig full = cfg;
  full.mode = model::TrainMode::Full;
  model::TrainedModel mf = model::build_model(full, g, T, &li);
  CHECK(m.parameter_count() < mf.parameter_count());
}

// ---------------------------------------------------------------------------
// binned CG reconstruction

TEST_CASE("binned recon recovers a static scene from full pooled sampling") {
  const Grid g{16, 12, 10};
  const int T = 6;
  ImageSeries truth = static_series(g, T);
  auto maps = acquisition::synthesize_coil_maps(g, 2, 5);
  auto pattern = acquisition::opra_pattern(T, g.n2 * g.n3, g.n2, g.n3, 0);
  auto ks = acquisition::simulate_acquisition(truth, maps, pattern, 0.0f, 5);
  BinAssignment bins = all_in_one_bin(T);

  BinnedRecon rec = binned_cs_recon(ks, maps, bins, 0.0f, 0.0f, 25);
  REQUIRE(rec.n_card == 1);
  REQUIRE(rec.frames_per_bin[0] == T);
  CHECK_FALSE(rec.filled_from_neighbor[0]);
  std::vector<cfloat> ref(truth.frame(0), truth.frame(0) + g.voxels());
  std::vector<cfloat> got(rec.volume(0, 0), rec.volume(0, 0) + g.voxels());
  CHECK(psnr_vs(got, ref) > 40.0);

  SUBCASE("CG residual is non-increasing") {
    REQUIRE(rec.residual_trace.size() >= 2);
    for (std::size_t i = 1; i < rec.residual_trace.size(); ++i)
      CHECK(rec.residual_trace[i] <= rec.residual_trace[i - 1] * (1.0 + 1e-6));
  }
  SUBCASE("solver is deterministic") {
    BinnedRecon again = binned_cs_recon(ks, maps, bins, 0.0f, 0.0f, 25);
    CHECK(again.volumes == rec.volumes);
    CHECK(again.residual_trace == rec.residual_trace);
  }
}

TEST_CASE("binned recon fills empty bins from cardiac neighbors") {
  const Grid g{16, 12, 10};
  const int T = 9;
  ImageSeries truth = static_series(g, T);
  auto maps = acquisition::synthesize_coil_maps(g, 1, 1, /*uniform=*/true);
  auto pattern = acquisition::opra_pattern(T, g.n2 * g.n3, g.n2, g.n3, 0);
  auto ks = acquisition::simulate_acquisition(truth, maps, pattern, 0.0f, 1);

  BinAssignment bins;
  bins.n_card = 4;
  bins.n_resp = 1;
  bins.cardiac_bin.assign(std::size_t(T), 0);
  bins.resp_bin.assign(std::size_t(T), 0);
  bins.rejected.assign(std::size_t(T), false);
  for (int t = 0; t < T; ++t) bins.cardiac_bin[std::size_t(t)] = t % 3;  // bin 3 stays empty

  BinnedRecon rec = binned_cs_recon(ks, maps, bins, 0.0f, 0.0f, 20);
  CHECK(rec.frames_per_bin[3] == 0);
  CHECK(rec.filled_from_neighbor[3]);
  for (int c = 0; c < 3; ++c) CHECK_FALSE(rec.filled_from_neighbor[std::size_t(c)]);
  // Cyclic neighbors of bin 3 at distance 1 are bins 2 and 0; the fill is
  // their average.
  for (std::int64_t i = 0; i < g.voxels(); ++i) {
    const cfloat expect = 0.5f * (rec.volume(2, 0)[i] + rec.volume(0, 0)[i]);
    CHECK(std::abs(rec.volume(3, 0)[i] - expect) < 1e-6f);
  }
}

TEST_CASE("cardiac coupling pulls neighboring bins together") {
  const Grid g{12, 10, 8};
  const int T = 8;
  // Two genuinely different frames alternating between two bins.
  ImageSeries series(g, T);
  ImageSeries a = static_series(g, 1);
  for (int t = 0; t < T; ++t) {
    const float s = (t % 2 == 0) ? 1.0f : 0.4f;
    for (std::int64_t i = 0; i < g.voxels(); ++i) series.frame(t)[i] = s * a.frame(0)[i];
  }
  auto maps = acquisition::synthesize_coil_maps(g, 1, 1, /*uniform=*/true);
  auto pattern = acquisition::opra_pattern(T, g.n2 * g.n3, g.n2, g.n3, 0);
  auto ks = acquisition::simulate_acquisition(series, maps, pattern, 0.0f, 1);

  BinAssignment bins;
  bins.n_card = 2;
  bins.n_resp = 1;
  bins.cardiac_bin.assign(std::size_t(T), 0);
  bins.resp_bin.assign(std::size_t(T), 0);
  bins.rejected.assign(std::size_t(T), false);
  for (int t = 0; t < T; ++t) bins.cardiac_bin[std::size_t(t)] = t % 2;

  auto gap = [&](float lambda_t) {
    BinnedRecon rec = binned_cs_recon(ks, maps, bins, lambda_t, 0.0f, 40);
    double d = 0;
    for (std::int64_t i = 0; i < g.voxels(); ++i)
      d += std::norm(rec.volume(0, 0)[i] - rec.volume(1, 0)[i]);
    return std::sqrt(d);
  };
  const double g0 = gap(0.0f), g1 = gap(1.0f), g2 = gap(10.0f);
  CHECK(g1 < g0);
  CHECK(g2 < g1);
}

TEST_CASE("spatial regularization smooths the solution") {
  const Grid g{12, 10, 8};
  const int T = 5;
  ImageSeries truth = static_series(g, T);
  auto maps = acquisition::synthesize_coil_maps(g, 1, 1, /*uniform=*/true);
  auto pattern = acquisition::opra_pattern(T, g.n2 * g.n3, g.n2, g.n3, 0);
  auto ks = acquisition::simulate_acquisition(truth, maps, pattern, 0.05f, 9);
  BinAssignment bins = all_in_one_bin(T);

  auto roughness = [&](float lambda_s) {
    BinnedRecon rec = binned_cs_recon(ks, maps, bins, 0.0f, lambda_s, 30);
    double e = 0;
    const cfloat *v = rec.volume(0, 0);
    for (int i1 = 0; i1 + 1 < g.n1; ++i1)
      for (int i2 = 0; i2 < g.n2; ++i2)
        for (int i3 = 0; i3 < g.n3; ++i3)
          e += std::norm(v[voxel_index(g, i1 + 1, i2, i3)] - v[voxel_index(g, i1, i2, i3)]);
    return e;
  };
  CHECK(roughness(2.0f) < roughness(0.0f));
}

TEST_CASE("binned recon rejects inconsistent inputs") {
  const Grid g{16, 12, 10};
  ImageSeries truth = static_series(g, 3);
  auto maps = acquisition::synthesize_coil_maps(g, 1, 1, /*uniform=*/true);
  auto pattern = acquisition::opra_pattern(3, 8, g.n2, g.n3, 4, 1);
  auto ks = acquisition::simulate_acquisition(truth, maps, pattern, 0.0f, 1);

  BinAssignment wrong = all_in_one_bin(5);  // frame count mismatch
  CHECK_THROWS_AS(binned_cs_recon(ks, maps, wrong, 0.0f, 0.0f, 5), ContractError);

  BinAssignment none = all_in_one_bin(3);
  std::fill(none.rejected.begin(), none.rejected.end(), true);
  CHECK_THROWS_AS(binned_cs_recon(ks, maps, none, 0.0f, 0.0f, 5), InsufficientDataError);

  BinAssignment ok = all_in_one_bin(3);
  CHECK_THROWS_AS(binned_cs_recon(ks, maps, ok, -1.0f, 0.0f, 5), ContractError);
  CHECK_THROWS_AS(binned_cs_recon(ks, maps, ok, 0.0f, 0.0f, 0), ContractError);
}
