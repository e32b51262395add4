// Acceptance gate: one pass/fail line per criterion (A1..A10), pinned
// tolerances, nonzero exit when any criterion fails. Criteria can be selected
// on the command line (default: all), e.g. `acceptance A1 A3 A8`.

#include "mldip/baselines.hpp"
#include "mldip/eval.hpp"
#include "mldip/gating.hpp"
#include "mldip/harness.hpp"
#include "mldip/io.hpp"
#include "mldip/mldip.hpp"
#include "mldip/phantom.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace mldip;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome fail(std::string detail) { return {false, std::move(detail)}; }
Outcome pass(std::string detail) { return {true, std::move(detail)}; }

std::string fmt(const char *f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

fs::path work_dir() {
  const char *root = std::getenv("MLDIP_OUTPUT_ROOT");
  fs::path p = root && *root ? fs::path(root) : fs::temp_directory_path();
  p /= "mldip-acceptance";
  fs::create_directories(p);
  return p;
}

// ---- shared desk-scale state (A4..A7, A9) -----------------------------------

/// The desk experiment: default phantom (64x56x46, T=358, one PVC per
/// respiratory cycle), 8 coils, 11 readouts/frame, sigma=0.01, seed 1.
struct DeskData {
  phantom::PhantomConfig pcfg;
  phantom::PhantomSeries ph;
  acquisition::CoilMaps maps;
  acquisition::KSpaceSeries ks;
  gating::LatentInit latent;
};

const DeskData &desk() {
  static const DeskData d = [] {
    DeskData x;
    x.pcfg.seed = 1;
    x.ph = phantom::generate_phantom_series(x.pcfg);
    x.maps = acquisition::synthesize_coil_maps(x.ph.images.grid, 8,
                                               std::uint32_t(stream_seed(1, 2)));
    auto pattern = acquisition::opra_pattern(x.ph.images.frames, 11, x.ph.images.grid.n2,
                                             x.ph.images.grid.n3, 11 / 2,
                                             std::uint32_t(stream_seed(1, 3)));
    x.ks = acquisition::simulate_acquisition(x.ph.images, x.maps, pattern, 0.01f,
                                             stream_seed(1, 4));
    x.latent = gating::extract_motion_components(
        gating::extract_central_lines(x.ks, 1000.0f / 33.0f));
    return x;
  }();
  return d;
}

ImageSeries slice_window(const ImageSeries &s, int first, int count) {
  ImageSeries out(s.grid, count);
  std::copy(s.frame(first), s.frame(first) + std::size_t(count) * s.grid.voxels(),
            out.data.begin());
  return out;
}

LabelSeries slice_window(const LabelSeries &s, int first, int count) {
  LabelSeries out(s.grid, count);
  std::copy(s.frame(first), s.frame(first) + std::size_t(count) * s.grid.voxels(),
            out.data.begin());
  return out;
}

acquisition::KSpaceSeries truncate_ks(const acquisition::KSpaceSeries &ks, int T) {
  acquisition::KSpaceSeries out = ks;
  out.frames = T;
  out.data.resize(std::size_t(T) * ks.samples_per_frame());
  out.pattern.frames = T;
  out.pattern.ky.resize(std::size_t(T) * ks.pattern.n_ro);
  out.pattern.kz.resize(std::size_t(T) * ks.pattern.n_ro);
  return out;
}

double pearson(const std::vector<double> &a, const std::vector<double> &b) {
  const std::size_t n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(n);
  mb /= double(n);
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va <= 0 || vb <= 0) return 0.0;
  return cov / std::sqrt(va * vb);
}

// Results of the A5 desk run, reused by A6 and A7.
struct DeskRun {
  model::TrainedModel trained;
  double psnr_mldip = 0, psnr_zf = 0, psnr_ft = 0;
  double corr_min_pvc = 1.0;
  int pvc_beats = 0;
  double ef_mad = -1.0;
  double train_seconds = 0;
};
std::optional<DeskRun> g_desk_run;

const DeskRun &desk_run() {
  if (g_desk_run) return *g_desk_run;
  const DeskData &d = desk();
  DeskRun r;

  auto cfg = model::ModelConfig::desk_default();
  cfg.seed = 1;
  const auto t0 = std::chrono::steady_clock::now();
  r.trained = model::train(d.ks, d.maps, d.latent, cfg);
  r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  model::save_model(r.trained, (work_dir() / "a5_model.mdl1").string());

  const int wn = 100;
  const ImageSeries truth_w = slice_window(d.ph.images, 0, wn);
  const LabelSeries labels_w = slice_window(d.ph.labels, 0, wn);
  const ImageSeries recon = model::infer(r.trained, 1, wn);
  io::write_dvs(recon, (work_dir() / "a5_recon.dvs").string());
  r.psnr_mldip = eval::psnr(truth_w, recon);

  {
    ImageSeries zf(truth_w.grid, wn);
    for (int t = 0; t < wn; ++t)
      acquisition::adjoint(d.ks.frame(t), d.maps, d.ks.pattern, t, zf.frame(t));
    r.psnr_zf = eval::psnr(truth_w, zf);
  }
  {
    auto ft_cfg = cfg;
    auto ft = baselines::fixed_template_train(d.ks, d.maps, d.latent, ft_cfg);
    r.psnr_ft = eval::psnr(truth_w, model::infer(ft, 1, wn));
  }

  // Per-beat volume-curve agreement and EF on complete beats in the window.
  phantom::PhantomSeries window_truth;
  window_truth.images = truth_w;
  window_truth.labels = labels_w;
  window_truth.voxel_size_mm = d.pcfg.voxel_size_mm;
  const std::vector<double> tc = phantom::truth_volume_curve(window_truth);
  const std::vector<double> rc = eval::volume_curve(recon, labels_w, d.pcfg.voxel_size_mm);
  std::vector<int> bounds;
  for (int b : d.ph.schedule.beat_boundaries())
    if (b <= wn) bounds.push_back(b);
  const auto truth_ef = eval::ef_metrics(tc, bounds);
  const auto recon_ef = eval::ef_metrics(rc, bounds);
  double mad = 0;
  int valid = 0;
  for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
    std::vector<double> ta(tc.begin() + bounds[i], tc.begin() + bounds[i + 1]);
    std::vector<double> ra(rc.begin() + bounds[i], rc.begin() + bounds[i + 1]);
    const double corr = pearson(ta, ra);
    if (d.ph.schedule.is_pvc[std::size_t(bounds[i])]) {
      ++r.pvc_beats;
      r.corr_min_pvc = std::min(r.corr_min_pvc, corr);
    }
    if (truth_ef[i].valid && recon_ef[i].valid) {
      mad += std::abs(truth_ef[i].ef - recon_ef[i].ef);
      ++valid;
    }
  }
  if (valid > 0) r.ef_mad = mad / double(valid);

  g_desk_run = std::move(r);
  return *g_desk_run;
}

// ---- A1 ----------------------------------------------------------------------

std::vector<cfloat> direct_dft3(const std::vector<cfloat> &x, const Grid &g) {
  std::vector<cfloat> out(std::size_t(g.voxels()), cfloat{});
  const double tau = 2.0 * 3.14159265358979323846;
  for (int k1 = 0; k1 < g.n1; ++k1)
    for (int k2 = 0; k2 < g.n2; ++k2)
      for (int k3 = 0; k3 < g.n3; ++k3) {
        std::complex<double> acc{};
        for (int i1 = 0; i1 < g.n1; ++i1)
          for (int i2 = 0; i2 < g.n2; ++i2)
            for (int i3 = 0; i3 < g.n3; ++i3) {
              const double ph = -tau * (double(k1) * i1 / g.n1 + double(k2) * i2 / g.n2 +
                                        double(k3) * i3 / g.n3);
              const cfloat v = x[std::size_t(voxel_index(g, i1, i2, i3))];
              acc += std::complex<double>(v.real(), v.imag()) *
                     std::complex<double>(std::cos(ph), std::sin(ph));
            }
        acc /= std::sqrt(double(g.voxels()));
        out[std::size_t(voxel_index(g, k1, k2, k3))] = cfloat(float(acc.real()), float(acc.imag()));
      }
  return out;
}

std::complex<double> cdot(const std::vector<cfloat> &a, const std::vector<cfloat> &b) {
  std::complex<double> acc{};
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += std::complex<double>(a[i].real(), a[i].imag()) *
           std::complex<double>(b[i].real(), -b[i].imag());
  return acc;
}

Outcome run_a1() {
  std::mt19937 rng(2024);
  std::uniform_real_distribution<float> uf(-1.0f, 1.0f);
  double worst = 0;
  for (int inst = 0; inst < 50; ++inst) {
    const Grid g{int(5 + rng() % 5), int(4 + rng() % 5), int(4 + rng() % 4)};
    const int nc = 1 + int(rng() % 3);
    const int n_ro = 1 + int(rng() % std::max(1, g.n2 * g.n3 / 4));
    auto maps = acquisition::synthesize_coil_maps(g, nc, std::uint32_t(rng()));
    auto pat = acquisition::opra_pattern(1, n_ro, g.n2, g.n3, 0, std::uint32_t(rng()));

    std::vector<cfloat> x(std::size_t(g.voxels()), cfloat{});
    for (auto &v : x) v = cfloat(uf(rng), uf(rng));
    std::vector<cfloat> y(std::size_t(nc) * n_ro * g.n1, cfloat{});
    for (auto &v : y) v = cfloat(uf(rng), uf(rng));

    std::vector<cfloat> ax(y.size(), cfloat{});
    acquisition::forward(x.data(), maps, pat, 0, ax.data());
    std::vector<cfloat> aty(x.size(), cfloat{});
    acquisition::adjoint(y.data(), maps, pat, 0, aty.data());

    const std::complex<double> lhs = cdot(ax, y), rhs = cdot(x, aty);
    const double rel = std::abs(lhs - rhs) / std::max(1e-30, std::abs(lhs));
    worst = std::max(worst, rel);
  }
  if (worst >= 1e-5)
    return fail(fmt("inner-product relative error %.3g >= 1e-5", worst));

  // DFT oracle on 4x4x4, uniform single coil, DC-bearing pattern.
  const Grid g{4, 4, 4};
  auto maps = acquisition::synthesize_coil_maps(g, 1, 0, /*uniform=*/true);
  auto pat = acquisition::opra_pattern(1, 5, g.n2, g.n3, 2, 99);
  std::vector<cfloat> x(std::size_t(g.voxels()), cfloat{});
  for (auto &v : x) v = cfloat(uf(rng), uf(rng));
  auto oracle = direct_dft3(x, g);
  std::vector<cfloat> out(std::size_t(pat.n_ro) * g.n1, cfloat{});
  acquisition::forward(x.data(), maps, pat, 0, out.data());
  double dft_err = 0;
  for (int j = 0; j < pat.n_ro; ++j)
    for (int i1 = 0; i1 < g.n1; ++i1) {
      const cfloat want = oracle[std::size_t(voxel_index(g, i1, pat.ky_at(0, j), pat.kz_at(0, j)))];
      dft_err = std::max(dft_err, double(std::abs(out[std::size_t(j) * g.n1 + i1] - want)));
    }
  if (dft_err >= 1e-6) return fail(fmt("DFT oracle error %.3g >= 1e-6", dft_err));
  return pass(fmt("adjoint rel err %.2g (50 instances), DFT oracle err %.2g", worst, dft_err));
}

// ---- A2 ----------------------------------------------------------------------

Outcome run_a2() {
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> uf(-1.0f, 1.0f);
  const Grid g{6, 5, 5};
  const std::int64_t n = g.voxels();
  std::vector<cfloat> c(std::size_t(n), cfloat{});
  for (auto &v : c) v = cfloat(uf(rng), uf(rng));

  // Identity: exact.
  std::vector<float> zero_phi(std::size_t(3) * n, 0.0f);
  auto id = model::warp_volume(c, zero_phi, g);
  for (std::int64_t i = 0; i < n; ++i)
    if (id[std::size_t(i)] != c[std::size_t(i)]) return fail("identity warp is not exact");

  // Integer shift: exact on the interior.
  const int s1 = 1, s2 = -1, s3 = 2;
  std::vector<float> shift(std::size_t(3) * n, 0.0f);
  for (std::int64_t i = 0; i < n; ++i) {
    shift[std::size_t(i)] = float(s1);
    shift[std::size_t(n + i)] = float(s2);
    shift[std::size_t(2 * n + i)] = float(s3);
  }
  auto sh = model::warp_volume(c, shift, g);
  for (int i1 = 0; i1 < g.n1; ++i1)
    for (int i2 = 0; i2 < g.n2; ++i2)
      for (int i3 = 0; i3 < g.n3; ++i3) {
        const int j1 = i1 + s1, j2 = i2 + s2, j3 = i3 + s3;
        if (j1 < 0 || j1 >= g.n1 || j2 < 0 || j2 >= g.n2 || j3 < 0 || j3 >= g.n3) continue;
        if (sh[std::size_t(voxel_index(g, i1, i2, i3))] !=
            c[std::size_t(voxel_index(g, j1, j2, j3))])
          return fail("integer-shift warp is not exact on the interior");
      }

  // Linearity in the image argument.
  std::vector<cfloat> c2(std::size_t(n), cfloat{});
  for (auto &v : c2) v = cfloat(uf(rng), uf(rng));
  std::vector<float> phi(std::size_t(3) * n, 0.0f);
  for (auto &v : phi) v = 1.3f * uf(rng);
  const cfloat a(0.7f, -0.2f), b(-0.4f, 0.9f);
  std::vector<cfloat> mixv(std::size_t(n), cfloat{});
  for (std::int64_t i = 0; i < n; ++i)
    mixv[std::size_t(i)] = a * c[std::size_t(i)] + b * c2[std::size_t(i)];
  auto wm = model::warp_volume(mixv, phi, g);
  auto w1 = model::warp_volume(c, phi, g);
  auto w2 = model::warp_volume(c2, phi, g);
  double lin_err = 0;
  for (std::int64_t i = 0; i < n; ++i)
    lin_err = std::max(lin_err, double(std::abs(wm[std::size_t(i)] - (a * w1[std::size_t(i)] +
                                                                      b * w2[std::size_t(i)]))));
  if (lin_err >= 1e-6) return fail(fmt("warp linearity error %.3g >= 1e-6", lin_err));

  // Loss gradient vs central finite differences on a 4x4x4 toy: the composed
  // objective warp -> data consistency + smoothness, differentiated w.r.t.
  // both the image and the deformation field.
  const Grid tg{4, 4, 4};
  const std::int64_t tn = tg.voxels();
  ImageSeries toy(tg, 1);
  for (auto &v : toy.data) v = cfloat(uf(rng), uf(rng));
  auto tmaps = acquisition::synthesize_coil_maps(tg, 2, 5);
  auto tpat = acquisition::opra_pattern(1, 6, tg.n2, tg.n3, 3, 17);
  auto tks = acquisition::simulate_acquisition(toy, tmaps, tpat, 0.0f, 3);

  nn::Variable img("img", {2, int(tn)});
  nn::Variable phiv("phi", {3, tg.n1, tg.n2, tg.n3});
  for (auto &v : img.value) v = uf(rng);
  // Fractional displacements in [0.2, 0.45]: a +-0.05 FD step never crosses
  // an integer lattice point, where trilinear interpolation has kinks.
  std::uniform_real_distribution<float> frac(0.2f, 0.45f);
  for (auto &v : phiv.value) v = frac(rng);
  auto build = [&](nn::Tape &tp) {
    auto x = tp.reshape(tp.leaf(img), {2, tg.n1, tg.n2, tg.n3});
    auto warped = tp.warp(x, tp.leaf(phiv));
    auto dc = tp.dc_loss(tp.reshape(warped, {2, int(tn)}), tks, tmaps, 0);
    return tp.add(dc, tp.scale(tp.fd_reg(tp.leaf(phiv)), 0.1f));
  };
  const double grad_err = nn::gradcheck(build, {&img, &phiv}, 0.05f);
  if (grad_err >= 1e-3)
    return fail(fmt("loss gradient vs central FD relative error %.3g >= 1e-3", grad_err));
  return pass(fmt("identity/shift exact, linearity %.2g, gradcheck %.2g", lin_err, grad_err));
}

// ---- A3 ----------------------------------------------------------------------

Outcome run_a3() {
  const auto p1 = acquisition::opra_pattern(8, 11, 112, 92, 5);
  const auto p2 = acquisition::opra_pattern(8, 11, 144, 80, 5);
  const int r1 = int(acquisition::acceleration_rate(p1));
  const int r2 = int(acquisition::acceleration_rate(p2));
  if (r1 != 936) return fail(fmt("acceleration_rate(112,92,11) = %d, want 936", r1));
  if (r2 != 1047) return fail(fmt("acceleration_rate(144,80,11) = %d, want 1047", r2));
  return pass("R(112x92/11) = 936, R(144x80/11) = 1047");
}

// ---- A4 ----------------------------------------------------------------------

Outcome run_a4() {
  const DeskData &d = desk();
  const int T = d.latent.frames;
  const float fs = 1000.0f / 33.0f;

  // Dominant respiratory frequency of the first latent column via a direct
  // periodogram (the series is short).
  double best_pow = -1, best_f = 0;
  for (int k = 1; k <= T / 2; ++k) {
    std::complex<double> acc{};
    for (int t = 0; t < T; ++t) {
      const double ph = -2.0 * 3.14159265358979 * k * t / T;
      acc += double(d.latent.at(t, 0)) * std::complex<double>(std::cos(ph), std::sin(ph));
    }
    const double p = std::norm(acc);
    if (p > best_pow) {
      best_pow = p;
      best_f = double(k) * fs / T;
    }
  }
  const double true_resp = double(d.pcfg.n_resp_cycles) * fs / T;
  const double resp_err = std::abs(best_f - true_resp) / true_resp;
  if (resp_err >= 0.10)
    return fail(fmt("resp frequency %.3f Hz vs truth %.3f Hz (err %.1f%% >= 10%%)", best_f,
                    true_resp, 100 * resp_err));

  // Beat boundaries within +-2 frames for >= 90% of regular beats. The
  // detected boundaries carry a constant latency (the phase of the cardiac
  // latent peak relative to the schedule's beat start is arbitrary), so the
  // criterion is evaluated after removing the median offset.
  const auto det = gating::detect_beats(d.latent);
  if (det.size() < 2) return fail("detect_beats found fewer than 2 boundaries");
  auto truth_bounds = d.ph.schedule.beat_boundaries();
  truth_bounds.pop_back();  // terminator
  std::vector<int> regular_bounds;
  for (int b : truth_bounds)
    if (!d.ph.schedule.is_pvc[std::size_t(b)]) regular_bounds.push_back(b);
  int matched = 0, lag = 0;
  for (int cand = -15; cand <= 15; ++cand) {
    int hits = 0;
    for (int b : regular_bounds) {
      int best = 1 << 30;
      for (int x : det) best = std::min(best, std::abs(x - (b + cand)));
      if (best <= 2) ++hits;
    }
    if (hits > matched) {
      matched = hits;
      lag = cand;
    }
  }
  const double frac = double(matched) / double(regular_bounds.size());
  if (frac < 0.9)
    return fail(fmt("only %.0f%% of regular beat boundaries within +-2 frames (lag %d)",
                    100 * frac, lag));

  // Every PVC beat is a duration outlier among the detected beats. Detected
  // intervals are peak-to-peak, which blends adjacent beat durations, and
  // with one PVC per 4-beat cycle half the intervals are PVC-affected; the
  // regular beats still form the longest cluster, so the pinned test is:
  // the detected beat containing the PVC start is >15% shorter than the
  // 75th percentile of all detected durations.
  std::vector<int> dets = det;
  dets.push_back(T);
  std::vector<int> durs;
  for (std::size_t i = 0; i + 1 < dets.size(); ++i) durs.push_back(dets[i + 1] - dets[i]);
  std::vector<int> sorted = durs;
  std::sort(sorted.begin(), sorted.end());
  const double ref_dur = sorted[sorted.size() * 3 / 4];
  int pvc_total = 0, pvc_outliers = 0;
  for (int b : truth_bounds) {
    if (!d.ph.schedule.is_pvc[std::size_t(b)]) continue;
    ++pvc_total;
    // Detected beat containing the PVC start.
    for (std::size_t i = 0; i + 1 < dets.size(); ++i)
      if (dets[i] <= b && b < dets[i + 1]) {
        if (durs[i] < 0.85 * ref_dur) ++pvc_outliers;
        break;
      }
  }
  if (pvc_outliers != pvc_total)
    return fail(fmt("%d of %d PVC beats detected as duration outliers", pvc_outliers, pvc_total));
  return pass(fmt("resp freq err %.1f%%, %.0f%% boundaries within +-2, %d/%d PVC outliers",
                  100 * resp_err, 100 * frac, pvc_outliers, pvc_total));
}

// ---- A5 / A6 -------------------------------------------------------------------

Outcome run_a5() {
  const DeskRun &r = desk_run();
  std::string detail =
      fmt("PSNR mldip %.2f / zf %.2f / fixed-template %.2f dB; PVC corr %.3f (%d beats); "
          "train %.0f s",
          r.psnr_mldip, r.psnr_zf, r.psnr_ft, r.corr_min_pvc, r.pvc_beats, r.train_seconds);
  if (r.psnr_mldip < r.psnr_zf + 6.0) return fail(detail + "; mldip < zf + 6 dB");
  if (r.psnr_mldip < r.psnr_ft + 1.0) return fail(detail + "; mldip < fixed-template + 1 dB");
  if (r.pvc_beats < 1) return fail(detail + "; no PVC beat in the evaluation window");
  if (r.corr_min_pvc <= 0.9) return fail(detail + "; PVC volume-curve correlation <= 0.9");
  if (r.train_seconds > 6 * 3600) return fail(detail + "; training exceeded 6 h CPU budget");
  return pass(detail);
}

Outcome run_a6() {
  const DeskRun &r = desk_run();
  if (r.ef_mad < 0) return fail("no valid beats for EF comparison");
  if (r.ef_mad > 5.0) return fail(fmt("per-beat EF MAD %.2f > 5 EF points", r.ef_mad));
  return pass(fmt("per-beat EF MAD %.2f EF points", r.ef_mad));
}

// ---- A7 ----------------------------------------------------------------------

Outcome run_a7() {
  const DeskData &d = desk();
  const double psnr358 = desk_run().psnr_mldip;

  auto psnr_for = [&](int T) {
    auto ks = truncate_ks(d.ks, T);
    auto latent =
        gating::extract_motion_components(gating::extract_central_lines(ks, 1000.0f / 33.0f));
    auto cfg = model::ModelConfig::desk_default();
    cfg.seed = 1;
    auto trained = model::train(ks, d.maps, latent, cfg);
    const int wn = std::min(100, T);
    return eval::psnr(slice_window(d.ph.images, 0, wn), model::infer(trained, 1, wn));
  };
  const double psnr143 = psnr_for(143);
  const double psnr36 = psnr_for(36);

  const std::string detail =
      fmt("PSNR T=358 %.2f, T=143 %.2f, T=36 %.2f dB", psnr358, psnr143, psnr36);
  if (psnr358 < psnr143 - 0.3) return fail(detail + "; PSNR(358) < PSNR(143) - 0.3");
  if (psnr143 < psnr36 - 0.3) return fail(detail + "; PSNR(143) < PSNR(36) - 0.3");
  if (psnr358 - psnr36 < 2.0) return fail(detail + "; PSNR(358) - PSNR(36) < 2 dB");
  return pass(detail);
}

// ---- A8 ----------------------------------------------------------------------

Outcome run_a8() {
  auto cfg = model::ModelConfig::paper_scale();
  auto m = model::build_model(cfg, Grid{110, 112, 92}, 8950, nullptr);

  const double count = double(m.parameter_count());
  if (count < 17e6 * 0.8 || count > 17e6 * 1.2)
    return fail(fmt("parameter count %.0f outside 17M +- 20%%", count));

  auto shape_is = [](const nn::Variable &v, std::vector<int> want) { return v.dims == want; };
  // ConvDecoder: five blocks of three units at widths 256,256,128,128,64,
  // two trailing units at 64, final linear conv to L1.
  const int cw[] = {256, 256, 128, 128, 64};
  if (m.gdelta.units.size() != 17) return fail("ConvDecoder unit count != 17");
  int prev = 2;
  for (int b = 0; b < 5; ++b)
    for (int u = 0; u < 3; ++u) {
      const auto &unit = m.gdelta.units[std::size_t(b * 3 + u)];
      if (!shape_is(unit.w, {cw[b], prev, 3, 3, 3}))
        return fail(fmt("ConvDecoder block %d unit %d shape mismatch", b, u));
      prev = cw[b];
    }
  for (int u = 15; u < 17; ++u)
    if (!shape_is(m.gdelta.units[std::size_t(u)].w, {64, 64, 3, 3, 3}))
      return fail("ConvDecoder trailing unit shape mismatch");
  if (!shape_is(m.gdelta.final_conv.w, {12, 64, 3, 3, 3}))
    return fail("ConvDecoder final conv shape mismatch");

  // U-Net: encoder 2->16->32->64->64->64, mirrored decoder (64,64,32,16 out
  // of concatenated skips), final conv to 2*L2 = 16.
  const int ew[] = {16, 32, 64, 64, 64};
  if (m.gbeta.enc.size() != 5) return fail("U-Net encoder stage count != 5");
  prev = 2;
  for (int i = 0; i < 5; ++i) {
    if (!shape_is(m.gbeta.enc[std::size_t(i)].w, {ew[i], prev, 3, 3, 3}))
      return fail(fmt("U-Net encoder stage %d shape mismatch", i));
    prev = ew[i];
  }
  const int dw_out[] = {64, 64, 32, 16};
  const int dw_in[] = {64 + 64, 64 + 64, 64 + 64, 32 + 32};
  if (m.gbeta.dec.size() != 4) return fail("U-Net decoder stage count != 4");
  for (int i = 0; i < 4; ++i)
    if (!shape_is(m.gbeta.dec[std::size_t(i)].w, {dw_out[i], dw_in[i], 3, 3, 3}))
      return fail(fmt("U-Net decoder stage %d shape mismatch", i));
  if (!shape_is(m.gbeta.final_conv.w, {16, 16, 3, 3, 3}))
    return fail("U-Net final conv shape mismatch");

  // MLPs: 6->32->64->128->256->256->128->36 and 6->32->64->128->256->128->64->16.
  const int fw[][2] = {{6, 32}, {32, 64}, {64, 128}, {128, 256}, {256, 256}, {256, 128}, {128, 36}};
  const int iw[][2] = {{6, 32}, {32, 64}, {64, 128}, {128, 256}, {256, 128}, {128, 64}, {64, 16}};
  if (m.gomega.layers.size() != 7 || m.gnu.layers.size() != 7)
    return fail("MLP layer count != 7");
  for (int i = 0; i < 7; ++i) {
    if (!shape_is(m.gomega.layers[std::size_t(i)].w, {fw[i][1], fw[i][0]}))
      return fail(fmt("flow MLP layer %d shape mismatch", i));
    if (!shape_is(m.gnu.layers[std::size_t(i)].w, {iw[i][1], iw[i][0]}))
      return fail(fmt("image MLP layer %d shape mismatch", i));
  }
  return pass(fmt("parameter count %.2fM within 17M +- 20%%, all layer shapes match", count / 1e6));
}

// ---- A9 ----------------------------------------------------------------------

Outcome run_a9() {
  const DeskData &d = desk();
  const auto bins = baselines::bin_frames(d.ph.schedule, 20, 4, 0.2f);
  for (int t = 0; t < bins.frames(); ++t)
    if (bins.rejected[std::size_t(t)] != bool(d.ph.schedule.is_pvc[std::size_t(t)]))
      return fail(fmt("frame %d: rejection does not match the PVC flag", t));

  const auto br = baselines::binned_cs_recon(d.ks, d.maps, bins, 0.05f, 0.001f, 30);
  const std::int64_t nv = br.grid.voxels();

  // Per-beat cardiac-cycle curves assembled from the binned volumes: beats in
  // the same respiratory bin draw from identical volumes, so beat-to-beat
  // variance is zero by construction. Verify on the blood-proxy magnitude.
  std::vector<double> bin_mean(std::size_t(br.n_card) * br.n_resp, 0.0);
  for (int c = 0; c < br.n_card; ++c)
    for (int r = 0; r < br.n_resp; ++r) {
      const cfloat *v = br.volume(c, r);
      double s = 0;
      for (std::int64_t i = 0; i < nv; ++i) s += std::abs(v[i]);
      bin_mean[std::size_t(r) * br.n_card + c] = s / double(nv);
    }
  // Every accepted frame of the output series draws from the shared bin
  // volume for its (cardiac, respiratory) state: when two different beats
  // revisit the same state they reconstruct the identical value, so the
  // beat-to-beat volume variance is zero by construction (no PVC event can
  // appear — its frames were all rejected above).
  std::map<std::pair<int, int>, std::pair<int, double>> seen;  // bin -> (beat, value)
  double max_dev = 0;
  long cross_beat_pairs = 0;
  for (int t = 0; t < bins.frames(); ++t) {
    if (bins.rejected[std::size_t(t)]) continue;
    const int c = bins.cardiac_bin[std::size_t(t)];
    const int r = bins.resp_bin[std::size_t(t)];
    const int beat = d.ph.schedule.beat_index[std::size_t(t)];
    const double value = bin_mean[std::size_t(r) * br.n_card + c];
    auto [it, fresh] = seen.try_emplace({c, r}, beat, value);
    if (!fresh && it->second.first != beat) {
      ++cross_beat_pairs;
      max_dev = std::max(max_dev, std::abs(value - it->second.second));
    }
  }
  if (cross_beat_pairs < 1) return fail("no bin is revisited by a different beat");
  if (max_dev != 0.0)
    return fail(fmt("beat-to-beat volume deviation %.3g != 0 over %ld revisits", max_dev,
                    cross_beat_pairs));
  return pass(fmt("rejection matches PVC flags on all %d frames; beat-to-beat variance 0 "
                  "over %ld cross-beat bin revisits",
                  bins.frames(), cross_beat_pairs));
}

// ---- A10 -----------------------------------------------------------------------

Outcome run_a10() {
  // Determinism is independent of the iteration count; the desk-default
  // pipeline is repeated at a reduced count to keep the gate under A5 x 2.
  harness::ExperimentConfig cfg = harness::ExperimentConfig::desk_default();
  cfg.model.iterations = 50;
  cfg.output_dir = (work_dir() / "a10_run").string();
  fs::remove_all(cfg.output_dir);

  auto res1 = harness::run_experiment(cfg);
  if (!res1.ok) return fail("first run failed at stage " + res1.failed_stage + ": " + res1.error);
  std::string manifest1;
  {
    std::ifstream f(fs::path(res1.output_dir) / "manifest.tsv");
    std::stringstream ss;
    ss << f.rdbuf();
    manifest1 = ss.str();
  }
  auto res2 = harness::run_experiment(cfg);
  if (!res2.ok) return fail("second run failed at stage " + res2.failed_stage);
  std::string manifest2;
  {
    std::ifstream f(fs::path(res2.output_dir) / "manifest.tsv");
    std::stringstream ss;
    ss << f.rdbuf();
    manifest2 = ss.str();
  }
  if (manifest1 != manifest2 || manifest1.empty())
    return fail("repeated desk-default runs are not hash-identical");

  // Checkpoint round trip: save -> load -> save is bit-exact.
  const std::string m1 = (fs::path(res1.output_dir) / "model.mdl1").string();
  const std::string m2 = (work_dir() / "a10_model_rt.mdl1").string();
  model::save_model(model::load_model(m1), m2);
  if (io::sha256_file(m1) != io::sha256_file(m2))
    return fail("checkpoint round trip is not bit-exact");

  // DVS round trip: read -> write is bit-exact.
  const std::string d1 = (fs::path(res1.output_dir) / "recon_mldip.dvs").string();
  const std::string d2 = (work_dir() / "a10_dvs_rt.dvs").string();
  io::write_dvs(io::read_dvs_complex(d1), d2);
  if (io::sha256_file(d1) != io::sha256_file(d2)) return fail("DVS round trip is not bit-exact");
  return pass("repeated runs hash-identical; checkpoint and DVS round trips bit-exact");
}

}  // namespace

int main(int argc, char **argv) {
  std::vector<std::string> want(argv + 1, argv + argc);
  auto selected = [&](const char *id) {
    return want.empty() || std::find(want.begin(), want.end(), id) != want.end();
  };

  const std::vector<std::pair<const char *, Outcome (*)()>> criteria = {
      {"A1", run_a1}, {"A2", run_a2}, {"A3", run_a3}, {"A4", run_a4}, {"A5", run_a5},
      {"A6", run_a6}, {"A7", run_a7}, {"A8", run_a8}, {"A9", run_a9}, {"A10", run_a10},
  };

  bool all_pass = true;
  for (const auto &[id, fn] : criteria) {
    if (!selected(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception &e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-4s %s  [%.1fs] %s\n", id, o.pass ? "PASS" : "FAIL", secs, o.detail.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  return all_pass ? 0 : 1;
}
