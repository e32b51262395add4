#include "mldip/baselines.hpp"

#include "mldip/fft.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mldip::baselines {

namespace {

constexpr float kPi = 3.14159265358979323846f;

// Shared binning core. `bounds` holds the first frame of each complete beat
// plus a terminating boundary; `card_phase` and `resp_amp` are per frame.
BinAssignment assign_bins(int frames, const std::vector<int> &bounds,
                          const std::vector<float> &card_phase, const std::vector<float> &resp_amp,
                          int n_card, int n_resp, float reject_threshold) {
  if (n_card < 1 || n_resp < 1) throw ContractError("bin_frames: bin counts must be positive");
  if (reject_threshold < 0) throw ContractError("bin_frames: reject_threshold must be >= 0");
  const int beats = int(bounds.size()) - 1;
  if (beats < 2) throw InsufficientDataError("bin_frames: need at least 2 complete beats");

  std::vector<int> dur(beats);
  for (int i = 0; i < beats; ++i) dur[i] = bounds[std::size_t(i) + 1] - bounds[std::size_t(i)];
  std::vector<int> sorted = dur;
  std::sort(sorted.begin(), sorted.end());
  const double median = beats % 2 ? sorted[std::size_t(beats) / 2]
                                  : 0.5 * (sorted[std::size_t(beats) / 2 - 1] +
                                           sorted[std::size_t(beats) / 2]);

  BinAssignment out;
  out.n_card = n_card;
  out.n_resp = n_resp;
  out.cardiac_bin.assign(std::size_t(frames), -1);
  out.resp_bin.assign(std::size_t(frames), -1);
  out.rejected.assign(std::size_t(frames), true);

  for (int i = 0; i < beats; ++i) {
    if (std::abs(double(dur[std::size_t(i)]) - median) > reject_threshold * median) continue;
    for (int t = bounds[std::size_t(i)]; t < bounds[std::size_t(i) + 1]; ++t) {
      out.rejected[std::size_t(t)] = false;
      out.cardiac_bin[std::size_t(t)] =
          std::min(int(card_phase[std::size_t(t)] * float(n_card)), n_card - 1);
    }
  }

  // Respiratory bins: amplitude quantiles over the surviving frames.
  std::vector<float> amps;
  for (int t = 0; t < frames; ++t)
    if (!out.rejected[std::size_t(t)]) amps.push_back(resp_amp[std::size_t(t)]);
  if (amps.empty()) throw InsufficientDataError("bin_frames: every beat was rejected");
  std::sort(amps.begin(), amps.end());
  std::vector<float> cut(std::size_t(n_resp) - 1);
  for (int k = 1; k < n_resp; ++k)
    cut[std::size_t(k) - 1] = amps[std::min(amps.size() - 1, std::size_t(k) * amps.size() /
                                                                 std::size_t(n_resp))];
  for (int t = 0; t < frames; ++t) {
    if (out.rejected[std::size_t(t)]) continue;
    int b = 0;
    for (float c : cut)
      if (resp_amp[std::size_t(t)] >= c) ++b;
    out.resp_bin[std::size_t(t)] = std::min(b, n_resp - 1);
  }
  return out;
}

void check_shapes(const acquisition::KSpaceSeries &ks, const acquisition::CoilMaps &maps,
                  const char *op) {
  if (maps.grid != ks.grid() || maps.n_coils != ks.n_coils)
    throw ContractError(std::string(op) + ": coil maps do not match the k-space series");
}

}  // namespace

BinAssignment bin_frames(const phantom::MotionSchedule &schedule, int n_card, int n_resp,
                         float reject_threshold) {
  const int frames = schedule.frames();
  // Respiratory amplitude = the phantom's displacement waveform (position,
  // not phase, so inhale and exhale frames at the same position share a bin).
  std::vector<float> amp(std::size_t(frames), 0.0f);
  for (int t = 0; t < frames; ++t) {
    const float s = std::sin(kPi * schedule.resp_phase[std::size_t(t)]);
    amp[std::size_t(t)] = s * s;
  }
  return assign_bins(frames, schedule.beat_boundaries(), schedule.cardiac_phase, amp, n_card,
                     n_resp, reject_threshold);
}

BinAssignment bin_frames(const gating::LatentInit &latent, int n_card, int n_resp,
                         float reject_threshold) {
  const int frames = latent.frames;
  std::vector<int> bounds = gating::detect_beats(latent);
  if (int(bounds.size()) < 2)
    throw InsufficientDataError("bin_frames: need at least 2 complete beats");
  // detect_beats yields beat starts; the span past the last start is an
  // incomplete beat, so the last start terminates the usable range.
  std::vector<float> phase(std::size_t(frames), 0.0f);
  for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
    const int s = bounds[i], e = bounds[i + 1];
    for (int t = s; t < e; ++t) phase[std::size_t(t)] = float(t - s) / float(e - s);
  }
  std::vector<float> amp(std::size_t(frames), 0.0f);
  for (int t = 0; t < frames; ++t) amp[std::size_t(t)] = latent.at(t, 0);
  return assign_bins(frames, bounds, phase, amp, n_card, n_resp, reject_threshold);
}

void write_bin_table(const BinAssignment &bins, const std::string &path) {
  std::ofstream f(path);
  if (!f) throw FormatError("write_bin_table: cannot open " + path);
  f << "# frame\tcardiac_bin\tresp_bin\trejected\n";
  f << "bins\t" << bins.n_card << "\t" << bins.n_resp << "\n";
  for (int t = 0; t < bins.frames(); ++t)
    f << t << "\t" << bins.cardiac_bin[std::size_t(t)] << "\t" << bins.resp_bin[std::size_t(t)]
      << "\t" << int(bins.rejected[std::size_t(t)]) << "\n";
  if (!f) throw FormatError("write_bin_table: write failed for " + path);
}

BinAssignment read_bin_table(const std::string &path) {
  std::ifstream f(path);
  if (!f) throw FormatError("read_bin_table: cannot open " + path);
  BinAssignment out;
  std::string line;
  bool have_counts = false;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!have_counts) {
      char tag[8];
      if (std::sscanf(line.c_str(), "%7s %d %d", tag, &out.n_card, &out.n_resp) != 3 ||
          std::string(tag) != "bins" || out.n_card < 1 || out.n_resp < 1)
        throw FormatError("read_bin_table: malformed header in " + path);
      have_counts = true;
      continue;
    }
    int t, c, r, rej;
    if (std::sscanf(line.c_str(), "%d %d %d %d", &t, &c, &r, &rej) != 4 ||
        t != int(out.rejected.size()))
      throw FormatError("read_bin_table: malformed row in " + path);
    out.cardiac_bin.push_back(c);
    out.resp_bin.push_back(r);
    out.rejected.push_back(rej != 0);
  }
  if (!have_counts) throw FormatError("read_bin_table: missing header in " + path);
  return out;
}

ImageSeries zero_filled_recon(const acquisition::KSpaceSeries &ks,
                              const acquisition::CoilMaps &maps) {
  check_shapes(ks, maps, "zero_filled_recon");
  ImageSeries out(ks.grid(), ks.frames);
  for (int t = 0; t < ks.frames; ++t)
    acquisition::adjoint(ks.frame(t), maps, ks.pattern, t, out.frame(t));
  return out;
}

model::TrainedModel fixed_template_train(const acquisition::KSpaceSeries &ks,
                                         const acquisition::CoilMaps &maps,
                                         const gating::LatentInit &latent_init,
                                         model::ModelConfig cfg) {
  cfg.mode = model::TrainMode::FixedTemplate;
  cfg.L2 = 1;
  return model::train(ks, maps, latent_init, cfg);
}

// ---- binned CG reconstruction -----------------------------------------------

namespace {

struct NormalOp {
  const acquisition::CoilMaps *maps;
  Grid grid;
  int n_card, n_resp;
  float lambda_t, lambda_s;
  // Per bin, per (ky,kz) cell: how many pooled readouts sampled that column.
  std::vector<std::vector<float>> weight;

  int bins() const { return n_card * n_resp; }

  // y = (sum_t A_t^H A_t + lambda_s D^T D + lambda_t L_card) x
  void apply(const cfloat *x, cfloat *y) const {
    const std::int64_t nv = grid.voxels();
    const int pe = grid.n2 * grid.n3;
    std::vector<cfloat> work(std::size_t(nv), cfloat{});
    std::fill(y, y + std::size_t(bins()) * nv, cfloat{});
    for (int b = 0; b < bins(); ++b) {
      const cfloat *xb = x + std::size_t(b) * nv;
      cfloat *yb = y + std::size_t(b) * nv;
      const std::vector<float> &w = weight[std::size_t(b)];
      bool any = false;
      for (float v : w)
        if (v != 0.0f) {
          any = true;
          break;
        }
      if (any) {
        for (int c = 0; c < maps->n_coils; ++c) {
          const cfloat *s = maps->coil(c);
          for (std::int64_t i = 0; i < nv; ++i) work[std::size_t(i)] = s[i] * xb[i];
          fft::fft3(work.data(), grid, false);
          for (int i1 = 0; i1 < grid.n1; ++i1) {
            cfloat *plane = work.data() + std::size_t(i1) * pe;
            for (int j = 0; j < pe; ++j) plane[std::size_t(j)] *= w[std::size_t(j)];
          }
          fft::fft3(work.data(), grid, true);
          for (std::int64_t i = 0; i < nv; ++i)
            yb[i] += std::conj(s[i]) * work[std::size_t(i)];
        }
      }
      if (lambda_s > 0) add_spatial(xb, yb);
    }
    if (lambda_t > 0 && n_card > 1) {
      for (int r = 0; r < n_resp; ++r)
        for (int c = 0; c < n_card; ++c) {
          const cfloat *xc = x + (std::size_t(r) * n_card + c) * nv;
          const cfloat *xm = x + (std::size_t(r) * n_card + (c + n_card - 1) % n_card) * nv;
          const cfloat *xp = x + (std::size_t(r) * n_card + (c + 1) % n_card) * nv;
          cfloat *yc = y + (std::size_t(r) * n_card + c) * nv;
          for (std::int64_t i = 0; i < nv; ++i)
            yc[i] += lambda_t * (2.0f * xc[i] - xm[i] - xp[i]);
        }
    }
  }

  // y += lambda_s * D^T D x, forward differences along the three axes.
  void add_spatial(const cfloat *x, cfloat *y) const {
    const int n1 = grid.n1, n2 = grid.n2, n3 = grid.n3;
    auto idx = [&](int a, int b, int c) { return (std::int64_t(a) * n2 + b) * n3 + c; };
    for (int a = 0; a < n1; ++a)
      for (int b = 0; b < n2; ++b)
        for (int c = 0; c < n3; ++c) {
          const std::int64_t i = idx(a, b, c);
          cfloat acc{};
          if (a + 1 < n1) acc += x[i] - x[idx(a + 1, b, c)];
          if (a > 0) acc += x[i] - x[idx(a - 1, b, c)];
          if (b + 1 < n2) acc += x[i] - x[idx(a, b + 1, c)];
          if (b > 0) acc += x[i] - x[idx(a, b - 1, c)];
          if (c + 1 < n3) acc += x[i] - x[idx(a, b, c + 1)];
          if (c > 0) acc += x[i] - x[idx(a, b, c - 1)];
          y[i] += lambda_s * acc;
        }
  }
};

double dot_re(const std::vector<cfloat> &a, const std::vector<cfloat> &b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += double(a[i].real()) * b[i].real() + double(a[i].imag()) * b[i].imag();
  return acc;
}

}  // namespace

BinnedRecon binned_cs_recon(const acquisition::KSpaceSeries &ks, const acquisition::CoilMaps &maps,
                            const BinAssignment &bins, float lambda_t, float lambda_s,
                            int n_iters) {
  check_shapes(ks, maps, "binned_cs_recon");
  if (bins.frames() != ks.frames)
    throw ContractError("binned_cs_recon: bin assignment frame count mismatch");
  if (lambda_t < 0 || lambda_s < 0 || n_iters < 1)
    throw ContractError("binned_cs_recon: invalid regularization or iteration count");

  const Grid grid = ks.grid();
  const std::int64_t nv = grid.voxels();
  const int n_bins = bins.n_card * bins.n_resp;
  const int pe = grid.n2 * grid.n3;

  NormalOp op;
  op.maps = &maps;
  op.grid = grid;
  op.n_card = bins.n_card;
  op.n_resp = bins.n_resp;
  op.lambda_t = lambda_t;
  op.lambda_s = lambda_s;
  op.weight.assign(std::size_t(n_bins), std::vector<float>(std::size_t(pe), 0.0f));

  BinnedRecon out;
  out.grid = grid;
  out.n_card = bins.n_card;
  out.n_resp = bins.n_resp;
  out.frames_per_bin.assign(std::size_t(n_bins), 0);
  out.filled_from_neighbor.assign(std::size_t(n_bins), false);

  // Right-hand side: pooled adjoint per bin, plus the sampling multiplicity.
  std::vector<cfloat> rhs(std::size_t(n_bins) * nv, cfloat{});
  std::vector<cfloat> tmp(std::size_t(nv), cfloat{});
  for (int t = 0; t < ks.frames; ++t) {
    if (bins.rejected[std::size_t(t)]) continue;
    const int b = bins.bin_of(t);
    ++out.frames_per_bin[std::size_t(b)];
    for (int j = 0; j < ks.pattern.n_ro; ++j)
      op.weight[std::size_t(b)]
               [std::size_t(ks.pattern.ky_at(t, j)) * grid.n3 + ks.pattern.kz_at(t, j)] += 1.0f;
    acquisition::adjoint(ks.frame(t), maps, ks.pattern, t, tmp.data());
    cfloat *rb = rhs.data() + std::size_t(b) * nv;
    for (std::int64_t i = 0; i < nv; ++i) rb[i] += tmp[std::size_t(i)];
  }
  if (std::none_of(out.frames_per_bin.begin(), out.frames_per_bin.end(),
                   [](int n) { return n > 0; }))
    throw InsufficientDataError("binned_cs_recon: no frames survived binning");

  // Conjugate gradients on the normal equations, fixed iteration count.
  const std::size_t n = std::size_t(n_bins) * nv;
  std::vector<cfloat> x(n, cfloat{}), r = rhs, p = rhs, ap(n);
  double rs = dot_re(r, r);
  out.residual_trace.push_back(std::sqrt(rs));
  for (int it = 0; it < n_iters && rs > 0; ++it) {
    op.apply(p.data(), ap.data());
    const double pap = dot_re(p, ap);
    if (pap <= 0) break;  // numerically singular direction; keep current x
    const double alpha = rs / pap;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += float(alpha) * p[i];
      r[i] -= float(alpha) * ap[i];
    }
    const double rs_new = dot_re(r, r);
    out.residual_trace.push_back(std::sqrt(rs_new));
    const double beta = rs_new / rs;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + float(beta) * p[i];
    rs = rs_new;
  }
  out.volumes = std::move(x);

  // Fill empty bins: nearest non-empty cardiac neighbors (cyclic, averaged
  // when equidistant), falling back to the nearest non-empty respiratory row.
  for (int rr = 0; rr < bins.n_resp; ++rr)
    for (int cc = 0; cc < bins.n_card; ++cc) {
      const int b = rr * bins.n_card + cc;
      if (out.frames_per_bin[std::size_t(b)] > 0) continue;
      out.filled_from_neighbor[std::size_t(b)] = true;
      std::vector<const cfloat *> src;
      for (int d = 1; d <= bins.n_card / 2 && src.empty(); ++d) {
        for (int dir : {+1, -1}) {
          const int cn = (cc + dir * d + bins.n_card) % bins.n_card;
          if (out.frames_per_bin[std::size_t(rr * bins.n_card + cn)] > 0)
            src.push_back(out.volume(cn, rr));
          if (dir == +1 && 2 * d == bins.n_card) break;  // same bin both ways
        }
      }
      for (int d = 1; d < bins.n_resp && src.empty(); ++d)
        for (int dir : {+1, -1}) {
          const int rn = rr + dir * d;
          if (rn < 0 || rn >= bins.n_resp) continue;
          if (out.frames_per_bin[std::size_t(rn * bins.n_card + cc)] > 0) {
            src.push_back(out.volume(cc, rn));
            break;
          }
        }
      cfloat *dst = out.volume(cc, rr);
      std::fill(dst, dst + nv, cfloat{});
      for (const cfloat *s : src)
        for (std::int64_t i = 0; i < nv; ++i) dst[i] += s[i] / float(src.size());
    }
  return out;
}

}  // namespace mldip::baselines
