#include "mldip/gating.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace mldip::gating {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Biquad {
  double b0, b1, b2, a1, a2;  // normalized (a0 = 1)

  void apply(std::vector<double> &x) const {
    double s1 = 0, s2 = 0;
    for (double &v : x) {
      double in = v;
      double out = b0 * in + s1;
      s1 = b1 * in - a1 * out + s2;
      s2 = b2 * in - a2 * out;
      v = out;
    }
  }
};

// RBJ cookbook biquads with Butterworth Q.
Biquad butter_lowpass(double fc, double fs) {
  double w0 = 2.0 * kPi * fc / fs;
  double alpha = std::sin(w0) / std::sqrt(2.0);
  double c = std::cos(w0);
  double a0 = 1 + alpha;
  return {(1 - c) / 2 / a0, (1 - c) / a0, (1 - c) / 2 / a0, -2 * c / a0, (1 - alpha) / a0};
}

Biquad butter_highpass(double fc, double fs) {
  double w0 = 2.0 * kPi * fc / fs;
  double alpha = std::sin(w0) / std::sqrt(2.0);
  double c = std::cos(w0);
  double a0 = 1 + alpha;
  return {(1 + c) / 2 / a0, -(1 + c) / a0, (1 + c) / 2 / a0, -2 * c / a0, (1 - alpha) / a0};
}

constexpr int kFilterOrder = 4;

}  // namespace

std::vector<float> bandpass_filtfilt(const std::vector<float> &x, float lo_hz, float hi_hz,
                                     float fs_hz) {
  const int T = int(x.size());
  if (T < 10 * kFilterOrder)
    throw InsufficientDataError("bandpass_filtfilt: series too short for filter transients");
  if (!(lo_hz > 0 && lo_hz < hi_hz && hi_hz < fs_hz / 2))
    throw ContractError("bandpass_filtfilt: invalid band for sampling rate");

  const int pad = std::min(T - 1, 3 * 10);
  std::vector<double> ext(T + 2 * pad);
  // Odd reflection padding keeps the zero-phase filter settled at the edges.
  for (int i = 0; i < pad; ++i) ext[i] = 2.0 * x[0] - x[pad - i];
  for (int i = 0; i < T; ++i) ext[pad + i] = x[i];
  for (int i = 0; i < pad; ++i) ext[pad + T + i] = 2.0 * x[T - 1] - x[T - 2 - i];

  Biquad hp = butter_highpass(lo_hz, fs_hz);
  Biquad lp = butter_lowpass(hi_hz, fs_hz);
  hp.apply(ext);
  lp.apply(ext);
  std::reverse(ext.begin(), ext.end());
  hp.apply(ext);
  lp.apply(ext);
  std::reverse(ext.begin(), ext.end());

  std::vector<float> out(T);
  for (int i = 0; i < T; ++i) out[i] = float(ext[pad + i]);
  return out;
}

GatingMatrix extract_central_lines(const acquisition::KSpaceSeries &ks, float sampling_rate_hz) {
  const int slot = ks.pattern.gating_slot;
  if (slot < 0 || slot >= ks.n_ro)
    throw ContractError("extract_central_lines: pattern declares no gating slot");
  for (int t = 0; t < ks.frames; ++t)
    if (ks.pattern.ky_at(t, slot) != 0 || ks.pattern.kz_at(t, slot) != 0)
      throw ContractError("extract_central_lines: gating slot is not DC in frame " +
                          std::to_string(t));

  GatingMatrix g;
  g.frames = ks.frames;
  g.cols = ks.n_coils * ks.n1 * 2;
  g.sampling_rate = sampling_rate_hz;
  g.x.resize(std::size_t(g.frames) * g.cols);
  for (int t = 0; t < ks.frames; ++t) {
    const cfloat *frame = ks.frame(t);
    int c = 0;
    for (int coil = 0; coil < ks.n_coils; ++coil) {
      const cfloat *line = frame + (std::size_t(coil) * ks.n_ro + slot) * ks.n1;
      for (int i = 0; i < ks.n1; ++i) {
        g.at(t, c++) = line[i].real();
        g.at(t, c++) = line[i].imag();
      }
    }
  }
  // Detrend: remove each column's least-squares line (mean and drift).
  const double tbar = (g.frames - 1) / 2.0;
  double tt = 0;
  for (int t = 0; t < g.frames; ++t) tt += (t - tbar) * (t - tbar);
  for (int c = 0; c < g.cols; ++c) {
    double mean = 0, st = 0;
    for (int t = 0; t < g.frames; ++t) mean += g.at(t, c);
    mean /= g.frames;
    for (int t = 0; t < g.frames; ++t) st += (t - tbar) * (g.at(t, c) - mean);
    double slope = tt > 0 ? st / tt : 0.0;
    for (int t = 0; t < g.frames; ++t) g.at(t, c) -= float(mean + slope * (t - tbar));
  }
  return g;
}

namespace {

// Top-k temporal principal components of the band-filtered matrix, via the
// T x T Gram matrix. Components are standardized; the sign convention makes
// the first significant spatial loading positive.
void pca_components(const Eigen::MatrixXd &xf, int k, LatentInit &out, int col0) {
  const int T = int(xf.rows());
  Eigen::MatrixXd gram = xf * xf.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  for (int j = 0; j < k; ++j) {
    Eigen::VectorXd u = eig.eigenvectors().col(T - 1 - j);
    Eigen::VectorXd loading = xf.transpose() * u;
    double lmax = loading.cwiseAbs().maxCoeff();
    for (int i = 0; i < loading.size(); ++i) {
      if (std::abs(loading[i]) > 1e-6 * lmax) {
        if (loading[i] < 0) u = -u;
        break;
      }
    }
    double mean = u.mean();
    double var = (u.array() - mean).square().sum() / T;
    double scale = var > 0 ? 1.0 / std::sqrt(var) : 0.0;
    for (int t = 0; t < T; ++t) out.at(t, col0 + j) = float((u[t] - mean) * scale);
  }
}

}  // namespace

LatentInit extract_motion_components(const GatingMatrix &g, Band resp_band, Band card_band) {
  if (g.sampling_rate <= 2.0f * card_band.hi_hz)
    throw ContractError("extract_motion_components: sampling rate below Nyquist for cardiac band");
  if (g.frames < 10 * kFilterOrder)
    throw InsufficientDataError("extract_motion_components: series too short");

  LatentInit out;
  out.frames = g.frames;
  out.z.assign(std::size_t(g.frames) * LatentInit::kComponents, 0.0f);

  auto filter_all = [&](Band band) {
    Eigen::MatrixXd xf(g.frames, g.cols);
    std::vector<float> col(g.frames);
    for (int c = 0; c < g.cols; ++c) {
      for (int t = 0; t < g.frames; ++t) col[t] = g.at(t, c);
      std::vector<float> f = bandpass_filtfilt(col, band.lo_hz, band.hi_hz, g.sampling_rate);
      for (int t = 0; t < g.frames; ++t) xf(t, c) = f[t];
    }
    return xf;
  };

  pca_components(filter_all(resp_band), 2, out, 0);
  pca_components(filter_all(card_band), 4, out, 2);
  return out;
}

std::vector<int> detect_beats(const LatentInit &latent) {
  const int T = latent.frames;
  std::vector<float> card(T);
  for (int t = 0; t < T; ++t) card[t] = latent.at(t, 2);

  std::vector<int> peaks;
  for (int t = 1; t + 1 < T; ++t)
    if (card[t] > card[t - 1] && card[t] >= card[t + 1] && card[t] > 0.2f) peaks.push_back(t);
  if (peaks.size() < 2) return peaks;

  // Merge peaks closer than 0.45x the median interval, keeping the higher one.
  std::vector<int> gaps;
  for (std::size_t i = 1; i < peaks.size(); ++i) gaps.push_back(peaks[i] - peaks[i - 1]);
  std::nth_element(gaps.begin(), gaps.begin() + gaps.size() / 2, gaps.end());
  int min_gap = std::max(1, int(0.45 * gaps[gaps.size() / 2]));
  std::vector<int> merged;
  for (int p : peaks) {
    if (!merged.empty() && p - merged.back() < min_gap) {
      if (card[p] > card[merged.back()]) merged.back() = p;
    } else {
      merged.push_back(p);
    }
  }
  return merged;
}

void write_latent(const LatentInit &latent, const std::string &path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f << "# frame\tresp_1\tresp_2\tcard_1\tcard_2\tcard_3\tcard_4\n";
  for (int t = 0; t < latent.frames; ++t) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n", t,
                  latent.at(t, 0), latent.at(t, 1), latent.at(t, 2), latent.at(t, 3),
                  latent.at(t, 4), latent.at(t, 5));
    f << buf;
  }
}

LatentInit read_latent(const std::string &path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open " + path);
  LatentInit latent;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    int frame;
    float v[6];
    if (std::sscanf(line.c_str(), "%d %f %f %f %f %f %f", &frame, &v[0], &v[1], &v[2], &v[3],
                    &v[4], &v[5]) != 7)
      throw FormatError("malformed latent line: " + line);
    for (float x : v) latent.z.push_back(x);
    ++latent.frames;
  }
  return latent;
}

}  // namespace mldip::gating
