#include "mldip/nn.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

namespace mldip::nn {

namespace {

void check_volume(const std::vector<int> &dims, const char *op) {
  if (dims.size() != 4) throw ContractError(std::string(op) + ": expected a [C,D,H,W] tensor");
}

constexpr int kConvChunk = 4096;

// A maximal run of output voxels within one chunk that shares (d, h): the
// neighbor of every voxel in the run lives in one contiguous source row, so
// gather/scatter reduces to a row copy plus at most two edge fixups.
struct RowSpan {
  std::int64_t off;  // start within the chunk
  int d, h, w0, w1;  // output coordinates: row (d,h), w in [w0,w1)
};

std::vector<RowSpan> row_spans(int H, int W, std::int64_t p0, std::int64_t p1) {
  std::vector<RowSpan> spans;
  const std::int64_t HW = std::int64_t(H) * W;
  std::int64_t p = p0;
  while (p < p1) {
    const int d = int(p / HW), h = int((p / W) % H), w0 = int(p % W);
    const int w1 = int(std::min<std::int64_t>(W, w0 + (p1 - p)));
    spans.push_back({p - p0, d, h, w0, w1});
    p += w1 - w0;
  }
  return spans;
}

// Gathers the 3x3x3 neighborhoods of output voxels [p0,p1) into col
// [Cin*27, p1-p0] (zero padding outside the volume).
void im2col_chunk(const float *x, int Cin, int D, int H, int W, std::int64_t p0, std::int64_t p1,
                  float *col) {
  const std::int64_t chunk = p1 - p0;
  const std::int64_t HW = std::int64_t(H) * W;
  const std::int64_t DHW = D * HW;
  const auto spans = row_spans(H, W, p0, p1);
  for (int c = 0; c < Cin; ++c) {
    const float *xc = x + std::size_t(c) * DHW;
    for (int kd = 0; kd < 3; ++kd)
      for (int kh = 0; kh < 3; ++kh)
        for (int kw = 0; kw < 3; ++kw) {
          float *row = col + (std::size_t(c) * 27 + (kd * 3 + kh) * 3 + kw) * chunk;
          for (const RowSpan &s : spans) {
            float *dst = row + s.off;
            const int n = s.w1 - s.w0;
            const int sd = s.d + kd - 1, sh = s.h + kh - 1;
            if (sd < 0 || sd >= D || sh < 0 || sh >= H) {
              std::memset(dst, 0, std::size_t(n) * sizeof(float));
              continue;
            }
            const float *src = xc + std::int64_t(sd) * HW + std::int64_t(sh) * W;
            // Source w runs over [s.w0+kw-1, s.w1+kw-1); clip to [0, W).
            int lo = s.w0 + kw - 1, hi = s.w1 + kw - 1;
            int pad_l = lo < 0 ? -lo : 0, pad_r = hi > W ? hi - W : 0;
            if (pad_l) std::memset(dst, 0, std::size_t(pad_l) * sizeof(float));
            if (pad_r) std::memset(dst + n - pad_r, 0, std::size_t(pad_r) * sizeof(float));
            std::memcpy(dst + pad_l, src + lo + pad_l,
                        std::size_t(n - pad_l - pad_r) * sizeof(float));
          }
        }
  }
}

// Scatter-adds col [Cin*27, chunk] back onto the gradient volume.
void col2im_chunk(const float *col, int Cin, int D, int H, int W, std::int64_t p0, std::int64_t p1,
                  float *gx) {
  const std::int64_t chunk = p1 - p0;
  const std::int64_t HW = std::int64_t(H) * W;
  const std::int64_t DHW = D * HW;
  const auto spans = row_spans(H, W, p0, p1);
  for (int c = 0; c < Cin; ++c) {
    float *gc = gx + std::size_t(c) * DHW;
    for (int kd = 0; kd < 3; ++kd)
      for (int kh = 0; kh < 3; ++kh)
        for (int kw = 0; kw < 3; ++kw) {
          const float *row = col + (std::size_t(c) * 27 + (kd * 3 + kh) * 3 + kw) * chunk;
          for (const RowSpan &s : spans) {
            const float *src = row + s.off;
            const int n = s.w1 - s.w0;
            const int sd = s.d + kd - 1, sh = s.h + kh - 1;
            if (sd < 0 || sd >= D || sh < 0 || sh >= H) continue;
            float *dst = gc + std::int64_t(sd) * HW + std::int64_t(sh) * W;
            int lo = s.w0 + kw - 1, hi = s.w1 + kw - 1;
            int skip_l = lo < 0 ? -lo : 0, skip_r = hi > W ? hi - W : 0;
            const int m = n - skip_l - skip_r;
            float *d0 = dst + lo + skip_l;
            const float *s0 = src + skip_l;
            for (int i = 0; i < m; ++i) d0[i] += s0[i];
          }
        }
  }
}

}  // namespace

Tape::T Tape::conv3d(T x, T w, T bias) {
  check_volume(at(x).dims, "conv3d");
  const auto &wd = at(w).dims;
  if (wd.size() != 5 || wd[2] != 3 || wd[3] != 3 || wd[4] != 3)
    throw ContractError("conv3d: weight must be [Cout,Cin,3,3,3]");
  const int Cin = at(x).dims[0], D = at(x).dims[1], H = at(x).dims[2], W = at(x).dims[3];
  const int Cout = wd[0];
  if (wd[1] != Cin) throw ContractError("conv3d: channel mismatch");
  const bool has_b = bias.valid();
  if (has_b && at(bias).n != Cout) throw ContractError("conv3d: bias size mismatch");

  const std::int64_t N = std::int64_t(D) * H * W;
  const int K = Cin * 27;
  bool ng = at(x).grd || at(w).grd || (has_b && at(bias).grd);
  T out = make({Cout, D, H, W}, ng);
  Node &no = at(out);
  {
    std::vector<float> col(std::size_t(K) * std::min<std::int64_t>(kConvChunk, N));
    std::vector<float> ochunk(std::size_t(Cout) * std::min<std::int64_t>(kConvChunk, N));
    for (std::int64_t p0 = 0; p0 < N; p0 += kConvChunk) {
      const std::int64_t p1 = std::min<std::int64_t>(p0 + kConvChunk, N);
      const std::int64_t chunk = p1 - p0;
      im2col_chunk(at(x).val, Cin, D, H, W, p0, p1, col.data());
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, Cout, int(chunk), K, 1.0f, at(w).val,
                  K, col.data(), int(chunk), 0.0f, ochunk.data(), int(chunk));
      for (int co = 0; co < Cout; ++co)
        std::memcpy(no.val + std::size_t(co) * N + p0, ochunk.data() + std::size_t(co) * chunk,
                    std::size_t(chunk) * sizeof(float));
    }
    if (has_b) {
      const float *bv = at(bias).val;
      for (int co = 0; co < Cout; ++co) {
        float *oc = no.val + std::size_t(co) * N;
        for (std::int64_t i = 0; i < N; ++i) oc[i] += bv[co];
      }
    }
  }
  if (ng)
    no.back = [this, x, w, bias, out, Cin, Cout, D, H, W, N, K, has_b] {
      Node &nx = at(x), &nw = at(w), &no = at(out);
      std::vector<float> col(std::size_t(K) * std::min<std::int64_t>(kConvChunk, N));
      std::vector<float> gchunk(std::size_t(Cout) * std::min<std::int64_t>(kConvChunk, N));
      for (std::int64_t p0 = 0; p0 < N; p0 += kConvChunk) {
        const std::int64_t p1 = std::min<std::int64_t>(p0 + kConvChunk, N);
        const std::int64_t chunk = p1 - p0;
        for (int co = 0; co < Cout; ++co)
          std::memcpy(gchunk.data() + std::size_t(co) * chunk, no.grd + std::size_t(co) * N + p0,
                      std::size_t(chunk) * sizeof(float));
        if (nw.grd) {
          im2col_chunk(nx.val, Cin, D, H, W, p0, p1, col.data());
          // gw += gy_chunk col^T
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Cout, K, int(chunk), 1.0f,
                      gchunk.data(), int(chunk), col.data(), int(chunk), 1.0f, nw.grd, K);
        }
        if (nx.grd) {
          // colg = w^T gy_chunk, then scatter
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, int(chunk), Cout, 1.0f, nw.val,
                      K, gchunk.data(), int(chunk), 0.0f, col.data(), int(chunk));
          col2im_chunk(col.data(), Cin, D, H, W, p0, p1, nx.grd);
        }
      }
      if (has_b && at(bias).grd) {
        float *gb = at(bias).grd;
        for (int co = 0; co < Cout; ++co) {
          double acc = 0;
          const float *gc = no.grd + std::size_t(co) * N;
          for (std::int64_t i = 0; i < N; ++i) acc += gc[i];
          gb[co] += float(acc);
        }
      }
    };
  return out;
}

Tape::T Tape::batchnorm(T x, T gamma, T beta, float eps) {
  check_volume(at(x).dims, "batchnorm");
  const int C = at(x).dims[0];
  if (at(gamma).n != C || at(beta).n != C) throw ContractError("batchnorm: affine size mismatch");
  const std::int64_t N = at(x).n / C;

  bool ng = at(x).grd || at(gamma).grd || at(beta).grd;
  T out = make(at(x).dims, ng);
  Node &no = at(out);
  auto istd = std::make_shared<std::vector<float>>(C);
  auto xhat = std::make_shared<std::vector<float>>(at(x).n);
  {
    const float *xv = at(x).val, *gv = at(gamma).val, *bv = at(beta).val;
    for (int c = 0; c < C; ++c) {
      const float *xc = xv + std::size_t(c) * N;
      double mu = 0;
      for (std::int64_t i = 0; i < N; ++i) mu += xc[i];
      mu /= double(N);
      double var = 0;
      for (std::int64_t i = 0; i < N; ++i) var += (xc[i] - mu) * (xc[i] - mu);
      var /= double(N);
      float is = float(1.0 / std::sqrt(var + eps));
      (*istd)[c] = is;
      float *hc = xhat->data() + std::size_t(c) * N;
      float *oc = no.val + std::size_t(c) * N;
      const float mu_f = float(mu);
      for (std::int64_t i = 0; i < N; ++i) {
        hc[i] = (xc[i] - mu_f) * is;
        oc[i] = gv[c] * hc[i] + bv[c];
      }
    }
  }
  if (ng)
    no.back = [this, x, gamma, beta, out, C, N, istd, xhat] {
      Node &nx = at(x), &ngm = at(gamma), &nbt = at(beta), &no = at(out);
      for (int c = 0; c < C; ++c) {
        const float *gy = no.grd + std::size_t(c) * N;
        const float *hc = xhat->data() + std::size_t(c) * N;
        double sg = 0, sgh = 0;
        for (std::int64_t i = 0; i < N; ++i) {
          sg += gy[i];
          sgh += double(gy[i]) * hc[i];
        }
        if (ngm.grd) ngm.grd[c] += float(sgh);
        if (nbt.grd) nbt.grd[c] += float(sg);
        if (nx.grd) {
          const float k = ngm.val[c] * (*istd)[c];
          const float mg = float(sg / double(N));
          const float mgh = float(sgh / double(N));
          float *gx = nx.grd + std::size_t(c) * N;
          for (std::int64_t i = 0; i < N; ++i) gx[i] += k * (gy[i] - mg - hc[i] * mgh);
        }
      }
    };
  return out;
}

Tape::T Tape::avgpool2(T x) {
  check_volume(at(x).dims, "avgpool2");
  const int C = at(x).dims[0], D = at(x).dims[1], H = at(x).dims[2], W = at(x).dims[3];
  if (D % 2 || H % 2 || W % 2) throw ContractError("avgpool2: dims must be even (pad first)");
  const int Do = D / 2, Ho = H / 2, Wo = W / 2;
  bool ng = at(x).grd != nullptr;
  T out = make({C, Do, Ho, Wo}, ng);
  Node &no = at(out);
  {
    const float *xv = at(x).val;
    for (int c = 0; c < C; ++c)
      for (int d = 0; d < Do; ++d)
        for (int h = 0; h < Ho; ++h)
          for (int w = 0; w < Wo; ++w) {
            double acc = 0;
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e)
                  acc += xv[((std::int64_t(c) * D + 2 * d + a) * H + 2 * h + b) * W + 2 * w + e];
            no.val[((std::int64_t(c) * Do + d) * Ho + h) * Wo + w] = float(acc / 8.0);
          }
  }
  if (ng)
    no.back = [this, x, out, C, D, H, W, Do, Ho, Wo] {
      Node &nx = at(x), &no = at(out);
      for (int c = 0; c < C; ++c)
        for (int d = 0; d < Do; ++d)
          for (int h = 0; h < Ho; ++h)
            for (int w = 0; w < Wo; ++w) {
              float g = no.grd[((std::int64_t(c) * Do + d) * Ho + h) * Wo + w] / 8.0f;
              for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b)
                  for (int e = 0; e < 2; ++e)
                    nx.grd[((std::int64_t(c) * D + 2 * d + a) * H + 2 * h + b) * W + 2 * w + e] +=
                        g;
            }
    };
  return out;
}

namespace {

struct Lerp1 {
  int i0, i1;
  float w0, w1;
};

// half-pixel-center source coordinate, clamped to the valid range
Lerp1 lerp_coeff(int i, int n_out, int n_in) {
  double s = (double(i) + 0.5) * double(n_in) / double(n_out) - 0.5;
  s = std::clamp(s, 0.0, double(n_in - 1));
  int i0 = int(s);
  if (i0 > n_in - 2) i0 = std::max(0, n_in - 2);
  float f = float(s - i0);
  if (n_in == 1) return {0, 0, 1.0f, 0.0f};
  return {i0, i0 + 1, 1.0f - f, f};
}

}  // namespace

Tape::T Tape::resize_trilinear(T x, int D, int H, int W) {
  check_volume(at(x).dims, "resize_trilinear");
  const int C = at(x).dims[0], Di = at(x).dims[1], Hi = at(x).dims[2], Wi = at(x).dims[3];
  if (D < 1 || H < 1 || W < 1) throw ContractError("resize_trilinear: bad target");
  bool ng = at(x).grd != nullptr;
  T out = make({C, D, H, W}, ng);
  Node &no = at(out);
  auto cd = std::make_shared<std::vector<Lerp1>>(D);
  auto ch = std::make_shared<std::vector<Lerp1>>(H);
  auto cw = std::make_shared<std::vector<Lerp1>>(W);
  for (int i = 0; i < D; ++i) (*cd)[i] = lerp_coeff(i, D, Di);
  for (int i = 0; i < H; ++i) (*ch)[i] = lerp_coeff(i, H, Hi);
  for (int i = 0; i < W; ++i) (*cw)[i] = lerp_coeff(i, W, Wi);
  {
    const float *xv = at(x).val;
    const std::int64_t HWi = std::int64_t(Hi) * Wi;
    std::int64_t o = 0;
    for (int c = 0; c < C; ++c) {
      const float *xc = xv + std::size_t(c) * Di * HWi;
      for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w, ++o) {
            const Lerp1 &a = (*cd)[d], &b = (*ch)[h], &e = (*cw)[w];
            float v = 0;
            v += a.w0 * (b.w0 * (e.w0 * xc[(std::int64_t(a.i0) * Hi + b.i0) * Wi + e.i0] +
                                 e.w1 * xc[(std::int64_t(a.i0) * Hi + b.i0) * Wi + e.i1]) +
                         b.w1 * (e.w0 * xc[(std::int64_t(a.i0) * Hi + b.i1) * Wi + e.i0] +
                                 e.w1 * xc[(std::int64_t(a.i0) * Hi + b.i1) * Wi + e.i1]));
            v += a.w1 * (b.w0 * (e.w0 * xc[(std::int64_t(a.i1) * Hi + b.i0) * Wi + e.i0] +
                                 e.w1 * xc[(std::int64_t(a.i1) * Hi + b.i0) * Wi + e.i1]) +
                         b.w1 * (e.w0 * xc[(std::int64_t(a.i1) * Hi + b.i1) * Wi + e.i0] +
                                 e.w1 * xc[(std::int64_t(a.i1) * Hi + b.i1) * Wi + e.i1]));
            no.val[o] = v;
          }
    }
  }
  if (ng)
    no.back = [this, x, out, C, Di, Hi, Wi, D, H, W, cd, ch, cw] {
      Node &nx = at(x), &no = at(out);
      const std::int64_t HWi = std::int64_t(Hi) * Wi;
      std::int64_t o = 0;
      for (int c = 0; c < C; ++c) {
        float *gc = nx.grd + std::size_t(c) * Di * HWi;
        for (int d = 0; d < D; ++d)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w, ++o) {
              const Lerp1 &a = (*cd)[d], &b = (*ch)[h], &e = (*cw)[w];
              const float g = no.grd[o];
              gc[(std::int64_t(a.i0) * Hi + b.i0) * Wi + e.i0] += g * a.w0 * b.w0 * e.w0;
              gc[(std::int64_t(a.i0) * Hi + b.i0) * Wi + e.i1] += g * a.w0 * b.w0 * e.w1;
              gc[(std::int64_t(a.i0) * Hi + b.i1) * Wi + e.i0] += g * a.w0 * b.w1 * e.w0;
              gc[(std::int64_t(a.i0) * Hi + b.i1) * Wi + e.i1] += g * a.w0 * b.w1 * e.w1;
              gc[(std::int64_t(a.i1) * Hi + b.i0) * Wi + e.i0] += g * a.w1 * b.w0 * e.w0;
              gc[(std::int64_t(a.i1) * Hi + b.i0) * Wi + e.i1] += g * a.w1 * b.w0 * e.w1;
              gc[(std::int64_t(a.i1) * Hi + b.i1) * Wi + e.i0] += g * a.w1 * b.w1 * e.w0;
              gc[(std::int64_t(a.i1) * Hi + b.i1) * Wi + e.i1] += g * a.w1 * b.w1 * e.w1;
            }
      }
    };
  return out;
}

Tape::T Tape::concat(T a, T b) {
  check_volume(at(a).dims, "concat");
  check_volume(at(b).dims, "concat");
  const auto &da = at(a).dims;
  const auto &db = at(b).dims;
  if (da[1] != db[1] || da[2] != db[2] || da[3] != db[3])
    throw ContractError("concat: spatial dims mismatch");
  bool ng = at(a).grd || at(b).grd;
  T out = make({da[0] + db[0], da[1], da[2], da[3]}, ng);
  Node &no = at(out);
  const std::int64_t na = at(a).n, nb = at(b).n;
  std::memcpy(no.val, at(a).val, std::size_t(na) * sizeof(float));
  std::memcpy(no.val + na, at(b).val, std::size_t(nb) * sizeof(float));
  if (ng)
    no.back = [this, a, b, out, na, nb] {
      Node &naN = at(a), &nbN = at(b), &no = at(out);
      if (naN.grd)
        for (std::int64_t i = 0; i < na; ++i) naN.grd[i] += no.grd[i];
      if (nbN.grd)
        for (std::int64_t i = 0; i < nb; ++i) nbN.grd[i] += no.grd[na + i];
    };
  return out;
}

Tape::T Tape::pad3d(T x, int D, int H, int W) {
  check_volume(at(x).dims, "pad3d");
  const int C = at(x).dims[0], Di = at(x).dims[1], Hi = at(x).dims[2], Wi = at(x).dims[3];
  if (D < Di || H < Hi || W < Wi) throw ContractError("pad3d: target smaller than input");
  bool ng = at(x).grd != nullptr;
  T out = make({C, D, H, W}, ng);
  Node &no = at(out);
  {
    const float *xv = at(x).val;
    for (int c = 0; c < C; ++c)
      for (int d = 0; d < Di; ++d)
        for (int h = 0; h < Hi; ++h)
          std::memcpy(no.val + ((std::int64_t(c) * D + d) * H + h) * W,
                      xv + ((std::int64_t(c) * Di + d) * Hi + h) * Wi,
                      std::size_t(Wi) * sizeof(float));
  }
  if (ng)
    no.back = [this, x, out, C, Di, Hi, Wi, D, H, W] {
      Node &nx = at(x), &no = at(out);
      for (int c = 0; c < C; ++c)
        for (int d = 0; d < Di; ++d)
          for (int h = 0; h < Hi; ++h) {
            float *g = nx.grd + ((std::int64_t(c) * Di + d) * Hi + h) * Wi;
            const float *go = no.grd + ((std::int64_t(c) * D + d) * H + h) * W;
            for (int w = 0; w < Wi; ++w) g[w] += go[w];
          }
    };
  return out;
}

Tape::T Tape::crop3d(T x, int D, int H, int W) {
  check_volume(at(x).dims, "crop3d");
  const int C = at(x).dims[0], Di = at(x).dims[1], Hi = at(x).dims[2], Wi = at(x).dims[3];
  if (D > Di || H > Hi || W > Wi) throw ContractError("crop3d: target larger than input");
  bool ng = at(x).grd != nullptr;
  T out = make({C, D, H, W}, ng);
  Node &no = at(out);
  {
    const float *xv = at(x).val;
    for (int c = 0; c < C; ++c)
      for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
          std::memcpy(no.val + ((std::int64_t(c) * D + d) * H + h) * W,
                      xv + ((std::int64_t(c) * Di + d) * Hi + h) * Wi,
                      std::size_t(W) * sizeof(float));
  }
  if (ng)
    no.back = [this, x, out, C, Di, Hi, Wi, D, H, W] {
      Node &nx = at(x), &no = at(out);
      for (int c = 0; c < C; ++c)
        for (int d = 0; d < D; ++d)
          for (int h = 0; h < H; ++h) {
            float *g = nx.grd + ((std::int64_t(c) * Di + d) * Hi + h) * Wi;
            const float *go = no.grd + ((std::int64_t(c) * D + d) * H + h) * W;
            for (int w = 0; w < W; ++w) g[w] += go[w];
          }
    };
  return out;
}

Tape::T Tape::warp(T img, T phi) {
  check_volume(at(img).dims, "warp");
  check_volume(at(phi).dims, "warp");
  const int C = at(img).dims[0], D = at(img).dims[1], H = at(img).dims[2], W = at(img).dims[3];
  const auto &pd = at(phi).dims;
  if (pd[0] != 3 || pd[1] != D || pd[2] != H || pd[3] != W)
    throw ContractError("warp: phi must be [3,D,H,W] matching the image grid");
  const std::int64_t N = std::int64_t(D) * H * W;
  bool ng = at(img).grd || at(phi).grd;
  T out = make({C, D, H, W}, ng);
  Node &no = at(out);
  {
    const float *iv = at(img).val;
    const float *pv = at(phi).val;
    std::int64_t p = 0;
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w, ++p) {
          // Non-finite displacements (diverged training) must not reach the
          // float->int conversion below; propagate NaN so the loss check
          // upstream can abort instead.
          if (!std::isfinite(pv[p]) || !std::isfinite(pv[N + p]) ||
              !std::isfinite(pv[2 * N + p])) {
            for (int c = 0; c < C; ++c)
              no.val[std::size_t(c) * N + p] = std::numeric_limits<float>::quiet_NaN();
            continue;
          }
          double gd = std::clamp(double(d) + pv[p], 0.0, double(D - 1));
          double gh = std::clamp(double(h) + pv[N + p], 0.0, double(H - 1));
          double gw = std::clamp(double(w) + pv[2 * N + p], 0.0, double(W - 1));
          int d0 = std::min(int(gd), std::max(0, D - 2));
          int h0 = std::min(int(gh), std::max(0, H - 2));
          int w0 = std::min(int(gw), std::max(0, W - 2));
          float fd = float(gd - d0), fh = float(gh - h0), fw = float(gw - w0);
          int d1 = std::min(d0 + 1, D - 1), h1 = std::min(h0 + 1, H - 1),
              w1 = std::min(w0 + 1, W - 1);
          for (int c = 0; c < C; ++c) {
            const float *ic = iv + std::size_t(c) * N;
            auto v = [&](int a, int b, int e) {
              return ic[(std::int64_t(a) * H + b) * W + e];
            };
            float c00 = v(d0, h0, w0) * (1 - fw) + v(d0, h0, w1) * fw;
            float c01 = v(d0, h1, w0) * (1 - fw) + v(d0, h1, w1) * fw;
            float c10 = v(d1, h0, w0) * (1 - fw) + v(d1, h0, w1) * fw;
            float c11 = v(d1, h1, w0) * (1 - fw) + v(d1, h1, w1) * fw;
            float c0 = c00 * (1 - fh) + c01 * fh;
            float c1 = c10 * (1 - fh) + c11 * fh;
            no.val[std::size_t(c) * N + p] = c0 * (1 - fd) + c1 * fd;
          }
        }
  }
  if (ng)
    no.back = [this, img, phi, out, C, D, H, W, N] {
      Node &ni = at(img), &np = at(phi), &no = at(out);
      const float *iv = ni.val;
      const float *pv = np.val;
      std::int64_t p = 0;
      for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w, ++p) {
            if (!std::isfinite(pv[p]) || !std::isfinite(pv[N + p]) ||
                !std::isfinite(pv[2 * N + p]))
              continue;  // diverged field; forward already produced NaN here
            double rd = double(d) + pv[p];
            double rh = double(h) + pv[N + p];
            double rw = double(w) + pv[2 * N + p];
            bool in_d = rd > 0.0 && rd < double(D - 1);
            bool in_h = rh > 0.0 && rh < double(H - 1);
            bool in_w = rw > 0.0 && rw < double(W - 1);
            double gd = std::clamp(rd, 0.0, double(D - 1));
            double gh = std::clamp(rh, 0.0, double(H - 1));
            double gw = std::clamp(rw, 0.0, double(W - 1));
            int d0 = std::min(int(gd), std::max(0, D - 2));
            int h0 = std::min(int(gh), std::max(0, H - 2));
            int w0 = std::min(int(gw), std::max(0, W - 2));
            float fd = float(gd - d0), fh = float(gh - h0), fw = float(gw - w0);
            int d1 = std::min(d0 + 1, D - 1), h1 = std::min(h0 + 1, H - 1),
                w1 = std::min(w0 + 1, W - 1);
            float sd = 0, sh = 0, sw = 0;  // d(loss)/d(phi components)
            for (int c = 0; c < C; ++c) {
              const float g = no.grd[std::size_t(c) * N + p];
              if (g == 0.0f) continue;
              const float *ic = iv + std::size_t(c) * N;
              auto idx = [&](int a, int b, int e) {
                return (std::int64_t(a) * H + b) * W + e;
              };
              if (ni.grd) {
                float *gi = ni.grd + std::size_t(c) * N;
                gi[idx(d0, h0, w0)] += g * (1 - fd) * (1 - fh) * (1 - fw);
                gi[idx(d0, h0, w1)] += g * (1 - fd) * (1 - fh) * fw;
                gi[idx(d0, h1, w0)] += g * (1 - fd) * fh * (1 - fw);
                gi[idx(d0, h1, w1)] += g * (1 - fd) * fh * fw;
                gi[idx(d1, h0, w0)] += g * fd * (1 - fh) * (1 - fw);
                gi[idx(d1, h0, w1)] += g * fd * (1 - fh) * fw;
                gi[idx(d1, h1, w0)] += g * fd * fh * (1 - fw);
                gi[idx(d1, h1, w1)] += g * fd * fh * fw;
              }
              if (np.grd) {
                auto v = [&](int a, int b, int e) { return ic[idx(a, b, e)]; };
                // derivative of the trilinear value wrt each fractional coord
                float dd = (v(d1, h0, w0) - v(d0, h0, w0)) * (1 - fh) * (1 - fw) +
                           (v(d1, h0, w1) - v(d0, h0, w1)) * (1 - fh) * fw +
                           (v(d1, h1, w0) - v(d0, h1, w0)) * fh * (1 - fw) +
                           (v(d1, h1, w1) - v(d0, h1, w1)) * fh * fw;
                float dh = (v(d0, h1, w0) - v(d0, h0, w0)) * (1 - fd) * (1 - fw) +
                           (v(d0, h1, w1) - v(d0, h0, w1)) * (1 - fd) * fw +
                           (v(d1, h1, w0) - v(d1, h0, w0)) * fd * (1 - fw) +
                           (v(d1, h1, w1) - v(d1, h0, w1)) * fd * fw;
                float dw = (v(d0, h0, w1) - v(d0, h0, w0)) * (1 - fd) * (1 - fh) +
                           (v(d0, h1, w1) - v(d0, h1, w0)) * (1 - fd) * fh +
                           (v(d1, h0, w1) - v(d1, h0, w0)) * fd * (1 - fh) +
                           (v(d1, h1, w1) - v(d1, h1, w0)) * fd * fh;
                sd += g * dd;
                sh += g * dh;
                sw += g * dw;
              }
            }
            if (np.grd) {
              if (in_d) np.grd[p] += sd;
              if (in_h) np.grd[N + p] += sh;
              if (in_w) np.grd[2 * N + p] += sw;
            }
          }
    };
  return out;
}

Tape::T Tape::fd_reg(T phi) {
  check_volume(at(phi).dims, "fd_reg");
  const int C = at(phi).dims[0], D = at(phi).dims[1], H = at(phi).dims[2], W = at(phi).dims[3];
  bool ng = at(phi).grd != nullptr;
  // Average over all difference terms so the regularizer weight is
  // independent of the grid size and comparable to the per-sample dc term.
  const double terms = double(C) * (double(D - 1) * H * W + double(D) * (H - 1) * W +
                                    double(D) * H * (W - 1));
  T out = make({1}, ng);
  Node &no = at(out);
  {
    const float *pv = at(phi).val;
    double acc = 0;
    for (int c = 0; c < C; ++c) {
      const float *pc = pv + (std::size_t(c) * D) * H * W;
      for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            const std::int64_t i = (std::int64_t(d) * H + h) * W + w;
            if (d + 1 < D) {
              double df = pc[i + std::int64_t(H) * W] - pc[i];
              acc += df * df;
            }
            if (h + 1 < H) {
              double df = pc[i + W] - pc[i];
              acc += df * df;
            }
            if (w + 1 < W) {
              double df = pc[i + 1] - pc[i];
              acc += df * df;
            }
          }
    }
    no.val[0] = terms > 0 ? float(acc / terms) : 0.0f;
  }
  if (ng)
    no.back = [this, phi, out, C, D, H, W, terms] {
      if (terms <= 0) return;
      Node &np = at(phi), &no = at(out);
      const float g = no.grd[0] / float(terms);
      for (int c = 0; c < C; ++c) {
        const float *pc = np.val + (std::size_t(c) * D) * H * W;
        float *gc = np.grd + (std::size_t(c) * D) * H * W;
        for (int d = 0; d < D; ++d)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              const std::int64_t i = (std::int64_t(d) * H + h) * W + w;
              if (d + 1 < D) {
                float df = pc[i + std::int64_t(H) * W] - pc[i];
                gc[i + std::int64_t(H) * W] += 2 * g * df;
                gc[i] -= 2 * g * df;
              }
              if (h + 1 < H) {
                float df = pc[i + W] - pc[i];
                gc[i + W] += 2 * g * df;
                gc[i] -= 2 * g * df;
              }
              if (w + 1 < W) {
                float df = pc[i + 1] - pc[i];
                gc[i + 1] += 2 * g * df;
                gc[i] -= 2 * g * df;
              }
            }
      }
    };
  return out;
}

Tape::T Tape::dc_loss(T x, const acquisition::KSpaceSeries &ks, const acquisition::CoilMaps &maps,
                      int t) {
  const Grid g = ks.grid();
  const std::int64_t N = g.voxels();
  if (at(x).dims.size() < 1 || at(x).dims[0] != 2 || at(x).n != 2 * N)
    throw ContractError("dc_loss: x must be [2, n1*n2*n3] on the acquisition grid");
  if (maps.grid != g) throw ContractError("dc_loss: coil map grid mismatch");
  if (t < 0 || t >= ks.frames) throw ContractError("dc_loss: frame out of range");

  const std::int64_t M = ks.samples_per_frame();
  bool ng = at(x).grd != nullptr;
  T out = make({1}, ng);
  Node &no = at(out);
  auto residual = std::make_shared<std::vector<cfloat>>(M);
  {
    std::vector<cfloat> vol(N);
    const float *xv = at(x).val;
    for (std::int64_t i = 0; i < N; ++i) vol[i] = cfloat(xv[i], xv[N + i]);
    acquisition::forward(vol.data(), maps, ks.pattern, t, residual->data());
    const cfloat *y = ks.frame(t);
    double acc = 0;
    for (std::int64_t i = 0; i < M; ++i) {
      (*residual)[i] -= y[i];
      acc += std::norm((*residual)[i]);
    }
    no.val[0] = float(acc / double(M));
  }
  if (ng)
    no.back = [this, x, out, &ks, &maps, t, N, M, residual] {
      Node &nx = at(x), &no = at(out);
      std::vector<cfloat> grad_vol(N);
      acquisition::adjoint(residual->data(), maps, ks.pattern, t, grad_vol.data());
      const float s = 2.0f * no.grd[0] / float(M);
      for (std::int64_t i = 0; i < N; ++i) {
        nx.grd[i] += s * grad_vol[i].real();
        nx.grd[N + i] += s * grad_vol[i].imag();
      }
    };
  return out;
}

}  // namespace mldip::nn
