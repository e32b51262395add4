#include "mldip/mldip.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace mldip::model {

namespace {

using nn::Tape;
using nn::Variable;

int ceil_div(int a, int b) { return (a + b - 1) / b; }

// ---- configuration -----------------------------------------------------------

void check_widths(const std::vector<int> &w, const char *what, std::size_t exact = 0) {
  if (w.empty()) throw ConfigError(std::string(what) + ": empty width list");
  if (exact && w.size() != exact)
    throw ConfigError(std::string(what) + ": expected " + std::to_string(exact) + " widths");
  for (int c : w)
    if (c < 1) throw ConfigError(std::string(what) + ": width < 1");
}

// ---- initialization ----------------------------------------------------------

ConvUnit make_conv_unit(const std::string &name, int cin, int cout, std::mt19937 &rng) {
  ConvUnit u;
  u.w = Variable(name + ".w", {cout, cin, 3, 3, 3});
  u.b = Variable(name + ".b", {cout});
  u.gamma = Variable(name + ".gamma", {cout});
  u.beta = Variable(name + ".beta", {cout});
  const float bound = 1.0f / std::sqrt(float(cin) * 27.0f);
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float &x : u.w.value) x = dist(rng);
  for (float &x : u.b.value) x = dist(rng);
  std::fill(u.gamma.value.begin(), u.gamma.value.end(), 1.0f);
  return u;
}

ConvLayer make_conv_layer(const std::string &name, int cin, int cout, std::mt19937 &rng) {
  ConvLayer l;
  l.w = Variable(name + ".w", {cout, cin, 3, 3, 3});
  l.b = Variable(name + ".b", {cout});
  const float bound = 1.0f / std::sqrt(float(cin) * 27.0f);
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float &x : l.w.value) x = dist(rng);
  for (float &x : l.b.value) x = dist(rng);
  return l;
}

ConvLayer make_fc_layer(const std::string &name, int in, int out, std::mt19937 &rng) {
  ConvLayer l;
  l.w = Variable(name + ".w", {out, in});
  l.b = Variable(name + ".b", {out});
  const float bound = 1.0f / std::sqrt(float(in));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float &x : l.w.value) x = dist(rng);
  for (float &x : l.b.value) x = dist(rng);
  return l;
}

MLPParams make_mlp(const std::string &name, int in_dim, const std::vector<int> &hidden,
                   int out_dim, std::mt19937 &rng) {
  MLPParams p;
  int prev = in_dim;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    p.layers.push_back(make_fc_layer(name + ".fc" + std::to_string(i), prev, hidden[i], rng));
    prev = hidden[i];
  }
  p.layers.push_back(make_fc_layer(name + ".fc" + std::to_string(hidden.size()), prev, out_dim,
                                   rng));
  return p;
}

// ---- graph helpers -----------------------------------------------------------

Tape::T cbr(Tape &tp, ConvUnit &u, Tape::T x) {
  return tp.leaky_relu(tp.batchnorm(tp.conv3d(x, tp.leaf(u.w), tp.leaf(u.b)), tp.leaf(u.gamma),
                                    tp.leaf(u.beta)));
}

void push_unit(std::vector<Variable *> &out, const ConvUnit &u) {
  auto &m = const_cast<ConvUnit &>(u);
  out.push_back(&m.w);
  out.push_back(&m.b);
  out.push_back(&m.gamma);
  out.push_back(&m.beta);
}

void push_layer(std::vector<Variable *> &out, const ConvLayer &l) {
  auto &m = const_cast<ConvLayer &>(l);
  out.push_back(&m.w);
  out.push_back(&m.b);
}

std::vector<Variable *> collect_parameters(const TrainedModel &cm) {
  auto &m = const_cast<TrainedModel &>(cm);
  std::vector<Variable *> out;
  for (const ConvUnit &u : m.gdelta.units) push_unit(out, u);
  push_layer(out, m.gdelta.final_conv);
  for (const ConvUnit &u : m.gbeta.enc) push_unit(out, u);
  push_unit(out, m.gbeta.bottleneck);
  for (const ConvUnit &u : m.gbeta.dec) push_unit(out, u);
  push_unit(out, m.gbeta.out_unit);
  push_layer(out, m.gbeta.final_conv);
  for (const ConvLayer &l : m.gomega.layers) push_layer(out, l);
  for (const ConvLayer &l : m.gnu.layers) push_layer(out, l);
  out.push_back(&m.zbar);
  out.push_back(&m.zdd);
  out.push_back(&m.z);
  return out;
}

bool uses_flow_path(TrainMode mode) { return mode != TrainMode::ManifoldOnly; }

}  // namespace

// ---- ModelConfig ---------------------------------------------------------------

void ModelConfig::validate() const {
  if (K != 6) throw ConfigError("ModelConfig: K must be 6 (2 respiratory + 4 cardiac latents)");
  if (L1 < 1 || L2 < 1) throw ConfigError("ModelConfig: L1 and L2 must be >= 1");
  if (mode == TrainMode::FixedTemplate && L2 != 1)
    throw ConfigError("ModelConfig: fixed-template mode requires L2 = 1");
  if (batch_frames < 1) throw ConfigError("ModelConfig: batch_frames must be >= 1");
  if (iterations < 1) throw ConfigError("ModelConfig: iterations must be >= 1");
  if (!(lr_final <= lr_initial)) throw ConfigError("ModelConfig: lr_final must be <= lr_initial");
  if (!(lr_initial > 0)) throw ConfigError("ModelConfig: lr_initial must be > 0");
  if (!(lambda_smooth >= 0)) throw ConfigError("ModelConfig: lambda_smooth must be >= 0");
  check_widths(conv_decoder_channels, "conv_decoder_channels");
  check_widths(unet_channels, "unet_channels");
  if (unet_channels.size() < 2) throw ConfigError("unet_channels: need at least two stages");
  check_widths(mlp_flow_widths, "mlp_flow_widths", 6);
  check_widths(mlp_image_widths, "mlp_image_widths", 6);
}

ModelConfig ModelConfig::desk_default() {
  ModelConfig c;
  c.conv_decoder_channels = {24, 24, 16, 12, 8};
  c.unet_channels = {6, 12, 16, 16, 16};
  c.iterations = 3000;
  c.batch_frames = 8;
  return c;
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;  // field defaults are the reference widths
  c.iterations = 48000;
  c.batch_frames = 20;
  return c;
}

// ---- TrainedModel ---------------------------------------------------------------

std::vector<Variable *> TrainedModel::all_parameters() { return collect_parameters(*this); }

std::vector<const Variable *> TrainedModel::all_parameters() const {
  auto ptrs = collect_parameters(*this);
  return {ptrs.begin(), ptrs.end()};
}

std::vector<Variable *> TrainedModel::trainable_parameters() {
  std::vector<Variable *> out;
  const bool flow = uses_flow_path(cfg.mode);
  if (flow) {
    for (const ConvUnit &u : gdelta.units) push_unit(out, u);
    push_layer(out, gdelta.final_conv);
  }
  for (const ConvUnit &u : gbeta.enc) push_unit(out, u);
  push_unit(out, gbeta.bottleneck);
  for (const ConvUnit &u : gbeta.dec) push_unit(out, u);
  push_unit(out, gbeta.out_unit);
  push_layer(out, gbeta.final_conv);
  if (flow)
    for (const ConvLayer &l : gomega.layers) push_layer(out, l);
  if (cfg.mode != TrainMode::FixedTemplate)
    for (const ConvLayer &l : gnu.layers) push_layer(out, l);
  if (flow) out.push_back(&zbar);
  out.push_back(&zdd);
  out.push_back(&z);
  return out;
}

std::int64_t TrainedModel::parameter_count() const {
  std::int64_t n = 0;
  for (const Variable *p : all_parameters()) n += p->numel();
  return n;
}

// ---- construction ---------------------------------------------------------------

TrainedModel build_model(const ModelConfig &cfg, const Grid &grid, int frames,
                         const gating::LatentInit *latent_init) {
  cfg.validate();
  if (grid.voxels() <= 0) throw ContractError("build_model: empty grid");
  if (frames < 1) throw ContractError("build_model: frames must be >= 1");
  if (latent_init && latent_init->frames != frames)
    throw ContractError("build_model: latent_init frame count mismatch");

  TrainedModel m;
  m.cfg = cfg;
  m.grid = grid;
  m.frames = frames;

  const int ups = int(cfg.conv_decoder_channels.size());
  const int factor = 1 << ups;
  m.code_d = ceil_div(grid.n1, factor);
  m.code_h = ceil_div(grid.n2, factor);
  m.code_w = ceil_div(grid.n3, factor);

  std::mt19937 rng(std::uint32_t(stream_seed(cfg.seed, 1)));

  // Flow basis generator: blocks of CBR x3 + upsample, final block CBR x2 + conv.
  {
    int prev = 2;
    for (int b = 0; b < ups; ++b) {
      const int width = cfg.conv_decoder_channels[b];
      for (int u = 0; u < 3; ++u) {
        m.gdelta.units.push_back(make_conv_unit(
            "gdelta.block" + std::to_string(b) + ".unit" + std::to_string(u), prev, width, rng));
        prev = width;
      }
    }
    for (int u = 0; u < 2; ++u)
      m.gdelta.units.push_back(
          make_conv_unit("gdelta.final_block.unit" + std::to_string(u), prev, prev, rng));
    m.gdelta.final_conv = make_conv_layer("gdelta.final", prev, cfg.L1, rng);
  }

  // Image basis generator (U-Net).
  {
    const auto &ch = cfg.unet_channels;
    const int levels = int(ch.size()) - 1;
    int prev = 2;
    for (std::size_t i = 0; i < ch.size(); ++i) {
      m.gbeta.enc.push_back(make_conv_unit("gbeta.enc" + std::to_string(i), prev, ch[i], rng));
      prev = ch[i];
    }
    m.gbeta.bottleneck = make_conv_unit("gbeta.bottleneck", prev, ch.back(), rng);
    int up = ch.back();
    for (int i = 0; i < levels; ++i) {
      const int skip = ch[std::size_t(levels - i)];
      const int out = ch[std::size_t(levels - 1 - i)];
      m.gbeta.dec.push_back(
          make_conv_unit("gbeta.dec" + std::to_string(i), up + skip, out, rng));
      up = out;
    }
    m.gbeta.out_unit = make_conv_unit("gbeta.out", up, up, rng);
    m.gbeta.final_conv = make_conv_layer("gbeta.final", up, 2 * cfg.L2, rng);
  }

  m.gomega = make_mlp("gomega", cfg.K, cfg.mlp_flow_widths, 3 * cfg.L1, rng);
  m.gnu = make_mlp("gnu", cfg.K, cfg.mlp_image_widths, 2 * cfg.L2, rng);

  // Near-constant image-coefficient head: v(z) starts at ~e1 for every frame.
  // The image manifold has far stronger gradients than the warp path, and
  // with a free head the joint optimization settles into a low-rank
  // crossfade that represents motion in the image coefficients and prunes
  // the deformation to zero. Starting from a frame-independent template
  // forces early motion through the warp; the head remains trainable, so
  // appearance variation is recovered as training proceeds.
  {
    ConvLayer &head = m.gnu.layers.back();
    for (float &x : head.w.value) x *= 0.01f;
    std::fill(head.b.value.begin(), head.b.value.end(), 0.0f);
    head.b.value[0] = 1.0f;  // real part of the first coefficient
  }

  m.zbar = Variable("zbar", {2, m.code_d, m.code_h, m.code_w});
  m.zdd = Variable("zdd", {2, grid.n1, grid.n2, grid.n3});
  std::uniform_real_distribution<float> code_dist(0.0f, 0.1f);
  for (float &x : m.zbar.value) x = code_dist(rng);
  for (float &x : m.zdd.value) x = code_dist(rng);

  m.z = Variable("z", {frames, cfg.K});
  if (latent_init) {
    if (gating::LatentInit::kComponents != cfg.K)
      throw ContractError("build_model: latent component count mismatch");
    std::memcpy(m.z.value.data(), latent_init->z.data(),
                std::size_t(frames) * cfg.K * sizeof(float));
  }
  return m;
}

// ---- graph builders --------------------------------------------------------------

Tape::T conv_decoder_forward(Tape &tape, ConvDecoderParams &p, Tape::T code, const Grid &grid) {
  if (p.units.size() < 2 || (p.units.size() - 2) % 3 != 0)
    throw ContractError("conv_decoder_forward: malformed parameter set");
  const int blocks = int(p.units.size() - 2) / 3;
  Tape::T x = code;
  std::size_t ui = 0;
  for (int b = 0; b < blocks; ++b) {
    for (int u = 0; u < 3; ++u) x = cbr(tape, p.units[ui++], x);
    if (b + 1 == blocks) {
      // The last upsample lands on the grid directly so the final block runs
      // at output resolution rather than the next power-of-two volume.
      x = tape.resize_trilinear(x, grid.n1, grid.n2, grid.n3);
    } else {
      const auto &d = tape.dims(x);
      x = tape.resize_trilinear(x, 2 * d[1], 2 * d[2], 2 * d[3]);
    }
  }
  for (int u = 0; u < 2; ++u) x = cbr(tape, p.units[ui++], x);
  x = tape.conv3d(x, tape.leaf(p.final_conv.w), tape.leaf(p.final_conv.b));
  const auto &d = tape.dims(x);
  if (d[1] != grid.n1 || d[2] != grid.n2 || d[3] != grid.n3)
    x = tape.resize_trilinear(x, grid.n1, grid.n2, grid.n3);
  return x;
}

Tape::T unet_forward(Tape &tape, UNetParams &p, Tape::T code, const Grid &grid) {
  const int levels = int(p.enc.size()) - 1;
  if (levels < 1) throw ContractError("unet_forward: need at least two encoder stages");
  const int mult = 1 << levels;
  const int pd = ceil_div(grid.n1, mult) * mult;
  const int ph = ceil_div(grid.n2, mult) * mult;
  const int pw = ceil_div(grid.n3, mult) * mult;

  Tape::T x = code;
  if (pd != grid.n1 || ph != grid.n2 || pw != grid.n3) x = tape.pad3d(x, pd, ph, pw);

  x = cbr(tape, p.enc[0], x);
  std::vector<Tape::T> skips;  // pre-pool conv outputs of stages 2..n
  for (int s = 1; s <= levels; ++s) {
    Tape::T a = cbr(tape, p.enc[std::size_t(s)], x);
    skips.push_back(a);
    x = tape.avgpool2(a);
  }
  x = cbr(tape, p.bottleneck, x);
  for (int i = 0; i < levels; ++i) {
    Tape::T skip = skips[std::size_t(levels - 1 - i)];
    const auto &sd = tape.dims(skip);
    Tape::T up = tape.resize_trilinear(x, sd[1], sd[2], sd[3]);
    x = cbr(tape, p.dec[std::size_t(i)], tape.concat(up, skip));
  }
  x = cbr(tape, p.out_unit, x);
  x = tape.conv3d(x, tape.leaf(p.final_conv.w), tape.leaf(p.final_conv.b));
  if (pd != grid.n1 || ph != grid.n2 || pw != grid.n3)
    x = tape.crop3d(x, grid.n1, grid.n2, grid.n3);
  return x;
}

Tape::T mlp_forward(Tape &tape, MLPParams &p, Tape::T z) {
  Tape::T x = z;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    x = tape.linear(x, tape.leaf(p.layers[i].w), tape.leaf(p.layers[i].b));
    if (i + 1 < p.layers.size()) x = tape.leaky_relu(x);
  }
  return x;
}

// ---- eager evaluation --------------------------------------------------------------

DeformationBasis eval_deformation_basis(const TrainedModel &m) {
  DeformationBasis out;
  out.grid = m.grid;
  out.L1 = m.cfg.L1;
  Tape tp;
  // Forward-only evaluation; gradients are never requested on this tape.
  Tape::T code = tp.constant(m.zbar.dims, m.zbar.value.data());
  Tape::T basis =
      conv_decoder_forward(tp, const_cast<TrainedModel &>(m).gdelta, code, m.grid);
  out.d.assign(tp.data(basis), tp.data(basis) + tp.numel(basis));
  return out;
}

ImageBasis eval_image_basis(const TrainedModel &m) {
  ImageBasis out;
  out.grid = m.grid;
  out.L2 = m.cfg.L2;
  Tape tp;
  Tape::T code = tp.constant(m.zdd.dims, m.zdd.value.data());
  Tape::T basis = unet_forward(tp, const_cast<TrainedModel &>(m).gbeta, code, m.grid);
  const std::int64_t n = m.grid.voxels();
  out.b.resize(std::size_t(out.L2) * n);
  const float *v = tp.data(basis);
  for (int l = 0; l < out.L2; ++l) {
    const float *re = v + std::size_t(2 * l) * n;
    const float *im = v + std::size_t(2 * l + 1) * n;
    cfloat *dst = out.b.data() + std::size_t(l) * n;
    for (std::int64_t i = 0; i < n; ++i) dst[i] = cfloat(re[i], im[i]);
  }
  return out;
}

FrameCoefficients eval_coefficients(const TrainedModel &m, int t) {
  if (t < 0 || t >= m.frames) throw ContractError("eval_coefficients: frame out of range");
  const int L1 = m.cfg.L1, L2 = m.cfg.L2, K = m.cfg.K;
  FrameCoefficients fc;
  fc.W.assign(std::size_t(L1) * 3, 0.0f);
  fc.v.assign(std::size_t(L2), cfloat{});
  const float *zrow = m.z.value.data() + std::size_t(t) * K;
  if (uses_flow_path(m.cfg.mode)) {
    Tape tp;
    Tape::T out =
        mlp_forward(tp, const_cast<TrainedModel &>(m).gomega, tp.constant({1, K}, zrow));
    const float *w = tp.data(out);  // layout: axis-major, w[axis*L1 + i] = W[i][axis]
    for (int axis = 0; axis < 3; ++axis)
      for (int i = 0; i < L1; ++i) fc.W[std::size_t(i) * 3 + axis] = w[axis * L1 + i];
  }
  if (m.cfg.mode == TrainMode::FixedTemplate) {
    fc.v[0] = cfloat(1.0f, 0.0f);
  } else {
    Tape tp;
    Tape::T out = mlp_forward(tp, const_cast<TrainedModel &>(m).gnu, tp.constant({1, K}, zrow));
    const float *v = tp.data(out);
    for (int l = 0; l < L2; ++l) fc.v[std::size_t(l)] = cfloat(v[2 * l], v[2 * l + 1]);
  }
  return fc;
}

std::vector<float> combine_deformation(const DeformationBasis &D, const std::vector<float> &W) {
  if (int(W.size()) != D.L1 * 3) throw ContractError("combine_deformation: W shape mismatch");
  const std::int64_t n = D.grid.voxels();
  std::vector<float> phi(std::size_t(3) * n, 0.0f);
  for (int axis = 0; axis < 3; ++axis) {
    float *dst = phi.data() + std::size_t(axis) * n;
    for (int i = 0; i < D.L1; ++i) {
      const float w = kFlowGain * W[std::size_t(i) * 3 + axis];
      if (w == 0.0f) continue;
      const float *src = D.component(i);
      for (std::int64_t p = 0; p < n; ++p) dst[p] += w * src[p];
    }
  }
  return phi;
}

std::vector<cfloat> combine_image(const ImageBasis &B, const std::vector<cfloat> &v) {
  if (int(v.size()) != B.L2) throw ContractError("combine_image: v shape mismatch");
  const std::int64_t n = B.grid.voxels();
  std::vector<cfloat> c(std::size_t(n), cfloat{});
  for (int l = 0; l < B.L2; ++l) {
    const cfloat w = v[std::size_t(l)];
    const cfloat *src = B.component(l);
    for (std::int64_t p = 0; p < n; ++p) c[std::size_t(p)] += w * src[p];
  }
  return c;
}

std::vector<cfloat> warp_volume(const std::vector<cfloat> &c, const std::vector<float> &phi,
                                const Grid &grid) {
  const std::int64_t n = grid.voxels();
  if (std::int64_t(c.size()) != n || std::int64_t(phi.size()) != 3 * n)
    throw ContractError("warp_volume: shape mismatch");
  std::vector<float> planes(std::size_t(2) * n);
  for (std::int64_t i = 0; i < n; ++i) {
    planes[std::size_t(i)] = c[std::size_t(i)].real();
    planes[std::size_t(n + i)] = c[std::size_t(i)].imag();
  }
  Tape tp;
  Tape::T img = tp.constant({2, grid.n1, grid.n2, grid.n3}, planes.data());
  Tape::T ph = tp.constant({3, grid.n1, grid.n2, grid.n3}, phi.data());
  Tape::T out = tp.warp(img, ph);
  const float *v = tp.data(out);
  std::vector<cfloat> res(std::size_t(n), cfloat{});
  for (std::int64_t i = 0; i < n; ++i) res[std::size_t(i)] = cfloat(v[i], v[n + i]);
  return res;
}

double deformation_regularizer(const std::vector<std::vector<float>> &phis, const Grid &grid) {
  if (phis.empty()) throw ContractError("deformation_regularizer: empty batch");
  const int D = grid.n1, H = grid.n2, W = grid.n3;
  const std::int64_t n = grid.voxels();
  double acc = 0;
  for (const auto &phi : phis) {
    if (std::int64_t(phi.size()) != 3 * n)
      throw ContractError("deformation_regularizer: field shape mismatch");
    for (int c = 0; c < 3; ++c) {
      const float *pc = phi.data() + std::size_t(c) * n;
      for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            const std::int64_t i = (std::int64_t(d) * H + h) * W + w;
            if (d + 1 < D) {
              double df = double(pc[i + std::int64_t(H) * W]) - pc[i];
              acc += df * df;
            }
            if (h + 1 < H) {
              double df = double(pc[i + W]) - pc[i];
              acc += df * df;
            }
            if (w + 1 < W) {
              double df = double(pc[i + 1]) - pc[i];
              acc += df * df;
            }
          }
    }
  }
  const double terms = 3.0 * (double(D - 1) * H * W + double(D) * (H - 1) * W +
                              double(D) * H * (W - 1));
  if (terms <= 0) return 0.0;
  return acc / (double(phis.size()) * terms);
}

std::vector<cfloat> compose_frame(const TrainedModel &m, int t) {
  if (t < 0 || t >= m.frames) throw ContractError("compose_frame: frame out of range");
  const ImageBasis B = eval_image_basis(m);
  const FrameCoefficients fc = eval_coefficients(m, t);
  std::vector<cfloat> c = combine_image(B, fc.v);
  if (!uses_flow_path(m.cfg.mode)) return c;
  const DeformationBasis D = eval_deformation_basis(m);
  return warp_volume(c, combine_deformation(D, fc.W), m.grid);
}

// ---- training ------------------------------------------------------------------

namespace {

/// Builds the composite frame x~^(t) as a tape subgraph. basisD/basisB are the
/// shared generator outputs for this iteration. Returns (x, phi); phi is
/// invalid in manifold-only mode.
struct FrameGraph {
  Tape::T x;
  Tape::T phi;
};

FrameGraph compose_frame_graph(Tape &tp, TrainedModel &m, Tape::T zleaf, Tape::T basisD,
                               Tape::T basisB, int t) {
  FrameGraph fg;
  Tape::T zrow = tp.rows(zleaf, t, t + 1);
  Tape::T c;
  if (m.cfg.mode == TrainMode::FixedTemplate) {
    static const float one[2] = {1.0f, 0.0f};
    c = tp.complex_combine(tp.constant({2}, one), basisB);
  } else {
    c = tp.complex_combine(mlp_forward(tp, m.gnu, zrow), basisB);
  }
  if (!uses_flow_path(m.cfg.mode)) {
    fg.x = c;
    return fg;
  }
  Tape::T wout = mlp_forward(tp, m.gomega, zrow);  // [1, 3*L1], axis-major
  fg.phi = tp.scale(tp.mix(tp.reshape(wout, {3, m.cfg.L1}), basisD), kFlowGain);
  fg.x = tp.warp(c, fg.phi);
  return fg;
}

}  // namespace

TrainedModel train(const acquisition::KSpaceSeries &ks, const acquisition::CoilMaps &maps,
                   const gating::LatentInit &latent_init, const ModelConfig &cfg) {
  cfg.validate();
  const Grid grid = ks.grid();
  if (maps.grid != grid) throw ContractError("train: coil map grid mismatch");
  if (latent_init.frames != ks.frames) throw ContractError("train: latent frame count mismatch");
  if (ks.frames < 1) throw ContractError("train: empty k-space series");

  TrainedModel m = build_model(cfg, grid, ks.frames, &latent_init);
  std::vector<Variable *> params = m.trainable_parameters();
  nn::Adam opt;

  const int T = ks.frames;
  const int eff = std::min(cfg.batch_frames, T);  // single-window fallback when T < batch
  std::mt19937_64 wrng(stream_seed(cfg.seed, 0xBA7C));
  std::uniform_int_distribution<int> start_dist(0, T - eff);

  m.loss_trace.reserve(std::size_t(cfg.iterations));
  m.dc_trace.reserve(std::size_t(cfg.iterations));
  const bool flow = uses_flow_path(cfg.mode);

  for (int it = 0; it < cfg.iterations; ++it) {
    const float lr = nn::cosine_lr(it, cfg.iterations, cfg.lr_initial, cfg.lr_final);
    const int s0 = start_dist(wrng);

    Tape tp;
    Tape::T zleaf = tp.leaf(m.z);
    Tape::T basisD{};
    if (flow) basisD = conv_decoder_forward(tp, m.gdelta, tp.leaf(m.zbar), grid);
    Tape::T basisB = unet_forward(tp, m.gbeta, tp.leaf(m.zdd), grid);

    Tape::T dc_sum{}, reg_sum{};
    for (int k = 0; k < eff; ++k) {
      const int t = s0 + k;
      FrameGraph fg = compose_frame_graph(tp, m, zleaf, basisD, basisB, t);
      Tape::T dc = tp.dc_loss(fg.x, ks, maps, t);
      dc_sum = dc_sum.valid() ? tp.add(dc_sum, dc) : dc;
      if (fg.phi.valid()) {
        Tape::T r = tp.fd_reg(fg.phi);
        reg_sum = reg_sum.valid() ? tp.add(reg_sum, r) : r;
      }
    }

    Tape::T loss = tp.scale(dc_sum, 1.0f / float(eff));
    if (reg_sum.valid() && cfg.lambda_smooth > 0)
      loss = tp.add(loss, tp.scale(reg_sum, cfg.lambda_smooth / float(eff)));

    const float lv = tp.scalar(loss);
    if (!std::isfinite(lv))
      throw DivergenceError("train: loss is not finite at iteration " + std::to_string(it) +
                            " (lr " + std::to_string(lr) + ", window start " +
                            std::to_string(s0) + ")");
    tp.backward(loss);
    opt.step(params, lr);

    m.loss_trace.push_back(lv);
    m.dc_trace.push_back(tp.scalar(dc_sum) / float(eff));
    m.reg_trace.push_back(reg_sum.valid() ? tp.scalar(reg_sum) / float(eff) : 0.0f);
  }
  return m;
}

// ---- inference -------------------------------------------------------------------

ImageSeries infer(const TrainedModel &m, int tau1, int tau2) {
  if (tau1 < 1 || tau1 > tau2 || tau2 > m.frames)
    throw ContractError("infer: need 1 <= tau1 <= tau2 <= T");
  const ImageBasis B = eval_image_basis(m);
  DeformationBasis D;
  const bool flow = uses_flow_path(m.cfg.mode);
  if (flow) D = eval_deformation_basis(m);

  ImageSeries out(m.grid, tau2 - tau1 + 1);
  const std::int64_t n = m.grid.voxels();
  for (int t = tau1; t <= tau2; ++t) {
    const FrameCoefficients fc = eval_coefficients(m, t - 1);
    std::vector<cfloat> c = combine_image(B, fc.v);
    if (flow) c = warp_volume(c, combine_deformation(D, fc.W), m.grid);
    std::memcpy(out.frame(t - tau1), c.data(), std::size_t(n) * sizeof(cfloat));
  }
  return out;
}

// ---- checkpoint -------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'D', 'L', '1'};
constexpr std::uint32_t kVersion = 1;

template <class Word>
void put(std::ostream &os, Word w) {
  os.write(reinterpret_cast<const char *>(&w), sizeof(w));
}

template <class Word>
Word get(std::istream &is) {
  Word w{};
  is.read(reinterpret_cast<char *>(&w), sizeof(w));
  if (!is) throw FormatError("MDL1: truncated file");
  return w;
}

void put_ints(std::ostream &os, const std::vector<int> &v) {
  put<std::uint32_t>(os, std::uint32_t(v.size()));
  for (int x : v) put<std::int32_t>(os, x);
}

std::vector<int> get_ints(std::istream &is) {
  const std::uint32_t n = get<std::uint32_t>(is);
  if (n > 1u << 20) throw FormatError("MDL1: implausible list length");
  std::vector<int> v(n);
  for (auto &x : v) x = get<std::int32_t>(is);
  return v;
}

void put_floats(std::ostream &os, const std::vector<float> &v) {
  put<std::uint32_t>(os, std::uint32_t(v.size()));
  os.write(reinterpret_cast<const char *>(v.data()), std::streamsize(v.size() * sizeof(float)));
}

std::vector<float> get_floats(std::istream &is) {
  const std::uint32_t n = get<std::uint32_t>(is);
  std::vector<float> v(n);
  is.read(reinterpret_cast<char *>(v.data()), std::streamsize(v.size() * sizeof(float)));
  if (!is) throw FormatError("MDL1: truncated float block");
  return v;
}

}  // namespace

void save_model(const TrainedModel &m, const std::string &path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("MDL1: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);

  const ModelConfig &c = m.cfg;
  put<std::int32_t>(os, c.L1);
  put<std::int32_t>(os, c.L2);
  put<std::int32_t>(os, c.K);
  put_ints(os, c.conv_decoder_channels);
  put_ints(os, c.unet_channels);
  put_ints(os, c.mlp_flow_widths);
  put_ints(os, c.mlp_image_widths);
  put<float>(os, c.lambda_smooth);
  put<std::int32_t>(os, c.iterations);
  put<std::int32_t>(os, c.batch_frames);
  put<float>(os, c.lr_initial);
  put<float>(os, c.lr_final);
  put<std::uint32_t>(os, c.seed);
  put<std::uint8_t>(os, std::uint8_t(c.mode));

  put<std::int32_t>(os, m.grid.n1);
  put<std::int32_t>(os, m.grid.n2);
  put<std::int32_t>(os, m.grid.n3);
  put<std::int32_t>(os, m.frames);

  const auto params = m.all_parameters();
  put<std::uint32_t>(os, std::uint32_t(params.size()));
  for (const Variable *p : params) {
    put<std::uint16_t>(os, std::uint16_t(p->name.size()));
    os.write(p->name.data(), std::streamsize(p->name.size()));
    put<std::uint8_t>(os, std::uint8_t(p->dims.size()));
    for (int d : p->dims) put<std::int32_t>(os, d);
    put_floats(os, p->value);
  }
  put_floats(os, m.loss_trace);
  put_floats(os, m.dc_trace);
  put_floats(os, m.reg_trace);
  if (!os) throw FormatError("MDL1: write failed for " + path);
}

TrainedModel load_model(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("MDL1: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("MDL1: bad magic in " + path);
  if (get<std::uint32_t>(is) != kVersion) throw FormatError("MDL1: unsupported version");

  ModelConfig c;
  c.L1 = get<std::int32_t>(is);
  c.L2 = get<std::int32_t>(is);
  c.K = get<std::int32_t>(is);
  c.conv_decoder_channels = get_ints(is);
  c.unet_channels = get_ints(is);
  c.mlp_flow_widths = get_ints(is);
  c.mlp_image_widths = get_ints(is);
  c.lambda_smooth = get<float>(is);
  c.iterations = get<std::int32_t>(is);
  c.batch_frames = get<std::int32_t>(is);
  c.lr_initial = get<float>(is);
  c.lr_final = get<float>(is);
  c.seed = get<std::uint32_t>(is);
  c.mode = TrainMode(get<std::uint8_t>(is));

  Grid grid;
  grid.n1 = get<std::int32_t>(is);
  grid.n2 = get<std::int32_t>(is);
  grid.n3 = get<std::int32_t>(is);
  const int frames = get<std::int32_t>(is);

  TrainedModel m = build_model(c, grid, frames, nullptr);
  auto params = m.all_parameters();
  const std::uint32_t n_params = get<std::uint32_t>(is);
  if (n_params != params.size()) throw FormatError("MDL1: parameter count mismatch");
  for (Variable *p : params) {
    const std::uint16_t len = get<std::uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is || name != p->name) throw FormatError("MDL1: parameter name mismatch at " + p->name);
    const std::uint8_t nd = get<std::uint8_t>(is);
    std::vector<int> dims(nd);
    for (auto &d : dims) d = get<std::int32_t>(is);
    if (dims != p->dims) throw FormatError("MDL1: shape mismatch at " + p->name);
    auto vals = get_floats(is);
    if (vals.size() != p->value.size()) throw FormatError("MDL1: size mismatch at " + p->name);
    p->value = std::move(vals);
  }
  m.loss_trace = get_floats(is);
  m.dc_trace = get_floats(is);
  m.reg_trace = get_floats(is);
  return m;
}

}  // namespace mldip::model
