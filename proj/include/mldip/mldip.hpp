#pragma once

#include "mldip/acquisition.hpp"
#include "mldip/core.hpp"
#include "mldip/gating.hpp"
#include "mldip/nn.hpp"

#include <string>
#include <vector>

namespace mldip::model {

/// Training loss became non-finite.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string &msg) : std::runtime_error(msg) {}
};

enum class TrainMode : std::uint8_t {
  Full = 0,           // joint deformation + image paths (the method)
  FixedTemplate = 1,  // image path frozen to a single static template (ablation)
  ManifoldOnly = 2,   // no warping; composite image alone explains the data
};

/// Architecture and optimization settings. The default channel widths follow
/// the reference architecture; `desk_default()` shrinks them for single-core
/// runs and `paper_scale()` restores the published configuration.
struct ModelConfig {
  int L1 = 12;  // deformation-basis rank
  int L2 = 8;   // image-basis rank
  int K = 6;    // latent dimension (2 respiratory + 4 cardiac components)

  // Flow-basis ConvDecoder: output width of each upsampling block; the final
  // block runs two conv units at the last width and a linear conv to L1.
  // One x2 upsample per entry, so the code volume is ceil(grid / 2^size()).
  std::vector<int> conv_decoder_channels{256, 256, 128, 128, 64};
  // Image-basis U-Net encoder widths E1..En; the first stage has no pooling,
  // so there are size()-1 pool/upsample levels. Decoder widths mirror these.
  std::vector<int> unet_channels{16, 32, 64, 64, 64};
  // Hidden widths of the two coefficient MLPs (7 layers total each).
  std::vector<int> mlp_flow_widths{32, 64, 128, 256, 256, 128};
  std::vector<int> mlp_image_widths{32, 64, 128, 256, 128, 64};

  float lambda_smooth = 0.1f;
  int iterations = 3000;
  int batch_frames = 8;
  float lr_initial = 1e-3f;
  float lr_final = 2e-4f;
  std::uint32_t seed = 1;
  TrainMode mode = TrainMode::Full;

  void validate() const;  // throws ConfigError on violated invariants

  static ModelConfig desk_default();
  static ModelConfig paper_scale();
};

// ---- basis / coefficient value types ---------------------------------------

/// L1 scalar volumes d^(1..L1), stored basis-major.
struct DeformationBasis {
  Grid grid;
  int L1 = 0;
  std::vector<float> d;  // L1 * voxels

  const float *component(int i) const { return d.data() + std::size_t(i) * grid.voxels(); }
};

/// L2 complex volumes b^(1..L2), stored basis-major.
struct ImageBasis {
  Grid grid;
  int L2 = 0;
  std::vector<cfloat> b;  // L2 * voxels

  const cfloat *component(int i) const { return b.data() + std::size_t(i) * grid.voxels(); }
};

/// Frame-specific weights: W is L1 x 3 row-major (row i = weights of d^(i)
/// along the three axes), v is the complex image-coefficient vector.
struct FrameCoefficients {
  std::vector<float> W;   // L1 * 3
  std::vector<cfloat> v;  // L2
};

// ---- parameter containers ---------------------------------------------------

/// Conv (or fully connected) + batch norm + leaky ReLU unit.
struct ConvUnit {
  nn::Variable w, b, gamma, beta;
};

/// Plain convolution / fully connected layer.
struct ConvLayer {
  nn::Variable w, b;
};

struct ConvDecoderParams {
  std::vector<ConvUnit> units;  // 3 per upsampling block, then 2 at the end
  ConvLayer final_conv;         // -> L1 channels
};

struct UNetParams {
  std::vector<ConvUnit> enc;  // E1..En (conv before pooling)
  ConvUnit bottleneck;
  std::vector<ConvUnit> dec;  // D1..D(n-1), after upsample+skip concat
  ConvUnit out_unit;          // final CBR at the top width
  ConvLayer final_conv;       // -> 2*L2 channels
};

struct MLPParams {
  std::vector<ConvLayer> layers;  // leaky ReLU between, linear final layer
};

/// Everything optimized by train(): the four generators, the three code-vector
/// sets, the configuration, and the training-loss traces.
struct TrainedModel {
  ModelConfig cfg;
  Grid grid;
  int frames = 0;
  int code_d = 0, code_h = 0, code_w = 0;  // flow-code spatial dims

  ConvDecoderParams gdelta;  // flow basis generator
  UNetParams gbeta;          // image basis generator
  MLPParams gomega;          // flow coefficient generator
  MLPParams gnu;             // image coefficient generator

  nn::Variable zbar;  // [2, code_d, code_h, code_w]
  nn::Variable zdd;   // [2, n1, n2, n3]
  nn::Variable z;     // [T, K] per-frame latents

  std::vector<float> loss_trace;  // total objective per iteration
  std::vector<float> dc_trace;    // mean data-consistency term per iteration
  std::vector<float> reg_trace;   // mean smoothness regularizer per iteration

  /// All parameters in deterministic registration order (generators first,
  /// then code volumes and latents).
  std::vector<nn::Variable *> all_parameters();
  std::vector<const nn::Variable *> all_parameters() const;
  /// Subset actually optimized under cfg.mode.
  std::vector<nn::Variable *> trainable_parameters();
  std::int64_t parameter_count() const;  // sum over all_parameters()
};

/// Constructs and deterministically initializes a model (weights from
/// cfg.seed; z-bar/z-double-bar from U(0, 0.1); per-frame latents copied from
/// latent_init when given, zero otherwise).
TrainedModel build_model(const ModelConfig &cfg, const Grid &grid, int frames,
                         const gating::LatentInit *latent_init);

// ---- tape graph builders (used by train; exposed for tests) -----------------

/// ConvDecoder forward: code [2, cd, ch, cw] -> [L1, n1, n2, n3].
nn::Tape::T conv_decoder_forward(nn::Tape &tape, ConvDecoderParams &p, nn::Tape::T code,
                                 const Grid &grid);

/// U-Net forward: code [2, n1, n2, n3] -> [2*L2, n1, n2, n3] (internal
/// pad-then-crop when a grid dim is not divisible by 2^levels).
nn::Tape::T unet_forward(nn::Tape &tape, UNetParams &p, nn::Tape::T code, const Grid &grid);

/// MLP forward: z row [1, K] -> [1, out_dim].
nn::Tape::T mlp_forward(nn::Tape &tape, MLPParams &p, nn::Tape::T z);

// ---- eager evaluation (inference / tests) ------------------------------------

DeformationBasis eval_deformation_basis(const TrainedModel &m);
ImageBasis eval_image_basis(const TrainedModel &m);
/// t is 0-based.
FrameCoefficients eval_coefficients(const TrainedModel &m, int t);

/// Fixed gain between the mixed deformation basis and the displacement field
/// in voxels. Keeps the manifold weights and basis values O(1): Adam moves
/// each raw parameter by at most ~lr per step, so without the gain a
/// multi-voxel systolic displacement is unreachable within a short training
/// budget and the reconstruction under-contracts.
inline constexpr float kFlowGain = 4.0f;

/// phi_axis = kFlowGain * sum_i d^(i) * W[i][axis]; returns [3, voxels] voxel
/// displacements.
std::vector<float> combine_deformation(const DeformationBasis &D, const std::vector<float> &W);

/// c = sum_i b^(i) * v_i.
std::vector<cfloat> combine_image(const ImageBasis &B, const std::vector<cfloat> &v);

/// out(p) = c(p + phi(p)), trilinear with border replication.
std::vector<cfloat> warp_volume(const std::vector<cfloat> &c, const std::vector<float> &phi,
                                const Grid &grid);

/// Mean squared forward finite difference over a batch of displacement
/// fields [3, voxels] each: averaged over all difference terms and the batch,
/// so the value is independent of the grid size.
double deformation_regularizer(const std::vector<std::vector<float>> &phis, const Grid &grid);

/// x~^(t) = warp(combine_image(B, G_nu(z_t)), combine_deformation(D, G_omega(z_t))).
/// t is 0-based.
std::vector<cfloat> compose_frame(const TrainedModel &m, int t);

// ---- training / inference ----------------------------------------------------

TrainedModel train(const acquisition::KSpaceSeries &ks, const acquisition::CoilMaps &maps,
                   const gating::LatentInit &latent_init, const ModelConfig &cfg);

/// Generates frames tau1..tau2 (1-based, inclusive); no optimization.
ImageSeries infer(const TrainedModel &m, int tau1, int tau2);

// ---- checkpoint (MDL1) --------------------------------------------------------
// Layout, little-endian: magic "MDL1"; u32 version; config echo; grid and
// frame count; named float32 parameter blobs; loss traces. Round trips
// bit-exactly.

void save_model(const TrainedModel &m, const std::string &path);
TrainedModel load_model(const std::string &path);

}  // namespace mldip::model
