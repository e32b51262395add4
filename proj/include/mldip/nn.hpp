#pragma once

#include "mldip/acquisition.hpp"
#include "mldip/core.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mldip::nn {

/// Trainable parameter with Adam state. Gradients accumulate across the
/// backward passes of one iteration and are zeroed by the optimizer step.
struct Variable {
  std::string name;
  std::vector<int> dims;
  std::vector<float> value, grad, m, v;

  Variable() = default;
  Variable(std::string n, std::vector<int> d);
  std::int64_t numel() const { return std::int64_t(value.size()); }
};

struct Adam {
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  long step_count = 0;

  void step(std::vector<Variable *> &params, float lr);
  static void zero_grad(std::vector<Variable *> &params);
};

/// Cosine annealing from lr_max to lr_min over total steps.
float cosine_lr(long step, long total, float lr_max, float lr_min);

/// Define-by-run reverse-mode tape over float tensors. Values are computed
/// eagerly; backward closures run in reverse creation order. Reductions
/// accumulate in double.
class Tape {
 public:
  struct T {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  // Leaves.
  T leaf(Variable &v);                                     // grads flow into v.grad
  T constant(std::vector<int> dims, const float *data);    // no grad
  T zeros(std::vector<int> dims, bool needs_grad = false);

  // Elementwise.
  T add(T a, T b);
  T sub(T a, T b);
  T hadamard(T a, T b);
  T scale(T a, float s);
  T leaky_relu(T a, float slope = 0.01f);
  T sigmoid(T a);
  T tanh_(T a);

  // Linear algebra.
  /// x: [B, I] or [I]; w: [O, I]; b: [O] (optional). Returns [B, O] or [O].
  T linear(T x, T w, T b);
  /// coeff: [M, L], basis: [L, N] -> [M, N] (plain matrix product).
  T mix(T coeff, T basis);
  /// Row slice of a [B, I] tensor -> [r1-r0, I].
  T rows(T x, int r0, int r1);
  /// View with new dims (same element count); shares value and gradient
  /// storage with x, so it costs nothing and needs no backward closure.
  T reshape(T x, std::vector<int> dims);

  // 3D ops; volumes are [C, D, H, W] row-major, W fastest.
  T conv3d(T x, T w, T bias);  // w: [Cout, Cin, 3, 3, 3], stride 1, pad 1
  T batchnorm(T x, T gamma, T beta, float eps = 1e-5f);  // instance statistics
  T avgpool2(T x);                                       // halves D, H, W (must be even)
  T resize_trilinear(T x, int D, int H, int W);
  T concat(T a, T b);  // along channels, same spatial dims
  T pad3d(T x, int D, int H, int W);   // zero pad at the high end to (D,H,W)
  T crop3d(T x, int D, int H, int W);  // crop at the high end to (D,H,W)

  /// Trilinear warp with border replication. img: [C, D, H, W],
  /// phi: [3, D, H, W] voxel displacements; out[c](p) = img[c](p + phi(p)).
  T warp(T img, T phi);

  /// Composite combine of a complex basis: basis [2L, N] with channel 2l the
  /// real and 2l+1 the imaginary part of component l; coeff [2L] interleaved
  /// the same way. Returns [2, N], the complex linear combination.
  T complex_combine(T coeff, T basis);

  /// Smoothness penalty: mean squared forward difference of phi [3,D,H,W]
  /// along the three spatial axes (averaged over all difference terms).
  T fd_reg(T phi);

  /// Data-consistency term ||A^(t) x - y_t||^2 / M for frame t of ks;
  /// x is [2, n1*n2*n3] (real/imag). Backward uses the analytic adjoint.
  T dc_loss(T x, const acquisition::KSpaceSeries &ks, const acquisition::CoilMaps &maps, int t);

  /// Mean squared error against a constant target (testing / simple fits).
  T mse(T a, const float *target);

  // Graph control.
  void backward(T loss);
  void reset();

  // Introspection.
  const float *data(T t) const;
  float *mutable_data(T t);
  const float *grad(T t) const;
  const std::vector<int> &dims(T t) const;
  std::int64_t numel(T t) const;
  float scalar(T t) const;  // value of a 1-element tensor

 private:
  struct Node {
    std::vector<int> dims;
    std::vector<float> storage;   // owned unless leaf
    std::vector<float> gstorage;  // owned unless leaf
    float *val = nullptr;
    float *grd = nullptr;  // null when grad not required
    std::int64_t n = 0;
    std::function<void()> back;  // may be empty
  };
  std::vector<Node> nodes;

  T make(std::vector<int> dims, bool needs_grad);
  Node &at(T t);
  const Node &at(T t) const;
  friend struct TapeTestPeer;
};

/// Central-difference gradient check helper used by the test suite: returns
/// the maximum relative error between analytic and numeric gradients of the
/// scalar built by `build` with respect to every entry of every variable.
double gradcheck(const std::function<Tape::T(Tape &)> &build, std::vector<Variable *> vars,
                 float fd_eps);

}  // namespace mldip::nn
