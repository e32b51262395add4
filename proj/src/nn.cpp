#include "mldip/nn.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <random>

namespace mldip::nn {

namespace {

std::int64_t product(const std::vector<int> &dims) {
  std::int64_t n = 1;
  for (int d : dims) n *= d;
  return n;
}

}  // namespace

Variable::Variable(std::string n, std::vector<int> d) : name(std::move(n)), dims(std::move(d)) {
  std::int64_t sz = product(dims);
  value.assign(sz, 0.0f);
  grad.assign(sz, 0.0f);
  m.assign(sz, 0.0f);
  v.assign(sz, 0.0f);
}

void Adam::step(std::vector<Variable *> &params, float lr) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(double(beta1), double(step_count));
  const double bc2 = 1.0 - std::pow(double(beta2), double(step_count));
  for (Variable *p : params) {
    const std::int64_t n = p->numel();
    for (std::int64_t i = 0; i < n; ++i) {
      float g = p->grad[i];
      p->m[i] = beta1 * p->m[i] + (1 - beta1) * g;
      p->v[i] = beta2 * p->v[i] + (1 - beta2) * g * g;
      float mhat = float(p->m[i] / bc1);
      float vhat = float(p->v[i] / bc2);
      p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      p->grad[i] = 0.0f;
    }
  }
}

void Adam::zero_grad(std::vector<Variable *> &params) {
  for (Variable *p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

float cosine_lr(long step, long total, float lr_max, float lr_min) {
  if (total <= 1) return lr_max;
  double x = double(step) / double(total - 1);
  if (x > 1.0) x = 1.0;
  return float(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * x)));
}

// ---------------------------------------------------------------------------
// Tape core.
//
// NOTE: make() grows the node vector and invalidates Node references, so ops
// fetch input references only after allocating their output, and backward
// closures re-fetch through at().

Tape::T Tape::make(std::vector<int> dims, bool needs_grad) {
  Node node;
  node.n = product(dims);
  node.dims = std::move(dims);
  node.storage.assign(node.n, 0.0f);
  if (needs_grad) node.gstorage.assign(node.n, 0.0f);
  nodes.push_back(std::move(node));
  Node &stored = nodes.back();
  stored.val = stored.storage.data();
  if (needs_grad) stored.grd = stored.gstorage.data();
  return {int(nodes.size()) - 1};
}

Tape::Node &Tape::at(T t) {
  if (!t.valid() || t.id >= int(nodes.size())) throw ContractError("tape: invalid tensor handle");
  return nodes[t.id];
}

const Tape::Node &Tape::at(T t) const {
  if (!t.valid() || t.id >= int(nodes.size())) throw ContractError("tape: invalid tensor handle");
  return nodes[t.id];
}

Tape::T Tape::leaf(Variable &v) {
  Node node;
  node.dims = v.dims;
  node.n = v.numel();
  nodes.push_back(std::move(node));
  Node &stored = nodes.back();
  stored.val = v.value.data();
  stored.grd = v.grad.data();
  return {int(nodes.size()) - 1};
}

Tape::T Tape::constant(std::vector<int> dims, const float *data) {
  T t = make(std::move(dims), false);
  std::memcpy(at(t).val, data, std::size_t(at(t).n) * sizeof(float));
  return t;
}

Tape::T Tape::zeros(std::vector<int> dims, bool needs_grad) {
  return make(std::move(dims), needs_grad);
}

void Tape::backward(T loss) {
  Node &l = at(loss);
  if (l.n != 1) throw ContractError("backward: loss must be scalar");
  if (!l.grd) throw ContractError("backward: loss does not require grad");
  l.grd[0] = 1.0f;
  for (int i = loss.id; i >= 0; --i)
    if (nodes[i].back) nodes[i].back();
}

void Tape::reset() { nodes.clear(); }

const float *Tape::data(T t) const { return at(t).val; }
float *Tape::mutable_data(T t) { return at(t).val; }
const float *Tape::grad(T t) const { return at(t).grd; }
const std::vector<int> &Tape::dims(T t) const { return at(t).dims; }
std::int64_t Tape::numel(T t) const { return at(t).n; }

float Tape::scalar(T t) const {
  if (at(t).n != 1) throw ContractError("scalar: tensor is not a scalar");
  return at(t).val[0];
}

// ---------------------------------------------------------------------------
// Elementwise

Tape::T Tape::add(T a, T b) {
  if (at(a).n != at(b).n) throw ContractError("add: size mismatch");
  bool ng = at(a).grd || at(b).grd;
  T out = make(at(a).dims, ng);
  Node &no = at(out);
  const float *av = at(a).val, *bv = at(b).val;
  for (std::int64_t i = 0; i < no.n; ++i) no.val[i] = av[i] + bv[i];
  if (ng)
    no.back = [this, a, b, out] {
      Node &na = at(a), &nb = at(b), &no = at(out);
      if (na.grd)
        for (std::int64_t i = 0; i < no.n; ++i) na.grd[i] += no.grd[i];
      if (nb.grd)
        for (std::int64_t i = 0; i < no.n; ++i) nb.grd[i] += no.grd[i];
    };
  return out;
}

Tape::T Tape::sub(T a, T b) {
  if (at(a).n != at(b).n) throw ContractError("sub: size mismatch");
  bool ng = at(a).grd || at(b).grd;
  T out = make(at(a).dims, ng);
  Node &no = at(out);
  const float *av = at(a).val, *bv = at(b).val;
  for (std::int64_t i = 0; i < no.n; ++i) no.val[i] = av[i] - bv[i];
  if (ng)
    no.back = [this, a, b, out] {
      Node &na = at(a), &nb = at(b), &no = at(out);
      if (na.grd)
        for (std::int64_t i = 0; i < no.n; ++i) na.grd[i] += no.grd[i];
      if (nb.grd)
        for (std::int64_t i = 0; i < no.n; ++i) nb.grd[i] -= no.grd[i];
    };
  return out;
}

Tape::T Tape::hadamard(T a, T b) {
  if (at(a).n != at(b).n) throw ContractError("hadamard: size mismatch");
  bool ng = at(a).grd || at(b).grd;
  T out = make(at(a).dims, ng);
  Node &no = at(out);
  const float *av = at(a).val, *bv = at(b).val;
  for (std::int64_t i = 0; i < no.n; ++i) no.val[i] = av[i] * bv[i];
  if (ng)
    no.back = [this, a, b, out] {
      Node &na = at(a), &nb = at(b), &no = at(out);
      if (na.grd)
        for (std::int64_t i = 0; i < no.n; ++i) na.grd[i] += no.grd[i] * nb.val[i];
      if (nb.grd)
        for (std::int64_t i = 0; i < no.n; ++i) nb.grd[i] += no.grd[i] * na.val[i];
    };
  return out;
}

Tape::T Tape::scale(T a, float s) {
  bool ng = at(a).grd != nullptr;
  T out = make(at(a).dims, ng);
  Node &no = at(out);
  const float *av = at(a).val;
  for (std::int64_t i = 0; i < no.n; ++i) no.val[i] = s * av[i];
  if (ng)
    no.back = [this, a, out, s] {
      Node &na = at(a), &no = at(out);
      for (std::int64_t i = 0; i < no.n; ++i) na.grd[i] += s * no.grd[i];
    };
  return out;
}

Tape::T Tape::leaky_relu(T a, float slope) {
  bool ng = at(a).grd != nullptr;
  T out = make(at(a).dims, ng);
  Node &no = at(out);
  const float *av = at(a).val;
  for (std::int64_t i = 0; i < no.n; ++i) no.val[i] = av[i] > 0 ? av[i] : slope * av[i];
  if (ng)
    no.back = [this, a, out, slope] {
      Node &na = at(a), &no = at(out);
      for (std::int64_t i = 0; i < no.n; ++i)
        na.grd[i] += no.grd[i] * (na.val[i] > 0 ? 1.0f : slope);
    };
  return out;
}

Tape::T Tape::sigmoid(T a) {
  bool ng = at(a).grd != nullptr;
  T out = make(at(a).dims, ng);
  Node &no = at(out);
  const float *av = at(a).val;
  for (std::int64_t i = 0; i < no.n; ++i) no.val[i] = 1.0f / (1.0f + std::exp(-av[i]));
  if (ng)
    no.back = [this, a, out] {
      Node &na = at(a), &no = at(out);
      for (std::int64_t i = 0; i < no.n; ++i)
        na.grd[i] += no.grd[i] * no.val[i] * (1.0f - no.val[i]);
    };
  return out;
}

Tape::T Tape::tanh_(T a) {
  bool ng = at(a).grd != nullptr;
  T out = make(at(a).dims, ng);
  Node &no = at(out);
  const float *av = at(a).val;
  for (std::int64_t i = 0; i < no.n; ++i) no.val[i] = std::tanh(av[i]);
  if (ng)
    no.back = [this, a, out] {
      Node &na = at(a), &no = at(out);
      for (std::int64_t i = 0; i < no.n; ++i)
        na.grd[i] += no.grd[i] * (1.0f - no.val[i] * no.val[i]);
    };
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tape::T Tape::linear(T x, T w, T b) {
  if (at(w).dims.size() != 2) throw ContractError("linear: weight must be 2-D");
  const int O = at(w).dims[0], I = at(w).dims[1];
  const bool batched = at(x).dims.size() == 2;
  const int B = batched ? at(x).dims[0] : 1;
  if ((batched ? at(x).dims[1] : int(at(x).n)) != I)
    throw ContractError("linear: input width mismatch");
  const bool has_b = b.valid();
  if (has_b && at(b).n != O) throw ContractError("linear: bias size mismatch");

  bool ng = at(x).grd || at(w).grd || (has_b && at(b).grd);
  T out = make(batched ? std::vector<int>{B, O} : std::vector<int>{O}, ng);
  Node &no = at(out);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, B, O, I, 1.0f, at(x).val, I, at(w).val, I,
              0.0f, no.val, O);
  if (has_b) {
    const float *bv = at(b).val;
    for (int r = 0; r < B; ++r)
      for (int o = 0; o < O; ++o) no.val[std::size_t(r) * O + o] += bv[o];
  }
  if (ng)
    no.back = [this, x, w, b, out, B, O, I, has_b] {
      Node &nx = at(x), &nw = at(w), &no = at(out);
      if (nx.grd)  // gx += gy w
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, B, I, O, 1.0f, no.grd, O, nw.val,
                    I, 1.0f, nx.grd, I);
      if (nw.grd)  // gw += gy^T x
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, O, I, B, 1.0f, no.grd, O, nx.val, I,
                    1.0f, nw.grd, I);
      if (has_b && at(b).grd) {
        float *gb = at(b).grd;
        for (int r = 0; r < B; ++r)
          for (int o = 0; o < O; ++o) gb[o] += no.grd[std::size_t(r) * O + o];
      }
    };
  return out;
}

Tape::T Tape::mix(T coeff, T basis) {
  if (at(coeff).dims.size() != 2 || at(basis).dims.size() < 2)
    throw ContractError("mix: need 2-D operands");
  const int M = at(coeff).dims[0], L = at(coeff).dims[1];
  if (at(basis).dims[0] != L) throw ContractError("mix: inner dimension mismatch");
  const std::int64_t N = at(basis).n / L;
  std::vector<int> odims = at(basis).dims;
  odims[0] = M;
  bool ng = at(coeff).grd || at(basis).grd;
  T out = make(std::move(odims), ng);
  Node &no = at(out);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, M, int(N), L, 1.0f, at(coeff).val, L,
              at(basis).val, int(N), 0.0f, no.val, int(N));
  if (ng)
    no.back = [this, coeff, basis, out, M, L, N] {
      Node &nc = at(coeff), &nb = at(basis), &no = at(out);
      if (nc.grd)  // gc += gy basis^T
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, M, L, int(N), 1.0f, no.grd, int(N),
                    nb.val, int(N), 1.0f, nc.grd, L);
      if (nb.grd)  // gb += coeff^T gy
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, L, int(N), M, 1.0f, nc.val, L,
                    no.grd, int(N), 1.0f, nb.grd, int(N));
    };
  return out;
}

Tape::T Tape::rows(T x, int r0, int r1) {
  if (at(x).dims.size() != 2 || r0 < 0 || r1 > at(x).dims[0] || r0 >= r1)
    throw ContractError("rows: bad slice");
  const int I = at(x).dims[1];
  bool ng = at(x).grd != nullptr;
  T out = make({r1 - r0, I}, ng);
  Node &no = at(out);
  std::memcpy(no.val, at(x).val + std::size_t(r0) * I, std::size_t(no.n) * sizeof(float));
  if (ng)
    no.back = [this, x, out, r0, I] {
      Node &nx = at(x), &no = at(out);
      float *g = nx.grd + std::size_t(r0) * I;
      for (std::int64_t i = 0; i < no.n; ++i) g[i] += no.grd[i];
    };
  return out;
}

Tape::T Tape::reshape(T x, std::vector<int> dims) {
  if (product(dims) != at(x).n) throw ContractError("reshape: element count mismatch");
  Node node;
  node.dims = std::move(dims);
  node.n = at(x).n;
  nodes.push_back(std::move(node));
  // Alias: share value and gradient buffers; downstream gradients accumulate
  // directly into x's buffer, so no backward closure is needed.
  Node &stored = nodes.back();
  stored.val = at(x).val;
  stored.grd = at(x).grd;
  return {int(nodes.size()) - 1};
}

Tape::T Tape::complex_combine(T coeff, T basis) {
  if (at(basis).dims.size() < 2 || at(basis).dims[0] % 2 != 0)
    throw ContractError("complex_combine: bad basis");
  const int L2 = at(basis).dims[0];  // 2L interleaved channels
  if (int(at(coeff).n) != L2) throw ContractError("complex_combine: coeff size mismatch");
  const std::int64_t N = at(basis).n / L2;
  std::vector<int> odims = at(basis).dims;
  odims[0] = 2;
  bool ng = at(coeff).grd || at(basis).grd;
  T out = make(std::move(odims), ng);
  Node &no = at(out);
  const float *cv = at(coeff).val, *bv = at(basis).val;
  for (int l = 0; l < L2 / 2; ++l) {
    const float cr = cv[2 * l], ci = cv[2 * l + 1];
    const float *br = bv + std::size_t(2 * l) * N;
    const float *bi = bv + std::size_t(2 * l + 1) * N;
    for (std::int64_t i = 0; i < N; ++i) {
      no.val[i] += cr * br[i] - ci * bi[i];
      no.val[N + i] += cr * bi[i] + ci * br[i];
    }
  }
  if (ng)
    no.back = [this, coeff, basis, out, L2, N] {
      Node &nc = at(coeff), &nb = at(basis), &no = at(out);
      const float *gr = no.grd, *gi = no.grd + N;
      for (int l = 0; l < L2 / 2; ++l) {
        const float cr = nc.val[2 * l], ci = nc.val[2 * l + 1];
        const float *br = nb.val + std::size_t(2 * l) * N;
        const float *bi = nb.val + std::size_t(2 * l + 1) * N;
        if (nc.grd) {
          double dcr = 0, dci = 0;
          for (std::int64_t i = 0; i < N; ++i) {
            dcr += double(gr[i]) * br[i] + double(gi[i]) * bi[i];
            dci += double(gi[i]) * br[i] - double(gr[i]) * bi[i];
          }
          nc.grd[2 * l] += float(dcr);
          nc.grd[2 * l + 1] += float(dci);
        }
        if (nb.grd) {
          float *gbr = nb.grd + std::size_t(2 * l) * N;
          float *gbi = nb.grd + std::size_t(2 * l + 1) * N;
          for (std::int64_t i = 0; i < N; ++i) {
            gbr[i] += cr * gr[i] + ci * gi[i];
            gbi[i] += cr * gi[i] - ci * gr[i];
          }
        }
      }
    };
  return out;
}

Tape::T Tape::mse(T a, const float *target) {
  bool ng = at(a).grd != nullptr;
  const std::int64_t n = at(a).n;
  T out = make({1}, ng);
  Node &no = at(out);
  const float *av = at(a).val;
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double d = double(av[i]) - target[i];
    acc += d * d;
  }
  no.val[0] = float(acc / double(n));
  if (ng) {
    std::vector<float> tgt(target, target + n);
    no.back = [this, a, out, tgt = std::move(tgt)] {
      Node &na = at(a), &no = at(out);
      const float s = 2.0f * no.grd[0] / float(na.n);
      for (std::int64_t i = 0; i < na.n; ++i) na.grd[i] += s * (na.val[i] - tgt[i]);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

double gradcheck(const std::function<Tape::T(Tape &)> &build, std::vector<Variable *> vars,
                 float fd_eps) {
  Adam::zero_grad(vars);
  Tape tape;
  Tape::T loss = build(tape);
  tape.backward(loss);
  std::vector<std::vector<float>> analytic;
  for (Variable *v : vars) analytic.push_back(v->grad);

  std::vector<std::vector<double>> numeric(vars.size());
  double gmax = 0;
  for (std::size_t k = 0; k < vars.size(); ++k) {
    Variable *v = vars[k];
    numeric[k].resize(v->numel());
    for (std::int64_t i = 0; i < v->numel(); ++i) {
      const float orig = v->value[i];
      v->value[i] = orig + fd_eps;
      Tape tp;
      double lp = tp.scalar(build(tp));
      v->value[i] = orig - fd_eps;
      Tape tm;
      double lm = tm.scalar(build(tm));
      v->value[i] = orig;
      numeric[k][i] = (lp - lm) / (2.0 * fd_eps);
      gmax = std::max({gmax, std::abs(numeric[k][i]), std::abs(double(analytic[k][i]))});
    }
  }
  // Per-entry relative error, with the denominator floored at 1% of the
  // largest gradient so float FD noise on near-zero entries cannot dominate.
  double worst = 0;
  for (std::size_t k = 0; k < vars.size(); ++k)
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      double a = analytic[k][i], n = numeric[k][i];
      double denom = std::max({std::abs(a), std::abs(n), 0.01 * gmax, 1e-8});
      worst = std::max(worst, std::abs(a - n) / denom);
    }
  Adam::zero_grad(vars);
  return worst;
}

}  // namespace mldip::nn
