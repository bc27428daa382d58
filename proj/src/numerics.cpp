#include "prs/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace prs {

namespace {

const Real kProbFloor = std::nextafter(Real(0), Real(1));
const Real kProbCeil = std::nextafter(Real(1), Real(0));

Real uniform_param(std::mt19937_64& rng) {
  std::uniform_real_distribution<Real> dist(-0.05, 0.05);
  return dist(rng);
}

Matrix init_matrix(Eigen::Index rows, Eigen::Index cols,
                   std::mt19937_64& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = uniform_param(rng);
  return m;
}

Vector init_vector(Eigen::Index n, std::mt19937_64& rng) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = uniform_param(rng);
  return v;
}

Vector sigmoid_vec(const Vector& v) {
  return v.unaryExpr([](Real x) { return sigmoid_stable(x); });
}

}  // namespace

Real sigmoid_stable(Real x) {
  if (!std::isfinite(x)) throw DomainError("sigmoid_stable: non-finite input");
  Real p;
  if (x >= 0) {
    const Real e = std::exp(-x);
    p = 1.0 / (1.0 + e);
  } else {
    const Real e = std::exp(x);
    p = e / (1.0 + e);
  }
  return std::clamp(p, kProbFloor, kProbCeil);
}

Real bce_loss(const BitVec& labels, const Vector& probs, const BitVec& mask) {
  if (static_cast<Eigen::Index>(labels.size()) != probs.size() ||
      labels.size() != mask.size())
    throw ShapeError("bce_loss: labels/probs/mask lengths differ");
  Real acc = 0;
  int n = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (!mask[i]) continue;
    const Real p = std::clamp(probs(static_cast<Eigen::Index>(i)), kBceEpsilon,
                              1.0 - kBceEpsilon);
    acc += labels[i] ? -std::log(p) : -std::log(1.0 - p);
    ++n;
  }
  if (n == 0) throw DomainError("bce_loss: zero masked-in positions");
  return acc / n;
}

Real bce_loss(const BitVec& labels, const Vector& probs) {
  return bce_loss(labels, probs, BitVec(labels.size(), 1));
}

Real bce_term_grad(int label, Real prob) {
  const Real p = std::clamp(prob, kBceEpsilon, 1.0 - kBceEpsilon);
  return label ? -1.0 / p : 1.0 / (1.0 - p);
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

MlpParams mlp_init(int input_dim, const std::vector<int>& hidden,
                   std::mt19937_64& rng) {
  if (input_dim <= 0) throw ShapeError("mlp_init: input_dim must be positive");
  MlpParams p;
  int in = input_dim;
  for (int h : hidden) {
    if (h <= 0) throw ShapeError("mlp_init: hidden dims must be positive");
    p.layers.push_back({init_matrix(h, in, rng), init_vector(h, rng)});
    in = h;
  }
  p.layers.push_back({init_matrix(1, in, rng), init_vector(1, rng)});
  return p;
}

MlpParams mlp_zeros_like(const MlpParams& p) {
  MlpParams z;
  z.layers.reserve(p.layers.size());
  for (const auto& l : p.layers)
    z.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()),
                        Vector::Zero(l.bias.size())});
  return z;
}

void mlp_add(MlpParams& acc, const MlpParams& g) {
  if (acc.layers.size() != g.layers.size())
    throw ShapeError("mlp_add: layer counts differ");
  for (size_t l = 0; l < acc.layers.size(); ++l) {
    acc.layers[l].weight += g.layers[l].weight;
    acc.layers[l].bias += g.layers[l].bias;
  }
}

Real mlp_forward(const MlpParams& p, const Vector& input, MlpCache* cache) {
  if (p.layers.empty()) throw ShapeError("mlp_forward: empty parameter set");
  if (input.size() != p.layers.front().weight.cols())
    throw ShapeError("mlp_forward: input length does not match first layer");
  if (p.layers.back().weight.rows() != 1)
    throw ShapeError("mlp_forward: output layer must produce a scalar");
  if (cache) {
    cache->input = input;
    cache->hidden.clear();
  }
  Vector a = input;
  for (size_t l = 0; l + 1 < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    if (layer.weight.cols() != a.size())
      throw ShapeError("mlp_forward: layer dimensions do not chain");
    a = ((layer.weight * a + layer.bias).cwiseMax(Real(0))).eval();
    if (cache) cache->hidden.push_back(a);
  }
  const auto& out = p.layers.back();
  if (out.weight.cols() != a.size())
    throw ShapeError("mlp_forward: output layer dimension mismatch");
  const Real logit = (out.weight * a)(0) + out.bias(0);
  const Real prob = sigmoid_stable(logit);
  if (cache) {
    cache->logit = logit;
    cache->prob = prob;
  }
  return prob;
}

MlpBackward mlp_backward(const MlpParams& p, const MlpCache& cache,
                         Real upstream) {
  const size_t n_hidden = p.layers.size() - 1;
  if (cache.hidden.size() != n_hidden)
    throw ShapeError("mlp_backward: cache does not match parameters");
  if (cache.input.size() != p.layers.front().weight.cols())
    throw ShapeError("mlp_backward: cached input dimension mismatch");

  MlpBackward out;
  out.grads = mlp_zeros_like(p);

  const Real d_logit = upstream * cache.prob * (1.0 - cache.prob);
  const Vector& last_act = n_hidden == 0 ? cache.input : cache.hidden.back();
  out.grads.layers.back().weight = d_logit * last_act.transpose();
  out.grads.layers.back().bias(0) = d_logit;

  Vector d_act = p.layers.back().weight.transpose() * d_logit;
  for (size_t l = n_hidden; l-- > 0;) {
    const Vector& act = cache.hidden[l];
    if (act.size() != d_act.size())
      throw ShapeError("mlp_backward: cached activation dimension mismatch");
    // ReLU: post-activation > 0 iff pre-activation > 0
    const Vector d_z =
        d_act.cwiseProduct((act.array() > 0).cast<Real>().matrix());
    const Vector& prev = l == 0 ? cache.input : cache.hidden[l - 1];
    out.grads.layers[l].weight = d_z * prev.transpose();
    out.grads.layers[l].bias = d_z;
    d_act = p.layers[l].weight.transpose() * d_z;
  }
  out.d_input = d_act;
  return out;
}

// ---------------------------------------------------------------------------
// Bi-LSTM
// ---------------------------------------------------------------------------

namespace {

LstmGateParams gate_init(int input_dim, int hidden_dim, std::mt19937_64& rng) {
  LstmGateParams g;
  g.w_xi = init_matrix(hidden_dim, input_dim, rng);
  g.w_hi = init_matrix(hidden_dim, hidden_dim, rng);
  g.w_ci = init_vector(hidden_dim, rng);
  g.b_i = init_vector(hidden_dim, rng);
  g.w_xf = init_matrix(hidden_dim, input_dim, rng);
  g.w_hf = init_matrix(hidden_dim, hidden_dim, rng);
  g.w_cf = init_vector(hidden_dim, rng);
  g.b_f = init_vector(hidden_dim, rng);
  g.w_xc = init_matrix(hidden_dim, input_dim, rng);
  g.w_hc = init_matrix(hidden_dim, hidden_dim, rng);
  g.b_c = init_vector(hidden_dim, rng);
  g.w_xo = init_matrix(hidden_dim, input_dim, rng);
  g.w_ho = init_matrix(hidden_dim, hidden_dim, rng);
  g.w_co = init_vector(hidden_dim, rng);
  g.b_o = init_vector(hidden_dim, rng);
  return g;
}

LstmGateParams gate_zeros(int input_dim, int hidden_dim) {
  LstmGateParams g;
  g.w_xi = Matrix::Zero(hidden_dim, input_dim);
  g.w_hi = Matrix::Zero(hidden_dim, hidden_dim);
  g.w_ci = Vector::Zero(hidden_dim);
  g.b_i = Vector::Zero(hidden_dim);
  g.w_xf = Matrix::Zero(hidden_dim, input_dim);
  g.w_hf = Matrix::Zero(hidden_dim, hidden_dim);
  g.w_cf = Vector::Zero(hidden_dim);
  g.b_f = Vector::Zero(hidden_dim);
  g.w_xc = Matrix::Zero(hidden_dim, input_dim);
  g.w_hc = Matrix::Zero(hidden_dim, hidden_dim);
  g.b_c = Vector::Zero(hidden_dim);
  g.w_xo = Matrix::Zero(hidden_dim, input_dim);
  g.w_ho = Matrix::Zero(hidden_dim, hidden_dim);
  g.w_co = Vector::Zero(hidden_dim);
  g.b_o = Vector::Zero(hidden_dim);
  return g;
}

void gate_add(LstmGateParams& a, const LstmGateParams& b) {
  a.w_xi += b.w_xi;
  a.w_hi += b.w_hi;
  a.w_ci += b.w_ci;
  a.b_i += b.b_i;
  a.w_xf += b.w_xf;
  a.w_hf += b.w_hf;
  a.w_cf += b.w_cf;
  a.b_f += b.b_f;
  a.w_xc += b.w_xc;
  a.w_hc += b.w_hc;
  a.b_c += b.b_c;
  a.w_xo += b.w_xo;
  a.w_ho += b.w_ho;
  a.w_co += b.w_co;
  a.b_o += b.b_o;
}

LstmStepState lstm_step(const LstmGateParams& g, const Vector& x,
                        const Vector& h_prev, const Vector& c_prev,
                        bool literal) {
  LstmStepState s;
  s.x = x;
  s.h_prev = h_prev;
  s.c_prev = c_prev;
  s.i = sigmoid_vec(g.w_xi * x + g.w_hi * h_prev +
                    g.w_ci.cwiseProduct(c_prev) + g.b_i);
  s.f = sigmoid_vec(g.w_xf * x + g.w_hf * h_prev +
                    g.w_cf.cwiseProduct(c_prev) + g.b_f);
  s.g = (g.w_xc * x + g.w_hc * h_prev + g.b_c).array().tanh();
  s.c = literal ? Vector(s.f.cwiseProduct(x) + s.i.cwiseProduct(s.g))
                : Vector(s.f.cwiseProduct(c_prev) + s.i.cwiseProduct(s.g));
  s.o = sigmoid_vec(g.w_xo * x + g.w_ho * h_prev + g.w_co.cwiseProduct(s.c) +
                    g.b_o);
  s.tanh_c = s.c.array().tanh();
  s.h = s.o.cwiseProduct(s.tanh_c);
  return s;
}

}  // namespace

BiLstmParams bilstm_init(int input_dim, int hidden_dim, std::mt19937_64& rng,
                         bool literal_cell_update) {
  if (input_dim <= 0 || hidden_dim <= 0)
    throw ShapeError("bilstm_init: dimensions must be positive");
  if (literal_cell_update && input_dim != hidden_dim)
    throw ShapeError(
        "bilstm_init: literal cell update needs input_dim == hidden_dim");
  BiLstmParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.literal_cell_update = literal_cell_update;
  p.fwd = gate_init(input_dim, hidden_dim, rng);
  p.bwd = gate_init(input_dim, hidden_dim, rng);
  return p;
}

BiLstmParams bilstm_zeros_like(const BiLstmParams& p) {
  BiLstmParams z;
  z.input_dim = p.input_dim;
  z.hidden_dim = p.hidden_dim;
  z.literal_cell_update = p.literal_cell_update;
  z.fwd = gate_zeros(p.input_dim, p.hidden_dim);
  z.bwd = gate_zeros(p.input_dim, p.hidden_dim);
  return z;
}

void bilstm_add(BiLstmParams& acc, const BiLstmParams& g) {
  if (acc.input_dim != g.input_dim || acc.hidden_dim != g.hidden_dim)
    throw ShapeError("bilstm_add: dimensions differ");
  gate_add(acc.fwd, g.fwd);
  gate_add(acc.bwd, g.bwd);
}

std::vector<Vector> bilstm_forward(const BiLstmParams& p,
                                   const std::vector<Vector>& seq,
                                   BiLstmState* cache) {
  if (seq.empty()) throw ShapeError("bilstm_forward: empty sequence");
  if (p.literal_cell_update && p.input_dim != p.hidden_dim)
    throw ShapeError(
        "bilstm_forward: literal cell update needs input_dim == hidden_dim");
  for (const auto& x : seq)
    if (x.size() != p.input_dim)
      throw ShapeError("bilstm_forward: input vector dimension mismatch");

  const size_t T = seq.size();
  const int H = p.hidden_dim;
  std::vector<LstmStepState> fwd_states, bwd_states;
  fwd_states.reserve(T);
  bwd_states.reserve(T);

  Vector h = Vector::Zero(H), c = Vector::Zero(H);
  for (size_t t = 0; t < T; ++t) {
    fwd_states.push_back(lstm_step(p.fwd, seq[t], h, c, p.literal_cell_update));
    h = fwd_states.back().h;
    c = fwd_states.back().c;
  }
  h.setZero();
  c.setZero();
  for (size_t t = T; t-- > 0;) {
    bwd_states.push_back(lstm_step(p.bwd, seq[t], h, c, p.literal_cell_update));
    h = bwd_states.back().h;
    c = bwd_states.back().c;
  }

  std::vector<Vector> out(T);
  for (size_t t = 0; t < T; ++t) {
    out[t].resize(2 * H);
    out[t].head(H) = fwd_states[t].h;
    out[t].tail(H) = bwd_states[T - 1 - t].h;
  }
  if (cache) {
    cache->fwd = std::move(fwd_states);
    cache->bwd = std::move(bwd_states);
  }
  return out;
}

namespace {

// Walks one direction's step states in reverse processing order, adding into
// `grads`; upstream_at(s) yields dLoss/dh for processing step s.
void lstm_backward_dir(const LstmGateParams& g, bool literal,
                       const std::vector<LstmStepState>& states,
                       const std::function<Vector(size_t)>& upstream_at,
                       LstmGateParams& grads,
                       const std::function<void(size_t, const Vector&)>&
                           add_d_input) {
  const Eigen::Index H = states.front().h.size();
  Vector dh_carry = Vector::Zero(H);
  Vector dc_carry = Vector::Zero(H);
  for (size_t s = states.size(); s-- > 0;) {
    const LstmStepState& st = states[s];
    const Vector dh = upstream_at(s) + dh_carry;
    const Vector d_o = dh.cwiseProduct(st.tanh_c);
    const Vector da_o = d_o.cwiseProduct(st.o).cwiseProduct(
        (Vector::Ones(H) - st.o));
    Vector dc = dh.cwiseProduct(st.o).cwiseProduct(
                    (Vector::Ones(H) - st.tanh_c.cwiseProduct(st.tanh_c))) +
                dc_carry + da_o.cwiseProduct(g.w_co);
    const Vector d_i = dc.cwiseProduct(st.g);
    const Vector da_i =
        d_i.cwiseProduct(st.i).cwiseProduct(Vector::Ones(H) - st.i);
    const Vector d_f = dc.cwiseProduct(literal ? st.x : st.c_prev);
    const Vector da_f =
        d_f.cwiseProduct(st.f).cwiseProduct(Vector::Ones(H) - st.f);
    const Vector d_g = dc.cwiseProduct(st.i);
    const Vector da_g =
        d_g.cwiseProduct(Vector::Ones(H) - st.g.cwiseProduct(st.g));

    grads.w_xi += da_i * st.x.transpose();
    grads.w_hi += da_i * st.h_prev.transpose();
    grads.w_ci += da_i.cwiseProduct(st.c_prev);
    grads.b_i += da_i;
    grads.w_xf += da_f * st.x.transpose();
    grads.w_hf += da_f * st.h_prev.transpose();
    grads.w_cf += da_f.cwiseProduct(st.c_prev);
    grads.b_f += da_f;
    grads.w_xc += da_g * st.x.transpose();
    grads.w_hc += da_g * st.h_prev.transpose();
    grads.b_c += da_g;
    grads.w_xo += da_o * st.x.transpose();
    grads.w_ho += da_o * st.h_prev.transpose();
    grads.w_co += da_o.cwiseProduct(st.c);
    grads.b_o += da_o;

    Vector dx = g.w_xi.transpose() * da_i + g.w_xf.transpose() * da_f +
                g.w_xc.transpose() * da_g + g.w_xo.transpose() * da_o;
    if (literal) dx += dc.cwiseProduct(st.f);
    add_d_input(s, dx);

    dh_carry = g.w_hi.transpose() * da_i + g.w_hf.transpose() * da_f +
               g.w_hc.transpose() * da_g + g.w_ho.transpose() * da_o;
    dc_carry = da_i.cwiseProduct(g.w_ci) + da_f.cwiseProduct(g.w_cf);
    if (!literal) dc_carry += dc.cwiseProduct(st.f);
  }
}

}  // namespace

BiLstmBackwardResult bilstm_backward(const BiLstmParams& p,
                                     const BiLstmState& cache,
                                     const std::vector<Vector>& upstream) {
  const size_t T = cache.fwd.size();
  if (T == 0 || cache.bwd.size() != T)
    throw ShapeError("bilstm_backward: cache does not hold a forward pass");
  if (upstream.size() != T)
    throw ShapeError("bilstm_backward: upstream length mismatch");
  const int H = p.hidden_dim;
  for (const auto& u : upstream)
    if (u.size() != 2 * H)
      throw ShapeError("bilstm_backward: upstream vectors must have 2*hidden");

  BiLstmBackwardResult out;
  out.grads = bilstm_zeros_like(p);
  out.d_inputs.assign(T, Vector::Zero(p.input_dim));

  // forward direction: processing step s is sequence position s
  lstm_backward_dir(
      p.fwd, p.literal_cell_update, cache.fwd,
      [&](size_t s) { return Vector(upstream[s].head(H)); }, out.grads.fwd,
      [&](size_t s, const Vector& dx) { out.d_inputs[s] += dx; });
  // backward direction: processing step s is sequence position T-1-s
  lstm_backward_dir(
      p.bwd, p.literal_cell_update, cache.bwd,
      [&](size_t s) { return Vector(upstream[T - 1 - s].tail(H)); },
      out.grads.bwd,
      [&](size_t s, const Vector& dx) { out.d_inputs[T - 1 - s] += dx; });
  return out;
}

// ---------------------------------------------------------------------------
// ParamPack / Adam / grad check
// ---------------------------------------------------------------------------

Eigen::Index ParamPack::size() const {
  Eigen::Index total = 0;
  for (const auto& b : blocks_) total += b.second;
  return total;
}

Vector ParamPack::to_vector() const {
  Vector flat(size());
  Eigen::Index off = 0;
  for (const auto& b : blocks_) {
    flat.segment(off, b.second) = Eigen::Map<const Vector>(b.first, b.second);
    off += b.second;
  }
  return flat;
}

void ParamPack::from_vector(const Vector& flat) {
  if (flat.size() != size())
    throw ShapeError("ParamPack::from_vector: length mismatch");
  Eigen::Index off = 0;
  for (const auto& b : blocks_) {
    Eigen::Map<Vector>(b.first, b.second) = flat.segment(off, b.second);
    off += b.second;
  }
}

ParamPack pack_params(MlpParams& p) {
  ParamPack pack;
  for (auto& l : p.layers) {
    pack.add(l.weight);
    pack.add(l.bias);
  }
  return pack;
}

namespace {
void pack_gate(ParamPack& pack, LstmGateParams& g) {
  pack.add(g.w_xi);
  pack.add(g.w_hi);
  pack.add(g.w_ci);
  pack.add(g.b_i);
  pack.add(g.w_xf);
  pack.add(g.w_hf);
  pack.add(g.w_cf);
  pack.add(g.b_f);
  pack.add(g.w_xc);
  pack.add(g.w_hc);
  pack.add(g.b_c);
  pack.add(g.w_xo);
  pack.add(g.w_ho);
  pack.add(g.w_co);
  pack.add(g.b_o);
}
}  // namespace

ParamPack pack_params(BiLstmParams& p) {
  ParamPack pack;
  pack_gate(pack, p.fwd);
  pack_gate(pack, p.bwd);
  return pack;
}

AdamState adam_init(Eigen::Index dim, Real learning_rate) {
  AdamState s;
  s.m = Vector::Zero(dim);
  s.v = Vector::Zero(dim);
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(AdamState& s, Vector& params, const Vector& grad) {
  if (s.m.size() != params.size() || grad.size() != params.size())
    throw ShapeError("adam_step: shape mismatch");
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  const Real bc1 = 1.0 - std::pow(s.beta1, static_cast<Real>(s.step));
  const Real bc2 = 1.0 - std::pow(s.beta2, static_cast<Real>(s.step));
  params.array() -= s.learning_rate * (s.m.array() / bc1) /
                    ((s.v.array() / bc2).sqrt() + s.epsilon);
}

GradCheckReport grad_check(const std::function<Real(const Vector&)>& loss,
                           const Vector& params, const Vector& analytic_grad,
                           Real tolerance, Real h, int max_coords,
                           std::uint64_t seed) {
  if (analytic_grad.size() != params.size())
    throw ShapeError("grad_check: gradient length mismatch");
  std::vector<Eigen::Index> coords(params.size());
  std::iota(coords.begin(), coords.end(), Eigen::Index(0));
  if (max_coords > 0 && max_coords < params.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  Vector work = params;
  for (Eigen::Index idx : coords) {
    const Real saved = work(idx);
    work(idx) = saved + h;
    const Real lp = loss(work);
    work(idx) = saved - h;
    const Real lm = loss(work);
    work(idx) = saved;
    const Real numeric = (lp - lm) / (2.0 * h);
    const Real analytic = analytic_grad(idx);
    const Real rel = std::abs(analytic - numeric) /
                     std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coord = idx;
    }
    ++report.coords_checked;
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace prs
