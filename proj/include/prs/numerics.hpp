#pragma once

#include "prs/types.hpp"

#include <functional>
#include <random>

namespace prs {

// Overflow-safe logistic function. Output is clamped into the open unit
// interval so downstream logs never see exactly 0 or 1.
Real sigmoid_stable(Real x);

// Probability clamp applied inside the cross-entropy loss.
inline constexpr Real kBceEpsilon = 1e-7;

// Mean binary cross-entropy over masked-in positions. Probabilities are
// clamped to [kBceEpsilon, 1 - kBceEpsilon] before taking logs.
Real bce_loss(const BitVec& labels, const Vector& probs, const BitVec& mask);
Real bce_loss(const BitVec& labels, const Vector& probs);

// d/dp of one clamped cross-entropy term (no 1/N factor).
Real bce_term_grad(int label, Real prob);

// ---------------------------------------------------------------------------
// MLP: ReLU hidden layers, logistic scalar output.
// ---------------------------------------------------------------------------

struct DenseLayer {
  Matrix weight;
  Vector bias;
};

struct MlpParams {
  std::vector<DenseLayer> layers;

  int input_dim() const {
    return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols());
  }
};

// Hidden sizes chain input_dim -> hidden... -> 1. All parameters drawn
// uniform on [-0.05, 0.05].
MlpParams mlp_init(int input_dim, const std::vector<int>& hidden,
                   std::mt19937_64& rng);

MlpParams mlp_zeros_like(const MlpParams& p);
void mlp_add(MlpParams& acc, const MlpParams& g);

struct MlpCache {
  Vector input;
  std::vector<Vector> hidden;  // post-ReLU activations, one per hidden layer
  Real logit = 0;
  Real prob = 0;
};

// Returns sigma(f(...f(input))). `cache`, when given, holds everything the
// backward pass needs.
Real mlp_forward(const MlpParams& p, const Vector& input,
                 MlpCache* cache = nullptr);

struct MlpBackward {
  MlpParams grads;
  Vector d_input;
};

// `upstream` is dLoss/dprob; returns gradients for every parameter plus the
// gradient flowing into the input vector.
MlpBackward mlp_backward(const MlpParams& p, const MlpCache& cache,
                         Real upstream);

// ---------------------------------------------------------------------------
// Bi-LSTM with diagonal peephole connections.
// ---------------------------------------------------------------------------

struct LstmGateParams {
  Matrix w_xi, w_hi;
  Vector w_ci, b_i;  // peephole weights are diagonal, stored as vectors
  Matrix w_xf, w_hf;
  Vector w_cf, b_f;
  Matrix w_xc, w_hc;
  Vector b_c;
  Matrix w_xo, w_ho;
  Vector w_co, b_o;
};

struct BiLstmParams {
  int input_dim = 0;
  int hidden_dim = 0;
  // Compatibility switch: when true the cell update uses f_t (.) x_t instead
  // of f_t (.) c_{t-1}, which requires input_dim == hidden_dim.
  bool literal_cell_update = false;
  LstmGateParams fwd;
  LstmGateParams bwd;
};

BiLstmParams bilstm_init(int input_dim, int hidden_dim, std::mt19937_64& rng,
                         bool literal_cell_update = false);

BiLstmParams bilstm_zeros_like(const BiLstmParams& p);
void bilstm_add(BiLstmParams& acc, const BiLstmParams& g);

struct LstmStepState {
  Vector x, h_prev, c_prev;
  Vector i, f, g, c, o, tanh_c, h;
};

// Step states per direction, stored in processing order (the backward
// direction walks the sequence from the end).
struct BiLstmState {
  std::vector<LstmStepState> fwd;
  std::vector<LstmStepState> bwd;
};

// Runs the gated recurrence over the sequence in both directions; the result
// at position t is the concatenation fwd_h_t (+) bwd_h_t of length
// 2 * hidden_dim.
std::vector<Vector> bilstm_forward(const BiLstmParams& p,
                                   const std::vector<Vector>& seq,
                                   BiLstmState* cache = nullptr);

struct BiLstmBackwardResult {
  BiLstmParams grads;
  std::vector<Vector> d_inputs;
};

// Backpropagation through time. `upstream[t]` is dLoss/dh_t for the
// concatenated output at position t.
BiLstmBackwardResult bilstm_backward(const BiLstmParams& p,
                                     const BiLstmState& cache,
                                     const std::vector<Vector>& upstream);

// ---------------------------------------------------------------------------
// Flat parameter views, Adam, gradient checking.
// ---------------------------------------------------------------------------

// Ordered list of parameter blocks; the declared order is the flatten order
// used by the optimizer and the checkpoint files.
class ParamPack {
 public:
  void add(Matrix& m) { blocks_.emplace_back(m.data(), m.size()); }
  void add(Vector& v) { blocks_.emplace_back(v.data(), v.size()); }

  Eigen::Index size() const;
  Vector to_vector() const;
  void from_vector(const Vector& flat);

 private:
  std::vector<std::pair<Real*, Eigen::Index>> blocks_;
};

ParamPack pack_params(MlpParams& p);
ParamPack pack_params(BiLstmParams& p);

struct AdamState {
  Vector m;
  Vector v;
  std::int64_t step = 0;
  Real learning_rate = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
};

AdamState adam_init(Eigen::Index dim, Real learning_rate = 1e-3);

// Standard bias-corrected Adam update, in place.
void adam_step(AdamState& s, Vector& params, const Vector& grad);

struct GradCheckReport {
  Real max_rel_error = 0;
  int coords_checked = 0;
  Eigen::Index worst_coord = -1;
  Real tolerance = 0;
  bool passed = false;
};

// Central differences with step h on every coordinate, or on a seeded sample
// of max_coords coordinates when 0 < max_coords < dim. Relative error is
// |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
GradCheckReport grad_check(const std::function<Real(const Vector&)>& loss,
                           const Vector& params, const Vector& analytic_grad,
                           Real tolerance, Real h = 1e-5, int max_coords = 0,
                           std::uint64_t seed = 0);

}  // namespace prs
