#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "par/errors.hpp"
#include "par/rng.hpp"

namespace par::tensor {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major 64-bit float array with a lazily allocated gradient buffer.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until ensure_grad()

  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor of(Shape shape, std::vector<double> values);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  std::size_t size() const { return values.size(); }
  bool has_grad() const { return !grad.empty(); }
  void ensure_grad();
  void zero_grad();
};

struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
};

// Handle to a tape node.
struct Val {
  std::uint32_t idx = UINT32_MAX;
  bool valid() const { return idx != UINT32_MAX; }
};

// Reverse-mode differentiation over a per-instance recorded tape. Leaves
// alias external parameter tensors (which must outlive the tape and stay
// unmodified while it is alive); gradients live in tape-local buffers so
// that concurrent tapes can share read-only parameters. All forward
// computations are bitwise deterministic given identical inputs.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Val leaf(const Tensor& param);
  Val constant(Shape shape, std::vector<double> values);
  Val zeros(Shape shape);

  // y = W x (+ b). Backward accumulates into all operand gradients.
  Val linear(Val w, Val x, std::optional<Val> b = std::nullopt);
  Val add(Val a, Val b);
  Val sub(Val a, Val b);
  Val hadamard(Val a, Val b);
  Val scale(Val x, double c);
  Val concat(Val a, Val b);
  Val tanh_op(Val x);
  Val sigmoid_op(Val x);
  Val dot(Val a, Val b);
  Val row(Val matrix, std::size_t r);
  Val stack(std::span<const Val> scalars);

  // Masked entries are exactly 0; the rest is softmax over the support,
  // computed as exp(s - max) for overflow safety. Throws ContractViolation
  // on an all-false mask.
  Val masked_softmax(Val scores, std::vector<bool> mask);

  // y = sum_t weights[t] * vectors[t].
  Val weighted_sum(Val weights, std::span<const Val> vectors);

  // Scalar x[p*] where p* is the max over `positions` (lowest index on
  // ties); the subgradient routes only through p*.
  Val max_at(Val x, std::span<const std::size_t> positions);

  Val neg_log(Val scalar);

  // KL(p || a) for p uniform over `positions`:
  //   sum_i (1/k) * log((1/k) / a_i).
  Val kl_uniform(Val probs, std::span<const std::size_t> positions);

  // Reverse direction, with the prediction renormalized over the supervised
  // support so the divergence stays finite: KL(a_hat || uniform).
  Val kl_reverse_renorm(Val probs, std::span<const std::size_t> positions);

  // Inverted dropout: zeroes coordinates with probability `rate` and scales
  // survivors by 1/(1-rate). Call only in training mode.
  Val dropout(Val x, double rate, Rng& rng);

  // Seeds d(root)=1 (root must be scalar) and runs the tape backwards.
  void backward(Val root);

  std::span<const double> values(Val v) const;
  std::span<const double> grad(Val v) const;
  const Shape& shape(Val v) const;
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> owned;                  // empty for leaves
    const std::vector<double>* external = nullptr;
    std::vector<double> grad;
    std::function<void(Tape&)> back;
  };

  std::vector<Node> nodes_;

  const std::vector<double>& vals(std::uint32_t i) const {
    const Node& n = nodes_[i];
    return n.external ? *n.external : n.owned;
  }
  std::vector<double>& grads(std::uint32_t i) { return nodes_[i].grad; }
  Val push(Shape shape, std::vector<double> values);
  void check_index(Val v) const;
};

// ---------------------------------------------------------------------------
// GRU cell.

// Gate weights act on [input; hidden]; each W is hidden x (input + hidden).
struct GruCellParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor w_update, b_update;
  Tensor w_reset, b_reset;
  Tensor w_cand, b_cand;

  // Weights uniform(-range, range), biases zero.
  static GruCellParams init(std::size_t input_dim, std::size_t hidden_dim,
                            Rng& rng, double range = 0.1);
  std::vector<NamedTensor> named(const std::string& prefix);
};

struct GruLeaves {
  Val w_update, b_update, w_reset, b_reset, w_cand, b_cand;
};

GruLeaves gru_leaves(Tape& tape, const GruCellParams& params);

// z = sigmoid(W_z [x;h]), r = sigmoid(W_r [x;h]), h~ = tanh(W_h [x; r*h]),
// h' = (1-z)*h + z*h~  (computed as h + z*(h~ - h)).
Val gru_cell(Tape& tape, const GruLeaves& cell, Val x, Val h_prev);

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.

struct FiniteDiffOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  // 0 = check every coordinate; otherwise a seeded random subsample per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t subsample_seed = 0;
};

struct FiniteDiffViolation {
  std::string name;
  std::size_t coord = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct FiniteDiffReport {
  std::size_t coords_checked = 0;
  std::vector<FiniteDiffViolation> violations;
  bool ok() const { return violations.empty(); }
};

// Compares each parameter's prefilled .grad against central differences of
// `loss`: |analytic - (f(t+e) - f(t-e)) / 2e| / max(1, |analytic|) <= tol.
// `loss` must be deterministic with dropout disabled. Violations are data,
// not errors.
FiniteDiffReport finite_diff_check(const std::function<double()>& loss,
                                   std::span<const NamedTensor> params,
                                   const FiniteDiffOptions& options = {});

}  // namespace par::tensor
