#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "par/clozegen.hpp"
#include "par/corpus.hpp"
#include "par/tensor.hpp"

namespace par::model {

using tensor::GruCellParams;
using tensor::GruLeaves;
using tensor::NamedTensor;
using tensor::Tape;
using tensor::Tensor;
using tensor::Val;

struct ParConfig {
  std::size_t embedding_dim = 32;
  std::size_t hidden_dim = 32;     // per direction
  std::size_t attention_dim = 0;   // 0 -> 2 * hidden_dim
  int num_hops = 1;                // 1 or 2
  double dropout_rate = 0.2;
  double kl_weight = 1.0;
  // KL operand order for extra supervision. false: KL(target || predicted)
  // (the default); true: reverse, with the prediction renormalized over the
  // supervised support (the plain reverse divergence is infinite whenever
  // any mass sits off-support, which is always).
  bool kl_reverse = false;

  std::size_t attention_dim_resolved() const {
    return attention_dim ? attention_dim : 2 * hidden_dim;
  }
  void validate() const;  // throws ValidationError
};

// All learnable parameters. hop_* are present iff num_hops == 2 and are
// never tied to attn_*.
struct ParParams {
  Tensor embedding;  // vocab x embedding_dim; placeholder rows start at zero
  GruCellParams doc_fwd, doc_bwd;
  GruCellParams qry_fwd, qry_bwd;
  Tensor attn_w, attn_v;  // final hop:  s_t = v . tanh(W [d_t; q])
  Tensor hop_w, hop_v;    // first hop (2-hop models only)

  static ParParams init(const ParConfig& config, const corpus::Vocabulary& vocab,
                        std::uint64_t seed);

  // Stable order used by the optimizer, checkpoints and gradient buffers.
  std::vector<NamedTensor> named();
  std::vector<NamedTensor> named() const;  // tensors are not modified
};

// Gradient buffer aligned with ParParams::named().
struct GradSet {
  std::vector<Tensor> tensors;

  static GradSet zeros_like(const ParParams& params);
  void add(const GradSet& other);
  void scale(double factor);
  void zero();
};

struct ParamLeaves {
  Val embedding;
  GruLeaves doc_fwd, doc_bwd, qry_fwd, qry_bwd;
  Val attn_w, attn_v;
  Val hop_w, hop_v;  // invalid for 1-hop models

  std::vector<Val> in_named_order(int num_hops) const;
};

ParamLeaves param_leaves(Tape& tape, const ParParams& params, int num_hops);

struct EmbedOptions {
  bool training = false;
  double dropout_rate = 0.0;
  Rng* rng = nullptr;  // required when training with dropout_rate > 0
};

// Embeds every token, runs both GRU directions over the full sequence and
// returns [fwd_t; bwd_t] for the candidate (argument) positions only.
// Throws ContractViolation when there is no candidate to point at, which
// callers treat as an instance skip.
std::vector<Val> encode_document(Tape& tape, const ParamLeaves& leaves,
                                 const ParConfig& config,
                                 const corpus::Vocabulary& vocab,
                                 std::span<const corpus::EventToken> doc_tokens,
                                 std::span<const std::size_t> candidate_positions,
                                 const EmbedOptions& options);

// q = [last forward state; last backward state]. The query must contain
// exactly one TARGET placeholder.
Val encode_query(Tape& tape, const ParamLeaves& leaves, const ParConfig& config,
                 const corpus::Vocabulary& vocab,
                 std::span<const corpus::EventToken> query_tokens,
                 const EmbedOptions& options);

struct Attention {
  Val scores;  // one per candidate
  Val probs;   // masked softmax over candidates
};

Attention attend(Tape& tape, std::span<const Val> candidates, Val query,
                 Val w, Val v);

// First-hop update: o1 = sum_t a'_t d_t, q1 = o1 + q. Records the first-hop
// attention in *first_hop when given.
Val hop_update(Tape& tape, std::span<const Val> candidates, Val query,
               Val w, Val v, Attention* first_hop);

// L = -log(max over answer slots of a). The gradient routes only through
// the max entry (lowest index on ties).
Val loss_max_correct(Tape& tape, Val probs,
                     std::span<const std::size_t> answer_slots);

// KL between the uniform 1/k supervision target and the first-hop attention
// (direction per ParConfig::kl_reverse).
Val loss_extra_supervision(Tape& tape, Val first_hop_probs,
                           std::span<const std::size_t> supervised_slots,
                           bool reverse = false);

// Per-hop distributions aligned to doc_tokens (zero off the candidate set).
struct AttentionHop {
  std::vector<double> scores;
  std::vector<double> probs;
};

struct AttentionTrace {
  std::vector<AttentionHop> hops;  // first hop (if any), then final hop
  std::vector<double> query;          // q
  std::vector<double> updated_query;  // q1 (2-hop only)
  std::size_t pointer = 0;            // doc position of the final argmax
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  bool use_supervision = true;
};

struct Forward {
  Val nll;
  std::optional<Val> kl;
  Val total;  // nll + kl_weight * kl (when the KL term applies)
  std::size_t pointer = 0;
  AttentionTrace trace;
  ParamLeaves leaves;
};

Forward build_forward(Tape& tape, const ParParams& params, const ParConfig& config,
                      const corpus::Vocabulary& vocab,
                      const cloze::ClozeInstance& instance,
                      const ForwardOptions& options);

struct Prediction {
  std::size_t pointer = 0;
  bool correct = false;
  AttentionTrace trace;
};

// Deterministic forward pass with dropout disabled.
Prediction predict(const ParParams& params, const ParConfig& config,
                   const corpus::Vocabulary& vocab,
                   const cloze::ClozeInstance& instance);

struct LossBreakdown {
  double nll = 0;
  double kl = 0;     // unweighted
  double total = 0;  // nll + kl_weight * kl
};

// Runs forward + backward for one instance and accumulates parameter
// gradients into `grads` (aligned with ParParams::named()).
LossBreakdown loss_and_grads(const ParParams& params, const ParConfig& config,
                             const corpus::Vocabulary& vocab,
                             const cloze::ClozeInstance& instance,
                             const ForwardOptions& options, GradSet& grads);

// Forward-only total loss; the scalar the finite-difference oracle probes.
LossBreakdown forward_loss(const ParParams& params, const ParConfig& config,
                           const corpus::Vocabulary& vocab,
                           const cloze::ClozeInstance& instance,
                           const ForwardOptions& options);

// ---------------------------------------------------------------------------
// Checkpoints: binary array container (tensor_io) + JSON sidecar manifest
// recording the model config, vocabulary hash and epoch.

void save_checkpoint(const std::filesystem::path& path, const ParParams& params,
                     const ParConfig& config, std::string_view vocab_hash,
                     std::size_t epoch,
                     std::span<const NamedTensor> extra_arrays = {});

struct Checkpoint {
  ParParams params;
  ParConfig config;
  std::string vocab_hash;
  std::size_t epoch = 0;
  std::vector<std::pair<std::string, Tensor>> extra_arrays;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace par::model
