#include "par/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "par/tensor_io.hpp"

namespace par::model {

using corpus::EventToken;
using corpus::TokenKind;
using corpus::Vocabulary;
using nlohmann::json;
using nlohmann::ordered_json;

void ParConfig::validate() const {
  if (embedding_dim < 1 || hidden_dim < 1) {
    throw ValidationError("model config: dims must be >= 1");
  }
  if (num_hops != 1 && num_hops != 2) {
    throw ValidationError("model config: num_hops must be 1 or 2");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ValidationError("model config: dropout_rate must be in [0, 1)");
  }
  if (kl_weight < 0.0) {
    throw ValidationError("model config: kl_weight must be >= 0");
  }
}

ParParams ParParams::init(const ParConfig& config, const Vocabulary& vocab,
                          std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0x9a7));
  ParParams p;
  p.embedding = Tensor::uniform({vocab.size(), config.embedding_dim}, rng,
                                -0.1, 0.1);
  // Placeholder rows start at exactly zero; they still receive gradient.
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (vocab.is_placeholder(i)) {
      std::fill_n(p.embedding.values.begin() +
                      static_cast<std::ptrdiff_t>(i * config.embedding_dim),
                  config.embedding_dim, 0.0);
    }
  }
  p.doc_fwd = GruCellParams::init(config.embedding_dim, config.hidden_dim, rng);
  p.doc_bwd = GruCellParams::init(config.embedding_dim, config.hidden_dim, rng);
  p.qry_fwd = GruCellParams::init(config.embedding_dim, config.hidden_dim, rng);
  p.qry_bwd = GruCellParams::init(config.embedding_dim, config.hidden_dim, rng);

  const std::size_t attn_dim = config.attention_dim_resolved();
  const std::size_t pair_dim = 4 * config.hidden_dim;  // [d_t; q]
  p.attn_w = Tensor::uniform({attn_dim, pair_dim}, rng, -0.1, 0.1);
  p.attn_v = Tensor::uniform({attn_dim}, rng, -0.1, 0.1);
  if (config.num_hops == 2) {
    p.hop_w = Tensor::uniform({attn_dim, pair_dim}, rng, -0.1, 0.1);
    p.hop_v = Tensor::uniform({attn_dim}, rng, -0.1, 0.1);
  }
  return p;
}

std::vector<NamedTensor> ParParams::named() {
  std::vector<NamedTensor> out;
  out.push_back({"embedding", &embedding});
  for (auto& nt : doc_fwd.named("doc_fwd")) out.push_back(nt);
  for (auto& nt : doc_bwd.named("doc_bwd")) out.push_back(nt);
  for (auto& nt : qry_fwd.named("qry_fwd")) out.push_back(nt);
  for (auto& nt : qry_bwd.named("qry_bwd")) out.push_back(nt);
  out.push_back({"attn.w", &attn_w});
  out.push_back({"attn.v", &attn_v});
  if (hop_w.size() > 0) {
    out.push_back({"hop.w", &hop_w});
    out.push_back({"hop.v", &hop_v});
  }
  return out;
}

std::vector<NamedTensor> ParParams::named() const {
  return const_cast<ParParams*>(this)->named();
}

GradSet GradSet::zeros_like(const ParParams& params) {
  GradSet g;
  for (const NamedTensor& nt : params.named()) {
    g.tensors.push_back(Tensor::zeros(nt.tensor->shape));
  }
  return g;
}

void GradSet::add(const GradSet& other) {
  if (tensors.size() != other.tensors.size()) {
    throw DimensionError("GradSet::add: mismatched parameter count");
  }
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    auto& dst = tensors[k].values;
    const auto& src = other.tensors[k].values;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

void GradSet::scale(double factor) {
  for (Tensor& t : tensors) {
    for (double& v : t.values) v *= factor;
  }
}

void GradSet::zero() {
  for (Tensor& t : tensors) std::fill(t.values.begin(), t.values.end(), 0.0);
}

std::vector<Val> ParamLeaves::in_named_order(int num_hops) const {
  std::vector<Val> out{embedding,
                       doc_fwd.w_update, doc_fwd.b_update, doc_fwd.w_reset,
                       doc_fwd.b_reset,  doc_fwd.w_cand,   doc_fwd.b_cand,
                       doc_bwd.w_update, doc_bwd.b_update, doc_bwd.w_reset,
                       doc_bwd.b_reset,  doc_bwd.w_cand,   doc_bwd.b_cand,
                       qry_fwd.w_update, qry_fwd.b_update, qry_fwd.w_reset,
                       qry_fwd.b_reset,  qry_fwd.w_cand,   qry_fwd.b_cand,
                       qry_bwd.w_update, qry_bwd.b_update, qry_bwd.w_reset,
                       qry_bwd.b_reset,  qry_bwd.w_cand,   qry_bwd.b_cand,
                       attn_w, attn_v};
  if (num_hops == 2) {
    out.push_back(hop_w);
    out.push_back(hop_v);
  }
  return out;
}

ParamLeaves param_leaves(Tape& tape, const ParParams& params, int num_hops) {
  ParamLeaves leaves;
  leaves.embedding = tape.leaf(params.embedding);
  leaves.doc_fwd = tensor::gru_leaves(tape, params.doc_fwd);
  leaves.doc_bwd = tensor::gru_leaves(tape, params.doc_bwd);
  leaves.qry_fwd = tensor::gru_leaves(tape, params.qry_fwd);
  leaves.qry_bwd = tensor::gru_leaves(tape, params.qry_bwd);
  leaves.attn_w = tape.leaf(params.attn_w);
  leaves.attn_v = tape.leaf(params.attn_v);
  if (num_hops == 2) {
    leaves.hop_w = tape.leaf(params.hop_w);
    leaves.hop_v = tape.leaf(params.hop_v);
  }
  return leaves;
}

namespace {

std::vector<Val> embed_tokens(Tape& tape, Val embedding,
                              const Vocabulary& vocab,
                              std::span<const EventToken> tokens,
                              const EmbedOptions& options) {
  std::vector<Val> out;
  out.reserve(tokens.size());
  const bool drop = options.training && options.dropout_rate > 0.0;
  if (drop && options.rng == nullptr) {
    throw ContractViolation("embed: dropout requires an rng");
  }
  for (const EventToken& token : tokens) {
    Val e = tape.row(embedding, vocab.index_of(token.surface));
    if (drop) e = tape.dropout(e, options.dropout_rate, *options.rng);
    out.push_back(e);
  }
  return out;
}

// Hidden states after consuming each token, in sequence order for the
// forward cell and reverse order for the backward cell.
struct BiStates {
  std::vector<Val> fwd;  // fwd[t] has seen tokens 0..t
  std::vector<Val> bwd;  // bwd[t] has seen tokens t..T-1
};

BiStates run_bigru(Tape& tape, const GruLeaves& fwd_cell,
                   const GruLeaves& bwd_cell, std::span<const Val> inputs,
                   std::size_t hidden_dim) {
  BiStates states;
  const std::size_t n = inputs.size();
  states.fwd.resize(n);
  states.bwd.resize(n);
  Val h = tape.zeros({hidden_dim});
  for (std::size_t t = 0; t < n; ++t) {
    h = tensor::gru_cell(tape, fwd_cell, inputs[t], h);
    states.fwd[t] = h;
  }
  h = tape.zeros({hidden_dim});
  for (std::size_t t = n; t-- > 0;) {
    h = tensor::gru_cell(tape, bwd_cell, inputs[t], h);
    states.bwd[t] = h;
  }
  return states;
}

}  // namespace

std::vector<Val> encode_document(Tape& tape, const ParamLeaves& leaves,
                                 const ParConfig& config,
                                 const Vocabulary& vocab,
                                 std::span<const EventToken> doc_tokens,
                                 std::span<const std::size_t> candidate_positions,
                                 const EmbedOptions& options) {
  if (doc_tokens.empty() || candidate_positions.empty()) {
    throw ContractViolation(
        "instance skip: document has no argument token to point at");
  }
  for (std::size_t pos : candidate_positions) {
    if (pos >= doc_tokens.size()) {
      throw ContractViolation("instance skip: candidate position out of range");
    }
  }
  const std::vector<Val> inputs =
      embed_tokens(tape, leaves.embedding, vocab, doc_tokens, options);
  const BiStates states = run_bigru(tape, leaves.doc_fwd, leaves.doc_bwd,
                                    inputs, config.hidden_dim);
  std::vector<Val> candidates;
  candidates.reserve(candidate_positions.size());
  for (std::size_t pos : candidate_positions) {
    candidates.push_back(tape.concat(states.fwd[pos], states.bwd[pos]));
  }
  return candidates;
}

Val encode_query(Tape& tape, const ParamLeaves& leaves, const ParConfig& config,
                 const Vocabulary& vocab,
                 std::span<const EventToken> query_tokens,
                 const EmbedOptions& options) {
  std::size_t targets = 0;
  for (const EventToken& token : query_tokens) {
    if (token.kind == TokenKind::placeholder_target) ++targets;
  }
  if (targets != 1) {
    throw ContractViolation(
        "query must contain exactly one TARGET placeholder, found " +
        std::to_string(targets));
  }
  const std::vector<Val> inputs =
      embed_tokens(tape, leaves.embedding, vocab, query_tokens, options);
  const BiStates states = run_bigru(tape, leaves.qry_fwd, leaves.qry_bwd,
                                    inputs, config.hidden_dim);
  return tape.concat(states.fwd.back(), states.bwd.front());
}

Attention attend(Tape& tape, std::span<const Val> candidates, Val query,
                 Val w, Val v) {
  std::vector<Val> scores;
  scores.reserve(candidates.size());
  for (const Val& d : candidates) {
    const Val pair = tape.concat(d, query);
    scores.push_back(tape.dot(v, tape.tanh_op(tape.linear(w, pair))));
  }
  Attention att;
  att.scores = tape.stack(scores);
  att.probs = tape.masked_softmax(att.scores,
                                  std::vector<bool>(candidates.size(), true));
  return att;
}

Val hop_update(Tape& tape, std::span<const Val> candidates, Val query,
               Val w, Val v, Attention* first_hop) {
  const Attention att = attend(tape, candidates, query, w, v);
  if (first_hop) *first_hop = att;
  const Val pooled = tape.weighted_sum(att.probs, candidates);
  return tape.add(pooled, query);
}

Val loss_max_correct(Tape& tape, Val probs,
                     std::span<const std::size_t> answer_slots) {
  if (answer_slots.empty()) {
    throw ContractViolation("loss_max_correct: empty answer support");
  }
  return tape.neg_log(tape.max_at(probs, answer_slots));
}

Val loss_extra_supervision(Tape& tape, Val first_hop_probs,
                           std::span<const std::size_t> supervised_slots,
                           bool reverse) {
  if (supervised_slots.empty()) {
    throw ContractViolation("loss_extra_supervision: empty supervision set");
  }
  return reverse ? tape.kl_reverse_renorm(first_hop_probs, supervised_slots)
                 : tape.kl_uniform(first_hop_probs, supervised_slots);
}

namespace {

// Maps doc positions to slots within the candidate list.
std::vector<std::size_t> positions_to_slots(
    std::span<const std::size_t> positions,
    std::span<const std::size_t> candidates, const char* what) {
  std::vector<std::size_t> slots;
  slots.reserve(positions.size());
  for (std::size_t pos : positions) {
    const auto it = std::lower_bound(candidates.begin(), candidates.end(), pos);
    if (it == candidates.end() || *it != pos) {
      throw ContractViolation(std::string("instance skip: ") + what +
                              " position " + std::to_string(pos) +
                              " is not a candidate");
    }
    slots.push_back(static_cast<std::size_t>(it - candidates.begin()));
  }
  return slots;
}

AttentionHop doc_aligned_hop(const Tape& tape, const Attention& att,
                             std::span<const std::size_t> candidates,
                             std::size_t doc_len) {
  AttentionHop hop;
  hop.scores.assign(doc_len, 0.0);
  hop.probs.assign(doc_len, 0.0);
  const auto scores = tape.values(att.scores);
  const auto probs = tape.values(att.probs);
  for (std::size_t slot = 0; slot < candidates.size(); ++slot) {
    hop.scores[candidates[slot]] = scores[slot];
    hop.probs[candidates[slot]] = probs[slot];
  }
  return hop;
}

std::size_t argmax_slot(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;  // ties keep the lowest index
  }
  return best;
}

}  // namespace

Forward build_forward(Tape& tape, const ParParams& params, const ParConfig& config,
                      const Vocabulary& vocab, const cloze::ClozeInstance& instance,
                      const ForwardOptions& options) {
  config.validate();
  Forward fwd;
  fwd.leaves = param_leaves(tape, params, config.num_hops);

  Rng dropout_rng(mix_seed(options.dropout_seed, 0xd40));
  EmbedOptions embed_options;
  embed_options.training = options.training;
  embed_options.dropout_rate = config.dropout_rate;
  embed_options.rng = &dropout_rng;

  const std::vector<Val> candidates = encode_document(
      tape, fwd.leaves, config, vocab, instance.doc_tokens,
      instance.candidate_positions, embed_options);
  const Val query = encode_query(tape, fwd.leaves, config, vocab,
                                 instance.query_tokens, embed_options);

  const auto q_values = tape.values(query);
  fwd.trace.query.assign(q_values.begin(), q_values.end());

  Val final_query = query;
  std::optional<Attention> first_hop;
  if (config.num_hops == 2) {
    Attention att;
    final_query = hop_update(tape, candidates, query, fwd.leaves.hop_w,
                             fwd.leaves.hop_v, &att);
    first_hop = att;
    const auto q1_values = tape.values(final_query);
    fwd.trace.updated_query.assign(q1_values.begin(), q1_values.end());
    fwd.trace.hops.push_back(doc_aligned_hop(tape, att,
                                             instance.candidate_positions,
                                             instance.doc_tokens.size()));
  }

  const Attention final_att = attend(tape, candidates, final_query,
                                     fwd.leaves.attn_w, fwd.leaves.attn_v);
  fwd.trace.hops.push_back(doc_aligned_hop(tape, final_att,
                                           instance.candidate_positions,
                                           instance.doc_tokens.size()));

  const std::vector<std::size_t> answer_slots = positions_to_slots(
      instance.answer_positions, instance.candidate_positions, "answer");
  fwd.nll = loss_max_correct(tape, final_att.probs, answer_slots);
  fwd.total = fwd.nll;

  if (config.num_hops == 2 && options.use_supervision &&
      instance.supervision_positions && !instance.supervision_positions->empty() &&
      config.kl_weight != 0.0) {
    const std::vector<std::size_t> supervised_slots = positions_to_slots(
        *instance.supervision_positions, instance.candidate_positions,
        "supervision");
    fwd.kl = loss_extra_supervision(tape, first_hop->probs, supervised_slots,
                                    config.kl_reverse);
    fwd.total = tape.add(fwd.nll, tape.scale(*fwd.kl, config.kl_weight));
  }

  const std::size_t slot = argmax_slot(tape.values(final_att.probs));
  fwd.pointer = instance.candidate_positions[slot];
  fwd.trace.pointer = fwd.pointer;
  return fwd;
}

Prediction predict(const ParParams& params, const ParConfig& config,
                   const Vocabulary& vocab, const cloze::ClozeInstance& instance) {
  Tape tape;
  ForwardOptions options;
  options.training = false;
  const Forward fwd = build_forward(tape, params, config, vocab, instance, options);
  Prediction pred;
  pred.pointer = fwd.pointer;
  pred.correct = std::binary_search(instance.answer_positions.begin(),
                                    instance.answer_positions.end(), fwd.pointer);
  pred.trace = fwd.trace;
  return pred;
}

LossBreakdown loss_and_grads(const ParParams& params, const ParConfig& config,
                             const Vocabulary& vocab,
                             const cloze::ClozeInstance& instance,
                             const ForwardOptions& options, GradSet& grads) {
  Tape tape;
  const Forward fwd = build_forward(tape, params, config, vocab, instance, options);
  tape.backward(fwd.total);

  const std::vector<Val> leaves = fwd.leaves.in_named_order(config.num_hops);
  if (leaves.size() != grads.tensors.size()) {
    throw DimensionError("loss_and_grads: gradient buffer mismatch");
  }
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto g = tape.grad(leaves[k]);
    auto& dst = grads.tensors[k].values;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  LossBreakdown loss;
  loss.nll = tape.values(fwd.nll)[0];
  loss.kl = fwd.kl ? tape.values(*fwd.kl)[0] : 0.0;
  loss.total = tape.values(fwd.total)[0];
  return loss;
}

LossBreakdown forward_loss(const ParParams& params, const ParConfig& config,
                           const Vocabulary& vocab,
                           const cloze::ClozeInstance& instance,
                           const ForwardOptions& options) {
  Tape tape;
  const Forward fwd = build_forward(tape, params, config, vocab, instance, options);
  LossBreakdown loss;
  loss.nll = tape.values(fwd.nll)[0];
  loss.kl = fwd.kl ? tape.values(*fwd.kl)[0] : 0.0;
  loss.total = tape.values(fwd.total)[0];
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

ordered_json config_to_json(const ParConfig& config) {
  ordered_json j;
  j["embedding_dim"] = config.embedding_dim;
  j["hidden_dim"] = config.hidden_dim;
  j["attention_dim"] = config.attention_dim;
  j["num_hops"] = config.num_hops;
  j["dropout_rate"] = config.dropout_rate;
  j["kl_weight"] = config.kl_weight;
  j["kl_reverse"] = config.kl_reverse;
  return j;
}

ParConfig config_from_json(const json& j) {
  ParConfig config;
  config.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  config.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  config.attention_dim = j.at("attention_dim").get<std::size_t>();
  config.num_hops = j.at("num_hops").get<int>();
  config.dropout_rate = j.at("dropout_rate").get<double>();
  config.kl_weight = j.at("kl_weight").get<double>();
  config.kl_reverse = j.at("kl_reverse").get<bool>();
  config.validate();
  return config;
}

Tensor take_array(std::vector<std::pair<std::string, Tensor>>& arrays,
                  const std::string& name, const tensor::Shape& shape) {
  for (auto& [n, t] : arrays) {
    if (n == name) {
      if (t.shape != shape) {
        throw ValidationError("checkpoint array '" + name + "' has shape " +
                              tensor::shape_str(t.shape) + ", expected " +
                              tensor::shape_str(shape));
      }
      Tensor out = std::move(t);
      n.clear();  // consumed
      return out;
    }
  }
  throw ValidationError("checkpoint is missing array '" + name + "'");
}

GruCellParams take_gru(std::vector<std::pair<std::string, Tensor>>& arrays,
                       const std::string& prefix, std::size_t input_dim,
                       std::size_t hidden_dim) {
  GruCellParams cell;
  cell.input_dim = input_dim;
  cell.hidden_dim = hidden_dim;
  const tensor::Shape w_shape{hidden_dim, input_dim + hidden_dim};
  const tensor::Shape b_shape{hidden_dim};
  cell.w_update = take_array(arrays, prefix + ".w_update", w_shape);
  cell.b_update = take_array(arrays, prefix + ".b_update", b_shape);
  cell.w_reset = take_array(arrays, prefix + ".w_reset", w_shape);
  cell.b_reset = take_array(arrays, prefix + ".b_reset", b_shape);
  cell.w_cand = take_array(arrays, prefix + ".w_cand", w_shape);
  cell.b_cand = take_array(arrays, prefix + ".b_cand", b_shape);
  return cell;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParParams& params,
                     const ParConfig& config, std::string_view vocab_hash,
                     std::size_t epoch, std::span<const NamedTensor> extra_arrays) {
  std::vector<NamedTensor> arrays = params.named();
  arrays.insert(arrays.end(), extra_arrays.begin(), extra_arrays.end());

  ordered_json extra;
  extra["config"] = config_to_json(config);
  extra["vocab_hash"] = std::string(vocab_hash);
  extra["epoch"] = epoch;
  tensor::save_arrays(path, arrays, extra.dump());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  tensor::ArrayBundle bundle = tensor::load_arrays(path);
  json extra;
  try {
    extra = json::parse(bundle.extra_json);
  } catch (const json::parse_error& e) {
    throw ParseError("invalid checkpoint sidecar: " + std::string(e.what()));
  }

  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(extra.at("config"));
    ckpt.vocab_hash = extra.at("vocab_hash").get<std::string>();
    ckpt.epoch = extra.at("epoch").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint sidecar is missing fields: " +
                          std::string(e.what()));
  }

  const ParConfig& config = ckpt.config;
  auto& arrays = bundle.arrays;

  const Tensor* embedding = bundle.find("embedding");
  if (!embedding || embedding->shape.size() != 2 ||
      embedding->shape[1] != config.embedding_dim) {
    throw ValidationError("checkpoint embedding does not match the config");
  }
  const std::size_t vocab_size = embedding->shape[0];

  ParParams& p = ckpt.params;
  p.embedding = take_array(arrays, "embedding", {vocab_size, config.embedding_dim});
  p.doc_fwd = take_gru(arrays, "doc_fwd", config.embedding_dim, config.hidden_dim);
  p.doc_bwd = take_gru(arrays, "doc_bwd", config.embedding_dim, config.hidden_dim);
  p.qry_fwd = take_gru(arrays, "qry_fwd", config.embedding_dim, config.hidden_dim);
  p.qry_bwd = take_gru(arrays, "qry_bwd", config.embedding_dim, config.hidden_dim);
  const tensor::Shape w_shape{config.attention_dim_resolved(), 4 * config.hidden_dim};
  const tensor::Shape v_shape{config.attention_dim_resolved()};
  p.attn_w = take_array(arrays, "attn.w", w_shape);
  p.attn_v = take_array(arrays, "attn.v", v_shape);
  if (config.num_hops == 2) {
    p.hop_w = take_array(arrays, "hop.w", w_shape);
    p.hop_v = take_array(arrays, "hop.v", v_shape);
  }

  for (auto& [name, t] : arrays) {
    if (!name.empty()) ckpt.extra_arrays.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace par::model
