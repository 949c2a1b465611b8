#include "par/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "par/eval.hpp"
#include "par/parallel.hpp"

namespace par::trainer {

using model::GradSet;
using model::LossBreakdown;
using model::NamedTensor;
using model::ParParams;
using model::Tensor;
using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
  if (learning_rate <= 0.0) {
    throw ValidationError("train config: learning_rate must be > 0");
  }
  if (adagrad_epsilon <= 0.0) {
    throw ValidationError("train config: adagrad_epsilon must be > 0");
  }
  if (l2_weight < 0.0) throw ValidationError("train config: l2_weight must be >= 0");
  if (workers < 1) throw ValidationError("train config: workers must be >= 1");
}

AdagradState AdagradState::zeros_like(const ParParams& params) {
  AdagradState state;
  for (const NamedTensor& nt : params.named()) {
    state.accum.push_back(Tensor::zeros(nt.tensor->shape));
  }
  return state;
}

std::vector<NamedTensor> AdagradState::named(const ParParams& params) {
  std::vector<NamedTensor> out;
  const auto param_names = params.named();
  if (param_names.size() != accum.size()) {
    throw DimensionError("adagrad state does not match the parameter set");
  }
  for (std::size_t k = 0; k < accum.size(); ++k) {
    out.push_back({"adagrad." + param_names[k].name, &accum[k]});
  }
  return out;
}

std::vector<NamedTensor> AdagradState::named(const ParParams& params) const {
  return const_cast<AdagradState*>(this)->named(params);
}

void adagrad_step(std::span<const NamedTensor> params, const GradSet& grads,
                  AdagradState& state, double learning_rate, double epsilon) {
  if (params.size() != grads.tensors.size() ||
      params.size() != state.accum.size()) {
    throw DimensionError("adagrad_step: mismatched parameter count");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& theta = params[k].tensor->values;
    const auto& g = grads.tensors[k].values;
    auto& accum = state.accum[k].values;
    if (theta.size() != g.size() || theta.size() != accum.size()) {
      throw DimensionError("adagrad_step: mismatched tensor sizes for '" +
                           params[k].name + "'");
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      accum[i] += g[i] * g[i];
      theta[i] -= learning_rate * g[i] / (std::sqrt(accum[i]) + epsilon);
    }
  }
}

namespace {

double sum_squares(const std::vector<NamedTensor>& params) {
  double total = 0.0;
  for (const NamedTensor& nt : params) {
    for (double v : nt.tensor->values) total += v * v;
  }
  return total;
}

}  // namespace

TrainResult train(ParParams& params, const model::ParConfig& config,
                  const corpus::Vocabulary& vocab,
                  std::span<const cloze::ClozeInstance> train_set,
                  std::span<const cloze::ClozeInstance> dev_set,
                  const TrainConfig& train_config, std::size_t start_epoch,
                  AdagradState* state, const EpochCallback& on_epoch) {
  train_config.validate();
  config.validate();
  if (train_set.empty()) {
    throw ValidationError("train: empty instance list");
  }

  AdagradState local_state;
  if (!state) {
    local_state = AdagradState::zeros_like(params);
    state = &local_state;
  }
  const std::vector<NamedTensor> named = params.named();

  TrainResult result;
  double best_dev = -1.0;

  for (std::size_t epoch = start_epoch; epoch < train_config.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    if (train_config.shuffle) {
      Rng shuffle_rng(mix_seed(train_config.seed, epoch, 0x5f));
      shuffle_rng.shuffle(order);
    }

    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::size_t skipped = 0;

    GradSet batch_grads = GradSet::zeros_like(params);
    for (std::size_t batch_start = 0; batch_start < order.size();
         batch_start += train_config.batch_size) {
      const std::size_t batch_end =
          std::min(order.size(), batch_start + train_config.batch_size);
      const std::size_t batch_n = batch_end - batch_start;

      struct InstanceResult {
        bool ok = false;
        LossBreakdown loss;
        GradSet grads;
        std::string warning;
      };
      std::vector<InstanceResult> partial(batch_n);

      parallel_for(batch_n, train_config.workers, [&](std::size_t b) {
        const std::size_t position = batch_start + b;
        const cloze::ClozeInstance& inst = train_set[order[position]];
        model::ForwardOptions options;
        options.training = true;
        options.dropout_seed = mix_seed(train_config.seed, epoch, position);
        options.use_supervision = true;
        InstanceResult& out = partial[b];
        out.grads = GradSet::zeros_like(params);
        try {
          out.loss = model::loss_and_grads(params, config, vocab, inst,
                                           options, out.grads);
          out.ok = true;
        } catch (const ContractViolation& e) {
          std::ostringstream os;
          os << "warning: skipping instance (doc '" << inst.meta.doc_id
             << "' event " << inst.meta.event_index << "): " << e.what();
          out.warning = os.str();
        }
      });

      // Reduce in batch order so any worker count reproduces workers=1.
      batch_grads.zero();
      std::size_t batch_seen = 0;
      double batch_loss_sum = 0.0;
      for (InstanceResult& r : partial) {
        if (!r.ok) {
          ++skipped;
          std::cerr << r.warning << "\n";
          continue;
        }
        batch_grads.add(r.grads);
        batch_loss_sum += r.loss.total;
        ++batch_seen;
      }
      if (batch_seen == 0) continue;

      batch_grads.scale(1.0 / static_cast<double>(batch_seen));
      double batch_loss = batch_loss_sum / static_cast<double>(batch_seen);
      if (train_config.l2_weight != 0.0) {
        batch_loss += train_config.l2_weight * sum_squares(named);
        for (std::size_t k = 0; k < named.size(); ++k) {
          const auto& theta = named[k].tensor->values;
          auto& g = batch_grads.tensors[k].values;
          for (std::size_t i = 0; i < theta.size(); ++i) {
            g[i] += 2.0 * train_config.l2_weight * theta[i];
          }
        }
      }

      adagrad_step(named, batch_grads, *state, train_config.learning_rate,
                   train_config.adagrad_epsilon);
      loss_sum += batch_loss * static_cast<double>(batch_seen);
      seen += batch_seen;
    }

    EpochLog log;
    log.epoch = epoch + 1;
    log.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    log.skipped = skipped;
    if (!dev_set.empty()) {
      eval::EvalOptions eval_options;
      eval_options.workers = train_config.workers;
      const eval::EvalReport report =
          eval::evaluate(params, config, vocab, dev_set, eval_options);
      log.dev_accuracy = report.accuracy.value_or(0.0);
      if (*log.dev_accuracy > best_dev) {
        best_dev = *log.dev_accuracy;
        result.best_epoch = log.epoch;
      }
    } else {
      result.best_epoch = log.epoch;
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log, params, *state);
  }
  return result;
}

std::string epoch_log_json(const EpochLog& log) {
  ordered_json j;
  j["epoch"] = log.epoch;
  j["loss"] = log.loss;
  if (log.dev_accuracy) {
    j["dev_acc"] = *log.dev_accuracy;
  } else {
    j["dev_acc"] = nullptr;
  }
  if (log.skipped) j["skipped"] = log.skipped;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Run configuration.

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> keys,
                    const char* section) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) {
          return key == k;
        }) == keys.end()) {
      throw ValidationError(std::string("config: unknown key '") + key +
                            "' in \"" + section + "\"");
    }
  }
}

}  // namespace

RunConfig parse_run_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  reject_unknown(j, {"model", "train"}, "");

  RunConfig config;
  try {
    if (j.contains("model")) {
      const json& m = j["model"];
      reject_unknown(m,
                     {"embedding_dim", "hidden_dim", "attention_dim", "num_hops",
                      "dropout_rate", "kl_weight", "kl_reverse"},
                     "model");
      config.model.embedding_dim =
          m.value("embedding_dim", config.model.embedding_dim);
      config.model.hidden_dim = m.value("hidden_dim", config.model.hidden_dim);
      config.model.attention_dim =
          m.value("attention_dim", config.model.attention_dim);
      config.model.num_hops = m.value("num_hops", config.model.num_hops);
      config.model.dropout_rate =
          m.value("dropout_rate", config.model.dropout_rate);
      config.model.kl_weight = m.value("kl_weight", config.model.kl_weight);
      config.model.kl_reverse = m.value("kl_reverse", config.model.kl_reverse);
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      reject_unknown(t,
                     {"batch_size", "epochs", "learning_rate", "adagrad_epsilon",
                      "seed", "l2_weight", "shuffle", "workers"},
                     "train");
      config.train.batch_size = t.value("batch_size", config.train.batch_size);
      config.train.epochs = t.value("epochs", config.train.epochs);
      config.train.learning_rate =
          t.value("learning_rate", config.train.learning_rate);
      config.train.adagrad_epsilon =
          t.value("adagrad_epsilon", config.train.adagrad_epsilon);
      config.train.seed = t.value("seed", config.train.seed);
      config.train.l2_weight = t.value("l2_weight", config.train.l2_weight);
      config.train.shuffle = t.value("shuffle", config.train.shuffle);
      config.train.workers = t.value("workers", config.train.workers);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: bad value type: ") + e.what());
  }
  config.model.validate();
  config.train.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_run_config(buffer.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string run_config_json(const RunConfig& config) {
  ordered_json m;
  m["embedding_dim"] = config.model.embedding_dim;
  m["hidden_dim"] = config.model.hidden_dim;
  m["attention_dim"] = config.model.attention_dim;
  m["num_hops"] = config.model.num_hops;
  m["dropout_rate"] = config.model.dropout_rate;
  m["kl_weight"] = config.model.kl_weight;
  m["kl_reverse"] = config.model.kl_reverse;
  ordered_json t;
  t["batch_size"] = config.train.batch_size;
  t["epochs"] = config.train.epochs;
  t["learning_rate"] = config.train.learning_rate;
  t["adagrad_epsilon"] = config.train.adagrad_epsilon;
  t["seed"] = config.train.seed;
  t["l2_weight"] = config.train.l2_weight;
  t["shuffle"] = config.train.shuffle;
  t["workers"] = config.train.workers;
  ordered_json j;
  j["model"] = std::move(m);
  j["train"] = std::move(t);
  return j.dump(2);
}

}  // namespace par::trainer
