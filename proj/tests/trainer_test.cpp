#include "par/trainer.hpp"

#include <cmath>

#include "doctest.h"
#include "par/eval.hpp"
#include "synthetic.hpp"

using namespace par;
using namespace par::trainer;
using model::GradSet;
using model::ParConfig;
using model::ParParams;
using model::Tensor;

namespace {

ParConfig tiny_config(int num_hops = 1) {
  ParConfig config;
  config.embedding_dim = 8;
  config.hidden_dim = 8;
  config.num_hops = num_hops;
  config.dropout_rate = 0.0;
  return config;
}

}  // namespace

TEST_CASE("adagrad first step and zero-gradient step") {
  Rng rng(1);
  synth::ToySet set = synth::toy_set(rng, 1, synth::ToyOpts{}, false);
  const ParConfig config = tiny_config();
  ParParams params = ParParams::init(config, set.vocab, 1);
  AdagradState state = AdagradState::zeros_like(params);

  GradSet grads = GradSet::zeros_like(params);
  grads.tensors[0].values[0] = 1.0;  // single embedding coordinate
  const double before = params.embedding.values[0];
  adagrad_step(params.named(), grads, state, 0.01, 1e-8);
  const double expected_delta = -0.01 * 1.0 / (1.0 + 1e-8);
  CHECK(params.embedding.values[0] == before + expected_delta);
  CHECK(std::abs(params.embedding.values[0] - (before - 0.01)) < 1e-9);
  CHECK(state.accum[0].values[0] == 1.0);

  // Zero gradient leaves parameters and accumulators alone.
  const std::vector<double> theta_snapshot = params.embedding.values;
  const std::vector<double> accum_snapshot = state.accum[0].values;
  grads.zero();
  adagrad_step(params.named(), grads, state, 0.01, 1e-8);
  CHECK(params.embedding.values == theta_snapshot);
  CHECK(state.accum[0].values == accum_snapshot);
}

TEST_CASE("adagrad accumulates squared gradients across steps") {
  Rng rng(2);
  synth::ToySet set = synth::toy_set(rng, 1, synth::ToyOpts{}, false);
  const ParConfig config = tiny_config();
  ParParams params = ParParams::init(config, set.vocab, 1);
  AdagradState state = AdagradState::zeros_like(params);
  const double lr = 0.5;
  const double eps = 1e-8;

  GradSet grads = GradSet::zeros_like(params);
  grads.tensors[0].values[3] = 3.0;
  adagrad_step(params.named(), grads, state, lr, eps);
  CHECK(state.accum[0].values[3] == 9.0);

  const double before = params.embedding.values[3];
  grads.tensors[0].values[3] = 4.0;
  adagrad_step(params.named(), grads, state, lr, eps);
  CHECK(state.accum[0].values[3] == 25.0);
  CHECK(params.embedding.values[3] == before - lr * 4.0 / (5.0 + eps));
}

TEST_CASE("adagrad accumulators are coordinatewise non-decreasing") {
  Rng rng(3);
  synth::ToySet set = synth::toy_set(rng, 6, synth::ToyOpts{}, false);
  const ParConfig config = tiny_config();
  ParParams params = ParParams::init(config, set.vocab, 4);
  AdagradState state = AdagradState::zeros_like(params);

  std::vector<std::vector<double>> previous;
  for (const auto& t : state.accum) previous.push_back(t.values);
  for (int step = 0; step < 5; ++step) {
    GradSet grads = GradSet::zeros_like(params);
    model::ForwardOptions options;
    model::loss_and_grads(params, config, set.vocab, set.instances[step % 6],
                          options, grads);
    adagrad_step(params.named(), grads, state, 0.05, 1e-8);
    for (std::size_t k = 0; k < state.accum.size(); ++k) {
      for (std::size_t i = 0; i < state.accum[k].values.size(); ++i) {
        CHECK(state.accum[k].values[i] >= previous[k][i]);
      }
      previous[k] = state.accum[k].values;
    }
  }
}

TEST_CASE("training overfits a single instance") {
  Rng rng(5);
  synth::ToySet set = synth::pattern_set(rng, 1, 4);
  const ParConfig config = tiny_config();
  ParParams params = ParParams::init(config, set.vocab, 3);

  TrainConfig tc;
  tc.batch_size = 1;
  tc.epochs = 300;
  tc.learning_rate = 0.1;
  tc.seed = 9;
  const TrainResult result =
      train(params, config, set.vocab, set.instances, {}, tc);
  REQUIRE(result.log.size() == 300);
  CHECK(result.log.back().loss < 0.01);
  // Monotone after warmup: the last 50 epochs never increase.
  for (std::size_t i = result.log.size() - 50; i + 1 < result.log.size(); ++i) {
    CHECK(result.log[i + 1].loss <= result.log[i].loss + 1e-12);
  }
}

TEST_CASE("loss trajectory is bitwise reproducible and worker independent") {
  Rng rng(6);
  synth::ToySet set = synth::toy_set(rng, 24, synth::ToyOpts{}, false);
  const ParConfig config = tiny_config();

  auto run = [&](std::size_t workers) {
    ParParams params = ParParams::init(config, set.vocab, 12);
    TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 3;
    tc.learning_rate = 0.05;
    tc.seed = 31;
    tc.workers = workers;
    const TrainResult result =
        train(params, config, set.vocab, set.instances, {}, tc);
    std::vector<double> losses;
    for (const auto& log : result.log) losses.push_back(log.loss);
    losses.push_back(params.embedding.values[0]);
    return losses;
  };

  const auto a = run(1);
  const auto b = run(1);
  const auto c = run(4);
  CHECK(a == b);
  CHECK(a == c);
}

TEST_CASE("dropout training is reproducible under a fixed seed") {
  Rng rng(7);
  synth::ToySet set = synth::toy_set(rng, 12, synth::ToyOpts{}, false);
  ParConfig config = tiny_config();
  config.dropout_rate = 0.2;

  auto epoch0 = [&] {
    ParParams params = ParParams::init(config, set.vocab, 2);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.epochs = 1;
    tc.seed = 100;
    return train(params, config, set.vocab, set.instances, {}, tc).log[0].loss;
  };
  const double first = epoch0();
  CHECK(first == epoch0());
}

TEST_CASE("a batch larger than the dataset behaves as one batch per epoch") {
  Rng rng(8);
  synth::ToySet set = synth::toy_set(rng, 6, synth::ToyOpts{}, false);
  const ParConfig config = tiny_config();

  auto run = [&](std::size_t batch_size) {
    ParParams params = ParParams::init(config, set.vocab, 21);
    TrainConfig tc;
    tc.batch_size = batch_size;
    tc.epochs = 2;
    tc.seed = 77;
    const TrainResult result =
        train(params, config, set.vocab, set.instances, {}, tc);
    return std::pair{result.log[1].loss, params.embedding.values};
  };
  // 100 >> 6 and exactly 6 must take identical steps.
  CHECK(run(100) == run(6));
}

TEST_CASE("kl_weight zero reduces the 2-hop loss to the pointer term") {
  Rng rng(9);
  synth::ToySet set = synth::toy_set(rng, 4, synth::ToyOpts{}, true);
  ParConfig config = tiny_config(2);
  config.kl_weight = 0.0;
  const ParParams params = ParParams::init(config, set.vocab, 14);
  for (const auto& inst : set.instances) {
    REQUIRE(inst.supervision_positions.has_value());
    const model::LossBreakdown loss =
        model::forward_loss(params, config, set.vocab, inst, {});
    CHECK(loss.kl == 0.0);
    CHECK(loss.total == loss.nll);
  }
}

TEST_CASE("contract-violating instances are skipped, not fatal") {
  Rng rng(10);
  synth::ToySet set = synth::toy_set(rng, 5, synth::ToyOpts{}, false);
  // Corrupt one instance: an extra TARGET placeholder breaks the query
  // contract at forward time.
  set.instances[2].query_tokens.push_back(corpus::make_placeholder(
      corpus::TokenKind::placeholder_target, corpus::Role::dobj()));

  const ParConfig config = tiny_config();
  ParParams params = ParParams::init(config, set.vocab, 5);
  TrainConfig tc;
  tc.batch_size = 5;
  tc.epochs = 1;
  tc.seed = 3;
  const TrainResult result =
      train(params, config, set.vocab, set.instances, {}, tc);
  REQUIRE(result.log.size() == 1);
  CHECK(result.log[0].skipped == 1);
  CHECK(std::isfinite(result.log[0].loss));
}

TEST_CASE("training resumes exactly from a checkpoint") {
  Rng rng(11);
  synth::ToySet set = synth::toy_set(rng, 16, synth::ToyOpts{}, false);
  const ParConfig config = tiny_config();

  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = 3;
  tc.learning_rate = 0.05;
  tc.seed = 55;

  // Uninterrupted run.
  ParParams full = ParParams::init(config, set.vocab, 60);
  AdagradState full_state = AdagradState::zeros_like(full);
  const TrainResult full_result =
      train(full, config, set.vocab, set.instances, {}, tc, 0, &full_state);

  // Two epochs, then resume for the third.
  ParParams part = ParParams::init(config, set.vocab, 60);
  AdagradState part_state = AdagradState::zeros_like(part);
  TrainConfig two = tc;
  two.epochs = 2;
  train(part, config, set.vocab, set.instances, {}, two, 0, &part_state);
  const TrainResult resumed =
      train(part, config, set.vocab, set.instances, {}, tc, 2, &part_state);

  REQUIRE(resumed.log.size() == 1);
  CHECK(resumed.log[0].epoch == 3);
  CHECK(resumed.log[0].loss == full_result.log[2].loss);
  const auto a = full.named();
  const auto b = part.named();
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].tensor->values == b[k].tensor->values);
  }
}

TEST_CASE("dev evaluation tracks the best epoch") {
  Rng rng(12);
  synth::ToySet set = synth::pattern_set(rng, 24, 4);
  const ParConfig config = tiny_config();
  ParParams params = ParParams::init(config, set.vocab, 9);

  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = 5;
  tc.learning_rate = 0.1;
  tc.seed = 4;
  std::span<const cloze::ClozeInstance> all(set.instances);
  const TrainResult result = train(params, config, set.vocab,
                                   all.subspan(0, 16), all.subspan(16), tc);
  REQUIRE(result.log.size() == 5);
  for (const auto& log : result.log) CHECK(log.dev_accuracy.has_value());
  CHECK(result.best_epoch >= 1);
  CHECK(result.best_epoch <= 5);
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (const auto& log : result.log) {
    if (*log.dev_accuracy > best) {
      best = *log.dev_accuracy;
      best_epoch = log.epoch;
    }
  }
  CHECK(result.best_epoch == best_epoch);
}

TEST_CASE("run config parsing: defaults, overrides, rejection") {
  const RunConfig defaults = parse_run_config("{}");
  CHECK(defaults.model.hidden_dim == 32);
  CHECK(defaults.train.batch_size == 16);

  const RunConfig custom = parse_run_config(
      R"({"model":{"hidden_dim":300,"num_hops":2},"train":{"batch_size":128,"learning_rate":0.01,"epochs":10}})");
  CHECK(custom.model.hidden_dim == 300);
  CHECK(custom.model.attention_dim_resolved() == 600);
  CHECK(custom.train.batch_size == 128);

  CHECK_THROWS_AS(parse_run_config(R"({"model":{"hidden":3}})"), ValidationError);
  CHECK_THROWS_AS(parse_run_config(R"({"trainer":{}})"), ValidationError);
  CHECK_THROWS_AS(parse_run_config(R"({"model":{"num_hops":3}})"), ValidationError);
  CHECK_THROWS_AS(parse_run_config("not json"), ParseError);

  // Round trip through the serializer.
  const RunConfig reparsed = parse_run_config(run_config_json(custom));
  CHECK(reparsed.model.hidden_dim == 300);
  CHECK(reparsed.train.batch_size == 128);
}
