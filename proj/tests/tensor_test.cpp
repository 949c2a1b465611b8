#include "par/tensor.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "par/tensor_io.hpp"

using namespace par;
using namespace par::tensor;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Copies tape-side leaf gradients into the tensors' grad buffers so they can
// feed finite_diff_check.
void pull_grads(const Tape& tape, std::span<const std::pair<Val, Tensor*>> leaves) {
  for (const auto& [val, tensor] : leaves) {
    const auto g = tape.grad(val);
    tensor->grad.assign(g.begin(), g.end());
  }
}

}  // namespace

TEST_CASE("linear computes Wx + b") {
  Tape tape;
  Tensor w = Tensor::of({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::of({2}, {3, -4});
  Tensor b = Tensor::of({2}, {0, 0});
  const Val y = tape.linear(tape.leaf(w), tape.leaf(x), tape.leaf(b));
  CHECK(tape.values(y)[0] == 3.0);
  CHECK(tape.values(y)[1] == -4.0);

  Tape tape2;
  Tensor w2 = Tensor::of({2, 2}, {1, 2, 3, 4});
  Tensor x2 = Tensor::of({2}, {1, 1});
  const Val y2 = tape2.linear(tape2.leaf(w2), tape2.leaf(x2));
  CHECK(tape2.values(y2)[0] == 3.0);
  CHECK(tape2.values(y2)[1] == 7.0);
}

TEST_CASE("linear rejects mismatched shapes naming both") {
  Tape tape;
  Tensor w = Tensor::zeros({2, 3});
  Tensor x = Tensor::zeros({2});
  const Val wv = tape.leaf(w);
  const Val xv = tape.leaf(x);
  CHECK_THROWS_WITH_AS(tape.linear(wv, xv), doctest::Contains("(2, 3)"),
                       DimensionError);
}

TEST_CASE("linear gradient matches central differences") {
  Rng rng(101);
  Tensor w = random_tensor({3, 4}, rng);
  Tensor x = random_tensor({4}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor probe = random_tensor({3}, rng);

  auto loss = [&] {
    Tape tape;
    const Val y = tape.linear(tape.leaf(w), tape.leaf(x), tape.leaf(b));
    return tape.values(tape.dot(y, tape.leaf(probe)))[0];
  };
  {
    Tape tape;
    const Val wv = tape.leaf(w), xv = tape.leaf(x), bv = tape.leaf(b);
    const Val y = tape.linear(wv, xv, bv);
    tape.backward(tape.dot(y, tape.leaf(probe)));
    std::pair<Val, Tensor*> leaves[] = {{wv, &w}, {xv, &x}, {bv, &b}};
    pull_grads(tape, leaves);
  }
  NamedTensor params[] = {{"w", &w}, {"x", &x}, {"b", &b}};
  FiniteDiffOptions options;
  options.tolerance = 1e-6;
  const auto report = finite_diff_check(loss, params, options);
  CHECK(report.ok());
  CHECK(report.coords_checked == 12 + 4 + 3);
}

TEST_CASE("masked_softmax basics") {
  Tape tape;
  const Val s = tape.constant({2}, {0, 0});
  const Val p = tape.masked_softmax(s, {true, true});
  CHECK(tape.values(p)[0] == 0.5);
  CHECK(tape.values(p)[1] == 0.5);

  const Val s2 = tape.constant({3}, {5, -2, 9});
  const Val p2 = tape.masked_softmax(s2, {false, true, false});
  CHECK(tape.values(p2)[0] == 0.0);
  CHECK(tape.values(p2)[1] == 1.0);
  CHECK(tape.values(p2)[2] == 0.0);

  const Val s3 = tape.constant({2}, {1, 2});
  CHECK_THROWS_AS(tape.masked_softmax(s3, {false, false}), ContractViolation);
}

TEST_CASE("masked_softmax matches a direct exp-normalize oracle") {
  Tape tape;
  const Val s = tape.constant({3}, {1, 2, 3});
  const Val p = tape.masked_softmax(s, {true, true, true});
  const double z = std::exp(1.0 - 3.0) + std::exp(2.0 - 3.0) + std::exp(0.0);
  for (int i = 0; i < 3; ++i) {
    const double expected = std::exp(1.0 + i - 3.0) / z;
    CHECK(std::abs(tape.values(p)[i] - expected) < 1e-12);
  }
}

TEST_CASE("masked_softmax properties: support, normalization, shift invariance") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.next_below(7);
    std::vector<double> scores(n);
    std::vector<bool> mask(n);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = rng.next_uniform(-30, 30);
      mask[i] = rng.next_double() < 0.6;
      any = any || mask[i];
    }
    if (!any) mask[rng.next_below(n)] = true;

    Tape tape;
    const Val p = tape.masked_softmax(tape.constant({n}, scores), mask);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask[i]) {
        sum += tape.values(p)[i];
      } else {
        CHECK(tape.values(p)[i] == 0.0);
      }
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);

    const double c = rng.next_uniform(-50, 50);
    std::vector<double> shifted = scores;
    for (double& v : shifted) v += c;
    const Val p2 = tape.masked_softmax(tape.constant({n}, shifted), mask);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(tape.values(p)[i] - tape.values(p2)[i]) < 1e-9);
    }
  }
}

TEST_CASE("gru cell at zero parameters halves the previous state") {
  GruCellParams cell;
  cell.input_dim = 3;
  cell.hidden_dim = 2;
  const Shape w{2, 5};
  cell.w_update = Tensor::zeros(w);
  cell.b_update = Tensor::zeros({2});
  cell.w_reset = Tensor::zeros(w);
  cell.b_reset = Tensor::zeros({2});
  cell.w_cand = Tensor::zeros(w);
  cell.b_cand = Tensor::zeros({2});

  Tape tape;
  const GruLeaves leaves = gru_leaves(tape, cell);
  const Val x = tape.constant({3}, {1, -2, 3});
  const Val h = tape.constant({2}, {0.8, -0.4});
  const Val out = gru_cell(tape, leaves, x, h);
  CHECK(tape.values(out)[0] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(tape.values(out)[1] == doctest::Approx(-0.2).epsilon(1e-12));
}

TEST_CASE("gru cell gradient matches central differences") {
  Rng rng(55);
  GruCellParams cell = GruCellParams::init(3, 2, rng, 0.5);
  Tensor x = random_tensor({3}, rng);
  Tensor h = random_tensor({2}, rng);
  Tensor probe = random_tensor({2}, rng);

  auto loss = [&] {
    Tape tape;
    const Val out = gru_cell(tape, gru_leaves(tape, cell), tape.leaf(x), tape.leaf(h));
    return tape.values(tape.dot(out, tape.leaf(probe)))[0];
  };
  std::vector<NamedTensor> params = cell.named("cell");
  params.push_back({"x", &x});
  params.push_back({"h", &h});
  {
    Tape tape;
    const GruLeaves leaves = gru_leaves(tape, cell);
    const Val xv = tape.leaf(x), hv = tape.leaf(h);
    const Val out = gru_cell(tape, leaves, xv, hv);
    tape.backward(tape.dot(out, tape.leaf(probe)));
    std::pair<Val, Tensor*> pairs[] = {
        {leaves.w_update, &cell.w_update}, {leaves.b_update, &cell.b_update},
        {leaves.w_reset, &cell.w_reset},   {leaves.b_reset, &cell.b_reset},
        {leaves.w_cand, &cell.w_cand},     {leaves.b_cand, &cell.b_cand},
        {xv, &x},                          {hv, &h}};
    pull_grads(tape, pairs);
  }
  FiniteDiffOptions options;
  options.tolerance = 1e-5;
  const auto report = finite_diff_check(loss, params, options);
  CHECK(report.ok());
}

TEST_CASE("gru cell keeps the previous state when the update gate saturates") {
  Rng rng(56);
  GruCellParams cell = GruCellParams::init(3, 2, rng, 0.5);
  for (double& v : cell.b_update.values) v = -40.0;  // z ~ 4e-18

  Tape tape;
  Tensor x = random_tensor({3}, rng);
  Tensor h = random_tensor({2}, rng);
  const Val out = gru_cell(tape, gru_leaves(tape, cell), tape.leaf(x), tape.leaf(h));
  for (int i = 0; i < 2; ++i) {
    CHECK(std::abs(tape.values(out)[i] - h.values[i]) < 1e-12);
  }
}

TEST_CASE("finite_diff_check verifies a quadratic and flags corruption") {
  Tensor theta = Tensor::of({1}, {1.0});
  auto loss = [&] { return theta.values[0] * theta.values[0]; };

  theta.grad = {2.0};  // correct analytic gradient at theta = 1
  NamedTensor params[] = {{"theta", &theta}};
  FiniteDiffOptions options;
  options.tolerance = 1e-9;
  CHECK(finite_diff_check(loss, params, options).ok());

  theta.grad = {4.0};  // deliberately doubled
  const auto report = finite_diff_check(loss, params, options);
  REQUIRE(report.violations.size() == 1);
  CHECK(report.violations[0].name == "theta");
  CHECK(report.violations[0].analytic == 4.0);
  CHECK(report.violations[0].numeric == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("finite_diff_check subsamples large tensors") {
  Rng rng(77);
  Tensor theta = random_tensor({100}, rng);
  theta.grad.assign(100, 0.0);
  auto loss = [&] { return 0.0; };  // flat: zero gradient everywhere
  NamedTensor params[] = {{"theta", &theta}};
  FiniteDiffOptions options;
  options.max_coords_per_tensor = 10;
  options.subsample_seed = 3;
  const auto report = finite_diff_check(loss, params, options);
  CHECK(report.coords_checked == 10);
  CHECK(report.ok());
}

TEST_CASE("dropout identity cases and scaling") {
  Rng rng(9);
  Tape tape;
  Tensor x = random_tensor({16}, rng);
  const Val xv = tape.leaf(x);
  const Val y = tape.dropout(xv, 0.0, rng);
  for (std::size_t i = 0; i < 16; ++i) CHECK(tape.values(y)[i] == x.values[i]);

  CHECK_THROWS_AS(tape.dropout(xv, 1.0, rng), ContractViolation);
}

TEST_CASE("dropout keeps the mean within one percent at scale") {
  Rng rng(123);
  Tape tape;
  Tensor ones = Tensor::of({100000}, std::vector<double>(100000, 1.0));
  const Val y = tape.dropout(tape.leaf(ones), 0.2, rng);
  double mean = 0.0;
  for (double v : tape.values(y)) mean += v;
  mean /= 100000.0;
  CHECK(std::abs(mean - 1.0) < 0.01);
}

TEST_CASE("dropout is deterministic under a fixed seed") {
  Tensor x = Tensor::of({32}, std::vector<double>(32, 1.0));
  auto run = [&] {
    Rng rng(42);
    Tape tape;
    const Val y = tape.dropout(tape.leaf(x), 0.5, rng);
    return std::vector<double>(tape.values(y).begin(), tape.values(y).end());
  };
  CHECK(run() == run());
}

TEST_CASE("every differentiable op passes the finite-difference oracle") {
  Rng rng(2024);
  FiniteDiffOptions options;
  options.tolerance = 1e-5;

  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.next_below(7);  // dims <= 8
    const std::size_t m = 2 + rng.next_below(7);
    const int which = trial % 10;

    Tensor a = random_tensor({n}, rng);
    Tensor b = random_tensor({n}, rng);
    Tensor w = random_tensor({m, n}, rng);
    Tensor probe_n = random_tensor({n}, rng);
    Tensor probe_m = random_tensor({m}, rng);
    Tensor probe_2n = random_tensor({2 * n}, rng);
    const std::uint64_t drop_seed = rng.next_u64();

    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.next_double() < 0.5) positions.push_back(i);
    }
    if (positions.empty()) positions.push_back(rng.next_below(n));

    // Builds the op under test and reduces it to a scalar.
    auto build = [&](Tape& tape, Val av, Val bv, Val wv) -> Val {
      switch (which) {
        case 0: return tape.dot(tape.add(av, bv), tape.leaf(probe_n));
        case 1: return tape.dot(tape.sub(av, bv), tape.leaf(probe_n));
        case 2: return tape.dot(tape.hadamard(av, bv), tape.leaf(probe_n));
        case 3: return tape.dot(tape.scale(av, 1.7), tape.leaf(probe_n));
        case 4: return tape.dot(tape.concat(av, bv), tape.leaf(probe_2n));
        case 5: return tape.dot(tape.tanh_op(av), tape.leaf(probe_n));
        case 6: return tape.dot(tape.sigmoid_op(av), tape.leaf(probe_n));
        case 7: return tape.dot(tape.linear(wv, av), tape.leaf(probe_m));
        case 8: {
          const Val soft = tape.masked_softmax(av, std::vector<bool>(n, true));
          // Chain through both KL flavours and the max-pick loss.
          const Val kl = tape.kl_uniform(soft, positions);
          const Val klr = tape.kl_reverse_renorm(soft, positions);
          const Val nll = tape.neg_log(tape.max_at(soft, positions));
          return tape.add(tape.add(kl, klr), nll);
        }
        case 9: {
          Rng drop_rng(drop_seed);
          const Val dropped = tape.dropout(av, 0.3, drop_rng);
          std::vector<Val> rows{dropped, bv};
          const Val weights = tape.masked_softmax(
              tape.stack(std::vector<Val>{tape.dot(av, bv), tape.dot(av, av)}),
              {true, true});
          return tape.dot(tape.weighted_sum(weights, rows), tape.leaf(probe_n));
        }
      }
      return Val{};
    };

    auto loss = [&] {
      Tape tape;
      return tape.values(build(tape, tape.leaf(a), tape.leaf(b), tape.leaf(w)))[0];
    };
    {
      Tape tape;
      const Val av = tape.leaf(a), bv = tape.leaf(b), wv = tape.leaf(w);
      tape.backward(build(tape, av, bv, wv));
      std::pair<Val, Tensor*> pairs[] = {{av, &a}, {bv, &b}, {wv, &w}};
      pull_grads(tape, pairs);
    }
    NamedTensor params[] = {{"a", &a}, {"b", &b}, {"w", &w}};
    const auto report = finite_diff_check(loss, params, options);
    if (!report.ok()) {
      CAPTURE(trial);
      CAPTURE(which);
      CAPTURE(report.violations[0].name);
      CAPTURE(report.violations[0].analytic);
      CAPTURE(report.violations[0].numeric);
    }
    CHECK(report.ok());
  }
}

TEST_CASE("max_at picks the lowest index on ties") {
  Tape tape;
  const Val x = tape.constant({4}, {1.0, 3.0, 3.0, 2.0});
  std::vector<std::size_t> all{0, 1, 2, 3};
  const Val m = tape.max_at(x, all);
  CHECK(tape.values(m)[0] == 3.0);
  tape.backward(m);
  CHECK(tape.grad(x)[1] == 1.0);  // position 1, not 2
  CHECK(tape.grad(x)[2] == 0.0);
}

TEST_CASE("kl_uniform closed form") {
  Tape tape;
  const Val exact = tape.kl_uniform(tape.constant({2}, {0.5, 0.5}),
                                    std::vector<std::size_t>{0, 1});
  CHECK(tape.values(exact)[0] == 0.0);

  const Val off = tape.kl_uniform(tape.constant({3}, {0.25, 0.25, 0.5}),
                                  std::vector<std::size_t>{0, 1});
  CHECK(tape.values(off)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("forward computations are bitwise deterministic") {
  Rng rng(88);
  GruCellParams cell = GruCellParams::init(4, 3, rng, 0.3);
  Tensor x = random_tensor({4}, rng);
  Tensor h = random_tensor({3}, rng);
  auto run = [&] {
    Tape tape;
    const Val out = gru_cell(tape, gru_leaves(tape, cell), tape.leaf(x), tape.leaf(h));
    return std::vector<double>(tape.values(out).begin(), tape.values(out).end());
  };
  CHECK(run() == run());
}

TEST_CASE("array container round trips bit exactly") {
  Rng rng(4096);
  Tensor a = random_tensor({5, 3}, rng);
  Tensor b = random_tensor({7}, rng);
  NamedTensor arrays[] = {{"alpha", &a}, {"beta", &b}};
  const auto path = std::filesystem::temp_directory_path() / "par_arrays.bin";
  save_arrays(path, arrays, R"({"note":"roundtrip"})");

  const ArrayBundle bundle = load_arrays(path);
  REQUIRE(bundle.arrays.size() == 2);
  CHECK(bundle.arrays[0].first == "alpha");
  CHECK(bundle.arrays[0].second.shape == Shape{5, 3});
  CHECK(bundle.arrays[0].second.values == a.values);
  CHECK(bundle.arrays[1].second.values == b.values);
  CHECK(bundle.find("beta") != nullptr);
  CHECK(bundle.find("gamma") == nullptr);
  CHECK(bundle.extra_json.find("roundtrip") != std::string::npos);

  // Re-save what was loaded; the binary must be identical.
  const auto path2 = std::filesystem::temp_directory_path() / "par_arrays2.bin";
  Tensor a2 = bundle.arrays[0].second;
  Tensor b2 = bundle.arrays[1].second;
  NamedTensor arrays2[] = {{"alpha", &a2}, {"beta", &b2}};
  save_arrays(path2, arrays2, bundle.extra_json);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {});
  const std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);

  std::filesystem::remove(path);
  std::filesystem::remove(path2);
  std::filesystem::remove(path.string() + ".json");
  std::filesystem::remove(path2.string() + ".json");
}

TEST_CASE("array loader rejects foreign files") {
  const auto path = std::filesystem::temp_directory_path() / "par_not_arrays.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "definitely not the right magic";
  }
  CHECK_THROWS_AS(load_arrays(path), ParseError);
  std::filesystem::remove(path);
}
