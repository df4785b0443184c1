#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cmath>
#include <numeric>
#include <set>

#include "bcnn/train.hpp"
#include "test_support.hpp"

using namespace bcnn;
using bcnn::testing::central_difference;
using bcnn::testing::rel_err;

namespace {

bool bitwise_equal(const NetworkParams& a, const NetworkParams& b) {
  if (a.layers.size() != b.layers.size()) return false;
  auto same = [](const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(x[i]) != std::bit_cast<std::uint64_t>(y[i])) return false;
    }
    return true;
  };
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    if (!same(a.layers[k].weights, b.layers[k].weights) || !same(a.layers[k].biases, b.layers[k].biases)) {
      return false;
    }
  }
  return true;
}

// Channel 0 is bright for positives; channel 1 is noise for both classes.
struct ToyTask {
  std::vector<Tensor4<double>> inputs;
  std::vector<int> labels;
};

ToyTask make_toy_task(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  ToyTask t;
  const auto spec = bcnn::testing::toy_spec();
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    Tensor4<double> x = bcnn::testing::random_tensor(spec.input_shape(1), rng, 0, 0.5);
    if (y == 1) {
      for (std::size_t j = 0; j < 36; ++j) x.plane(0, 0)[j] += 0.5;
    }
    t.inputs.push_back(std::move(x));
    t.labels.push_back(y);
  }
  return t;
}

double mean(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

TEST_CASE("training config validation and echo", "[train]") {
  TrainConfig cfg;
  CHECK(cfg.learning_rate == 0.01);
  CHECK(cfg.momentum == 0.9);
  CHECK(cfg.batch_size == 32);
  CHECK(cfg.checkpoint_every == 10000);
  CHECK_NOTHROW(cfg.validate());

  auto bad = cfg;
  bad.learning_rate = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = cfg;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = cfg;
  bad.iterations = 0;
  CHECK_THROWS_AS(bad.validate(), ValueError);

  cfg.learning_rate = 0.1;
  const std::string echo = cfg.echo();
  CHECK(echo.find("mode=float") != std::string::npos);
  CHECK(echo.find("learning_rate=0.10000000000000001") != std::string::npos);
  CHECK(echo.find("batch_size=32") != std::string::npos);
}

TEST_CASE("initialization is seeded and bounded", "[train]") {
  const auto spec = NetworkSpec::canonical();
  const auto a = init_params(spec, 42);
  const auto b = init_params(spec, 42);
  const auto c = init_params(spec, 43);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  for (const auto& l : a.layers) {
    const double bound = std::sqrt(3.0 / static_cast<double>(l.in_channels * l.kernel_h * l.kernel_w));
    for (double w : l.weights) CHECK(std::fabs(w) <= bound);
    for (double v : l.biases) CHECK(v == 0.0);
  }
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged", "[train]") {
  const auto spec = bcnn::testing::toy_spec();
  const auto task = make_toy_task(8, 1);
  const auto batch = stack<double>(task.inputs);
  for (auto mode : {TrainMode::kFloat, TrainMode::kBinarized}) {
    auto params = init_params(spec, 3);
    const auto before = params;
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.learning_rate = 0.0;
    auto state = SgdState::zeros_like(params);
    for (int i = 0; i < 3; ++i) train_step(params, batch, task.labels, cfg, state, i + 1);
    CHECK(bitwise_equal(params, before));
  }
}

TEST_CASE("momentum update follows v = m*v + g, W -= lr*v", "[train]") {
  const auto spec = bcnn::testing::toy_spec();
  const auto task = make_toy_task(6, 2);
  const auto batch = stack<double>(task.inputs);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.momentum = 0.5;
  auto params = init_params(spec, 4);
  auto state = SgdState::zeros_like(params);

  const auto p0 = params;
  const auto g0 = loss_and_grads(p0, batch, task.labels, TrainMode::kFloat).grads;
  train_step(params, batch, task.labels, cfg, state, 1);
  const auto p1 = params;
  const auto g1 = loss_and_grads(p1, batch, task.labels, TrainMode::kFloat).grads;
  train_step(params, batch, task.labels, cfg, state, 2);

  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    for (std::size_t i = 0; i < params.layers[k].weights.size(); ++i) {
      const double v1 = g0.weights[k][i];
      const double v2 = cfg.momentum * v1 + g1.weights[k][i];
      CHECK(p1.layers[k].weights[i] == p0.layers[k].weights[i] - cfg.learning_rate * v1);
      CHECK(params.layers[k].weights[i] == p1.layers[k].weights[i] - cfg.learning_rate * v2);
    }
  }
}

TEST_CASE("binarized mode applies the gradient w.r.t. alpha*B to the master weights", "[train][ste]") {
  const auto spec = bcnn::testing::toy_spec();
  const auto task = make_toy_task(4, 3);
  const auto batch = stack<double>(task.inputs);
  auto params = init_params(spec, 5);
  const auto master = params;

  // Oracle: finite differences of the float loss evaluated at W_hat.
  NetworkParams w_hat{spec, forward_weights(master, TrainMode::kBinarized)};
  auto loss = [&] { return softmax_xent(forward(w_hat, batch), task.labels).loss; };
  const auto analytic = loss_and_grads(master, batch, task.labels, TrainMode::kBinarized).grads;
  double worst = 0.0;
  for (std::size_t k = 0; k < w_hat.layers.size(); ++k) {
    for (std::size_t i = 0; i < w_hat.layers[k].weights.size(); ++i) {
      worst = std::max(worst, rel_err(analytic.weights[k][i], central_difference(loss, w_hat.layers[k].weights[i])));
    }
  }
  CHECK(worst < 1e-4);

  TrainConfig cfg;
  cfg.mode = TrainMode::kBinarized;
  cfg.learning_rate = 0.1;
  cfg.momentum = 0.0;
  auto state = SgdState::zeros_like(params);
  train_step(params, batch, task.labels, cfg, state, 1);
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    for (std::size_t i = 0; i < params.layers[k].weights.size(); ++i) {
      CHECK(params.layers[k].weights[i] == master.layers[k].weights[i] - 0.1 * analytic.weights[k][i]);
    }
    // Master weights stay real-valued rather than collapsing to +-alpha.
    std::set<double> magnitudes;
    for (double w : params.layers[k].weights) magnitudes.insert(std::fabs(w));
    CHECK(magnitudes.size() > 2);
  }
}

TEST_CASE("divergence is reported with its iteration", "[train]") {
  const auto spec = bcnn::testing::toy_spec();
  auto task = make_toy_task(4, 4);
  task.inputs[1][3] = std::nan("");
  const auto batch = stack<double>(task.inputs);
  auto params = init_params(spec, 6);
  auto state = SgdState::zeros_like(params);
  try {
    train_step(params, batch, task.labels, TrainConfig{}, state, 17);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.iteration() == 17);
  }

  SECTION("exploding learning rate") {
    const auto clean = make_toy_task(4, 5);
    const auto b = stack<double>(clean.inputs);
    TrainConfig cfg;
    cfg.learning_rate = 1e200;
    auto p = init_params(spec, 6);
    auto s = SgdState::zeros_like(p);
    bool diverged = false;
    for (std::uint64_t it = 1; it <= 20 && !diverged; ++it) {
      try {
        train_step(p, b, clean.labels, cfg, s, it);
      } catch (const DivergenceError& e) {
        diverged = true;
        CHECK(e.iteration() == it);
      }
    }
    CHECK(diverged);
  }
}

TEST_CASE("invalid labels are rejected before any update", "[train]") {
  const auto spec = bcnn::testing::toy_spec();
  const auto task = make_toy_task(2, 6);
  const auto batch = stack<double>(task.inputs);
  auto params = init_params(spec, 1);
  const auto before = params;
  auto state = SgdState::zeros_like(params);
  const std::vector<int> bad{0, 2};
  CHECK_THROWS_AS(train_step(params, batch, bad, TrainConfig{}, state), ValueError);
  CHECK(params == before);
  const std::vector<int> short_labels{0};
  CHECK_THROWS_AS(train_step(params, batch, short_labels, TrainConfig{}, state), ShapeError);
}

TEST_CASE("epoch sampler visits every sample once per epoch", "[train][property]") {
  for (std::size_t n : {1u, 5u, 32u, 33u}) {
    EpochSampler a(n, 9), b(n, 9);
    for (int epoch = 0; epoch < 3; ++epoch) {
      const auto batch = a.next_batch(n);
      CHECK(batch == b.next_batch(n));
      std::vector<std::size_t> sorted = batch;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < n; ++i) CHECK(sorted[i] == i);
    }
  }
  CHECK_THROWS_AS(EpochSampler(0, 1), DataError);
}

TEST_CASE("train_loop is deterministic and checkpoints on schedule", "[train]") {
  const auto spec = bcnn::testing::toy_spec();
  const auto task = make_toy_task(20, 7);
  SampleLoader load = [&](std::size_t i) { return task.inputs[i]; };
  TrainConfig cfg;
  cfg.iterations = 25;
  cfg.batch_size = 4;
  cfg.checkpoint_every = 10;
  cfg.seed = 11;
  std::vector<std::uint64_t> seen;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& c) { seen.push_back(c.iteration); };
  const auto a = train_loop(init_params(spec, cfg.seed), task.labels, load, cfg, hooks);
  const auto b = train_loop(init_params(spec, cfg.seed), task.labels, load, cfg);
  CHECK(seen == std::vector<std::uint64_t>{10, 20, 25});
  REQUIRE(a.checkpoints.size() == 3);
  CHECK(a.losses.size() == 25);
  CHECK(a.losses == b.losses);
  CHECK(bitwise_equal(a.checkpoints.back().params, b.checkpoints.back().params));
  CHECK(a.checkpoints[0].config.echo() == cfg.echo());

  cfg.seed = 12;
  const auto c = train_loop(init_params(spec, 11), task.labels, load, cfg);
  CHECK(c.losses != a.losses);
}

TEST_CASE("training reduces the loss on a separable toy task", "[train]") {
  const auto spec = bcnn::testing::toy_spec();
  const auto task = make_toy_task(64, 8);
  const auto holdout = make_toy_task(40, 9);
  SampleLoader load = [&](std::size_t i) { return task.inputs[i]; };
  for (auto mode : {TrainMode::kFloat, TrainMode::kBinarized}) {
    INFO(to_string(mode));
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.iterations = 300;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.02;
    cfg.seed = 1;
    const auto r = train_loop(init_params(spec, 1), task.labels, load, cfg);
    const std::span<const double> losses(r.losses);
    CHECK(mean(losses.last(30)) < 0.5 * mean(losses.first(30)));

    const auto& trained = r.checkpoints.back().params;
    NetworkParams used{spec, forward_weights(trained, mode)};
    const auto logits = forward(used, stack<double>(holdout.inputs));
    const auto pred = argmax_labels(logits);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == holdout.labels[i] ? 1 : 0;
    CHECK(correct >= 36);
  }
}

TEST_CASE("manifest training requires both classes", "[train]") {
  Manifest m;
  m.records = {{"a.ppm", 1}, {"b.ppm", 1}};
  CHECK_THROWS_AS(train_loop(init_params(NetworkSpec::canonical(), 1), m, ".", TrainConfig{}), DataError);
}
