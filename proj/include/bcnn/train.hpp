#pragma once

// Mini-batch SGD with momentum in two modes:
//
//   float      forward/backward with the master weights W.
//   binarized  forward/backward with W_hat = alpha * sign(W) recomputed from
//              the master weights every step; dL/dW_hat is applied to W
//              unchanged (straight-through). Biases are never binarized.
//
// Master weights stay in double precision throughout.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bcnn/binarize.hpp"
#include "bcnn/dataset.hpp"
#include "bcnn/error.hpp"
#include "bcnn/layers.hpp"
#include "bcnn/network.hpp"
#include "bcnn/rng.hpp"
#include "bcnn/tensor.hpp"

namespace bcnn {

enum class TrainMode { kFloat, kBinarized };

inline const char* to_string(TrainMode m) { return m == TrainMode::kFloat ? "float" : "binarized"; }

struct TrainConfig {
  TrainMode mode = TrainMode::kFloat;
  std::uint64_t iterations = 1000;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 10000;
  AlphaGranularity alpha = AlphaGranularity::kPerKernel;

  void validate() const {
    if (iterations == 0) throw ValueError("iterations must be >= 1");
    if (checkpoint_every == 0) throw ValueError("checkpoint interval must be >= 1");
    if (batch_size == 0) throw ValueError("batch size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ValueError("learning rate must be finite and non-negative");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("momentum must lie in [0, 1)");
  }

  /// Key=value echo stored with every checkpoint; reals printed round-trip exact.
  std::string echo() const {
    char buf[320];
    std::snprintf(buf, sizeof buf,
                  "mode=%s iterations=%llu batch_size=%zu learning_rate=%.17g momentum=%.17g "
                  "seed=%llu checkpoint_every=%llu alpha=%s",
                  to_string(mode), static_cast<unsigned long long>(iterations), batch_size,
                  learning_rate, momentum, static_cast<unsigned long long>(seed),
                  static_cast<unsigned long long>(checkpoint_every),
                  alpha == AlphaGranularity::kPerKernel ? "per-kernel" : "per-layer");
    return buf;
  }
};

/// Momentum buffers, shaped like the parameters.
struct SgdState {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  static SgdState zeros_like(const NetworkParams& p) {
    SgdState s;
    for (const auto& l : p.layers) {
      s.weights.emplace_back(l.weights.size(), 0.0);
      s.biases.emplace_back(l.biases.size(), 0.0);
    }
    return s;
  }
};

/// The weights a forward pass actually uses in the given mode.
inline std::vector<ConvParams<double>> forward_weights(const NetworkParams& params, TrainMode mode,
                                                       AlphaGranularity alpha = AlphaGranularity::kPerKernel) {
  if (mode == TrainMode::kFloat) return params.layers;
  std::vector<ConvParams<double>> out;
  out.reserve(params.layers.size());
  for (const auto& l : params.layers) out.push_back(effective_params(binarize_layer(l, alpha)));
  return out;
}

struct LossAndGrads {
  double loss = 0.0;
  ParamGrads grads;  // w.r.t. the forward weights (W or W_hat)
};

/// Batch-mean cross-entropy and its gradient w.r.t. the weights used in the
/// forward pass. In binarized mode those are W_hat, not the master weights.
inline LossAndGrads loss_and_grads(const NetworkParams& params, const Tensor4<double>& batch,
                                   std::span<const int> labels, TrainMode mode,
                                   AlphaGranularity alpha = AlphaGranularity::kPerKernel) {
  const auto weights = forward_weights(params, mode, alpha);
  const auto trace = forward_trace<double>(params.spec, weights, batch);
  const auto head = softmax_xent(trace.logits, labels);
  return {head.loss, backward(params.spec, weights, trace, head.grad)};
}

/// One SGD step: v = momentum * v + g; W -= lr * v. Returns the batch loss
/// computed before the update.
inline double train_step(NetworkParams& params, const Tensor4<double>& batch, std::span<const int> labels,
                         const TrainConfig& cfg, SgdState& state, std::uint64_t iteration = 0) {
  if (labels.size() != batch.shape().n) throw ShapeError("label count does not match the batch");
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValueError("training label " + std::to_string(y) + " is not 0 or 1");
  }
  LossAndGrads lg;
  try {
    lg = loss_and_grads(params, batch, labels, cfg.mode, cfg.alpha);
  } catch (const ValueError&) {
    // Non-finite logits or weights.
    throw DivergenceError(iteration);
  }
  if (!std::isfinite(lg.loss)) throw DivergenceError(iteration);

  auto update = [&](std::vector<double>& w, std::vector<double>& v, const std::vector<double>& g) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = cfg.momentum * v[i] + g[i];
      w[i] -= cfg.learning_rate * v[i];
    }
  };
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    update(params.layers[k].weights, state.weights[k], lg.grads.weights[k]);
    update(params.layers[k].biases, state.biases[k], lg.grads.biases[k]);
  }
  for (const auto& l : params.layers) {
    for (double v : l.weights) {
      if (!std::isfinite(v)) throw DivergenceError(iteration);
    }
    for (double v : l.biases) {
      if (!std::isfinite(v)) throw DivergenceError(iteration);
    }
  }
  return lg.loss;
}

/// Epoch-wise sample order: a fresh seeded permutation per epoch, consumed
/// in consecutive batches that may straddle epoch boundaries.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(make_rng(seed, Stream::kShuffle)) {
    if (n == 0) throw DataError("cannot sample from an empty training set");
    order_ = permutation(n_, rng_);
  }

  std::vector<std::size_t> next_batch(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == n_) {
        order_ = permutation(n_, rng_);
        pos_ = 0;
        ++epoch_;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  const std::vector<std::size_t>& order() const noexcept { return order_; }
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
};

struct Checkpoint {
  std::uint64_t iteration = 0;
  NetworkParams params;
  TrainConfig config;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;  // the last one is the final state
  std::vector<double> losses;           // one per iteration
};

/// Returns a 1 x C x H x W input tensor for sample i.
using SampleLoader = std::function<Tensor4<double>(std::size_t)>;
using CheckpointSink = std::function<void(const Checkpoint&)>;
using ProgressSink = std::function<void(std::uint64_t iteration, double loss)>;

struct TrainHooks {
  CheckpointSink on_checkpoint;
  ProgressSink on_step;
};

inline TrainResult train_loop(NetworkParams params, std::span<const int> labels, const SampleLoader& load,
                              const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  params.validate();
  if (labels.empty()) throw DataError("training set is empty");
  EpochSampler sampler(labels.size(), cfg.seed);
  SgdState state = SgdState::zeros_like(params);
  TrainResult result;
  result.losses.reserve(cfg.iterations);

  std::vector<Tensor4<double>> samples;
  std::vector<int> batch_labels;
  for (std::uint64_t it = 1; it <= cfg.iterations; ++it) {
    const auto idx = sampler.next_batch(cfg.batch_size);
    samples.clear();
    batch_labels.clear();
    for (std::size_t i : idx) {
      samples.push_back(load(i));
      batch_labels.push_back(labels[i]);
    }
    const Tensor4<double> batch = stack<double>(samples);
    const double loss = train_step(params, batch, batch_labels, cfg, state, it);
    result.losses.push_back(loss);
    if (hooks.on_step) hooks.on_step(it, loss);
    if (it % cfg.checkpoint_every == 0 || it == cfg.iterations) {
      result.checkpoints.push_back({it, params, cfg});
      if (hooks.on_checkpoint) hooks.on_checkpoint(result.checkpoints.back());
    }
  }
  return result;
}

/// Trains on in-memory frames, resizing each to the network input on use.
inline TrainResult train_loop(NetworkParams params, const LabeledFrames& data, const TrainConfig& cfg,
                              const TrainHooks& hooks = {}, const InputOptions& input = {}) {
  return train_loop(std::move(params), data.labels,
                    [&](std::size_t i) { return resize_to_input(data.frames[i], input); }, cfg, hooks);
}

/// Reads the manifest's frames (aborting on the first unreadable one) and trains.
inline TrainResult train_loop(NetworkParams params, const Manifest& manifest, const fs::path& root,
                              const TrainConfig& cfg, const TrainHooks& hooks = {},
                              const InputOptions& input = {}) {
  if (manifest.empty()) throw DataError("manifest is empty");
  manifest.require_both_classes();
  const LabeledFrames data = load_frames(manifest, root);
  return train_loop(std::move(params), data, cfg, hooks, input);
}

}  // namespace bcnn
