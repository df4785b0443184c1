#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bcnn/error.hpp"
#include "bcnn/layers.hpp"
#include "bcnn/rng.hpp"
#include "bcnn/tensor.hpp"

namespace bcnn {

enum class LayerKind : std::uint8_t {
  kConv = 1,
  kFullyConnected = 2,
  kMaxPool = 3,
  kRelu = 4,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kFullyConnected: return "fc";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kRelu: return "relu";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t kernel = 0;  // square kernel or pooling window; unused for fc/relu
  std::size_t stride = 1;
  std::size_t features = 0;

  static LayerSpec conv(std::size_t kernel, std::size_t stride, std::size_t features) {
    return {LayerKind::kConv, kernel, stride, features};
  }
  static LayerSpec maxpool(std::size_t size = 2, std::size_t stride = 2) {
    return {LayerKind::kMaxPool, size, stride, 0};
  }
  static LayerSpec relu() { return {LayerKind::kRelu, 0, 1, 0}; }
  static LayerSpec fully_connected(std::size_t features) {
    return {LayerKind::kFullyConnected, 0, 1, features};
  }

  bool has_params() const noexcept {
    return kind == LayerKind::kConv || kind == LayerKind::kFullyConnected;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// A layer with its input/output extents resolved for one sample.
struct ResolvedLayer {
  LayerSpec spec;
  Shape4 in;
  Shape4 out;
  // Kernel geometry for conv/fc layers (zero otherwise).
  std::size_t in_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
};

/// Ordered layer chain over a fixed (c, h, w) input. The softmax
/// cross-entropy head is implied after the last layer.
struct NetworkSpec {
  std::size_t in_channels = 3;
  std::size_t in_height = 118;
  std::size_t in_width = 118;
  std::vector<LayerSpec> layers;

  /// Four conv/pool stages, two fully connected layers, 3x118x118 input.
  static NetworkSpec canonical() {
    NetworkSpec s;
    s.in_channels = 3;
    s.in_height = 118;
    s.in_width = 118;
    s.layers = {
        LayerSpec::conv(3, 1, 8),  LayerSpec::relu(), LayerSpec::maxpool(2, 2),
        LayerSpec::conv(3, 1, 16), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
        LayerSpec::conv(5, 1, 32), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
        LayerSpec::conv(5, 1, 32), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
        LayerSpec::fully_connected(128), LayerSpec::relu(),
        LayerSpec::fully_connected(2),
    };
    return s;
  }

  Shape4 input_shape(std::size_t batch = 1) const { return {batch, in_channels, in_height, in_width}; }

  /// Resolves every layer's shapes; throws ShapeError if the chain does not fit.
  std::vector<ResolvedLayer> resolve() const {
    if (in_channels == 0 || in_height == 0 || in_width == 0) {
      throw ShapeError("network input dimensions must be >= 1");
    }
    if (layers.empty()) throw ShapeError("network has no layers");
    std::vector<ResolvedLayer> out;
    out.reserve(layers.size());
    Shape4 cur = input_shape();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      ResolvedLayer r{l, cur, cur};
      try {
        switch (l.kind) {
          case LayerKind::kConv:
            if (l.kernel == 0 || l.features == 0) throw ShapeError("empty convolution");
            r.in_channels = cur.c;
            r.kernel_h = r.kernel_w = l.kernel;
            r.out = conv_output_shape(cur, l.features, cur.c, l.kernel, l.kernel, l.stride);
            break;
          case LayerKind::kFullyConnected:
            if (l.features == 0) throw ShapeError("empty fully connected layer");
            r.in_channels = cur.c;
            r.kernel_h = cur.h;
            r.kernel_w = cur.w;
            r.out = {1, l.features, 1, 1};
            break;
          case LayerKind::kMaxPool:
            r.out = maxpool_output_shape(cur, l.kernel, l.stride);
            break;
          case LayerKind::kRelu:
            break;
        }
      } catch (const ShapeError& e) {
        throw ShapeError("layer " + std::to_string(i) + " (" + to_string(l.kind) + "): " + e.what());
      }
      cur = r.out;
      out.push_back(r);
    }
    return out;
  }

  Shape4 output_shape() const { return resolve().back().out; }

  std::size_t param_layer_count() const {
    std::size_t k = 0;
    for (const auto& l : layers) k += l.has_params() ? 1 : 0;
    return k;
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Master weights and biases, one ConvParams per conv/fc layer in chain order.
struct NetworkParams {
  NetworkSpec spec;
  std::vector<ConvParams<double>> layers;

  std::size_t weight_count() const {
    std::size_t k = 0;
    for (const auto& l : layers) k += l.weight_count();
    return k;
  }
  std::size_t bias_count() const {
    std::size_t k = 0;
    for (const auto& l : layers) k += l.biases.size();
    return k;
  }

  void validate() const;

  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

/// Zero-filled parameters with the shapes implied by `spec`.
inline NetworkParams zero_params(const NetworkSpec& spec) {
  NetworkParams p{spec, {}};
  for (const auto& r : spec.resolve()) {
    if (!r.spec.has_params()) continue;
    p.layers.emplace_back(r.out.c, r.in_channels, r.kernel_h, r.kernel_w, r.spec.stride);
  }
  return p;
}

inline void NetworkParams::validate() const {
  const auto resolved = spec.resolve();
  std::size_t k = 0;
  for (std::size_t i = 0; i < resolved.size(); ++i) {
    const auto& r = resolved[i];
    if (!r.spec.has_params()) continue;
    if (k >= layers.size()) throw ShapeError("missing parameters for layer " + std::to_string(i));
    const auto& p = layers[k++];
    p.validate();
    if (p.out_features != r.out.c || p.in_channels != r.in_channels || p.kernel_h != r.kernel_h ||
        p.kernel_w != r.kernel_w || p.stride != r.spec.stride) {
      throw ShapeError("layer " + std::to_string(i) + " parameters " + detail::kernel_desc(p) +
                       " do not match spec " +
                       detail::kernel_desc(r.out.c, r.in_channels, r.kernel_h, r.kernel_w,
                                           r.spec.stride));
    }
  }
  if (k != layers.size()) throw ShapeError("more parameter layers than the network spec declares");
}

/// Uniform(-b, b) weights with b = sqrt(3 / fan_in); biases zero.
inline NetworkParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkParams p = zero_params(spec);
  Rng rng = make_rng(seed, Stream::kInit);
  for (auto& l : p.layers) {
    const double bound = std::sqrt(3.0 / static_cast<double>(l.kernel_size()));
    for (auto& w : l.weights) w = uniform(rng, -bound, bound);
  }
  return p;
}

/// Per-layer inputs and pooling switches recorded by a forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor4<T>> inputs;  // input to layer i
  std::vector<PoolIndices> pools;  // one per maxpool layer, in order
  Tensor4<T> logits;
};

/// Dense forward pass. `params` holds one entry per conv/fc layer.
template <typename T>
ForwardTrace<T> forward_trace(const NetworkSpec& spec, std::span<const ConvParams<T>> params,
                              const Tensor4<T>& input, bool keep_inputs = true) {
  const Shape4 expect = spec.input_shape(input.shape().n);
  if (input.shape() != expect) {
    throw ShapeError("network input " + to_string(input.shape()) + " does not match expected " +
                     to_string(expect));
  }
  if (params.size() != spec.param_layer_count()) {
    throw ShapeError("got " + std::to_string(params.size()) + " parameter layers, network spec declares " +
                     std::to_string(spec.param_layer_count()));
  }
  ForwardTrace<T> t;
  Tensor4<T> cur = input;
  std::size_t k = 0;
  for (const auto& l : spec.layers) {
    if (keep_inputs) t.inputs.push_back(cur);
    switch (l.kind) {
      case LayerKind::kConv:
        cur = conv2d_forward(cur, params[k++]);
        break;
      case LayerKind::kFullyConnected:
        cur = fc_forward(cur, params[k++]);
        break;
      case LayerKind::kMaxPool: {
        auto r = maxpool_forward(cur, l.kernel, l.stride);
        cur = std::move(r.output);
        if (keep_inputs) t.pools.push_back(std::move(r.indices));
        break;
      }
      case LayerKind::kRelu:
        cur = relu_forward(cur);
        break;
    }
  }
  t.logits = std::move(cur);
  return t;
}

template <typename T>
Tensor4<T> forward(const NetworkSpec& spec, std::span<const ConvParams<T>> params,
                   const Tensor4<T>& input) {
  return forward_trace(spec, params, input, false).logits;
}

inline Tensor4<double> forward(const NetworkParams& p, const Tensor4<double>& input) {
  return forward<double>(p.spec, p.layers, input);
}

/// Parameter gradients, one entry per conv/fc layer.
struct ParamGrads {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;
};

/// Backpropagates d(loss)/d(logits) through a recorded forward pass.
/// With `input_grad` non-null, also returns d(loss)/d(input).
inline ParamGrads backward(const NetworkSpec& spec, std::span<const ConvParams<double>> params,
                           const ForwardTrace<double>& trace, const Tensor4<double>& grad_logits,
                           Tensor4<double>* input_grad = nullptr) {
  if (trace.inputs.size() != spec.layers.size()) {
    throw ShapeError("forward trace does not cover the network");
  }
  ParamGrads g;
  g.weights.resize(params.size());
  g.biases.resize(params.size());
  Tensor4<double> grad = grad_logits;
  std::size_t k = params.size();
  std::size_t pool = trace.pools.size();
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    const auto& l = spec.layers[i];
    const bool need_input = i > 0 || input_grad != nullptr;
    switch (l.kind) {
      case LayerKind::kConv:
      case LayerKind::kFullyConnected: {
        --k;
        auto cg = conv2d_backward(trace.inputs[i], params[k], grad, need_input);
        g.weights[k] = std::move(cg.weights);
        g.biases[k] = std::move(cg.biases);
        if (need_input) grad = std::move(cg.input);
        break;
      }
      case LayerKind::kMaxPool:
        grad = maxpool_backward(trace.pools[--pool], grad);
        break;
      case LayerKind::kRelu:
        grad = relu_backward(trace.inputs[i], grad);
        break;
    }
  }
  if (input_grad != nullptr) *input_grad = std::move(grad);
  return g;
}

}  // namespace bcnn
