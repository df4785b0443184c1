#pragma once

// Weight binarization W ~ alpha * B with B in {-1, +1}^n and alpha >= 0.
//
// For a fixed kernel w the squared reconstruction error
//   J(alpha, B) = sum_i (w_i - alpha * B_i)^2
// is minimized by B = sign(w) and alpha = mean |w_i|. Biases are never
// binarized.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bcnn/error.hpp"
#include "bcnn/layers.hpp"
#include "bcnn/network.hpp"

namespace bcnn {

/// Scale plus sign pattern for one kernel (one output feature).
struct BinarizedKernel {
  double alpha = 0.0;
  std::vector<std::int8_t> signs;  // +1 / -1, (in_channel, kh, kw) order

  std::size_t size() const noexcept { return signs.size(); }

  friend bool operator==(const BinarizedKernel&, const BinarizedKernel&) = default;
};

/// Whether one alpha is fitted per output kernel or shared by a whole layer.
enum class AlphaGranularity { kPerKernel, kPerLayer };

namespace detail {

// Mean absolute value. When every magnitude is identical the mean is that
// magnitude, returned without summation rounding so alpha*B is a fixed point.
inline double mean_abs(std::span<const double> w) {
  double sum = 0.0;
  const double first = std::fabs(w[0]);
  bool uniform = true;
  for (double v : w) {
    if (!std::isfinite(v)) throw ValueError("cannot binarize a non-finite weight");
    const double a = std::fabs(v);
    uniform = uniform && a == first;
    sum += a;
  }
  return uniform ? first : sum / static_cast<double>(w.size());
}

inline std::int8_t sign_of(double v) { return v >= 0.0 ? std::int8_t{1} : std::int8_t{-1}; }

}  // namespace detail

/// Optimal (alpha, B) for one kernel; sign(0) is taken as +1.
inline BinarizedKernel binarize_kernel(std::span<const double> w) {
  if (w.empty()) throw ShapeError("cannot binarize an empty kernel");
  BinarizedKernel k;
  k.alpha = detail::mean_abs(w);
  k.signs.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) k.signs[i] = detail::sign_of(w[i]);
  return k;
}

/// J = sum (w_i - alpha B_i)^2.
inline double reconstruction_cost(std::span<const double> w, const BinarizedKernel& k) {
  if (w.size() != k.size()) {
    throw ShapeError("kernel has " + std::to_string(k.size()) + " signs but " +
                     std::to_string(w.size()) + " weights were given");
  }
  double j = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w[i] - k.alpha * static_cast<double>(k.signs[i]);
    j += d * d;
  }
  return j;
}

inline std::vector<double> effective_weights(const BinarizedKernel& k) {
  std::vector<double> out(k.size());
  for (std::size_t i = 0; i < k.size(); ++i) out[i] = k.alpha * static_cast<double>(k.signs[i]);
  return out;
}

/// All kernels of one conv/fc layer plus its untouched real biases.
struct BinarizedLayer {
  std::size_t out_features = 0;
  std::size_t in_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::vector<BinarizedKernel> kernels;
  std::vector<double> biases;

  std::size_t kernel_size() const noexcept { return in_channels * kernel_h * kernel_w; }

  friend bool operator==(const BinarizedLayer&, const BinarizedLayer&) = default;
};

struct BinarizedNetwork {
  NetworkSpec spec;
  std::vector<BinarizedLayer> layers;

  std::size_t kernel_count() const {
    std::size_t k = 0;
    for (const auto& l : layers) k += l.kernels.size();
    return k;
  }

  friend bool operator==(const BinarizedNetwork&, const BinarizedNetwork&) = default;
};

inline BinarizedLayer binarize_layer(const ConvParams<double>& p,
                                     AlphaGranularity granularity = AlphaGranularity::kPerKernel) {
  p.validate();
  BinarizedLayer l{p.out_features, p.in_channels, p.kernel_h, p.kernel_w, p.stride, {}, p.biases};
  l.kernels.reserve(p.out_features);
  for (std::size_t f = 0; f < p.out_features; ++f) l.kernels.push_back(binarize_kernel(p.kernel(f)));
  if (granularity == AlphaGranularity::kPerLayer) {
    const double shared = detail::mean_abs(p.weights);
    for (auto& k : l.kernels) k.alpha = shared;
  }
  return l;
}

inline BinarizedNetwork binarize_network(const NetworkParams& params,
                                         AlphaGranularity granularity = AlphaGranularity::kPerKernel) {
  params.validate();
  BinarizedNetwork net{params.spec, {}};
  net.layers.reserve(params.layers.size());
  for (const auto& p : params.layers) net.layers.push_back(binarize_layer(p, granularity));
  return net;
}

/// Dense layer whose weights are the effective alpha*B values.
inline ConvParams<double> effective_params(const BinarizedLayer& l) {
  ConvParams<double> p(l.out_features, l.in_channels, l.kernel_h, l.kernel_w, l.stride);
  if (l.kernels.size() != l.out_features) throw ShapeError("binarized layer kernel count mismatch");
  for (std::size_t f = 0; f < l.out_features; ++f) {
    const auto& k = l.kernels[f];
    if (k.size() != l.kernel_size()) throw ShapeError("binarized kernel size mismatch");
    auto dst = p.kernel(f);
    for (std::size_t i = 0; i < k.size(); ++i) dst[i] = k.alpha * static_cast<double>(k.signs[i]);
  }
  p.biases = l.biases;
  return p;
}

inline NetworkParams effective_params(const BinarizedNetwork& net) {
  NetworkParams p{net.spec, {}};
  p.layers.reserve(net.layers.size());
  for (const auto& l : net.layers) p.layers.push_back(effective_params(l));
  return p;
}

/// Sum of J over every kernel, per conv/fc layer.
inline std::vector<double> layer_costs(const NetworkParams& params, const BinarizedNetwork& net) {
  if (params.layers.size() != net.layers.size()) throw ShapeError("layer count mismatch");
  std::vector<double> out;
  out.reserve(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& p = params.layers[i];
    const auto& l = net.layers[i];
    if (l.kernels.size() != p.out_features) {
      throw ShapeError("layer " + std::to_string(i) + " kernel count mismatch");
    }
    double j = 0.0;
    for (std::size_t f = 0; f < p.out_features; ++f) j += reconstruction_cost(p.kernel(f), l.kernels[f]);
    out.push_back(j);
  }
  return out;
}

}  // namespace bcnn
