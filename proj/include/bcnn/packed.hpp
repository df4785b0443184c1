#pragma once

// Multiplication-free inference over bit-packed sign kernels.
//
// Each kernel is stored as one bit per weight, in (in_channel, kh, kw)
// row-major order, most significant bit first, zero-padded to a byte.
// Bit 1 encodes +1 and bit 0 encodes -1. A window is evaluated as
//   alpha * (sum of inputs under 1-bits - sum of inputs under 0-bits) + bias
// so the only multiply per window is the final scale.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bcnn/binarize.hpp"
#include "bcnn/error.hpp"
#include "bcnn/layers.hpp"
#include "bcnn/network.hpp"
#include "bcnn/tensor.hpp"

namespace bcnn {

struct PackedKernel {
  float alpha = 0.0F;
  float bias = 0.0F;
  std::size_t n = 0;
  std::vector<std::uint8_t> bits;

  bool sign_bit(std::size_t i) const noexcept { return ((bits[i >> 3] >> (7 - (i & 7))) & 1U) != 0; }

  friend bool operator==(const PackedKernel&, const PackedKernel&) = default;
};

inline std::size_t packed_bytes(std::size_t n) { return (n + 7) / 8; }

inline PackedKernel pack(const BinarizedKernel& k, double bias = 0.0) {
  PackedKernel p;
  p.alpha = static_cast<float>(k.alpha);
  p.bias = static_cast<float>(bias);
  p.n = k.size();
  p.bits.assign(packed_bytes(p.n), 0);
  for (std::size_t i = 0; i < p.n; ++i) {
    if (k.signs[i] == 1) {
      p.bits[i >> 3] |= static_cast<std::uint8_t>(0x80U >> (i & 7));
    } else if (k.signs[i] != -1) {
      throw ValueError("sign value " + std::to_string(k.signs[i]) + " is not +1 or -1");
    }
  }
  return p;
}

/// Throws FormatError(kBadPadding) if any bit past n is set.
inline void check_padding(const PackedKernel& p) {
  if (p.bits.size() != packed_bytes(p.n)) {
    throw FormatError(FormatError::Kind::kBadPadding, "packed kernel byte length mismatch");
  }
  const std::size_t tail = p.n & 7;
  if (tail != 0) {
    const auto mask = static_cast<std::uint8_t>(0xFFU >> tail);
    if ((p.bits.back() & mask) != 0) {
      throw FormatError(FormatError::Kind::kBadPadding, "nonzero padding bits in packed kernel");
    }
  }
}

inline BinarizedKernel unpack(const PackedKernel& p) {
  check_padding(p);
  BinarizedKernel k;
  k.alpha = p.alpha;
  k.signs.resize(p.n);
  for (std::size_t i = 0; i < p.n; ++i) k.signs[i] = p.sign_bit(i) ? 1 : -1;
  return k;
}

struct PackedLayer {
  LayerKind kind = LayerKind::kConv;
  std::size_t out_features = 0;
  std::size_t in_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::vector<PackedKernel> kernels;

  std::size_t kernel_size() const noexcept { return in_channels * kernel_h * kernel_w; }

  void validate() const {
    if (kernels.size() != out_features) {
      throw ShapeError("packed layer has " + std::to_string(kernels.size()) + " kernels, expected " +
                       std::to_string(out_features));
    }
    for (const auto& k : kernels) {
      if (k.n != kernel_size()) throw ShapeError("packed kernel size does not match layer geometry");
      check_padding(k);
    }
  }

  friend bool operator==(const PackedLayer&, const PackedLayer&) = default;
};

/// Read-only test-phase model: architecture plus one PackedLayer per conv/fc layer.
struct PackedNetwork {
  NetworkSpec spec;
  std::vector<PackedLayer> layers;

  std::size_t kernel_count() const {
    std::size_t k = 0;
    for (const auto& l : layers) k += l.kernels.size();
    return k;
  }

  friend bool operator==(const PackedNetwork&, const PackedNetwork&) = default;
};

inline PackedNetwork to_packed(const BinarizedNetwork& net) {
  PackedNetwork out{net.spec, {}};
  const auto resolved = net.spec.resolve();
  std::size_t k = 0;
  for (const auto& r : resolved) {
    if (!r.spec.has_params()) continue;
    if (k >= net.layers.size()) throw ShapeError("binarized network is missing layers");
    const auto& l = net.layers[k++];
    PackedLayer pl{r.spec.kind, l.out_features, l.in_channels, l.kernel_h, l.kernel_w, l.stride, {}};
    if (l.kernels.size() != l.out_features || l.biases.size() != l.out_features) {
      throw ShapeError("binarized layer " + std::to_string(k - 1) + " is inconsistent");
    }
    for (std::size_t f = 0; f < l.out_features; ++f) pl.kernels.push_back(pack(l.kernels[f], l.biases[f]));
    out.layers.push_back(std::move(pl));
  }
  if (k != net.layers.size()) throw ShapeError("binarized network has extra layers");
  return out;
}

inline BinarizedNetwork to_binarized(const PackedNetwork& net) {
  BinarizedNetwork out{net.spec, {}};
  for (const auto& pl : net.layers) {
    pl.validate();
    BinarizedLayer l{pl.out_features, pl.in_channels, pl.kernel_h, pl.kernel_w, pl.stride, {}, {}};
    for (const auto& k : pl.kernels) {
      l.kernels.push_back(unpack(k));
      l.biases.push_back(k.bias);
    }
    out.layers.push_back(std::move(l));
  }
  return out;
}

/// Sign-gated add/subtract convolution with single-precision accumulation.
inline Tensor4<float> packed_conv2d(const Tensor4<float>& input, const PackedLayer& layer) {
  layer.validate();
  const Shape4 is = input.shape();
  const Shape4 os = conv_output_shape(is, layer.out_features, layer.in_channels, layer.kernel_h,
                                      layer.kernel_w, layer.stride);
  const std::size_t kh = layer.kernel_h, kw = layer.kernel_w, s = layer.stride;
  const bool full_plane = kh == is.h && kw == is.w;
  Tensor4<float> out(os);
  std::vector<float> acc(os.plane());

  for (std::size_t n = 0; n < is.n; ++n) {
    for (std::size_t f = 0; f < layer.out_features; ++f) {
      const PackedKernel& k = layer.kernels[f];
      float* o = out.plane(n, f);
      if (full_plane) {
        const float* x = input.plane(n, 0);
        float sum = 0.0F;
        for (std::size_t i = 0; i < k.n; ++i) sum = k.sign_bit(i) ? sum + x[i] : sum - x[i];
        o[0] = (k.alpha == 1.0F ? sum : k.alpha * sum) + k.bias;
        continue;
      }
      std::fill(acc.begin(), acc.end(), 0.0F);
      std::size_t bit = 0;
      for (std::size_t c = 0; c < is.c; ++c) {
        const float* x = input.plane(n, c);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx, ++bit) {
            const bool plus = k.sign_bit(bit);
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const float* row = x + (oy * s + ky) * is.w + kx;
              float* arow = acc.data() + oy * os.w;
              if (s == 1) {
                if (plus) {
                  for (std::size_t ox = 0; ox < os.w; ++ox) arow[ox] += row[ox];
                } else {
                  for (std::size_t ox = 0; ox < os.w; ++ox) arow[ox] -= row[ox];
                }
              } else if (plus) {
                for (std::size_t ox = 0; ox < os.w; ++ox) arow[ox] += row[ox * s];
              } else {
                for (std::size_t ox = 0; ox < os.w; ++ox) arow[ox] -= row[ox * s];
              }
            }
          }
        }
      }
      if (k.alpha == 1.0F) {
        for (std::size_t i = 0; i < acc.size(); ++i) o[i] = acc[i] + k.bias;
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) o[i] = k.alpha * acc[i] + k.bias;
      }
    }
  }
  return out;
}

struct PackedPrediction {
  Tensor4<float> logits;
  std::vector<int> labels;
  std::vector<double> probabilities;  // row-major (n, classes)
};

/// End-to-end inference; labels break exact logit ties toward class 0.
inline PackedPrediction packed_forward(const PackedNetwork& model, const Tensor4<float>& batch) {
  const Shape4 expect = model.spec.input_shape(batch.shape().n);
  if (batch.shape() != expect) {
    throw ShapeError("packed input " + to_string(batch.shape()) + " does not match expected " +
                     to_string(expect));
  }
  if (model.layers.size() != model.spec.param_layer_count()) {
    throw ShapeError("packed model layer count does not match its architecture");
  }
  Tensor4<float> cur = batch;
  std::size_t k = 0;
  for (const auto& l : model.spec.layers) {
    switch (l.kind) {
      case LayerKind::kConv:
      case LayerKind::kFullyConnected:
        cur = packed_conv2d(cur, model.layers[k++]);
        break;
      case LayerKind::kMaxPool:
        cur = maxpool_forward(cur, l.kernel, l.stride).output;
        break;
      case LayerKind::kRelu:
        cur = relu_forward(cur);
        break;
    }
  }
  PackedPrediction r;
  r.labels = argmax_labels(cur);
  r.probabilities = softmax(cur);
  r.logits = std::move(cur);
  return r;
}

inline PackedPrediction packed_forward(const PackedNetwork& model, const Tensor4<double>& batch) {
  return packed_forward(model, batch.cast<float>());
}

/// Static arithmetic counts for one forward pass of a single sample.
struct OpCounts {
  std::uint64_t multiplies_dense = 0;
  std::uint64_t multiplies_packed = 0;
  std::uint64_t addsubs = 0;
  std::uint64_t multiplies_saved_alpha_one = 0;  // packed multiplies skipped for alpha == 1
  std::uint64_t windows = 0;
};

/// Dense: n multiplies per window. Packed: n add/subs and one multiply per window.
inline OpCounts op_count_report(const NetworkSpec& spec) {
  OpCounts c;
  for (const auto& r : spec.resolve()) {
    if (!r.spec.has_params()) continue;
    const std::uint64_t windows = r.out.c * r.out.h * r.out.w;
    const std::uint64_t n = r.in_channels * r.kernel_h * r.kernel_w;
    c.windows += windows;
    c.multiplies_dense += windows * n;
    c.addsubs += windows * n;
    c.multiplies_packed += windows;
  }
  return c;
}

/// As above, also crediting the multiplies skipped for kernels with alpha == 1.
inline OpCounts op_count_report(const PackedNetwork& model) {
  OpCounts c = op_count_report(model.spec);
  std::size_t k = 0;
  for (const auto& r : model.spec.resolve()) {
    if (!r.spec.has_params()) continue;
    for (const auto& kern : model.layers.at(k).kernels) {
      if (kern.alpha == 1.0F) c.multiplies_saved_alpha_one += r.out.h * r.out.w;
    }
    ++k;
  }
  c.multiplies_packed -= c.multiplies_saved_alpha_one;
  return c;
}

}  // namespace bcnn
