#pragma once

// Differentiable layers shared by training and the dense reference path:
// valid convolution, fully-connected-as-convolution, 2-D max pooling,
// rectifier, and the softmax cross-entropy head.
//
// All kernels run in a fixed summation order, so results are bitwise
// reproducible for a given build.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "bcnn/error.hpp"
#include "bcnn/tensor.hpp"

namespace bcnn {

/// Weights indexed (out_feature, in_channel, kh, kw) plus one bias per output feature.
template <typename T>
struct ConvParams {
  std::size_t out_features = 0;
  std::size_t in_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::vector<T> weights;
  std::vector<T> biases;

  ConvParams() = default;
  ConvParams(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, std::size_t stride_ = 1)
      : out_features(out),
        in_channels(in),
        kernel_h(kh),
        kernel_w(kw),
        stride(stride_),
        weights(out * in * kh * kw, T{}),
        biases(out, T{}) {}

  std::size_t kernel_size() const noexcept { return in_channels * kernel_h * kernel_w; }
  std::size_t weight_count() const noexcept { return out_features * kernel_size(); }

  std::span<T> kernel(std::size_t f) noexcept {
    return std::span<T>(weights).subspan(f * kernel_size(), kernel_size());
  }
  std::span<const T> kernel(std::size_t f) const noexcept {
    return std::span<const T>(weights).subspan(f * kernel_size(), kernel_size());
  }

  T& weight(std::size_t f, std::size_t c, std::size_t y, std::size_t x) noexcept {
    return weights[((f * in_channels + c) * kernel_h + y) * kernel_w + x];
  }
  const T& weight(std::size_t f, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return weights[((f * in_channels + c) * kernel_h + y) * kernel_w + x];
  }

  void validate() const {
    if (out_features == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0) {
      throw ShapeError("convolution dimensions must be >= 1");
    }
    if (stride == 0) throw ShapeError("convolution stride must be >= 1");
    if (weights.size() != weight_count()) {
      throw ShapeError("convolution has " + std::to_string(weights.size()) + " weights, expected " +
                       std::to_string(weight_count()));
    }
    if (biases.size() != out_features) {
      throw ShapeError("convolution has " + std::to_string(biases.size()) + " biases, expected " +
                       std::to_string(out_features));
    }
  }

  template <typename U>
  ConvParams<U> cast() const {
    ConvParams<U> out(out_features, in_channels, kernel_h, kernel_w, stride);
    std::copy(weights.begin(), weights.end(), out.weights.begin());
    std::copy(biases.begin(), biases.end(), out.biases.begin());
    return out;
  }

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

namespace detail {

inline std::string kernel_desc(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw,
                               std::size_t stride) {
  return std::to_string(out) + "x" + std::to_string(in) + "x" + std::to_string(kh) + "x" +
         std::to_string(kw) + "/" + std::to_string(stride);
}

template <typename T>
std::string kernel_desc(const ConvParams<T>& p) {
  return kernel_desc(p.out_features, p.in_channels, p.kernel_h, p.kernel_w, p.stride);
}

// y[i] += a * x[i]
template <typename T>
inline void axpy(T* __restrict y, T a, const T* __restrict x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Dot product over eight interleaved partial sums, combined in a fixed order.
template <typename T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  constexpr std::size_t kLanes = 8;
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
  T sum{};
  for (std::size_t l = 0; l < kLanes; ++l) sum += acc[l];
  return sum;
}

// Stride-1 convolutions work on "wide" rows: output (oy, ox) lives at
// oy * in_w + ox, so every kernel tap is one contiguous span of
// (out_h - 1) * in_w + out_w elements. Columns ox >= out_w are scratch.
inline std::size_t wide_span(const Shape4& in, const Shape4& out) {
  return (out.h - 1) * in.w + out.w;
}

}  // namespace detail

/// Output shape of a valid (unpadded) convolution.
inline Shape4 conv_output_shape(const Shape4& in, std::size_t out_features, std::size_t in_channels,
                                std::size_t kh, std::size_t kw, std::size_t stride) {
  if (stride == 0) throw ShapeError("convolution stride must be >= 1");
  if (in.c != in_channels || kh > in.h || kw > in.w) {
    throw ShapeError("input " + to_string(in) + " incompatible with kernel " +
                     detail::kernel_desc(out_features, in_channels, kh, kw, stride));
  }
  return {in.n, out_features, (in.h - kh) / stride + 1, (in.w - kw) / stride + 1};
}

template <typename T>
Shape4 conv_output_shape(const Shape4& in, const ConvParams<T>& p) {
  return conv_output_shape(in, p.out_features, p.in_channels, p.kernel_h, p.kernel_w, p.stride);
}

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const ConvParams<T>& p) {
  p.validate();
  const Shape4 is = input.shape();
  const Shape4 os = conv_output_shape(is, p);
  Tensor4<T> out(os);
  const std::size_t kh = p.kernel_h, kw = p.kernel_w, s = p.stride;
  const bool full_plane = kh == is.h && kw == is.w;

  for (std::size_t n = 0; n < is.n; ++n) {
    for (std::size_t f = 0; f < p.out_features; ++f) {
      T* o = out.plane(n, f);
      if (full_plane) {
        // Window covers the whole input plane: a plain dot product.
        o[0] = p.biases[f] + detail::dot(p.kernel(f).data(), input.plane(n, 0), is.sample());
        continue;
      }
      std::fill(o, o + os.plane(), p.biases[f]);
      for (std::size_t c = 0; c < is.c; ++c) {
        const T* x = input.plane(n, c);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T w = p.weight(f, c, ky, kx);
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const T* row = x + (oy * s + ky) * is.w + kx;
              T* orow = o + oy * os.w;
              if (s == 1) {
                detail::axpy(orow, w, row, os.w);
              } else {
                for (std::size_t ox = 0; ox < os.w; ++ox) orow[ox] += w * row[ox * s];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor4<T> input;  // empty when not requested
  std::vector<T> weights;
  std::vector<T> biases;
};

/// Gradients of a scalar loss through conv2d_forward. Pass `need_input = false`
/// for the first layer of a network, where the input gradient is unused.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& input, const ConvParams<T>& p,
                             const Tensor4<T>& grad_out, bool need_input = true) {
  p.validate();
  const Shape4 is = input.shape();
  const Shape4 os = conv_output_shape(is, p);
  if (grad_out.shape() != os) {
    throw ShapeError("gradient shape " + to_string(grad_out.shape()) +
                     " does not match convolution output " + to_string(os));
  }
  ConvGrads<T> g;
  g.weights.assign(p.weight_count(), T{});
  g.biases.assign(p.out_features, T{});
  if (need_input) g.input = Tensor4<T>(is);

  const std::size_t kh = p.kernel_h, kw = p.kernel_w, s = p.stride;
  const bool full_plane = kh == is.h && kw == is.w;
  const std::size_t span = detail::wide_span(is, os);
  std::vector<T> wide(s == 1 && !full_plane ? span : 0);

  for (std::size_t n = 0; n < is.n; ++n) {
    for (std::size_t f = 0; f < p.out_features; ++f) {
      const T* go = grad_out.plane(n, f);
      T bsum{};
      for (std::size_t i = 0; i < os.plane(); ++i) bsum += go[i];
      g.biases[f] += bsum;
      T* gw = g.weights.data() + f * p.kernel_size();

      if (full_plane) {
        const T gv = go[0];
        detail::axpy(gw, gv, input.plane(n, 0), is.sample());
        if (need_input) detail::axpy(g.input.plane(n, 0), gv, p.kernel(f).data(), is.sample());
        continue;
      }

      if (s == 1) {
        // Scratch columns stay zero so they contribute nothing below.
        std::fill(wide.begin(), wide.end(), T{});
        for (std::size_t oy = 0; oy < os.h; ++oy) {
          std::copy_n(go + oy * os.w, os.w, wide.data() + oy * is.w);
        }
        for (std::size_t c = 0; c < is.c; ++c) {
          const T* x = input.plane(n, c);
          T* gx = need_input ? g.input.plane(n, c) : nullptr;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::size_t off = ky * is.w + kx;
              const std::size_t wi = (c * kh + ky) * kw + kx;
              gw[wi] += detail::dot(wide.data(), x + off, span);
              if (gx != nullptr) detail::axpy(gx + off, p.weight(f, c, ky, kx), wide.data(), span);
            }
          }
        }
        continue;
      }

      for (std::size_t c = 0; c < is.c; ++c) {
        const T* x = input.plane(n, c);
        T* gx = need_input ? g.input.plane(n, c) : nullptr;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T w = p.weight(f, c, ky, kx);
            T acc{};
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const T* row = x + (oy * s + ky) * is.w + kx;
              const T* grow = go + oy * os.w;
              for (std::size_t ox = 0; ox < os.w; ++ox) acc += grow[ox] * row[ox * s];
              if (gx != nullptr) {
                T* gxrow = gx + (oy * s + ky) * is.w + kx;
                for (std::size_t ox = 0; ox < os.w; ++ox) gxrow[ox * s] += w * grow[ox];
              }
            }
            gw[(c * kh + ky) * kw + kx] += acc;
          }
        }
      }
    }
  }
  return g;
}

/// Fully connected layer viewed as a convolution whose kernel spans the whole input.
template <typename T>
Tensor4<T> fc_forward(const Tensor4<T>& input, const ConvParams<T>& p) {
  if (p.kernel_h != input.shape().h || p.kernel_w != input.shape().w) {
    throw ShapeError("fully connected kernel " + detail::kernel_desc(p) +
                     " must span the input " + to_string(input.shape()));
  }
  return conv2d_forward(input, p);
}

template <typename T>
ConvGrads<T> fc_backward(const Tensor4<T>& input, const ConvParams<T>& p, const Tensor4<T>& grad_out,
                         bool need_input = true) {
  if (p.kernel_h != input.shape().h || p.kernel_w != input.shape().w) {
    throw ShapeError("fully connected kernel " + detail::kernel_desc(p) +
                     " must span the input " + to_string(input.shape()));
  }
  return conv2d_backward(input, p, grad_out, need_input);
}

/// Flat input index of each pooling window's maximum, tied to the shapes it came from.
struct PoolIndices {
  Shape4 input_shape;
  Shape4 output_shape;
  std::vector<std::uint32_t> argmax;
};

template <typename T>
struct PoolResult {
  Tensor4<T> output;
  PoolIndices indices;
};

inline Shape4 maxpool_output_shape(const Shape4& in, std::size_t size, std::size_t stride) {
  if (size == 0 || stride == 0) throw ShapeError("pooling size and stride must be >= 1");
  if (in.h < size || in.w < size || (in.h - size) % stride != 0 || (in.w - size) % stride != 0) {
    throw ShapeError("pooling " + std::to_string(size) + "/" + std::to_string(stride) +
                     " does not tile input " + to_string(in));
  }
  return {in.n, in.c, (in.h - size) / stride + 1, (in.w - size) / stride + 1};
}

/// Max pooling; ties resolve to the first element in row-major window order.
template <typename T>
PoolResult<T> maxpool_forward(const Tensor4<T>& input, std::size_t size = 2, std::size_t stride = 2) {
  const Shape4 is = input.shape();
  const Shape4 os = maxpool_output_shape(is, size, stride);
  PoolResult<T> r{Tensor4<T>(os), PoolIndices{is, os, std::vector<std::uint32_t>(os.size())}};
  std::size_t k = 0;
  for (std::size_t n = 0; n < is.n; ++n) {
    for (std::size_t c = 0; c < is.c; ++c) {
      const std::size_t base = input.index(n, c, 0, 0);
      const T* x = input.data() + base;
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        for (std::size_t ox = 0; ox < os.w; ++ox, ++k) {
          std::size_t best = oy * stride * is.w + ox * stride;
          T best_v = x[best];
          for (std::size_t dy = 0; dy < size; ++dy) {
            for (std::size_t dx = 0; dx < size; ++dx) {
              const std::size_t at = (oy * stride + dy) * is.w + ox * stride + dx;
              if (x[at] > best_v) {
                best_v = x[at];
                best = at;
              }
            }
          }
          r.output[k] = best_v;
          r.indices.argmax[k] = static_cast<std::uint32_t>(base + best);
        }
      }
    }
  }
  return r;
}

template <typename T>
Tensor4<T> maxpool_backward(const PoolIndices& indices, const Tensor4<T>& grad_out) {
  if (grad_out.shape() != indices.output_shape || indices.argmax.size() != grad_out.size()) {
    throw ShapeError("pooling gradient " + to_string(grad_out.shape()) +
                     " does not match recorded output " + to_string(indices.output_shape));
  }
  Tensor4<T> gin(indices.input_shape);
  const std::size_t limit = indices.input_shape.size();
  for (std::size_t k = 0; k < grad_out.size(); ++k) {
    const std::size_t at = indices.argmax[k];
    if (at >= limit) throw ShapeError("pooling index " + std::to_string(at) + " out of range");
    gin[at] += grad_out[k];
  }
  return gin;
}

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& input) {
  Tensor4<T> out = input;
  for (auto& v : out.values()) v = v > T{} ? v : T{};
  return out;
}

/// Passes the gradient where the forward input was strictly positive.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out) {
  if (input.shape() != grad_out.shape()) {
    throw ShapeError("rectifier gradient " + to_string(grad_out.shape()) + " does not match input " +
                     to_string(input.shape()));
  }
  Tensor4<T> gin = grad_out;
  for (std::size_t i = 0; i < gin.size(); ++i) {
    if (!(input[i] > T{})) gin[i] = T{};
  }
  return gin;
}

/// Softmax probabilities per sample of an (n, k, 1, 1) logit tensor.
template <typename T>
std::vector<double> softmax(const Tensor4<T>& logits) {
  const Shape4 s = logits.shape();
  const std::size_t k = s.sample();
  std::vector<double> p(logits.size());
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* z = logits.data() + n * k;
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) zmax = std::max(zmax, static_cast<double>(z[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[n * k + j] = std::exp(static_cast<double>(z[j]) - zmax);
      sum += p[n * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) p[n * k + j] /= sum;
  }
  return p;
}

struct SoftmaxXent {
  double loss = 0.0;                 // mean over the batch
  Tensor4<double> grad;              // d(mean loss)/d(logits)
  std::vector<double> probabilities; // row-major (n, k)
};

/// Softmax cross-entropy averaged over the batch, computed with a max shift.
inline SoftmaxXent softmax_xent(const Tensor4<double>& logits, std::span<const int> labels) {
  const Shape4 s = logits.shape();
  const std::size_t k = s.sample();
  if (labels.size() != s.n) {
    throw ShapeError("got " + std::to_string(labels.size()) + " labels for a batch of " +
                     std::to_string(s.n));
  }
  if (k < 2) throw ShapeError("softmax head needs at least two classes");
  for (double z : logits.values()) {
    if (!std::isfinite(z)) throw ValueError("non-finite logit");
  }
  SoftmaxXent r{0.0, Tensor4<double>(s), softmax(logits)};
  const double inv_n = 1.0 / static_cast<double>(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ValueError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
    const double* z = logits.data() + n * k;
    double zmax = z[0];
    for (std::size_t j = 1; j < k; ++j) zmax = std::max(zmax, z[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    r.loss += (std::log(sum) - (z[y] - zmax)) * inv_n;
    for (std::size_t j = 0; j < k; ++j) {
      const double onehot = static_cast<std::size_t>(y) == j ? 1.0 : 0.0;
      r.grad[n * k + j] = (r.probabilities[n * k + j] - onehot) * inv_n;
    }
  }
  return r;
}

inline SoftmaxXent softmax_xent(const Tensor4<double>& logits, int label) {
  return softmax_xent(logits, std::span<const int>(&label, 1));
}

/// Index of the largest logit per sample; exact ties go to the lower class.
template <typename T>
std::vector<int> argmax_labels(const Tensor4<T>& logits) {
  const std::size_t k = logits.shape().sample();
  std::vector<int> out(logits.shape().n);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const T* z = logits.data() + n * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[j] > z[best]) best = j;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

}  // namespace bcnn
