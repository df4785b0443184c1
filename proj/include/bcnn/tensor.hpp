#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bcnn/error.hpp"

namespace bcnn {

/// Extents of a batch of feature maps, (n, c, h, w).
struct Shape4 {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t size() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  constexpr std::size_t sample() const noexcept { return c * h * w; }

  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  std::ostringstream os;
  os << s.n << 'x' << s.c << 'x' << s.h << 'x' << s.w;
  return os.str();
}

inline std::ostream& operator<<(std::ostream& os, const Shape4& s) { return os << to_string(s); }

/// Dense 4-D array stored row-major in (n, c, h, w) order.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T{}) : shape_(shape) {
    if (shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0) {
      throw ShapeError("tensor dimensions must be >= 1, got " + to_string(shape));
    }
    data_.assign(shape.size(), fill);
  }

  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{})
      : Tensor4(Shape4{n, c, h, w}, fill) {}

  Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0) {
      throw ShapeError("tensor dimensions must be >= 1, got " + to_string(shape));
    }
    if (data_.size() != shape.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape));
    }
  }

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[index(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[index(n, c, h, w)];
  }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* plane(std::size_t n, std::size_t c) noexcept { return data_.data() + index(n, c, 0, 0); }
  const T* plane(std::size_t n, std::size_t c) const noexcept {
    return data_.data() + index(n, c, 0, 0);
  }

  /// Copy of sample `n` as a batch of one.
  Tensor4 sample(std::size_t n) const {
    const std::size_t len = shape_.sample();
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(n * len),
                       data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * len));
    return Tensor4({1, shape_.c, shape_.h, shape_.w}, std::move(out));
  }

  /// Same data viewed with a different shape of equal element count.
  Tensor4 reshaped(Shape4 shape) const& {
    Tensor4 copy = *this;
    return std::move(copy).reshaped(shape);
  }
  Tensor4 reshaped(Shape4 shape) && {
    if (shape.size() != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = shape;
    return std::move(*this);
  }

  template <typename U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor4<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape4 shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

/// Concatenate single-sample tensors of identical (c, h, w) into a batch.
template <typename T>
Tensor4<T> stack(std::span<const Tensor4<T>> samples) {
  if (samples.empty()) throw ShapeError("cannot stack an empty list of tensors");
  const Shape4 first = samples.front().shape();
  std::vector<T> data;
  data.reserve(first.sample() * samples.size());
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (s.shape().c != first.c || s.shape().h != first.h || s.shape().w != first.w) {
      throw ShapeError("cannot stack " + to_string(s.shape()) + " with " + to_string(first));
    }
    data.insert(data.end(), s.values().begin(), s.values().end());
    n += s.shape().n;
  }
  return Tensor4<T>({n, first.c, first.h, first.w}, std::move(data));
}

}  // namespace bcnn
