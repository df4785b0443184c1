#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bcnn {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value outside its documented domain (non-finite logits, bad label, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Input data (manifest, image, directory) could not be used.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Model file rejected by the loader.
class FormatError : public Error {
 public:
  enum class Kind {
    kBadMagic,
    kBadVersion,
    kTruncated,
    kChecksum,
    kDimOverflow,
    kBadLayer,
    kBadPadding,
    kTrailingData,
    kIo,
  };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(std::uint64_t iteration)
      : Error("non-finite loss at iteration " + std::to_string(iteration)),
        iteration_(iteration) {}

  std::uint64_t iteration() const noexcept { return iteration_; }

 private:
  std::uint64_t iteration_;
};

}  // namespace bcnn
