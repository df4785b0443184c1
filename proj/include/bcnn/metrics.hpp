#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "bcnn/error.hpp"

namespace bcnn {

/// Binary confusion tallies; label 1 is the positive (polyp) class.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  std::uint64_t positives() const noexcept { return tp + fn; }
  std::uint64_t negatives() const noexcept { return tn + fp; }

  void add(int predicted, int truth) {
    if ((predicted != 0 && predicted != 1) || (truth != 0 && truth != 1)) {
      throw ValueError("labels must be 0 or 1");
    }
    if (truth == 1) {
      ++(predicted == 1 ? tp : fn);
    } else {
      ++(predicted == 1 ? fp : tn);
    }
  }

  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) noexcept {
    return a += b;
  }

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts accumulate(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size()) {
    throw ShapeError("got " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(truths.size()) + " labels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < predictions.size(); ++i) c.add(predictions[i], truths[i]);
  return c;
}

/// Frame-level criteria. Ratios whose denominator is zero are std::nullopt.
struct Metrics {
  double accuracy = 0.0;
  std::optional<double> recall;
  std::optional<double> precision;
  std::optional<double> specificity;
  std::optional<double> dice;  // 2tp / (2tp + fp + fn), the F1 score
  double fppf = 0.0;           // false positives per evaluated frame
};

inline Metrics compute_metrics(const ConfusionCounts& c) {
  const std::uint64_t total = c.total();
  if (total == 0) throw ValueError("cannot compute metrics over zero frames");
  auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  Metrics m;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(total);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.specificity = ratio(c.tn, c.tn + c.fp);
  m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  m.fppf = static_cast<double>(c.fp) / static_cast<double>(total);
  return m;
}

}  // namespace bcnn
