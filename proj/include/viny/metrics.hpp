// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include "viny/objectives.hpp"

namespace viny {

/// counts[t][p] = number of pixels with truth t predicted as p.
struct ConfusionCounts {
  std::array<std::array<std::uint64_t, kTrimapClasses>, kTrimapClasses> counts{};

  std::uint64_t total() const;
  ConfusionCounts &merge(const ConfusionCounts &other);

  bool operator==(const ConfusionCounts &) const = default;
};

/// Adds the joint histogram of one prediction. Throws ShapeError when the
/// shapes differ and std::out_of_range for labels outside {0, 1, 2}.
void accumulate(const Trimap &pred, const Trimap &truth, ConfusionCounts &counts);

/// All values are percentages. Per-class entries a class cannot define
/// (zero denominator) are NaN; such classes are left out of the mean and
/// flagged in included.
struct MetricsReport {
  double accuracy = 0.0;
  double miou = 0.0;
  std::array<double, kTrimapClasses> per_class_iou{};
  std::array<double, kTrimapClasses> per_class_precision{};
  std::array<double, kTrimapClasses> per_class_recall{};
  std::array<bool, kTrimapClasses> included{};
  std::uint64_t n_pixels = 0;
};

struct MetricsOptions {
  /// When false, pixels whose truth is "unknown" are left out of accuracy.
  bool accuracy_counts_unknown = true;
};

/// Throws std::invalid_argument when no pixel was counted.
MetricsReport miou(const ConfusionCounts &counts, const MetricsOptions &options = {});

struct Aggregate {
  double mean = 0.0;
  /// Sample standard deviation over sqrt(n); 0 for a single value.
  double standard_error = 0.0;
  /// Sample standard deviation (n - 1 denominator); 0 for a single value.
  double stddev = 0.0;
  std::size_t n = 0;
  bool single_run = false;
};

/// Throws std::invalid_argument for an empty list.
Aggregate aggregate(std::span<const double> values);

/// "mean ± err" with two decimals, e.g. "70.50 ± 0.29".
std::string format_pm(double mean, double err);

} // namespace viny
