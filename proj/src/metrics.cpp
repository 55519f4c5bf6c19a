// SPDX-License-Identifier: Apache-2.0
#include "viny/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "viny/errors.hpp"

namespace viny {

std::uint64_t ConfusionCounts::total() const {
  std::uint64_t n = 0;
  for (const auto &row : counts)
    for (auto v : row)
      n += v;
  return n;
}

ConfusionCounts &ConfusionCounts::merge(const ConfusionCounts &other) {
  for (int t = 0; t < kTrimapClasses; ++t)
    for (int p = 0; p < kTrimapClasses; ++p)
      counts[t][p] += other.counts[t][p];
  return *this;
}

void accumulate(const Trimap &pred, const Trimap &truth, ConfusionCounts &counts) {
  if (pred.height != truth.height || pred.width != truth.width ||
      pred.labels.size() != truth.labels.size())
    throw ShapeError("prediction is " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " but truth is " +
                     std::to_string(truth.height) + "x" + std::to_string(truth.width));
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const int p = pred.labels[i], t = truth.labels[i];
    if (p >= kTrimapClasses || t >= kTrimapClasses)
      throw std::out_of_range("trimap label outside {0, 1, 2}");
    ++counts.counts[t][p];
  }
}

MetricsReport miou(const ConfusionCounts &c, const MetricsOptions &options) {
  MetricsReport r;
  r.n_pixels = c.total();
  if (r.n_pixels == 0)
    throw std::invalid_argument("no pixels to evaluate");
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();

  std::uint64_t correct = 0, counted = 0;
  for (int t = 0; t < kTrimapClasses; ++t) {
    if (!options.accuracy_counts_unknown && t == kUnknown)
      continue;
    for (int p = 0; p < kTrimapClasses; ++p)
      counted += c.counts[t][p];
    correct += c.counts[t][t];
  }
  r.accuracy = counted ? 100.0 * static_cast<double>(correct) / static_cast<double>(counted) : nan;

  double sum = 0.0;
  int used = 0;
  for (int k = 0; k < kTrimapClasses; ++k) {
    std::uint64_t truth_k = 0, pred_k = 0;
    for (int j = 0; j < kTrimapClasses; ++j) {
      truth_k += c.counts[k][j];
      pred_k += c.counts[j][k];
    }
    const std::uint64_t tp = c.counts[k][k];
    const std::uint64_t uni = truth_k + pred_k - tp;
    r.per_class_precision[k] = pred_k ? 100.0 * static_cast<double>(tp) / static_cast<double>(pred_k) : nan;
    r.per_class_recall[k] = truth_k ? 100.0 * static_cast<double>(tp) / static_cast<double>(truth_k) : nan;
    r.included[k] = uni > 0;
    r.per_class_iou[k] = uni ? 100.0 * static_cast<double>(tp) / static_cast<double>(uni) : nan;
    if (uni) {
      sum += r.per_class_iou[k];
      ++used;
    }
  }
  if (used == 0)
    throw std::invalid_argument("no evaluable class");
  r.miou = sum / used;
  return r;
}

Aggregate aggregate(std::span<const double> values) {
  if (values.empty())
    throw std::invalid_argument("aggregate of an empty list");
  Aggregate a;
  a.n = values.size();
  double sum = 0.0;
  for (double v : values)
    sum += v;
  a.mean = sum / static_cast<double>(a.n);
  if (a.n == 1) {
    a.single_run = true;
    return a;
  }
  double ss = 0.0;
  for (double v : values)
    ss += (v - a.mean) * (v - a.mean);
  a.stddev = std::sqrt(ss / static_cast<double>(a.n - 1));
  a.standard_error = a.stddev / std::sqrt(static_cast<double>(a.n));
  return a;
}

std::string format_pm(double mean, double err) { return fmt::format("{:.2f} ± {:.2f}", mean, err); }

} // namespace viny
