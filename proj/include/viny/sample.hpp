// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <variant>
#include <vector>

#include "viny/image.hpp"
#include "viny/objectives.hpp"

namespace viny {

/// One training or evaluation example. Unlabeled samples carry monostate,
/// classification samples a class index, segmentation samples a trimap.
struct Sample {
  Image image;
  std::variant<std::monostate, int, Trimap> label;

  bool unlabeled() const { return std::holds_alternative<std::monostate>(label); }
  bool has_class() const { return std::holds_alternative<int>(label); }
  bool has_trimap() const { return std::holds_alternative<Trimap>(label); }
  int class_id() const { return std::get<int>(label); }
  const Trimap &trimap() const { return std::get<Trimap>(label); }

  bool operator==(const Sample &) const = default;
};

using SampleList = std::vector<Sample>;

} // namespace viny
