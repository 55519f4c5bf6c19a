// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

namespace viny {

/// Per-image patch mask for masked image modeling. mask[i] != 0 hides patch i.
struct MaskPattern {
  std::vector<std::uint8_t> mask;
  double ratio = 0.0;

  int size() const { return static_cast<int>(mask.size()); }
  int count() const {
    int n = 0;
    for (auto m : mask)
      n += m != 0;
    return n;
  }
  bool masked(int i) const { return mask[static_cast<std::size_t>(i)] != 0; }
};

} // namespace viny
